#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "peermarket/clearing.hpp"
#include "peermarket/model.hpp"

namespace peermarket {

class InvalidConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NegotiationConfig {
  double rho = 1.0;          ///< consensus penalty, > 0
  double tol_primal = 1e-5;  ///< MW, max reciprocity/pool imbalance
  double tol_dual = 1e-5;    ///< $/MWh scale, consensus drift
  int max_rounds = 10000;
  enum class SyncMode { synchronous } sync_mode = SyncMode::synchronous;
  bool adaptive_rho = true;  ///< residual balancing (x2 / /2 at ratio 10)
};

/** Per-round record of a negotiation. Only quantities, prices, residuals,
 *  and message counts are recorded; cost-curve parameters never leave the
 *  owning peer.
 */
struct NegotiationTrace {
  struct Round {
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    double objective_estimate = 0.0;
    std::vector<int> sent;      ///< per peer, aligned with peer_ids
    std::vector<int> received;
    int messages() const;
  };

  std::vector<std::string> peer_ids;
  std::vector<Round> rounds;
  bool converged = false;

  /// Columns: round, primal_residual, dual_residual, objective, messages.
  void write_csv(std::ostream& os) const;
};

/** Decentralized full-P2P clearing.
 *
 * Each peer iterates on its own bilateral trades only: a local subproblem
 * over (trades, net injection) with its private cost and bounds plus a
 * quadratic penalty toward the pair consensus z_nm = (P_nm - P_mn)/2;
 * trade prices are updated from the reciprocity imbalance of each pair.
 * The returned trades are symmetrized so reciprocity holds exactly.
 *
 * Converged results report status optimal and carry certified KKT
 * residuals against the centralized formulation. On round exhaustion the
 * best iterate is returned with status max_iter.
 */
std::pair<ClearingResult, NegotiationTrace> negotiate_full_p2p(
    const MarketInstance& instance, const NegotiationConfig& cfg = {});

/** Distributed community clearing: members solve local
 *  (own, pool, import, export) subproblems; the community manager enforces
 *  the pool balance by averaging and aggregates import/export shares.
 *  Convergence contract identical to negotiate_full_p2p, except that
 *  kkt_residuals carry the negotiation's own primal/dual residuals.
 */
std::pair<ClearingResult, NegotiationTrace> negotiate_community(
    const MarketInstance& instance, const CommunitySpec& community,
    const NegotiationConfig& cfg = {});

}  // namespace peermarket
