#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "peermarket/model.hpp"
#include "peermarket/qp.hpp"

namespace peermarket {

/** Bilateral trade quantities and prices.
 *
 * Each unordered pair is stored once under its lexicographically smaller
 * endpoint; the opposite direction is derived on read, so reciprocity
 * P_nm + P_mn = 0 holds exactly by construction. Prices are symmetric.
 */
class TradeMatrix {
 public:
  struct Entry {
    double quantity_mw = 0.0;  ///< flow as seen from the pair's first peer
    double price = 0.0;        ///< $/MWh, dual of the reciprocity constraint
  };

  /// Trade of `from` with `to` (positive: `from` sells). Zero when unpaired.
  double trade(const std::string& from, const std::string& to) const;
  double price(const std::string& a, const std::string& b) const;
  void set(const std::string& from, const std::string& to, double quantity_mw,
           double price);

  const std::map<std::pair<std::string, std::string>, Entry>& pairs() const {
    return pairs_;
  }
  bool empty() const { return pairs_.empty(); }

 private:
  std::map<std::pair<std::string, std::string>, Entry> pairs_;
};

/// One member's decision inside a community clearing.
struct MemberDecision {
  double own_mw = 0.0;      ///< production (+) or consumption (-)
  double pool_mw = 0.0;     ///< internal pool trade, positive buys
  double import_mw = 0.0;   ///< share of community import, >= 0
  double export_mw = 0.0;   ///< share of community export, >= 0
};

struct CommunityDecision {
  std::string community_id;
  std::map<std::string, MemberDecision> members;
  double import_total_mw = 0.0;
  double export_total_mw = 0.0;
};

/// Social welfare split into its accounting components:
/// welfare = consumer_utility - generation_cost - transaction_costs
///         - grid_exchange_cost.
struct WelfareBreakdown {
  double generation_cost = 0.0;
  double consumer_utility = 0.0;
  double transaction_costs = 0.0;
  double grid_exchange_cost = 0.0;
  bool includes_import_export_weights = true;

  double total() const {
    return consumer_utility - generation_cost - transaction_costs -
           grid_exchange_cost;
  }
};

struct ClearingResult {
  MarketDesign design = MarketDesign::full_p2p;
  qp::SolveStatus status = qp::SolveStatus::max_iter;
  TradeMatrix trades;  ///< full P2P; upper level for hybrid
  std::vector<CommunityDecision> community_decisions;
  double objective_value = 0.0;
  double social_welfare = 0.0;  ///< always exactly -objective_value
  double transaction_cost_total = 0.0;
  qp::KktResiduals kkt_residuals;
  std::map<std::string, double> net_injection_mw;  ///< per peer
  WelfareBreakdown welfare;
  int iterations = 0;
};

/// Clearing found no feasible dispatch (e.g. must-take surplus that no
/// consumer or grid connection can absorb).
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NotOptimalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Multi-bilateral clearing: minimizes total cost over bilateral trades
/// subject to reciprocity, per-peer bounds, and role sign constraints.
ClearingResult clear_full_p2p(const MarketInstance& instance,
                              const qp::SolveOptions& opts = {});

/// Pool clearing of a single community against its external cost function.
ClearingResult clear_community(const MarketInstance& instance,
                               const CommunitySpec& community,
                               const qp::SolveOptions& opts = {});

/// Joint two-level clearing: community pools at the bottom, a P2P market
/// among community managers and the grid peer on top.
ClearingResult clear_hybrid(const MarketInstance& instance,
                            const qp::SolveOptions& opts = {});

/// Dispatch on instance.design. The community design clears every community
/// against the grid separately and merges the results.
ClearingResult clear(const MarketInstance& instance,
                     const qp::SolveOptions& opts = {});

/// -objective_value of an optimal result. Throws NotOptimalError otherwise.
double social_welfare(const ClearingResult& result);

std::string to_json(const ClearingResult& result, int indent = 2);

}  // namespace peermarket
