#pragma once

#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace peermarket {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/** Quadratic cost curve C(p) = a*p^2 + b*p + c.
 *
 * Producers carry positive marginal cost; consumers encode willingness to
 * pay with b > 0 evaluated at negative injections, so C is negative where
 * consuming has value. Convexity requires a >= 0.
 */
struct QuadraticCost {
  double a = 0.0;  ///< $/MWh^2 per interval
  double b = 0.0;  ///< $/MWh
  double c = 0.0;  ///< $ constant offset

  bool operator==(const QuadraticCost&) const = default;
};

/// C(p) = a*p^2 + b*p + c. Throws std::invalid_argument for non-finite p.
double evaluate_cost(const QuadraticCost& cost, double p_mw);

/// Net-injection interval in MW. Either side may be infinite.
struct PowerBounds {
  double lower = -kInf;
  double upper = kInf;

  static PowerBounds unbounded() { return {-kInf, kInf}; }
  static PowerBounds fixed(double mw) { return {mw, mw}; }

  bool is_fixed() const { return lower == upper; }
  bool contains(double mw, double tol = 0.0) const {
    return mw >= lower - tol && mw <= upper + tol;
  }

  bool operator==(const PowerBounds&) const = default;
};

enum class PeerRole { producer, consumer, grid };

const char* to_string(PeerRole role);

/** One market participant.
 *
 * Sign convention: positive net injection sells energy, negative buys.
 * Producers are restricted to non-negative trades, consumers to
 * non-positive ones. The grid peer is unbounded on both sides and its
 * linear cost is the exogenous market price, with the grid tariff applied
 * as a fee on the magnitude of its net injection.
 */
struct Peer {
  std::string id;
  PeerRole role = PeerRole::consumer;
  int bus = 0;  ///< label only, no network physics
  std::optional<std::string> community;
  QuadraticCost cost;
  PowerBounds bounds;
  bool must_take = false;  ///< fixed output, zero marginal cost (wind/PV)

  bool operator==(const Peer&) const = default;
};

/** Symmetric trading-partner adjacency.
 *
 * Default construction connects producers and consumers as a complete
 * bipartite graph; the grid peer, when present, trades with every other
 * peer.
 */
class PartnerGraph {
 public:
  PartnerGraph() = default;

  /// Producers <-> consumers complete bipartite; grid <-> everyone.
  static PartnerGraph default_graph(const std::vector<Peer>& peers);

  /// Validates symmetry and absence of self-loops; throws on violation.
  static PartnerGraph from_adjacency(
      std::map<std::string, std::set<std::string>> adjacency);

  const std::set<std::string>& partners_of(const std::string& id) const;
  bool connected(const std::string& a, const std::string& b) const;
  const std::map<std::string, std::set<std::string>>& adjacency() const {
    return adjacency_;
  }
  std::size_t degree(const std::string& id) const;

  bool operator==(const PartnerGraph&) const = default;

 private:
  std::map<std::string, std::set<std::string>> adjacency_;
};

/// One argument of the external-exchange cost: quadratic*x^2 + linear*x.
struct ExternalCostTerm {
  double quadratic = 0.0;
  double linear = 0.0;

  bool operator==(const ExternalCostTerm&) const = default;
};

/** Cost of a community's exchange with the outside world,
 *  G(q_imp, q_exp) = import.quadratic*q_imp^2 + import.linear*q_imp
 *                  + export.quadratic*q_exp^2 + export.linear*q_exp.
 *
 * The default, when unset on a community, links to the grid pricing of the
 * instance: import at price + tariff, export revenue at price - tariff.
 */
struct ExternalCost {
  ExternalCostTerm import_term;
  ExternalCostTerm export_term;

  double evaluate(double import_mw, double export_mw) const {
    return import_term.quadratic * import_mw * import_mw +
           import_term.linear * import_mw +
           export_term.quadratic * export_mw * export_mw +
           export_term.linear * export_mw;
  }

  bool operator==(const ExternalCost&) const = default;
};

struct CommunitySpec {
  std::string id;
  std::vector<std::string> members;
  double internal_fee = 0.0;   ///< $/MWh on |pool trade| of each member
  double import_weight = 0.0;  ///< $/MWh preference weight on import shares
  double export_weight = 0.0;  ///< $/MWh preference weight on export shares
  std::optional<ExternalCost> external_cost;  ///< unset: grid-price default

  bool operator==(const CommunitySpec&) const = default;
};

/// Fees on bilateral trades. Inter-community fees are unordered-pair keyed.
struct TransactionCostSpec {
  double per_trade_fee = 0.0;  ///< $/MWh on |P_nm|, full-P2P design
  std::map<std::pair<std::string, std::string>, double> inter_community_fees;

  /// Fee for the unordered pair {a, b}; 0 when the pair is not listed.
  double inter_community_fee(const std::string& a, const std::string& b) const;
  void set_inter_community_fee(const std::string& a, const std::string& b,
                               double fee);

  bool operator==(const TransactionCostSpec&) const = default;
};

enum class MarketDesign { full_p2p, community, hybrid };

const char* to_string(MarketDesign design);
MarketDesign design_from_string(const std::string& s);

/// Exogenous wholesale price and grid-usage tariff, both $/MWh.
struct GridPricing {
  double price = 0.0;
  double tariff = 0.0;

  double import_price() const { return price + tariff; }
  double export_price() const { return price - tariff; }

  bool operator==(const GridPricing&) const = default;
};

/** Everything needed to clear one interval. Immutable after construction;
 *  safe to share across concurrent workers.
 */
struct MarketInstance {
  std::vector<Peer> peers;
  PartnerGraph partner_graph;
  std::vector<CommunitySpec> communities;
  TransactionCostSpec tx_costs;
  MarketDesign design = MarketDesign::full_p2p;
  GridPricing grid;

  const Peer* find_peer(const std::string& id) const;
  int peer_index(const std::string& id) const;  // -1 when absent
  const Peer* grid_peer() const;
  const CommunitySpec* find_community(const std::string& id) const;

  /// Explicit external cost if set, otherwise the grid-price default.
  ExternalCost external_cost_for(const CommunitySpec& community) const;

  bool operator==(const MarketInstance&) const = default;
};

enum class ValidationCode {
  DuplicatePeerId,
  RoleBoundSignMismatch,
  UnassignedPeerInCommunityDesign,
  InfeasibleAggregateBounds,
  UnknownCommunity,
  UnknownPeer,
  MultipleGridPeers,
  MissingGridPeer,
  MustTakeViolation,
  NonConvexCost,
  InvalidBounds,
  NegativeFee,
  EmptyCommunity,
  OverlappingCommunities,
  InvalidPartnerGraph,
  NonFiniteValue,
};

const char* to_string(ValidationCode code);

struct ValidationError {
  ValidationCode code;
  std::string subject;  ///< offending peer/community/field
  std::string detail;

  std::string message() const;
};

/// Thrown by build_instance when the configuration is invalid. Carries the
/// full structured list of violations, not just the first.
class ValidationFailure : public std::runtime_error {
 public:
  explicit ValidationFailure(std::vector<ValidationError> errors);
  const std::vector<ValidationError>& errors() const { return errors_; }

 private:
  std::vector<ValidationError> errors_;
};

/// Malformed JSON or CSV input.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// All structural violations of a candidate instance; empty means valid.
std::vector<ValidationError> validate(const MarketInstance& candidate);

/// Parse + validate an instance document. Throws ParseError on malformed
/// JSON, ValidationFailure when the content violates the model invariants.
MarketInstance build_instance(const std::string& json_text);
MarketInstance build_instance_from_file(const std::string& path);

std::string to_json(const MarketInstance& instance, int indent = 2);

}  // namespace peermarket
