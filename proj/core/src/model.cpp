#include "peermarket/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace peermarket {

double evaluate_cost(const QuadraticCost& cost, double p_mw) {
  if (!std::isfinite(p_mw)) {
    throw std::invalid_argument("evaluate_cost: non-finite power value");
  }
  return cost.a * p_mw * p_mw + cost.b * p_mw + cost.c;
}

const char* to_string(PeerRole role) {
  switch (role) {
    case PeerRole::producer: return "producer";
    case PeerRole::consumer: return "consumer";
    case PeerRole::grid: return "grid";
  }
  return "?";
}

const char* to_string(MarketDesign design) {
  switch (design) {
    case MarketDesign::full_p2p: return "full_p2p";
    case MarketDesign::community: return "community";
    case MarketDesign::hybrid: return "hybrid";
  }
  return "?";
}

MarketDesign design_from_string(const std::string& s) {
  if (s == "full_p2p") return MarketDesign::full_p2p;
  if (s == "community") return MarketDesign::community;
  if (s == "hybrid") return MarketDesign::hybrid;
  throw ParseError("unknown market design: '" + s + "'");
}

PartnerGraph PartnerGraph::default_graph(const std::vector<Peer>& peers) {
  PartnerGraph g;
  for (const Peer& p : peers) g.adjacency_[p.id];  // every peer gets a row
  for (const Peer& a : peers) {
    for (const Peer& b : peers) {
      if (a.id == b.id) continue;
      const bool bipartite = (a.role == PeerRole::producer &&
                              b.role == PeerRole::consumer) ||
                             (a.role == PeerRole::consumer &&
                              b.role == PeerRole::producer);
      const bool via_grid =
          a.role == PeerRole::grid || b.role == PeerRole::grid;
      if (bipartite || via_grid) {
        g.adjacency_[a.id].insert(b.id);
        g.adjacency_[b.id].insert(a.id);
      }
    }
  }
  return g;
}

PartnerGraph PartnerGraph::from_adjacency(
    std::map<std::string, std::set<std::string>> adjacency) {
  for (const auto& [id, partners] : adjacency) {
    if (partners.count(id)) {
      throw std::invalid_argument("partner graph: self-loop at '" + id + "'");
    }
    for (const std::string& other : partners) {
      auto it = adjacency.find(other);
      if (it == adjacency.end() || !it->second.count(id)) {
        throw std::invalid_argument("partner graph: asymmetric edge " + id +
                                    " -> " + other);
      }
    }
  }
  PartnerGraph g;
  g.adjacency_ = std::move(adjacency);
  return g;
}

const std::set<std::string>& PartnerGraph::partners_of(
    const std::string& id) const {
  static const std::set<std::string> empty;
  auto it = adjacency_.find(id);
  return it == adjacency_.end() ? empty : it->second;
}

bool PartnerGraph::connected(const std::string& a, const std::string& b) const {
  auto it = adjacency_.find(a);
  return it != adjacency_.end() && it->second.count(b) > 0;
}

std::size_t PartnerGraph::degree(const std::string& id) const {
  return partners_of(id).size();
}

double TransactionCostSpec::inter_community_fee(const std::string& a,
                                                const std::string& b) const {
  auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  auto it = inter_community_fees.find(key);
  return it == inter_community_fees.end() ? 0.0 : it->second;
}

void TransactionCostSpec::set_inter_community_fee(const std::string& a,
                                                  const std::string& b,
                                                  double fee) {
  auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  inter_community_fees[key] = fee;
}

const Peer* MarketInstance::find_peer(const std::string& id) const {
  for (const Peer& p : peers)
    if (p.id == id) return &p;
  return nullptr;
}

int MarketInstance::peer_index(const std::string& id) const {
  for (std::size_t i = 0; i < peers.size(); ++i)
    if (peers[i].id == id) return static_cast<int>(i);
  return -1;
}

const Peer* MarketInstance::grid_peer() const {
  for (const Peer& p : peers)
    if (p.role == PeerRole::grid) return &p;
  return nullptr;
}

const CommunitySpec* MarketInstance::find_community(
    const std::string& id) const {
  for (const CommunitySpec& c : communities)
    if (c.id == id) return &c;
  return nullptr;
}

ExternalCost MarketInstance::external_cost_for(
    const CommunitySpec& community) const {
  if (community.external_cost) return *community.external_cost;
  ExternalCost g;
  g.import_term.linear = grid.import_price();
  g.export_term.linear = -grid.export_price();
  return g;
}

const char* to_string(ValidationCode code) {
  switch (code) {
    case ValidationCode::DuplicatePeerId: return "DuplicatePeerId";
    case ValidationCode::RoleBoundSignMismatch: return "RoleBoundSignMismatch";
    case ValidationCode::UnassignedPeerInCommunityDesign:
      return "UnassignedPeerInCommunityDesign";
    case ValidationCode::InfeasibleAggregateBounds:
      return "InfeasibleAggregateBounds";
    case ValidationCode::UnknownCommunity: return "UnknownCommunity";
    case ValidationCode::UnknownPeer: return "UnknownPeer";
    case ValidationCode::MultipleGridPeers: return "MultipleGridPeers";
    case ValidationCode::MissingGridPeer: return "MissingGridPeer";
    case ValidationCode::MustTakeViolation: return "MustTakeViolation";
    case ValidationCode::NonConvexCost: return "NonConvexCost";
    case ValidationCode::InvalidBounds: return "InvalidBounds";
    case ValidationCode::NegativeFee: return "NegativeFee";
    case ValidationCode::EmptyCommunity: return "EmptyCommunity";
    case ValidationCode::OverlappingCommunities:
      return "OverlappingCommunities";
    case ValidationCode::InvalidPartnerGraph: return "InvalidPartnerGraph";
    case ValidationCode::NonFiniteValue: return "NonFiniteValue";
  }
  return "?";
}

std::string ValidationError::message() const {
  std::ostringstream os;
  os << to_string(code) << " [" << subject << "]";
  if (!detail.empty()) os << ": " << detail;
  return os.str();
}

namespace {

std::string join_messages(const std::vector<ValidationError>& errors) {
  std::ostringstream os;
  os << "instance validation failed (" << errors.size() << " violation"
     << (errors.size() == 1 ? "" : "s") << ")";
  for (const auto& e : errors) os << "\n  - " << e.message();
  return os.str();
}

bool finite_or_inf(double v) { return !std::isnan(v); }

}  // namespace

ValidationFailure::ValidationFailure(std::vector<ValidationError> errors)
    : std::runtime_error(join_messages(errors)), errors_(std::move(errors)) {}

std::vector<ValidationError> validate(const MarketInstance& inst) {
  std::vector<ValidationError> errors;
  auto add = [&](ValidationCode code, std::string subject,
                 std::string detail = {}) {
    errors.push_back({code, std::move(subject), std::move(detail)});
  };

  std::set<std::string> ids;
  int grid_count = 0;
  for (const Peer& p : inst.peers) {
    if (!ids.insert(p.id).second)
      add(ValidationCode::DuplicatePeerId, p.id);

    if (std::isnan(p.cost.a) || std::isnan(p.cost.b) || std::isnan(p.cost.c) ||
        std::isinf(p.cost.a) || std::isinf(p.cost.b) || std::isinf(p.cost.c)) {
      add(ValidationCode::NonFiniteValue, p.id, "cost coefficients");
    } else if (p.cost.a < 0.0) {
      add(ValidationCode::NonConvexCost, p.id,
          "quadratic coefficient must be >= 0");
    }

    if (!finite_or_inf(p.bounds.lower) || !finite_or_inf(p.bounds.upper) ||
        p.bounds.lower > p.bounds.upper) {
      add(ValidationCode::InvalidBounds, p.id, "need lower <= upper");
      continue;  // sign checks below would be noise
    }

    switch (p.role) {
      case PeerRole::producer:
        if (p.bounds.lower < 0.0)
          add(ValidationCode::RoleBoundSignMismatch, p.id,
              "producer lower bound must be >= 0");
        break;
      case PeerRole::consumer:
        if (p.bounds.upper > 0.0)
          add(ValidationCode::RoleBoundSignMismatch, p.id,
              "consumer upper bound must be <= 0");
        break;
      case PeerRole::grid:
        ++grid_count;
        if (p.bounds.lower != -kInf || p.bounds.upper != kInf)
          add(ValidationCode::RoleBoundSignMismatch, p.id,
              "grid peer must be unbounded on both sides");
        break;
    }

    if (p.must_take) {
      if (!p.bounds.is_fixed() || !std::isfinite(p.bounds.lower))
        add(ValidationCode::MustTakeViolation, p.id,
            "must-take requires finite lower == upper");
      if (p.cost.a != 0.0 || p.cost.b != 0.0)
        add(ValidationCode::MustTakeViolation, p.id,
            "must-take requires a == b == 0");
    }
  }
  if (grid_count > 1)
    add(ValidationCode::MultipleGridPeers, "instance",
        std::to_string(grid_count) + " grid peers");

  if (inst.grid.tariff < 0.0)
    add(ValidationCode::NegativeFee, "grid.tariff");
  if (inst.tx_costs.per_trade_fee < 0.0)
    add(ValidationCode::NegativeFee, "transaction_costs.per_trade_fee");
  for (const auto& [pair, fee] : inst.tx_costs.inter_community_fees) {
    if (fee < 0.0)
      add(ValidationCode::NegativeFee,
          "inter_community_fees[" + pair.first + "," + pair.second + "]");
  }

  // Community structure: members exist, belong exactly once, ids known.
  std::map<std::string, std::string> member_of;
  for (const CommunitySpec& c : inst.communities) {
    if (c.members.empty()) add(ValidationCode::EmptyCommunity, c.id);
    if (c.internal_fee < 0.0)
      add(ValidationCode::NegativeFee, c.id + ".internal_fee");
    if (c.import_weight < 0.0)
      add(ValidationCode::NegativeFee, c.id + ".import_weight");
    if (c.export_weight < 0.0)
      add(ValidationCode::NegativeFee, c.id + ".export_weight");
    for (const std::string& m : c.members) {
      if (!ids.count(m)) {
        add(ValidationCode::UnknownPeer, c.id, "member '" + m + "' not found");
        continue;
      }
      auto [it, fresh] = member_of.emplace(m, c.id);
      if (!fresh)
        add(ValidationCode::OverlappingCommunities, m,
            "in '" + it->second + "' and '" + c.id + "'");
    }
  }
  for (const Peer& p : inst.peers) {
    if (p.community && !inst.find_community(*p.community))
      add(ValidationCode::UnknownCommunity, p.id,
          "references '" + *p.community + "'");
    if (p.community && inst.find_community(*p.community)) {
      auto it = member_of.find(p.id);
      if (it == member_of.end() || it->second != *p.community)
        add(ValidationCode::OverlappingCommunities, p.id,
            "peer field says '" + *p.community + "', member lists say '" +
                (it == member_of.end() ? std::string("none") : it->second) +
                "'");
    }
    if (p.role == PeerRole::grid && member_of.count(p.id))
      add(ValidationCode::OverlappingCommunities, p.id,
          "grid peer cannot be a community member");
  }

  if (inst.design == MarketDesign::community ||
      inst.design == MarketDesign::hybrid) {
    if (inst.communities.empty())
      add(ValidationCode::EmptyCommunity, "instance",
          "community/hybrid design needs at least one community");
    for (const Peer& p : inst.peers) {
      if (p.role != PeerRole::grid && !member_of.count(p.id))
        add(ValidationCode::UnassignedPeerInCommunityDesign, p.id);
    }
  }
  if (inst.design == MarketDesign::hybrid && grid_count == 0)
    add(ValidationCode::MissingGridPeer, "instance",
        "hybrid design requires a grid peer in the upper level");

  // Balance feasibility: bilateral reciprocity must be able to absorb every
  // net injection, so some aggregate within bounds must sum to zero. Only
  // binding for the full-P2P design; community pools balance through their
  // import/export channel instead.
  if (inst.design == MarketDesign::full_p2p) {
    double sum_lower = 0.0, sum_upper = 0.0;
    for (const Peer& p : inst.peers) {
      sum_lower += p.bounds.lower;
      sum_upper += p.bounds.upper;
    }
    if (!(sum_lower <= 0.0) || !(sum_upper >= 0.0))
      add(ValidationCode::InfeasibleAggregateBounds, "instance",
          "sum of lower bounds must be <= 0 <= sum of upper bounds");

    // A peer forced to trade needs someone to trade with.
    for (const Peer& p : inst.peers) {
      if (p.bounds.lower > 0.0 || p.bounds.upper < 0.0) {
        if (inst.partner_graph.degree(p.id) == 0)
          add(ValidationCode::InfeasibleAggregateBounds, p.id,
              "nonzero injection forced but no trading partners");
      }
    }
  }

  // Partner graph covers instance peers and stays symmetric.
  for (const auto& [id, partners] : inst.partner_graph.adjacency()) {
    if (!ids.count(id)) {
      add(ValidationCode::InvalidPartnerGraph, id, "unknown peer in graph");
      continue;
    }
    if (partners.count(id))
      add(ValidationCode::InvalidPartnerGraph, id, "self-loop");
    for (const std::string& other : partners) {
      if (!ids.count(other))
        add(ValidationCode::InvalidPartnerGraph, id,
            "edge to unknown peer '" + other + "'");
      else if (!inst.partner_graph.connected(other, id))
        add(ValidationCode::InvalidPartnerGraph, id,
            "asymmetric edge to '" + other + "'");
    }
  }

  return errors;
}

}  // namespace peermarket
