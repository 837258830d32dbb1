#include "peermarket/clearing.hpp"

#include <algorithm>
#include <cmath>

#include "clearing_internal.hpp"

namespace peermarket {

double TradeMatrix::trade(const std::string& from,
                          const std::string& to) const {
  const bool canonical = from < to;
  auto key = canonical ? std::make_pair(from, to) : std::make_pair(to, from);
  auto it = pairs_.find(key);
  if (it == pairs_.end()) return 0.0;
  return canonical ? it->second.quantity_mw : -it->second.quantity_mw;
}

double TradeMatrix::price(const std::string& a, const std::string& b) const {
  auto key = a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  auto it = pairs_.find(key);
  return it == pairs_.end() ? 0.0 : it->second.price;
}

void TradeMatrix::set(const std::string& from, const std::string& to,
                      double quantity_mw, double price) {
  if (from < to) {
    pairs_[{from, to}] = {quantity_mw, price};
  } else {
    pairs_[{to, from}] = {-quantity_mw, price};
  }
}

double social_welfare(const ClearingResult& result) {
  if (result.status != qp::SolveStatus::optimal)
    throw NotOptimalError(std::string("social_welfare: result status is ") +
                          qp::to_string(result.status));
  return result.social_welfare;
}

namespace detail {

namespace {

/// Grid peers take their linear cost from the instance-level pricing. The
/// grid tariff is charged per trade with the grid (on each |P_nm|), never
/// on the net injection: peers buying and selling simultaneously must not
/// cancel each other's tariff.
void apply_peer_objective(const MarketInstance& inst, const Peer& peer,
                          int s_var, qp::QpProblem& qp) {
  qp.quad[s_var] = peer.cost.a;
  qp.linear[s_var] =
      peer.role == PeerRole::grid ? inst.grid.price : peer.cost.b;
  qp.constant += peer.cost.c;
  qp.lower[s_var] = peer.bounds.lower;
  qp.upper[s_var] = peer.bounds.upper;
}

void apply_sign_box(const Peer& peer, int var, qp::QpProblem& qp) {
  if (peer.role == PeerRole::producer) {
    qp.lower[var] = 0.0;
  } else if (peer.role == PeerRole::consumer) {
    qp.upper[var] = 0.0;
  }
}

qp::QpProblem make_empty_problem(int num_vars) {
  qp::QpProblem p;
  p.num_vars = num_vars;
  p.quad.assign(num_vars, 0.0);
  p.linear.assign(num_vars, 0.0);
  p.abs_fee.assign(num_vars, 0.0);
  p.lower.assign(num_vars, -kInf);
  p.upper.assign(num_vars, kInf);
  return p;
}

}  // namespace

FullP2pLayout build_full_p2p(const MarketInstance& inst) {
  FullP2pLayout lay;
  const int n_peers = static_cast<int>(inst.peers.size());

  std::vector<std::vector<int>> partner_vars(n_peers);
  int next_var = 0;
  for (int a = 0; a < n_peers; ++a) {
    if (inst.peers[a].role == PeerRole::grid) lay.grid_idx = a;
    for (int b = a + 1; b < n_peers; ++b) {
      if (!inst.partner_graph.connected(inst.peers[a].id, inst.peers[b].id))
        continue;
      DirectedPair pair;
      pair.a = a;
      pair.b = b;
      pair.var_ab = next_var++;
      pair.var_ba = next_var++;
      partner_vars[a].push_back(pair.var_ab);
      partner_vars[b].push_back(pair.var_ba);
      lay.pairs.push_back(pair);
    }
  }
  lay.s_var.resize(n_peers);
  for (int i = 0; i < n_peers; ++i) lay.s_var[i] = next_var++;

  qp::QpProblem qp = make_empty_problem(next_var);

  const double fee = inst.tx_costs.per_trade_fee;
  for (DirectedPair& pair : lay.pairs) {
    const bool with_grid = inst.peers[pair.a].role == PeerRole::grid ||
                           inst.peers[pair.b].role == PeerRole::grid;
    // Once per unordered pair; grid trades additionally pay the tariff.
    qp.abs_fee[pair.var_ab] = fee + (with_grid ? inst.grid.tariff : 0.0);
    apply_sign_box(inst.peers[pair.a], pair.var_ab, qp);
    apply_sign_box(inst.peers[pair.b], pair.var_ba, qp);
    qp::EqualityRow recip;
    recip.cols = {pair.var_ab, pair.var_ba};
    recip.coeffs = {1.0, 1.0};
    pair.recip_row = static_cast<int>(qp.equalities.size());
    qp.equalities.push_back(std::move(recip));
  }
  lay.agg_row.resize(n_peers);
  for (int i = 0; i < n_peers; ++i) {
    apply_peer_objective(inst, inst.peers[i], lay.s_var[i], qp);
    qp::EqualityRow agg;
    for (int v : partner_vars[i]) {
      agg.cols.push_back(v);
      agg.coeffs.push_back(1.0);
    }
    agg.cols.push_back(lay.s_var[i]);
    agg.coeffs.push_back(-1.0);
    lay.agg_row[i] = static_cast<int>(qp.equalities.size());
    qp.equalities.push_back(std::move(agg));
  }

  lay.problem = std::move(qp);
  return lay;
}

namespace {

/// Appends one community's variables and pool constraints to `qp`.
CommunityBlock append_community_block(const MarketInstance& inst,
                                      int community_idx, bool with_external,
                                      qp::QpProblem& qp) {
  const CommunitySpec& spec = inst.communities[community_idx];
  CommunityBlock block;
  block.community_idx = community_idx;
  block.default_external = !spec.external_cost.has_value();

  auto new_var = [&qp]() {
    qp.num_vars += 1;
    qp.quad.push_back(0.0);
    qp.linear.push_back(0.0);
    qp.abs_fee.push_back(0.0);
    qp.lower.push_back(-kInf);
    qp.upper.push_back(kInf);
    return qp.num_vars - 1;
  };

  for (const std::string& member : spec.members) {
    const int peer_idx = inst.peer_index(member);
    const Peer& peer = inst.peers[peer_idx];
    block.member_peer.push_back(peer_idx);

    const int own = new_var();
    const int pool = new_var();
    const int imp = new_var();
    const int exp = new_var();
    block.own_var.push_back(own);
    block.pool_var.push_back(pool);
    block.imp_var.push_back(imp);
    block.exp_var.push_back(exp);

    apply_peer_objective(inst, peer, own, qp);
    qp.abs_fee[pool] = spec.internal_fee;
    qp.linear[imp] = spec.import_weight;
    qp.linear[exp] = spec.export_weight;
    qp.lower[imp] = 0.0;
    qp.lower[exp] = 0.0;

    qp::EqualityRow balance;  // own + pool + import - export = 0
    balance.cols = {own, pool, imp, exp};
    balance.coeffs = {1.0, 1.0, 1.0, -1.0};
    block.balance_row.push_back(static_cast<int>(qp.equalities.size()));
    qp.equalities.push_back(std::move(balance));
  }

  block.qimp_var = new_var();
  block.qexp_var = new_var();
  qp.lower[block.qimp_var] = 0.0;
  qp.lower[block.qexp_var] = 0.0;
  if (with_external) {
    const ExternalCost g = inst.external_cost_for(spec);
    qp.quad[block.qimp_var] = g.import_term.quadratic;
    qp.linear[block.qimp_var] = g.import_term.linear;
    qp.quad[block.qexp_var] = g.export_term.quadratic;
    qp.linear[block.qexp_var] = g.export_term.linear;
  }

  qp::EqualityRow pool_row;  // pool trades clear internally
  qp::EqualityRow imp_row;   // import shares sum to the community import
  qp::EqualityRow exp_row;
  for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
    pool_row.cols.push_back(block.pool_var[k]);
    pool_row.coeffs.push_back(1.0);
    imp_row.cols.push_back(block.imp_var[k]);
    imp_row.coeffs.push_back(1.0);
    exp_row.cols.push_back(block.exp_var[k]);
    exp_row.coeffs.push_back(1.0);
  }
  imp_row.cols.push_back(block.qimp_var);
  imp_row.coeffs.push_back(-1.0);
  exp_row.cols.push_back(block.qexp_var);
  exp_row.coeffs.push_back(-1.0);

  block.pool_row = static_cast<int>(qp.equalities.size());
  qp.equalities.push_back(std::move(pool_row));
  block.imp_row = static_cast<int>(qp.equalities.size());
  qp.equalities.push_back(std::move(imp_row));
  block.exp_row = static_cast<int>(qp.equalities.size());
  qp.equalities.push_back(std::move(exp_row));
  return block;
}

}  // namespace

CommunityLayout build_community(const MarketInstance& inst,
                                int community_idx) {
  CommunityLayout lay;
  lay.problem = make_empty_problem(0);
  lay.block = append_community_block(inst, community_idx,
                                     /*with_external=*/true, lay.problem);
  return lay;
}

HybridLayout build_hybrid(const MarketInstance& inst) {
  HybridLayout lay;
  lay.problem = make_empty_problem(0);
  qp::QpProblem& qp = lay.problem;

  const int n_comm = static_cast<int>(inst.communities.size());
  for (int c = 0; c < n_comm; ++c) {
    lay.blocks.push_back(
        append_community_block(inst, c, /*with_external=*/false, qp));
  }
  for (int i = 0; i < static_cast<int>(inst.peers.size()); ++i)
    if (inst.peers[i].role == PeerRole::grid) lay.grid_idx = i;
  lay.grid_node = n_comm;

  auto new_var = [&qp]() {
    qp.num_vars += 1;
    qp.quad.push_back(0.0);
    qp.linear.push_back(0.0);
    qp.abs_fee.push_back(0.0);
    qp.lower.push_back(-kInf);
    qp.upper.push_back(kInf);
    return qp.num_vars - 1;
  };

  // Complete upper-level graph over community managers plus the grid peer.
  const int n_nodes = n_comm + 1;
  std::vector<std::vector<int>> node_vars(n_nodes);
  for (int a = 0; a < n_nodes; ++a) {
    for (int b = a + 1; b < n_nodes; ++b) {
      DirectedPair pair;
      pair.a = a;
      pair.b = b;
      pair.var_ab = new_var();
      pair.var_ba = new_var();
      node_vars[a].push_back(pair.var_ab);
      node_vars[b].push_back(pair.var_ba);
      if (a < n_comm && b < n_comm) {
        qp.abs_fee[pair.var_ab] = inst.tx_costs.inter_community_fee(
            inst.communities[a].id, inst.communities[b].id);
      } else {
        qp.abs_fee[pair.var_ab] = inst.grid.tariff;  // manager <-> grid
      }
      qp::EqualityRow recip;
      recip.cols = {pair.var_ab, pair.var_ba};
      recip.coeffs = {1.0, 1.0};
      pair.recip_row = static_cast<int>(qp.equalities.size());
      qp.equalities.push_back(std::move(recip));
      lay.upper_pairs.push_back(pair);
    }
  }

  // Managers: net upper-level sales equal community export minus import.
  for (int c = 0; c < n_comm; ++c) {
    qp::EqualityRow coupling;
    for (int v : node_vars[c]) {
      coupling.cols.push_back(v);
      coupling.coeffs.push_back(1.0);
    }
    coupling.cols.push_back(lay.blocks[c].qimp_var);
    coupling.coeffs.push_back(1.0);
    coupling.cols.push_back(lay.blocks[c].qexp_var);
    coupling.coeffs.push_back(-1.0);
    lay.blocks[c].coupling_row = static_cast<int>(qp.equalities.size());
    qp.equalities.push_back(std::move(coupling));
  }

  // Grid peer carries its price and tariff on the aggregate.
  lay.grid_s_var = new_var();
  apply_peer_objective(inst, inst.peers[lay.grid_idx], lay.grid_s_var, qp);
  qp::EqualityRow agg;
  for (int v : node_vars[lay.grid_node]) {
    agg.cols.push_back(v);
    agg.coeffs.push_back(1.0);
  }
  agg.cols.push_back(lay.grid_s_var);
  agg.coeffs.push_back(-1.0);
  lay.grid_agg_row = static_cast<int>(qp.equalities.size());
  qp.equalities.push_back(std::move(agg));

  return lay;
}

// -- extraction --------------------------------------------------------------

namespace {

void finish_result(ClearingResult& result, const qp::QpSolution& sol) {
  result.status = sol.status;
  result.objective_value = sol.objective_value;
  result.social_welfare = -sol.objective_value;
  result.kkt_residuals = sol.kkt_residuals;
  result.iterations = sol.iterations;
}

// The grid's tariff share is accounted where the trades are known; here only
// the wholesale-price part of its cost enters.
void add_peer_welfare(const MarketInstance& inst, const Peer& peer, double s,
                      WelfareBreakdown& w) {
  switch (peer.role) {
    case PeerRole::producer:
      w.generation_cost += evaluate_cost(peer.cost, s);
      break;
    case PeerRole::consumer:
      w.consumer_utility -= evaluate_cost(peer.cost, s);
      break;
    case PeerRole::grid:
      w.grid_exchange_cost += inst.grid.price * s + peer.cost.c;
      break;
  }
}

}  // namespace

ClearingResult extract_full_p2p(const MarketInstance& inst,
                                const FullP2pLayout& lay,
                                const qp::QpSolution& sol) {
  ClearingResult result;
  result.design = MarketDesign::full_p2p;
  finish_result(result, sol);

  for (const DirectedPair& pair : lay.pairs) {
    const double t = 0.5 * (sol.x[pair.var_ab] - sol.x[pair.var_ba]);
    result.trades.set(inst.peers[pair.a].id, inst.peers[pair.b].id, t,
                      sol.duals[pair.recip_row]);
    result.transaction_cost_total += inst.tx_costs.per_trade_fee * std::abs(t);
    const bool with_grid = inst.peers[pair.a].role == PeerRole::grid ||
                           inst.peers[pair.b].role == PeerRole::grid;
    if (with_grid)
      result.welfare.grid_exchange_cost += inst.grid.tariff * std::abs(t);
  }
  for (std::size_t i = 0; i < inst.peers.size(); ++i) {
    const double s = sol.x[lay.s_var[i]];
    result.net_injection_mw[inst.peers[i].id] = s;
    add_peer_welfare(inst, inst.peers[i], s, result.welfare);
  }
  result.welfare.transaction_costs = result.transaction_cost_total;
  return result;
}

CommunityDecision extract_block_decision(const MarketInstance& inst,
                                         const CommunityBlock& block,
                                         const std::vector<double>& x) {
  CommunityDecision decision;
  decision.community_id = inst.communities[block.community_idx].id;
  for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
    MemberDecision m;
    m.own_mw = x[block.own_var[k]];
    m.pool_mw = x[block.pool_var[k]];
    m.import_mw = x[block.imp_var[k]];
    m.export_mw = x[block.exp_var[k]];
    decision.members[inst.peers[block.member_peer[k]].id] = m;
  }
  decision.import_total_mw = x[block.qimp_var];
  decision.export_total_mw = x[block.qexp_var];
  return decision;
}

namespace {

/// Fees and member welfare shared by the community and hybrid extractors.
void accumulate_block(const MarketInstance& inst, const CommunityBlock& block,
                      const std::vector<double>& x, ClearingResult& result) {
  const CommunitySpec& spec = inst.communities[block.community_idx];
  for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
    const Peer& peer = inst.peers[block.member_peer[k]];
    const double own = x[block.own_var[k]];
    result.net_injection_mw[peer.id] = own;
    add_peer_welfare(inst, peer, own, result.welfare);
    result.welfare.transaction_costs +=
        spec.internal_fee * std::abs(x[block.pool_var[k]]) +
        spec.import_weight * x[block.imp_var[k]] +
        spec.export_weight * x[block.exp_var[k]];
  }
  result.community_decisions.push_back(
      extract_block_decision(inst, block, x));
}

}  // namespace

ClearingResult extract_community(const MarketInstance& inst,
                                 const CommunityLayout& lay,
                                 const qp::QpSolution& sol) {
  ClearingResult result;
  result.design = MarketDesign::community;
  finish_result(result, sol);
  accumulate_block(inst, lay.block, sol.x, result);

  const CommunitySpec& spec = inst.communities[lay.block.community_idx];
  result.welfare.grid_exchange_cost += inst.external_cost_for(spec).evaluate(
      sol.x[lay.block.qimp_var], sol.x[lay.block.qexp_var]);
  result.transaction_cost_total = result.welfare.transaction_costs;
  return result;
}

ClearingResult extract_hybrid(const MarketInstance& inst,
                              const HybridLayout& lay,
                              const qp::QpSolution& sol) {
  ClearingResult result;
  result.design = MarketDesign::hybrid;
  finish_result(result, sol);

  for (const CommunityBlock& block : lay.blocks)
    accumulate_block(inst, block, sol.x, result);

  auto node_id = [&](int node) {
    return node == lay.grid_node ? inst.peers[lay.grid_idx].id
                                 : inst.communities[node].id;
  };
  for (const DirectedPair& pair : lay.upper_pairs) {
    const double t = 0.5 * (sol.x[pair.var_ab] - sol.x[pair.var_ba]);
    result.trades.set(node_id(pair.a), node_id(pair.b), t,
                      sol.duals[pair.recip_row]);
    if (pair.a < lay.grid_node && pair.b < lay.grid_node) {
      result.welfare.transaction_costs +=
          inst.tx_costs.inter_community_fee(inst.communities[pair.a].id,
                                            inst.communities[pair.b].id) *
          std::abs(t);
    } else {
      result.welfare.grid_exchange_cost += inst.grid.tariff * std::abs(t);
    }
  }
  const double s_grid = sol.x[lay.grid_s_var];
  result.net_injection_mw[inst.peers[lay.grid_idx].id] = s_grid;
  add_peer_welfare(inst, inst.peers[lay.grid_idx], s_grid, result.welfare);
  result.transaction_cost_total = result.welfare.transaction_costs;
  return result;
}

}  // namespace detail

namespace {

void require_valid(MarketInstance instance, MarketDesign as_design) {
  instance.design = as_design;
  auto errors = validate(instance);
  if (!errors.empty()) throw ValidationFailure(std::move(errors));
}

// A per-community clearing works on a slice of the instance: it needs the
// structural invariants but not the "every peer assigned" rule that binds
// whole community-design instances.
void require_valid_community_op(MarketInstance instance) {
  instance.design = MarketDesign::community;
  auto errors = validate(instance);
  std::erase_if(errors, [](const ValidationError& e) {
    return e.code == ValidationCode::UnassignedPeerInCommunityDesign;
  });
  if (!errors.empty()) throw ValidationFailure(std::move(errors));
}

qp::QpSolution solve_or_throw(const qp::QpProblem& problem,
                              const qp::SolveOptions& opts,
                              const char* what) {
  qp::QpSolution sol = qp::solve(problem, opts);
  if (sol.status == qp::SolveStatus::infeasible) {
    throw InfeasibleError(std::string(what) +
                          ": no feasible dispatch (primal gap " +
                          std::to_string(sol.kkt_residuals.primal_eq) + ")");
  }
  return sol;
}

}  // namespace

ClearingResult clear_full_p2p(const MarketInstance& instance,
                              const qp::SolveOptions& opts) {
  require_valid(instance, MarketDesign::full_p2p);
  detail::FullP2pLayout lay = detail::build_full_p2p(instance);
  qp::QpSolution sol = solve_or_throw(lay.problem, opts, "clear_full_p2p");
  return detail::extract_full_p2p(instance, lay, sol);
}

ClearingResult clear_community(const MarketInstance& instance,
                               const CommunitySpec& community,
                               const qp::SolveOptions& opts) {
  require_valid_community_op(instance);
  int idx = -1;
  for (std::size_t c = 0; c < instance.communities.size(); ++c)
    if (instance.communities[c].id == community.id) idx = static_cast<int>(c);
  if (idx < 0)
    throw ValidationFailure({{ValidationCode::UnknownCommunity, community.id,
                              "not part of the instance"}});
  detail::CommunityLayout lay = detail::build_community(instance, idx);
  qp::QpSolution sol = solve_or_throw(lay.problem, opts, "clear_community");
  return detail::extract_community(instance, lay, sol);
}

ClearingResult clear_hybrid(const MarketInstance& instance,
                            const qp::SolveOptions& opts) {
  require_valid(instance, MarketDesign::hybrid);
  detail::HybridLayout lay = detail::build_hybrid(instance);
  qp::QpSolution sol = solve_or_throw(lay.problem, opts, "clear_hybrid");
  return detail::extract_hybrid(instance, lay, sol);
}

ClearingResult clear(const MarketInstance& instance,
                     const qp::SolveOptions& opts) {
  switch (instance.design) {
    case MarketDesign::full_p2p:
      return clear_full_p2p(instance, opts);
    case MarketDesign::hybrid:
      return clear_hybrid(instance, opts);
    case MarketDesign::community:
      break;
  }

  // Community design: each community clears against the grid on its own;
  // totals are summed across communities.
  require_valid(instance, MarketDesign::community);
  ClearingResult merged;
  merged.design = MarketDesign::community;
  merged.status = qp::SolveStatus::optimal;
  double grid_net = 0.0;
  int n_solved = 0;
  for (std::size_t c = 0; c < instance.communities.size(); ++c) {
    detail::CommunityLayout lay =
        detail::build_community(instance, static_cast<int>(c));
    qp::QpSolution sol = solve_or_throw(lay.problem, opts, "clear_community");
    ClearingResult part = detail::extract_community(instance, lay, sol);
    ++n_solved;

    merged.objective_value += part.objective_value;
    merged.transaction_cost_total += part.transaction_cost_total;
    merged.welfare.generation_cost += part.welfare.generation_cost;
    merged.welfare.consumer_utility += part.welfare.consumer_utility;
    merged.welfare.transaction_costs += part.welfare.transaction_costs;
    merged.welfare.grid_exchange_cost += part.welfare.grid_exchange_cost;
    merged.community_decisions.push_back(
        std::move(part.community_decisions.front()));
    merged.net_injection_mw.merge(part.net_injection_mw);
    merged.kkt_residuals.primal_eq = std::max(
        merged.kkt_residuals.primal_eq, part.kkt_residuals.primal_eq);
    merged.kkt_residuals.stationarity = std::max(
        merged.kkt_residuals.stationarity, part.kkt_residuals.stationarity);
    merged.kkt_residuals.complementarity =
        std::max(merged.kkt_residuals.complementarity,
                 part.kkt_residuals.complementarity);
    merged.iterations = std::max(merged.iterations, part.iterations);
    if (part.status != qp::SolveStatus::optimal) merged.status = part.status;

    const CommunityDecision& d = merged.community_decisions.back();
    grid_net += d.import_total_mw - d.export_total_mw;
  }
  merged.social_welfare = -merged.objective_value;
  if (const Peer* g = instance.grid_peer(); g && n_solved > 0)
    merged.net_injection_mw[g->id] = grid_net;
  return merged;
}

}  // namespace peermarket
