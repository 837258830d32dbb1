#include "peermarket/negotiation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "clearing_internal.hpp"

namespace peermarket {

namespace {

void check_config(const NegotiationConfig& cfg) {
  if (!(cfg.rho > 0.0))
    throw InvalidConfigError("negotiation: rho must be > 0");
  if (!(cfg.tol_primal > 0.0) || !(cfg.tol_dual > 0.0))
    throw InvalidConfigError("negotiation: tolerances must be > 0");
  if (cfg.max_rounds <= 0)
    throw InvalidConfigError("negotiation: max_rounds must be > 0");
}

void require_valid_as(MarketInstance instance, MarketDesign design) {
  instance.design = design;
  auto errors = validate(instance);
  if (design == MarketDesign::community) {
    // Per-community negotiation may run on a slice of a larger instance.
    std::erase_if(errors, [](const ValidationError& e) {
      return e.code == ValidationCode::UnassignedPeerInCommunityDesign;
    });
  }
  if (!errors.empty()) throw ValidationFailure(std::move(errors));
}

qp::SolveOptions local_solver_options() {
  qp::SolveOptions opts;
  opts.tol = 1e-9;
  opts.max_iter = 50000;
  opts.polish = qp::SolveOptions::Polish::on_demand;
  return opts;
}

// Grid tariff is charged per trade, not here on the net injection.
double peer_cost_at(const MarketInstance& inst, const Peer& peer, double s) {
  if (peer.role == PeerRole::grid) return inst.grid.price * s + peer.cost.c;
  return evaluate_cost(peer.cost, s);
}

/// Half-open interval pair used to pick consistent aggregation duals.
struct Interval {
  double lo = -kInf;
  double hi = kInf;
};

double pick_from_intervals(const std::vector<Interval>& intervals) {
  double max_lo = -kInf, min_hi = kInf;
  for (const Interval& iv : intervals) {
    max_lo = std::max(max_lo, iv.lo);
    min_hi = std::min(min_hi, iv.hi);
  }
  if (max_lo == -kInf && min_hi == kInf) return 0.0;
  if (max_lo == -kInf) return min_hi;
  if (min_hi == kInf) return max_lo;
  return 0.5 * (max_lo + min_hi);
}

}  // namespace

int NegotiationTrace::Round::messages() const {
  return std::accumulate(sent.begin(), sent.end(), 0) +
         std::accumulate(received.begin(), received.end(), 0);
}

void NegotiationTrace::write_csv(std::ostream& os) const {
  os << "round,primal_residual,dual_residual,objective,messages\n";
  os.precision(17);
  for (std::size_t r = 0; r < rounds.size(); ++r) {
    const Round& round = rounds[r];
    os << r + 1 << ',' << round.primal_residual << ',' << round.dual_residual
       << ',' << round.objective_estimate << ',' << round.messages() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Full P2P negotiation
// ---------------------------------------------------------------------------

namespace {

struct TradeAgent {
  int peer_idx = -1;
  std::vector<int> pair_idx;    // into the pair list
  std::vector<bool> is_first;   // this peer is pair.a
  std::unique_ptr<qp::StructuredSolver> solver;  // vars: trades..., then s
};

}  // namespace

std::pair<ClearingResult, NegotiationTrace> negotiate_full_p2p(
    const MarketInstance& inst, const NegotiationConfig& cfg) {
  check_config(cfg);
  require_valid_as(inst, MarketDesign::full_p2p);

  const detail::FullP2pLayout layout = detail::build_full_p2p(inst);
  const auto& pairs = layout.pairs;
  const int n_pairs = static_cast<int>(pairs.size());
  const int n_peers = static_cast<int>(inst.peers.size());
  // Per-pair fee magnitude, as compiled for the centralized problem (the
  // plain trade fee, plus the grid tariff on grid pairs).
  std::vector<double> pair_fee(n_pairs, 0.0);
  for (int p = 0; p < n_pairs; ++p)
    pair_fee[p] = layout.problem.abs_fee[pairs[p].var_ab];

  // Pair state: offers from both endpoints, consensus, and price.
  std::vector<double> offer_a(n_pairs, 0.0), offer_b(n_pairs, 0.0);
  std::vector<double> consensus(n_pairs, 0.0);  // from pair.a's perspective
  std::vector<double> price(n_pairs, 0.0);
  double rho = cfg.rho;

  std::vector<TradeAgent> agents(n_peers);
  for (int i = 0; i < n_peers; ++i) agents[i].peer_idx = i;
  for (int p = 0; p < n_pairs; ++p) {
    agents[pairs[p].a].pair_idx.push_back(p);
    agents[pairs[p].a].is_first.push_back(true);
    agents[pairs[p].b].pair_idx.push_back(p);
    agents[pairs[p].b].is_first.push_back(false);
  }

  // Local subproblem per peer: its trades plus its net injection, coupled
  // only through the consensus penalty. Each side carries half the trade
  // fee so the pair pays it once.
  for (TradeAgent& agent : agents) {
    const Peer& peer = inst.peers[agent.peer_idx];
    const int k = static_cast<int>(agent.pair_idx.size());
    qp::QpProblem local;
    local.num_vars = k + 1;
    local.quad.assign(k + 1, 0.0);
    local.linear.assign(k + 1, 0.0);
    local.abs_fee.assign(k + 1, 0.0);
    local.lower.assign(k + 1, -kInf);
    local.upper.assign(k + 1, kInf);
    for (int j = 0; j < k; ++j) {
      local.quad[j] = 0.5 * rho;
      local.abs_fee[j] = 0.5 * pair_fee[agent.pair_idx[j]];  // half per side
      if (peer.role == PeerRole::producer) local.lower[j] = 0.0;
      if (peer.role == PeerRole::consumer) local.upper[j] = 0.0;
    }
    local.quad[k] = peer.cost.a;
    local.linear[k] =
        peer.role == PeerRole::grid ? inst.grid.price : peer.cost.b;
    local.lower[k] = peer.bounds.lower;
    local.upper[k] = peer.bounds.upper;
    qp::EqualityRow agg;
    for (int j = 0; j < k; ++j) {
      agg.cols.push_back(j);
      agg.coeffs.push_back(1.0);
    }
    agg.cols.push_back(k);
    agg.coeffs.push_back(-1.0);
    local.equalities.push_back(std::move(agg));
    agent.solver = std::make_unique<qp::StructuredSolver>(
        std::move(local), local_solver_options());
  }

  NegotiationTrace trace;
  for (const Peer& p : inst.peers) trace.peer_ids.push_back(p.id);

  auto objective_at_consensus = [&]() {
    double obj = 0.0;
    std::vector<double> s(n_peers, 0.0);
    for (int p = 0; p < n_pairs; ++p) {
      s[pairs[p].a] += consensus[p];
      s[pairs[p].b] -= consensus[p];
      obj += pair_fee[p] * std::abs(consensus[p]);
    }
    for (int i = 0; i < n_peers; ++i)
      obj += peer_cost_at(inst, inst.peers[i], s[i]);
    return obj;
  };

  double primal = 0.0, dual = 0.0;
  bool converged = n_pairs == 0;
  int round = 0;
  while (round < cfg.max_rounds && !converged) {
    ++round;
    // Local trade proposals against the current consensus and prices.
    for (TradeAgent& agent : agents) {
      const int k = static_cast<int>(agent.pair_idx.size());
      for (int j = 0; j < k; ++j) {
        const int p = agent.pair_idx[j];
        const double z = agent.is_first[j] ? consensus[p] : -consensus[p];
        agent.solver->set_linear(j, -price[p] - rho * z);
      }
      if (k == 0) continue;
      qp::QpSolution sol = agent.solver->solve();
      for (int j = 0; j < k; ++j) {
        const int p = agent.pair_idx[j];
        (agent.is_first[j] ? offer_a[p] : offer_b[p]) = sol.x[j];
      }
    }

    // Consensus and price refresh per pair.
    primal = 0.0;
    dual = 0.0;
    for (int p = 0; p < n_pairs; ++p) {
      const double imbalance = offer_a[p] + offer_b[p];
      const double z_new = 0.5 * (offer_a[p] - offer_b[p]);
      primal = std::max(primal, std::abs(imbalance));
      dual = std::max(dual, rho * std::abs(z_new - consensus[p]));
      consensus[p] = z_new;
      price[p] -= 0.5 * rho * imbalance;
    }

    NegotiationTrace::Round rec;
    rec.primal_residual = primal;
    rec.dual_residual = dual;
    rec.objective_estimate = objective_at_consensus();
    rec.sent.resize(n_peers);
    rec.received.resize(n_peers);
    for (int i = 0; i < n_peers; ++i) {
      rec.sent[i] = static_cast<int>(agents[i].pair_idx.size());
      rec.received[i] = rec.sent[i];
    }
    trace.rounds.push_back(std::move(rec));

    if (primal <= cfg.tol_primal && dual <= cfg.tol_dual) {
      converged = true;
      break;
    }

    if (cfg.adaptive_rho) {
      double rho_new = rho;
      if (primal > 10.0 * dual && rho < 1e6) rho_new = rho * 2.0;
      else if (dual > 10.0 * primal && rho > 1e-6) rho_new = rho * 0.5;
      if (rho_new != rho) {
        rho = rho_new;
        for (TradeAgent& agent : agents)
          for (std::size_t j = 0; j < agent.pair_idx.size(); ++j)
            agent.solver->set_quad(static_cast<int>(j), 0.5 * rho);
      }
    }
  }
  trace.converged = converged;

  // Publish the symmetrized trades; reciprocity is exact by construction.
  ClearingResult result;
  result.design = MarketDesign::full_p2p;
  result.status =
      converged ? qp::SolveStatus::optimal : qp::SolveStatus::max_iter;
  result.iterations = round;

  std::vector<double> x(layout.problem.num_vars, 0.0);
  std::vector<double> duals(layout.problem.equalities.size(), 0.0);
  std::vector<double> net(n_peers, 0.0);
  for (int p = 0; p < n_pairs; ++p) {
    x[pairs[p].var_ab] = consensus[p];
    x[pairs[p].var_ba] = -consensus[p];
    net[pairs[p].a] += consensus[p];
    net[pairs[p].b] -= consensus[p];
    duals[pairs[p].recip_row] = price[p];
    result.trades.set(inst.peers[pairs[p].a].id, inst.peers[pairs[p].b].id,
                      consensus[p], price[p]);
    result.transaction_cost_total +=
        inst.tx_costs.per_trade_fee * std::abs(consensus[p]);
    const bool with_grid =
        inst.peers[pairs[p].a].role == PeerRole::grid ||
        inst.peers[pairs[p].b].role == PeerRole::grid;
    if (with_grid)
      result.welfare.grid_exchange_cost +=
          inst.grid.tariff * std::abs(consensus[p]);
  }
  double objective = result.transaction_cost_total;
  for (int i = 0; i < n_peers; ++i) {
    x[layout.s_var[i]] = net[i];
    result.net_injection_mw[inst.peers[i].id] = net[i];
    objective += peer_cost_at(inst, inst.peers[i], net[i]);
  }
  result.objective_value = objective;
  result.social_welfare = -objective;

  // Aggregation-row duals admit a per-peer reconciliation: every optimality
  // condition of the peer confines the dual to an interval.
  for (int i = 0; i < n_peers; ++i) {
    const Peer& peer = inst.peers[i];
    std::vector<Interval> intervals;
    const double s = net[i];
    {
      const double marginal = peer.role == PeerRole::grid
                                  ? inst.grid.price
                                  : 2.0 * peer.cost.a * s + peer.cost.b;
      Interval iv = {-marginal, -marginal};
      const PowerBounds& bounds = peer.bounds;
      const bool at_lo = std::isfinite(bounds.lower) &&
                         s - bounds.lower <= 1e-7 * (1.0 + std::abs(s));
      const bool at_hi = std::isfinite(bounds.upper) &&
                         bounds.upper - s <= 1e-7 * (1.0 + std::abs(s));
      if (at_lo) iv.hi = kInf;
      if (at_hi) iv.lo = -kInf;
      intervals.push_back(iv);
    }
    for (int p = 0; p < n_pairs; ++p) {
      const bool first = pairs[p].a == i;
      if (!first && pairs[p].b != i) continue;
      const double traded = first ? consensus[p] : -consensus[p];
      const double pi = price[p];
      const double w = first ? pair_fee[p] : 0.0;
      const double eps = 1e-9 * (1.0 + std::abs(traded));
      Interval iv;
      if (traded > eps) iv = {w - pi, w - pi};
      else if (traded < -eps) iv = {-w - pi, -w - pi};
      else iv = {-w - pi, w - pi};
      if (peer.role == PeerRole::producer && traded <= eps) iv.lo = -kInf;
      if (peer.role == PeerRole::consumer && traded >= -eps) iv.hi = kInf;
      intervals.push_back(iv);
    }
    duals[layout.agg_row[i]] = pick_from_intervals(intervals);
  }
  result.kkt_residuals = qp::check_kkt(layout.problem, x, duals);

  for (int i = 0; i < n_peers; ++i) {
    const Peer& peer = inst.peers[i];
    switch (peer.role) {
      case PeerRole::producer:
        result.welfare.generation_cost += evaluate_cost(peer.cost, net[i]);
        break;
      case PeerRole::consumer:
        result.welfare.consumer_utility -= evaluate_cost(peer.cost, net[i]);
        break;
      case PeerRole::grid:
        result.welfare.grid_exchange_cost += peer_cost_at(inst, peer, net[i]);
        break;
    }
  }
  result.welfare.transaction_costs = result.transaction_cost_total;

  return {std::move(result), std::move(trace)};
}

// ---------------------------------------------------------------------------
// Community negotiation
// ---------------------------------------------------------------------------

namespace {

struct MemberAgent {
  int peer_idx = -1;
  std::unique_ptr<qp::StructuredSolver> solver;  // vars: own, pool, imp, exp
  double own = 0.0, pool = 0.0, imp = 0.0, exp = 0.0;
};

}  // namespace

std::pair<ClearingResult, NegotiationTrace> negotiate_community(
    const MarketInstance& inst, const CommunitySpec& community,
    const NegotiationConfig& cfg) {
  check_config(cfg);
  require_valid_as(inst, MarketDesign::community);
  const CommunitySpec* spec = inst.find_community(community.id);
  if (!spec)
    throw ValidationFailure({{ValidationCode::UnknownCommunity, community.id,
                              "not part of the instance"}});

  const ExternalCost g = inst.external_cost_for(*spec);
  if (g.import_term.quadratic != 0.0 || g.export_term.quadratic != 0.0)
    throw InvalidConfigError(
        "negotiate_community: distributed solution supports linear external "
        "cost only; use clear_community for quadratic G");

  const int n_members = static_cast<int>(spec->members.size());
  std::vector<MemberAgent> agents(n_members);
  double rho = cfg.rho;

  // With a linear external cost the import/export prices pass straight
  // through to the members; only the pool balance needs consensus.
  for (int k = 0; k < n_members; ++k) {
    MemberAgent& agent = agents[k];
    agent.peer_idx = inst.peer_index(spec->members[k]);
    const Peer& peer = inst.peers[agent.peer_idx];
    qp::QpProblem local;
    local.num_vars = 4;  // own, pool, import, export
    local.quad = {peer.cost.a, 0.5 * rho, 0.0, 0.0};
    local.linear = {peer.cost.b, 0.0,
                    spec->import_weight + g.import_term.linear,
                    spec->export_weight + g.export_term.linear};
    local.abs_fee = {0.0, spec->internal_fee, 0.0, 0.0};
    local.lower = {peer.bounds.lower, -kInf, 0.0, 0.0};
    local.upper = {peer.bounds.upper, kInf, kInf, kInf};
    qp::EqualityRow balance;
    balance.cols = {0, 1, 2, 3};
    balance.coeffs = {1.0, 1.0, 1.0, -1.0};
    local.equalities.push_back(std::move(balance));
    agent.solver = std::make_unique<qp::StructuredSolver>(
        std::move(local), local_solver_options());
  }

  NegotiationTrace trace;
  for (int k = 0; k < n_members; ++k)
    trace.peer_ids.push_back(spec->members[k]);

  std::vector<double> pool_target(n_members, 0.0);  // manager copies z_q
  double pool_dual = 0.0;                           // shared scaled dual u_q

  auto objective_at = [&](const std::vector<double>& pool_pub) {
    double obj = 0.0;
    double qimp = 0.0, qexp = 0.0;
    for (int k = 0; k < n_members; ++k) {
      const Peer& peer = inst.peers[agents[k].peer_idx];
      obj += evaluate_cost(peer.cost, agents[k].own) +
             spec->internal_fee * std::abs(pool_pub[k]) +
             spec->import_weight * agents[k].imp +
             spec->export_weight * agents[k].exp;
      qimp += agents[k].imp;
      qexp += agents[k].exp;
    }
    return obj + g.evaluate(qimp, qexp);
  };

  double primal = 0.0, dual = 0.0;
  bool converged = false;
  int round = 0;
  while (round < cfg.max_rounds && !converged) {
    ++round;
    for (MemberAgent& agent : agents) {
      const int k = static_cast<int>(&agent - agents.data());
      agent.solver->set_quad(1, 0.5 * rho);
      agent.solver->set_linear(1, -rho * (pool_target[k] - pool_dual));
      qp::QpSolution sol = agent.solver->solve();
      agent.own = sol.x[0];
      agent.pool = sol.x[1];
      agent.imp = sol.x[2];
      agent.exp = sol.x[3];
    }

    // Manager step: project pool trades onto sum-zero, shared dual update.
    double mean = 0.0;
    for (const MemberAgent& agent : agents) mean += agent.pool;
    mean /= std::max(n_members, 1);
    dual = 0.0;
    for (int k = 0; k < n_members; ++k) {
      const double z_new = agents[k].pool - mean;
      dual = std::max(dual, rho * std::abs(z_new - pool_target[k]));
      pool_target[k] = z_new;
    }
    pool_dual += mean;
    primal = std::abs(mean);

    NegotiationTrace::Round rec;
    rec.primal_residual = primal;
    rec.dual_residual = dual;
    rec.objective_estimate = objective_at(pool_target);
    rec.sent.assign(n_members, 1);
    rec.received.assign(n_members, 1);
    trace.rounds.push_back(std::move(rec));

    if (primal <= cfg.tol_primal && dual <= cfg.tol_dual) {
      converged = true;
      break;
    }
    if (cfg.adaptive_rho) {
      if (primal > 10.0 * dual && rho < 1e6) {
        rho *= 2.0;
        pool_dual *= 0.5;
      } else if (dual > 10.0 * primal && rho > 1e-6) {
        rho *= 0.5;
        pool_dual *= 2.0;
      }
    }
  }
  trace.converged = converged;

  ClearingResult result;
  result.design = MarketDesign::community;
  result.status =
      converged ? qp::SolveStatus::optimal : qp::SolveStatus::max_iter;
  result.iterations = round;

  CommunityDecision decision;
  decision.community_id = spec->id;
  for (int k = 0; k < n_members; ++k) {
    const Peer& peer = inst.peers[agents[k].peer_idx];
    MemberDecision m;
    m.own_mw = agents[k].own;
    m.pool_mw = pool_target[k];  // manager copy: pool balance exact
    m.import_mw = agents[k].imp;
    m.export_mw = agents[k].exp;
    decision.members[peer.id] = m;
    decision.import_total_mw += m.import_mw;
    decision.export_total_mw += m.export_mw;
    result.net_injection_mw[peer.id] = m.own_mw;

    if (peer.role == PeerRole::producer)
      result.welfare.generation_cost += evaluate_cost(peer.cost, m.own_mw);
    else if (peer.role == PeerRole::consumer)
      result.welfare.consumer_utility -= evaluate_cost(peer.cost, m.own_mw);
    result.welfare.transaction_costs +=
        spec->internal_fee * std::abs(m.pool_mw) +
        spec->import_weight * m.import_mw + spec->export_weight * m.export_mw;
  }
  result.welfare.grid_exchange_cost =
      g.evaluate(decision.import_total_mw, decision.export_total_mw);
  result.transaction_cost_total = result.welfare.transaction_costs;
  result.objective_value = objective_at(pool_target);
  result.social_welfare = -result.objective_value;
  result.community_decisions.push_back(std::move(decision));

  // Published point: pool balance is exact, the per-member balance absorbs
  // the residual consensus gap.
  result.kkt_residuals.primal_eq = primal;
  result.kkt_residuals.stationarity = dual;
  result.kkt_residuals.complementarity = 0.0;

  return {std::move(result), std::move(trace)};
}

}  // namespace peermarket
