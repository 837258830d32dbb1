#include "peermarket/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <mutex>
#include <thread>

#include "clearing_internal.hpp"

namespace peermarket {

namespace {

constexpr int kStepsPerTask = 64;

struct ProfiledPeer {
  int peer_idx = -1;
  const std::vector<double>* profile = nullptr;
  double capacity = 0.0;
};

enum class BoundKind { fixed, consumer_range, producer_range };

BoundKind bound_kind(const Peer& peer) {
  if (peer.must_take || peer.bounds.is_fixed()) return BoundKind::fixed;
  return peer.role == PeerRole::consumer ? BoundKind::consumer_range
                                         : BoundKind::producer_range;
}

void apply_profile_bounds(qp::StructuredSolver& solver, int var,
                          BoundKind kind, double mw) {
  switch (kind) {
    case BoundKind::fixed: solver.set_bounds(var, mw, mw); break;
    case BoundKind::consumer_range: solver.set_bounds(var, -mw, 0.0); break;
    case BoundKind::producer_range: solver.set_bounds(var, 0.0, mw); break;
  }
}

/// Resolves profiled peers against the bundle; throws IngestError on gaps.
std::vector<ProfiledPeer> resolve_profiles(const TimeSeriesBundle& bundle,
                                           const MarketInstance& inst) {
  std::vector<ProfiledPeer> out;
  for (const auto& [id, series] : bundle.profiles) {
    const int idx = inst.peer_index(id);
    if (idx < 0)
      throw IngestError(IngestCode::UnknownPeer,
                        "profiled peer '" + id + "' not in the instance");
    if (series.size() != bundle.num_steps())
      throw IngestError(IngestCode::LengthMismatch,
                        "profile of '" + id + "' has wrong length");
    ProfiledPeer p;
    p.peer_idx = idx;
    p.profile = &series;
    auto cap = bundle.capacities.find(id);
    if (cap != bundle.capacities.end()) {
      p.capacity = cap->second;
    } else {
      const Peer& peer = inst.peers[idx];
      p.capacity = peer.role == PeerRole::consumer ? -peer.bounds.lower
                                                   : peer.bounds.upper;
    }
    if (!(p.capacity >= 0.0) || !std::isfinite(p.capacity))
      throw IngestError(IngestCode::ValueOutOfRange,
                        "capacity of '" + id + "' must be finite and >= 0");
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-design engines: compile once per task, poke numbers per step.
// ---------------------------------------------------------------------------

struct NodeTable {
  std::vector<std::string> labels;
  std::vector<char> kinds;
  std::map<std::string, int> index;

  int add(const std::string& label, char kind) {
    auto [it, fresh] = index.emplace(label, static_cast<int>(labels.size()));
    if (fresh) {
      labels.push_back(label);
      kinds.push_back(kind);
    }
    return it->second;
  }
};

char role_kind(PeerRole role) {
  switch (role) {
    case PeerRole::producer: return 'p';
    case PeerRole::consumer: return 'c';
    case PeerRole::grid: return 'g';
  }
  return '?';
}

NodeTable build_node_table(const MarketInstance& inst) {
  NodeTable table;
  for (const Peer& p : inst.peers) table.add(p.id, role_kind(p.role));
  for (const CommunitySpec& c : inst.communities) {
    table.add(c.id, 'm');
    table.add("pool:" + c.id, 'o');
    table.add("ext:" + c.id, 'o');
  }
  return table;
}

class Engine {
 public:
  virtual ~Engine() = default;
  virtual qp::SolveStatus step(int t, StepSummary& summary,
                               std::vector<TradeRecord>* records) = 0;
  virtual void reset() = 0;
};

class FullP2pEngine : public Engine {
 public:
  FullP2pEngine(const MarketInstance& inst, const TimeSeriesBundle& bundle,
                const NodeTable& nodes, const qp::SolveOptions& opts)
      : inst_(inst),
        bundle_(bundle),
        nodes_(nodes),
        layout_(detail::build_full_p2p(inst)),
        solver_(layout_.problem, opts) {
    profiled_ = resolve_profiles(bundle, inst);
    community_of_.resize(inst.peers.size(), -1);
    for (std::size_t c = 0; c < inst.communities.size(); ++c)
      for (const std::string& m : inst.communities[c].members)
        community_of_[inst.peer_index(m)] = static_cast<int>(c);
  }

  void reset() override { solver_.reset_warm_start(); }

  qp::SolveStatus step(int t, StepSummary& summary,
                       std::vector<TradeRecord>* records) override {
    for (const ProfiledPeer& p : profiled_) {
      apply_profile_bounds(solver_, layout_.s_var[p.peer_idx],
                           bound_kind(inst_.peers[p.peer_idx]),
                           p.capacity * (*p.profile)[t]);
    }
    const double price = bundle_.prices[t];
    if (layout_.grid_idx >= 0)
      solver_.set_linear(layout_.s_var[layout_.grid_idx], price);

    qp::QpSolution sol = solver_.solve();
    if (sol.status == qp::SolveStatus::infeasible) return sol.status;

    const double h = bundle_.hours_per_step();
    summary.status = sol.status;
    summary.kkt_max = sol.kkt_residuals.max_violation();
    summary.welfare = -sol.objective_value * h;

    for (std::size_t i = 0; i < inst_.peers.size(); ++i) {
      const Peer& peer = inst_.peers[i];
      if (peer.role == PeerRole::grid) continue;
      const double s = sol.x[layout_.s_var[i]];
      summary.production_mwh += std::max(s, 0.0) * h;
      summary.load_mwh += std::max(-s, 0.0) * h;
    }
    for (const detail::DirectedPair& pair : layout_.pairs) {
      const double traded =
          0.5 * (sol.x[pair.var_ab] - sol.x[pair.var_ba]);
      summary.transaction_cost +=
          inst_.tx_costs.per_trade_fee * std::abs(traded) * h;
      const bool a_grid = inst_.peers[pair.a].role == PeerRole::grid;
      const bool b_grid = inst_.peers[pair.b].role == PeerRole::grid;
      if (a_grid || b_grid) {
        const double from_grid = a_grid ? traded : -traded;
        summary.import_mwh += std::max(from_grid, 0.0) * h;
        summary.export_mwh += std::max(-from_grid, 0.0) * h;
        summary.import_cost +=
            inst_.grid.import_price() * std::max(from_grid, 0.0) * h;
        summary.export_revenue +=
            inst_.grid.export_price() * std::max(-from_grid, 0.0) * h;
      } else {
        const int ca = community_of_[pair.a];
        const int cb = community_of_[pair.b];
        if (ca >= 0 && cb >= 0 && ca != cb)
          summary.community_exchange_mwh += std::abs(traded) * h;
      }
      if (records && traded != 0.0)
        records->push_back({nodes_.index.at(inst_.peers[pair.a].id),
                            nodes_.index.at(inst_.peers[pair.b].id), traded});
    }
    return sol.status;
  }

 private:
  const MarketInstance& inst_;
  const TimeSeriesBundle& bundle_;
  const NodeTable& nodes_;
  detail::FullP2pLayout layout_;
  qp::StructuredSolver solver_;
  std::vector<ProfiledPeer> profiled_;
  std::vector<int> community_of_;
};

class CommunityEngine : public Engine {
 public:
  CommunityEngine(const MarketInstance& inst, const TimeSeriesBundle& bundle,
                  const NodeTable& nodes, const qp::SolveOptions& opts)
      : inst_(inst), bundle_(bundle), nodes_(nodes) {
    profiled_ = resolve_profiles(bundle, inst);
    member_home_.assign(inst.peers.size(), -1);
    for (std::size_t c = 0; c < inst.communities.size(); ++c) {
      layouts_.push_back(
          detail::build_community(inst, static_cast<int>(c)));
      solvers_.emplace_back(
          std::make_unique<qp::StructuredSolver>(layouts_.back().problem,
                                                 opts));
      const detail::CommunityBlock& block = layouts_.back().block;
      for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
        member_home_[block.member_peer[k]] = static_cast<int>(c);
        member_slot_[block.member_peer[k]] = static_cast<int>(k);
      }
    }
  }

  void reset() override {
    for (auto& s : solvers_) s->reset_warm_start();
  }

  qp::SolveStatus step(int t, StepSummary& summary,
                       std::vector<TradeRecord>* records) override {
    const double h = bundle_.hours_per_step();
    const double price = bundle_.prices[t];
    qp::SolveStatus worst = qp::SolveStatus::optimal;

    for (std::size_t c = 0; c < layouts_.size(); ++c) {
      const detail::CommunityBlock& block = layouts_[c].block;
      qp::StructuredSolver& solver = *solvers_[c];
      for (const ProfiledPeer& p : profiled_) {
        if (member_home_[p.peer_idx] != static_cast<int>(c)) continue;
        const int slot = member_slot_.at(p.peer_idx);
        apply_profile_bounds(solver, block.own_var[slot],
                             bound_kind(inst_.peers[p.peer_idx]),
                             p.capacity * (*p.profile)[t]);
      }
      double imp_price = 0.0, exp_price = 0.0, imp_quad = 0.0, exp_quad = 0.0;
      if (block.default_external) {
        imp_price = price + inst_.grid.tariff;
        exp_price = price - inst_.grid.tariff;
        solver.set_linear(block.qimp_var, imp_price);
        solver.set_linear(block.qexp_var, -exp_price);
      } else {
        const ExternalCost g = inst_.external_cost_for(
            inst_.communities[block.community_idx]);
        imp_price = g.import_term.linear;
        exp_price = -g.export_term.linear;
        imp_quad = g.import_term.quadratic;
        exp_quad = g.export_term.quadratic;
      }

      qp::QpSolution sol = solver.solve();
      if (sol.status == qp::SolveStatus::infeasible) return sol.status;
      if (sol.status != qp::SolveStatus::optimal) worst = sol.status;
      summary.kkt_max =
          std::max(summary.kkt_max, sol.kkt_residuals.max_violation());
      summary.welfare -= sol.objective_value * h;

      const CommunitySpec& spec = inst_.communities[block.community_idx];
      const double qimp = sol.x[block.qimp_var];
      const double qexp = sol.x[block.qexp_var];
      summary.import_mwh += qimp * h;
      summary.export_mwh += qexp * h;
      summary.import_cost += (imp_price + imp_quad * qimp) * qimp * h;
      summary.export_revenue += (exp_price - exp_quad * qexp) * qexp * h;

      for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
        const Peer& peer = inst_.peers[block.member_peer[k]];
        const double own = sol.x[block.own_var[k]];
        const double pool = sol.x[block.pool_var[k]];
        const double imp = sol.x[block.imp_var[k]];
        const double exp = sol.x[block.exp_var[k]];
        summary.production_mwh += std::max(own, 0.0) * h;
        summary.load_mwh += std::max(-own, 0.0) * h;
        summary.transaction_cost +=
            (spec.internal_fee * std::abs(pool) + spec.import_weight * imp +
             spec.export_weight * exp) *
            h;
        if (records) {
          const int self = nodes_.index.at(peer.id);
          if (pool != 0.0)
            records->push_back(
                {self, nodes_.index.at("pool:" + spec.id), -pool});
          if (imp != 0.0 || exp != 0.0)
            records->push_back(
                {self, nodes_.index.at("ext:" + spec.id), exp - imp});
        }
      }
    }
    summary.status = worst;
    return worst;
  }

 private:
  const MarketInstance& inst_;
  const TimeSeriesBundle& bundle_;
  const NodeTable& nodes_;
  std::vector<detail::CommunityLayout> layouts_;
  std::vector<std::unique_ptr<qp::StructuredSolver>> solvers_;
  std::vector<ProfiledPeer> profiled_;
  std::vector<int> member_home_;
  std::map<int, int> member_slot_;
};

class HybridEngine : public Engine {
 public:
  HybridEngine(const MarketInstance& inst, const TimeSeriesBundle& bundle,
               const NodeTable& nodes, const qp::SolveOptions& opts)
      : inst_(inst),
        bundle_(bundle),
        nodes_(nodes),
        layout_(detail::build_hybrid(inst)),
        solver_(layout_.problem, opts) {
    profiled_ = resolve_profiles(bundle, inst);
    own_var_of_.assign(inst.peers.size(), -1);
    for (const detail::CommunityBlock& block : layout_.blocks)
      for (std::size_t k = 0; k < block.member_peer.size(); ++k)
        own_var_of_[block.member_peer[k]] = block.own_var[k];
  }

  void reset() override { solver_.reset_warm_start(); }

  qp::SolveStatus step(int t, StepSummary& summary,
                       std::vector<TradeRecord>* records) override {
    for (const ProfiledPeer& p : profiled_) {
      const int var = own_var_of_[p.peer_idx];
      if (var < 0) continue;
      apply_profile_bounds(solver_, var, bound_kind(inst_.peers[p.peer_idx]),
                           p.capacity * (*p.profile)[t]);
    }
    const double price = bundle_.prices[t];
    solver_.set_linear(layout_.grid_s_var, price);

    qp::QpSolution sol = solver_.solve();
    if (sol.status == qp::SolveStatus::infeasible) return sol.status;

    const double h = bundle_.hours_per_step();
    summary.status = sol.status;
    summary.kkt_max = sol.kkt_residuals.max_violation();
    summary.welfare = -sol.objective_value * h;

    for (const detail::CommunityBlock& block : layout_.blocks) {
      const CommunitySpec& spec = inst_.communities[block.community_idx];
      for (std::size_t k = 0; k < block.member_peer.size(); ++k) {
        const Peer& peer = inst_.peers[block.member_peer[k]];
        const double own = sol.x[block.own_var[k]];
        const double pool = sol.x[block.pool_var[k]];
        const double imp = sol.x[block.imp_var[k]];
        const double exp = sol.x[block.exp_var[k]];
        summary.production_mwh += std::max(own, 0.0) * h;
        summary.load_mwh += std::max(-own, 0.0) * h;
        summary.transaction_cost +=
            (spec.internal_fee * std::abs(pool) + spec.import_weight * imp +
             spec.export_weight * exp) *
            h;
        if (records) {
          const int self = nodes_.index.at(peer.id);
          if (pool != 0.0)
            records->push_back(
                {self, nodes_.index.at("pool:" + spec.id), -pool});
          if (imp != 0.0 || exp != 0.0)
            records->push_back(
                {self, nodes_.index.at("ext:" + spec.id), exp - imp});
        }
      }
    }
    for (const detail::DirectedPair& pair : layout_.upper_pairs) {
      const double traded = 0.5 * (sol.x[pair.var_ab] - sol.x[pair.var_ba]);
      const bool between_communities =
          pair.a < layout_.grid_node && pair.b < layout_.grid_node;
      if (between_communities) {
        summary.community_exchange_mwh += std::abs(traded) * h;
        summary.transaction_cost +=
            inst_.tx_costs.inter_community_fee(
                inst_.communities[pair.a].id, inst_.communities[pair.b].id) *
            std::abs(traded) * h;
      } else {
        const double from_grid = pair.b == layout_.grid_node ? -traded : traded;
        summary.import_mwh += std::max(from_grid, 0.0) * h;
        summary.export_mwh += std::max(-from_grid, 0.0) * h;
        summary.import_cost +=
            inst_.grid.import_price() * std::max(from_grid, 0.0) * h;
        summary.export_revenue +=
            inst_.grid.export_price() * std::max(-from_grid, 0.0) * h;
      }
      if (records && traded != 0.0) {
        auto label = [&](int node) {
          return node == layout_.grid_node
                     ? inst_.peers[layout_.grid_idx].id
                     : inst_.communities[node].id;
        };
        records->push_back({nodes_.index.at(label(pair.a)),
                            nodes_.index.at(label(pair.b)), traded});
      }
    }
    return sol.status;
  }

 private:
  const MarketInstance& inst_;
  const TimeSeriesBundle& bundle_;
  const NodeTable& nodes_;
  detail::HybridLayout layout_;
  qp::StructuredSolver solver_;
  std::vector<ProfiledPeer> profiled_;
  std::vector<int> own_var_of_;
};

std::unique_ptr<Engine> make_engine(MarketDesign design,
                                    const MarketInstance& inst,
                                    const TimeSeriesBundle& bundle,
                                    const NodeTable& nodes,
                                    const qp::SolveOptions& opts) {
  switch (design) {
    case MarketDesign::full_p2p:
      return std::make_unique<FullP2pEngine>(inst, bundle, nodes, opts);
    case MarketDesign::community:
      return std::make_unique<CommunityEngine>(inst, bundle, nodes, opts);
    case MarketDesign::hybrid:
      return std::make_unique<HybridEngine>(inst, bundle, nodes, opts);
  }
  throw std::logic_error("unknown design");
}

}  // namespace

HorizonReport simulate(const TimeSeriesBundle& bundle,
                       const MarketInstance& template_instance,
                       MarketDesign design, const SimulateOptions& opts) {
  MarketInstance inst = template_instance;
  inst.design = design;
  if (auto errors = validate(inst); !errors.empty())
    throw ValidationFailure(std::move(errors));
  if (bundle.prices.size() != bundle.num_steps())
    throw IngestError(IngestCode::LengthMismatch,
                      "price series length != timestamps");
  resolve_profiles(bundle, inst);  // fail on bundle/instance gaps up front

  const int n_steps = static_cast<int>(bundle.num_steps());
  HorizonReport report;
  report.design = design;
  report.step_minutes = bundle.step_minutes;
  report.timestamps = bundle.timestamps;
  report.steps.assign(n_steps, {});
  if (opts.keep_trades) report.step_trades.assign(n_steps, {});

  NodeTable nodes = build_node_table(inst);
  report.id_table = nodes.labels;
  report.id_kind = nodes.kinds;

  const int n_tasks = (n_steps + kStepsPerTask - 1) / kStepsPerTask;
  std::atomic<int> next_task{0};
  std::atomic<bool> abort{false};
  std::mutex failure_mutex;
  std::exception_ptr failure;
  std::vector<std::vector<int>> skipped_per_task(std::max(n_tasks, 1));

  auto worker = [&]() {
    // A fresh engine per task: warm starts never cross task boundaries, so
    // results do not depend on the worker count.
    while (!abort.load(std::memory_order_relaxed)) {
      const int task = next_task.fetch_add(1);
      if (task >= n_tasks) break;
      const int begin = task * kStepsPerTask;
      const int end = std::min(begin + kStepsPerTask, n_steps);
      try {
        auto engine = make_engine(design, inst, bundle, nodes, opts.solver);
        for (int t = begin; t < end && !abort.load(); ++t) {
          StepSummary& summary = report.steps[t];
          summary.step = t;
          std::vector<TradeRecord>* records =
              opts.keep_trades ? &report.step_trades[t] : nullptr;
          const qp::SolveStatus status = engine->step(t, summary, records);
          if (status == qp::SolveStatus::infeasible) {
            if (!opts.skip_infeasible)
              throw InfeasibleError("step " + std::to_string(t) + " (" +
                                    bundle.timestamps[t] +
                                    "): no feasible dispatch");
            summary = {};
            summary.step = t;
            summary.status = status;
            summary.skipped = true;
            if (records) records->clear();
            skipped_per_task[task].push_back(t);
            engine->reset();
          }
        }
      } catch (...) {
        std::scoped_lock lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        abort.store(true);
      }
    }
  };

  int n_workers = opts.workers > 0
                      ? opts.workers
                      : static_cast<int>(std::thread::hardware_concurrency());
  n_workers = std::clamp(n_workers, 1, std::max(n_tasks, 1));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    threads.reserve(n_workers);
    for (int w = 0; w < n_workers; ++w) threads.emplace_back(worker);
    for (auto& th : threads) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (const auto& task_skips : skipped_per_task)
    for (int t : task_skips) report.skipped_steps.push_back(t);
  std::sort(report.skipped_steps.begin(), report.skipped_steps.end());

  for (const StepSummary& s : report.steps) {
    report.totals.social_welfare += s.welfare;
    report.totals.import_cost += s.import_cost;
    report.totals.export_revenue += s.export_revenue;
    report.totals.load_mwh += s.load_mwh;
    report.totals.import_mwh += s.import_mwh;
    report.totals.export_mwh += s.export_mwh;
    report.totals.community_exchange_mwh += s.community_exchange_mwh;
    report.totals.transaction_cost += s.transaction_cost;
    report.totals.production_mwh += s.production_mwh;
  }
  return report;
}

std::vector<std::map<std::string, double>> trade_breakdown(
    const HorizonReport& report, const std::string& peer_id, int window_begin,
    int window_end) {
  int self = -1;
  for (std::size_t i = 0; i < report.id_table.size(); ++i) {
    if (report.id_table[i] == peer_id &&
        (report.id_kind[i] == 'p' || report.id_kind[i] == 'c' ||
         report.id_kind[i] == 'g'))
      self = static_cast<int>(i);
  }
  if (self < 0)
    throw BreakdownError("UnknownPeer: '" + peer_id + "'");
  if (window_begin < 0 || window_end > static_cast<int>(report.steps.size()) ||
      window_begin >= window_end)
    throw BreakdownError("WindowOutOfRange: [" +
                         std::to_string(window_begin) + ", " +
                         std::to_string(window_end) + ")");
  if (report.step_trades.empty())
    throw BreakdownError("report carries no trade records");

  // Consumers read as purchases, producers and the grid as sales.
  const double orient = report.id_kind[self] == 'c' ? -1.0 : 1.0;
  const double h = report.hours_per_step();

  std::vector<std::map<std::string, double>> out;
  out.reserve(window_end - window_begin);
  for (int t = window_begin; t < window_end; ++t) {
    std::map<std::string, double> row;
    for (const TradeRecord& rec : report.step_trades[t]) {
      if (rec.peer == self)
        row[report.id_table[rec.partner]] += orient * rec.mw * h;
      else if (rec.partner == self)
        row[report.id_table[rec.peer]] -= orient * rec.mw * h;
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace peermarket
