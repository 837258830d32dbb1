#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peermarket/clearing.hpp"
#include "peermarket/model.hpp"
#include "peermarket/qp.hpp"
#include "peermarket/timeseries.hpp"

namespace peermarket {

/// Per-interval outcome, already energy-scaled (MWh and $ per step).
struct StepSummary {
  int step = 0;
  qp::SolveStatus status = qp::SolveStatus::optimal;
  bool skipped = false;  ///< infeasible step recorded under --skip-infeasible
  double welfare = 0.0;
  double production_mwh = 0.0;
  double load_mwh = 0.0;
  double import_mwh = 0.0;
  double export_mwh = 0.0;
  double community_exchange_mwh = 0.0;
  double import_cost = 0.0;
  double export_revenue = 0.0;
  double transaction_cost = 0.0;
  double kkt_max = 0.0;
};

/// Directed energy record: `peer` sells `mw` to `partner` (negative buys).
/// Indices point into HorizonReport::id_table.
struct TradeRecord {
  int peer = 0;
  int partner = 0;
  double mw = 0.0;
};

struct HorizonReport {
  MarketDesign design = MarketDesign::full_p2p;
  double step_minutes = 30.0;
  std::vector<std::string> timestamps;
  std::vector<StepSummary> steps;

  struct Totals {
    double social_welfare = 0.0;
    double import_cost = 0.0;
    double export_revenue = 0.0;
    double load_mwh = 0.0;
    double import_mwh = 0.0;
    double export_mwh = 0.0;
    double community_exchange_mwh = 0.0;
    double transaction_cost = 0.0;
    double production_mwh = 0.0;
  } totals;

  /// Node labels for trade records: peer ids, community ids (hybrid upper
  /// level), and `pool:<cid>` / `ext:<cid>` pseudo-nodes for members.
  std::vector<std::string> id_table;
  std::vector<char> id_kind;  ///< p/c/g per role, m manager, o pseudo-node
  std::vector<std::vector<TradeRecord>> step_trades;  ///< empty rows if off
  std::vector<int> skipped_steps;

  double hours_per_step() const { return step_minutes / 60.0; }
};

struct SimulateOptions {
  /// Per-step energy-balance identities must hold to 1e-6 MW in aggregate,
  /// tighter than any single KKT residual; hence the 1e-8 default here.
  qp::SolveOptions solver{.tol = 1e-8};
  bool skip_infeasible = false;
  int workers = 0;         ///< 0: hardware concurrency
  bool keep_trades = true; ///< per-step records for trade_breakdown
};

/// One independent clearing per interval; aggregates per Tables 3-4.
/// Throws InfeasibleError naming the step unless skip_infeasible is set.
HorizonReport simulate(const TimeSeriesBundle& bundle,
                       const MarketInstance& template_instance,
                       MarketDesign design, const SimulateOptions& opts = {});

class BreakdownError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/** Per-step energy exchanged by `peer_id` with each counterparty inside
 *  [window_begin, window_end). Values are MWh, oriented so a consumer's
 *  purchases (and a producer's sales) are positive; each step's map sums to
 *  the peer's consumption/production in that step.
 */
std::vector<std::map<std::string, double>> trade_breakdown(
    const HorizonReport& report, const std::string& peer_id, int window_begin,
    int window_end);

struct SyntheticSpec {
  std::uint64_t seed = 42;
  int num_peers = 19;        ///< excluding the grid peer
  int num_communities = 3;
  int steps = 48;
  double step_minutes = 30.0;
  std::string start_timestamp = "2013-01-01T00:00:00";
  bool benchmark_fees = true;  ///< 0.001 $/MWh trade fees, 10 $/MWh tariff,
                               ///< inter-community fees 2 / 1 / 1.5
};

struct SyntheticData {
  TimeSeriesBundle bundle;
  MarketInstance instance;
};

/// Deterministic synthetic dataset: sinusoidal-plus-noise profiles, random
/// cost curves in documented ranges, communities skewed from
/// renewable-heavy to load-heavy so cross-community flows are material.
SyntheticData gen_synthetic(const SyntheticSpec& spec);

std::string to_json(const HorizonReport& report, int indent = 2);
std::string report_to_csv(const HorizonReport& report);

}  // namespace peermarket
