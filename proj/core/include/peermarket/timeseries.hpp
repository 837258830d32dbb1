#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "peermarket/model.hpp"

namespace peermarket {

enum class IngestCode {
  LengthMismatch,
  UnknownPeer,
  NonUniformTimestep,
  ValueOutOfRange,
  MalformedCsv,
};

const char* to_string(IngestCode code);

class IngestError : public std::runtime_error {
 public:
  IngestError(IngestCode code, const std::string& detail);
  IngestCode code() const { return code_; }

 private:
  IngestCode code_;
};

/** Per-interval inputs for a simulation horizon: normalized profiles in
 *  [0, 1] per peer, market prices, and the MW scale of each profiled peer.
 *  All series share the timestamps, which must be uniformly spaced.
 */
struct TimeSeriesBundle {
  std::vector<std::string> timestamps;  ///< ISO-8601, uniform spacing
  double step_minutes = 30.0;
  std::map<std::string, std::vector<double>> profiles;
  std::vector<double> prices;  ///< $/MWh per step
  std::map<std::string, double> capacities;  ///< MW scale per profiled peer

  std::size_t num_steps() const { return timestamps.size(); }
  double hours_per_step() const { return step_minutes / 60.0; }
};

struct IngestResult {
  TimeSeriesBundle bundle;
  MarketInstance instance;  ///< validated template
};

/** Load profiles CSV (`timestamp,<peer_id>,...`), prices CSV
 *  (`timestamp,price`), and the instance template.
 *
 * Capacities come from the template bounds: the magnitude of the binding
 * side for the peer's role. Per step, must-take peers later get fixed
 * bounds capacity*profile, consumers [-capacity*profile, 0], dispatchable
 * producers [0, capacity*profile]; the grid peer follows the price series.
 */
IngestResult ingest(const std::string& profiles_csv_path,
                    const std::string& prices_csv_path,
                    const std::string& instance_json_path);

/// In-memory variant used by tests and generated data.
IngestResult ingest_text(const std::string& profiles_csv,
                         const std::string& prices_csv,
                         const std::string& instance_json);

std::string profiles_to_csv(const TimeSeriesBundle& bundle);
std::string prices_to_csv(const TimeSeriesBundle& bundle);

}  // namespace peermarket
