#include "peermarket/timeseries.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "csv_util.hpp"

namespace peermarket {

const char* to_string(IngestCode code) {
  switch (code) {
    case IngestCode::LengthMismatch: return "LengthMismatch";
    case IngestCode::UnknownPeer: return "UnknownPeer";
    case IngestCode::NonUniformTimestep: return "NonUniformTimestep";
    case IngestCode::ValueOutOfRange: return "ValueOutOfRange";
    case IngestCode::MalformedCsv: return "MalformedCsv";
  }
  return "?";
}

IngestError::IngestError(IngestCode code, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + ": " + detail),
      code_(code) {}

namespace {

// Days since the civil epoch 1970-01-01 (Howard Hinnant's algorithm).
std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

std::int64_t parse_iso8601(std::string_view s) {
  int y, mo, d, h, mi, sec;
  char buf[32];
  if (s.size() >= sizeof(buf))
    throw IngestError(IngestCode::MalformedCsv,
                      "timestamp too long: '" + std::string(s) + "'");
  std::snprintf(buf, sizeof(buf), "%.*s", static_cast<int>(s.size()),
                s.data());
  if (std::sscanf(buf, "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &sec) != 6)
    throw IngestError(IngestCode::MalformedCsv,
                      "bad ISO-8601 timestamp: '" + std::string(s) + "'");
  return days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + sec;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ParsedCsv {
  std::vector<std::string> columns;  // excluding the timestamp column
  std::vector<std::string> timestamps;
  std::vector<std::vector<double>> values;  // per column
};

ParsedCsv parse_timestamped_csv(const std::string& text, const char* what) {
  const auto lines = detail::split_lines(text);
  if (lines.empty())
    throw IngestError(IngestCode::MalformedCsv,
                      std::string(what) + ": empty file");
  const auto header = detail::split_csv_line(lines[0]);
  if (header.size() < 2 || header[0] != "timestamp")
    throw IngestError(
        IngestCode::MalformedCsv,
        std::string(what) + ": header must start with 'timestamp'");
  ParsedCsv out;
  for (std::size_t c = 1; c < header.size(); ++c)
    out.columns.emplace_back(header[c]);
  out.values.resize(out.columns.size());
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto cells = detail::split_csv_line(lines[r]);
    if (cells.size() != header.size())
      throw IngestError(IngestCode::MalformedCsv,
                        std::string(what) + ": row " + std::to_string(r) +
                            " has " + std::to_string(cells.size()) +
                            " cells, expected " +
                            std::to_string(header.size()));
    out.timestamps.emplace_back(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      double v;
      if (!detail::parse_double(cells[c], v))
        throw IngestError(IngestCode::MalformedCsv,
                          std::string(what) + ": bad number '" +
                              std::string(cells[c]) + "' in row " +
                              std::to_string(r));
      out.values[c - 1].push_back(v);
    }
  }
  return out;
}

double check_uniform_step_minutes(const std::vector<std::string>& stamps) {
  if (stamps.size() < 2) return 30.0;
  std::vector<std::int64_t> secs;
  secs.reserve(stamps.size());
  for (const auto& s : stamps) secs.push_back(parse_iso8601(s));
  const std::int64_t dt = secs[1] - secs[0];
  if (dt <= 0)
    throw IngestError(IngestCode::NonUniformTimestep,
                      "timestamps must be strictly increasing");
  for (std::size_t i = 2; i < secs.size(); ++i) {
    if (secs[i] - secs[i - 1] != dt)
      throw IngestError(IngestCode::NonUniformTimestep,
                        "step at row " + std::to_string(i) + " differs");
  }
  return static_cast<double>(dt) / 60.0;
}

/// MW scale of a profiled peer, from the binding side of its bounds.
double capacity_from_bounds(const Peer& peer) {
  const double cap = peer.role == PeerRole::consumer
                         ? -peer.bounds.lower
                         : peer.bounds.upper;
  if (!std::isfinite(cap) || cap < 0.0)
    throw IngestError(IngestCode::ValueOutOfRange,
                      "peer '" + peer.id +
                          "': cannot derive a finite capacity from bounds");
  return cap;
}

}  // namespace

IngestResult ingest_text(const std::string& profiles_csv,
                         const std::string& prices_csv,
                         const std::string& instance_json) {
  IngestResult result;
  result.instance = build_instance(instance_json);

  ParsedCsv profiles = parse_timestamped_csv(profiles_csv, "profiles");
  ParsedCsv prices = parse_timestamped_csv(prices_csv, "prices");
  if (prices.columns.size() != 1 || prices.columns[0] != "price")
    throw IngestError(IngestCode::MalformedCsv,
                      "prices: header must be 'timestamp,price'");

  if (profiles.timestamps.size() != prices.timestamps.size())
    throw IngestError(IngestCode::LengthMismatch,
                      "profiles has " +
                          std::to_string(profiles.timestamps.size()) +
                          " rows, prices has " +
                          std::to_string(prices.timestamps.size()));
  for (std::size_t i = 0; i < profiles.timestamps.size(); ++i) {
    if (profiles.timestamps[i] != prices.timestamps[i])
      throw IngestError(IngestCode::LengthMismatch,
                        "timestamp mismatch at row " + std::to_string(i));
  }

  TimeSeriesBundle& bundle = result.bundle;
  bundle.timestamps = std::move(profiles.timestamps);
  bundle.step_minutes = check_uniform_step_minutes(bundle.timestamps);
  bundle.prices = std::move(prices.values[0]);
  for (double p : bundle.prices) {
    if (!std::isfinite(p))
      throw IngestError(IngestCode::ValueOutOfRange, "non-finite price");
  }

  for (std::size_t c = 0; c < profiles.columns.size(); ++c) {
    const std::string& id = profiles.columns[c];
    const Peer* peer = result.instance.find_peer(id);
    if (!peer)
      throw IngestError(IngestCode::UnknownPeer,
                        "profiled peer '" + id + "' not in the instance");
    if (peer->role == PeerRole::grid)
      throw IngestError(IngestCode::UnknownPeer,
                        "grid peer '" + id +
                            "' takes the price series, not a profile");
    for (double v : profiles.values[c]) {
      if (!(v >= 0.0 && v <= 1.0))
        throw IngestError(IngestCode::ValueOutOfRange,
                          "profile of '" + id + "' leaves [0, 1]");
    }
    bundle.capacities[id] = capacity_from_bounds(*peer);
    bundle.profiles[id] = std::move(profiles.values[c]);
  }
  return result;
}

IngestResult ingest(const std::string& profiles_csv_path,
                    const std::string& prices_csv_path,
                    const std::string& instance_json_path) {
  return ingest_text(read_file(profiles_csv_path), read_file(prices_csv_path),
                     read_file(instance_json_path));
}

std::string profiles_to_csv(const TimeSeriesBundle& bundle) {
  std::ostringstream os;
  os << "timestamp";
  for (const auto& [id, series] : bundle.profiles) os << ',' << id;
  os << '\n';
  for (std::size_t t = 0; t < bundle.num_steps(); ++t) {
    os << bundle.timestamps[t];
    for (const auto& [id, series] : bundle.profiles)
      os << ',' << detail::format_double(series[t]);
    os << '\n';
  }
  return os.str();
}

std::string prices_to_csv(const TimeSeriesBundle& bundle) {
  std::ostringstream os;
  os << "timestamp,price\n";
  for (std::size_t t = 0; t < bundle.num_steps(); ++t)
    os << bundle.timestamps[t] << ','
       << detail::format_double(bundle.prices[t]) << '\n';
  return os.str();
}

}  // namespace peermarket
