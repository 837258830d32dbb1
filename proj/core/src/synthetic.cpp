#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

#include "peermarket/harness.hpp"

namespace peermarket {

namespace {

// Raw-bit uniform draws so generated fixtures do not depend on library
// distribution internals.
struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}
  double unit() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
};

std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

void civil_from_days(std::int64_t days, int& y, unsigned& m, unsigned& d) {
  days += 719468;
  const std::int64_t era = (days >= 0 ? days : days - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(days - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  y = static_cast<int>(yoe) + static_cast<int>(era) * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = doy - (153 * mp + 2) / 5 + 1;
  m = mp < 10 ? mp + 3 : mp - 9;
  y += m <= 2;
}

std::string format_timestamp(std::int64_t epoch_seconds) {
  std::int64_t days = epoch_seconds / 86400;
  std::int64_t rem = epoch_seconds % 86400;
  if (rem < 0) {
    rem += 86400;
    --days;
  }
  int y;
  unsigned mo, d;
  civil_from_days(days, y, mo, d);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:%02lld", y, mo,
                d, static_cast<long long>(rem / 3600),
                static_cast<long long>((rem / 60) % 60),
                static_cast<long long>(rem % 60));
  return buf;
}

std::int64_t parse_start(const std::string& iso) {
  int y, mo, d, h, mi, s;
  if (std::sscanf(iso.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi,
                  &s) != 6)
    throw std::invalid_argument("gen_synthetic: bad start timestamp");
  return days_from_civil(y, mo, d) * 86400 + h * 3600 + mi * 60 + s;
}

enum class PeerKind { consumer, renewable, dispatchable };

}  // namespace

SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  if (spec.steps < 1)
    throw std::invalid_argument("gen_synthetic: steps must be >= 1");
  if (spec.num_peers < 2)
    throw std::invalid_argument("gen_synthetic: need at least 2 peers");
  if (spec.num_communities < 1 || spec.num_communities > spec.num_peers)
    throw std::invalid_argument("gen_synthetic: bad community count");

  Rng rng(spec.seed);
  SyntheticData data;
  MarketInstance& inst = data.instance;
  TimeSeriesBundle& bundle = data.bundle;

  const int n = spec.num_peers;
  const int n_cons = std::max(1, (n * 47 + 99) / 100);
  const int n_renew = std::max(1, (n * 32 + 99) / 100);

  // Renewables first, dispatchables next, consumers last: dealing this
  // order into communities leaves the first renewable-heavy and the last
  // load-heavy, so cross-community flows are material.
  std::vector<PeerKind> kinds;
  for (int i = 0; i < n; ++i) {
    if (i < n_renew) kinds.push_back(PeerKind::renewable);
    else if (i < n - n_cons) kinds.push_back(PeerKind::dispatchable);
    else kinds.push_back(PeerKind::consumer);
  }

  inst.design = MarketDesign::full_p2p;
  inst.grid.price = 30.0;
  inst.grid.tariff = spec.benchmark_fees ? 10.0 : 0.0;
  if (spec.benchmark_fees) inst.tx_costs.per_trade_fee = 0.001;

  for (int c = 0; c < spec.num_communities; ++c)
    inst.communities.push_back(
        {"c" + std::to_string(c + 1), {}, spec.benchmark_fees ? 0.001 : 0.0,
         0.0, 0.0, std::nullopt});
  for (int a = 0; a < spec.num_communities; ++a) {
    for (int b = a + 1; b < spec.num_communities; ++b) {
      double fee = 0.0;
      if (spec.benchmark_fees) {
        if (spec.num_communities == 3) {
          // Community 1-2: 2, 1-3: 1, 2-3: 1.5 $/MWh.
          fee = (a == 0 && b == 1) ? 2.0 : (a == 0 && b == 2) ? 1.0 : 1.5;
        } else {
          fee = 1.0 + 0.5 * ((a + b) % 3);
        }
      }
      if (fee > 0.0)
        inst.tx_costs.set_inter_community_fee(inst.communities[a].id,
                                              inst.communities[b].id, fee);
    }
  }

  for (int i = 0; i < n; ++i) {
    Peer peer;
    peer.id = "p" + std::to_string(i + 1);
    peer.bus = 2 + (i % 13);
    const std::string cid =
        inst.communities[i % spec.num_communities].id;
    peer.community = cid;
    inst.communities[i % spec.num_communities].members.push_back(peer.id);

    double capacity = 0.0;
    switch (kinds[i]) {
      case PeerKind::consumer: {
        peer.role = PeerRole::consumer;
        capacity = rng.uniform(1.5, 5.0);
        const double willingness = rng.uniform(45.0, 85.0);
        const double floor = rng.uniform(10.0, 35.0);
        peer.cost.b = willingness;
        peer.cost.a = (willingness - floor) / (4.0 * capacity);
        peer.bounds = {-capacity, 0.0};
        break;
      }
      case PeerKind::renewable: {
        peer.role = PeerRole::producer;
        peer.must_take = true;
        capacity = rng.uniform(2.0, 8.0);
        peer.bounds = PowerBounds::fixed(capacity);
        break;
      }
      case PeerKind::dispatchable: {
        peer.role = PeerRole::producer;
        capacity = rng.uniform(2.0, 6.0);
        peer.cost.b = rng.uniform(25.0, 45.0);
        peer.cost.a = rng.uniform(0.5, 2.0) / capacity;
        peer.bounds = {0.0, capacity};
        break;
      }
    }
    inst.peers.push_back(peer);
    bundle.capacities[peer.id] = capacity;
  }

  Peer grid;
  grid.id = "grid";
  grid.role = PeerRole::grid;
  grid.bus = 1;
  grid.bounds = PowerBounds::unbounded();
  grid.cost.b = inst.grid.price;
  inst.peers.push_back(grid);

  inst.partner_graph = PartnerGraph::default_graph(inst.peers);

  // Time axis.
  const std::int64_t start = parse_start(spec.start_timestamp);
  const std::int64_t dt = static_cast<std::int64_t>(spec.step_minutes * 60.0);
  bundle.step_minutes = spec.step_minutes;
  for (int t = 0; t < spec.steps; ++t)
    bundle.timestamps.push_back(format_timestamp(start + t * dt));

  auto hour_of = [&](int t) {
    const std::int64_t sec = start + t * dt;
    return static_cast<double>(sec % 86400) / 3600.0;
  };
  auto day_of = [&](int t) {
    return static_cast<double>((start + t * dt) / 86400 % 365);
  };
  constexpr double kTau = 6.283185307179586;

  {
    Rng price_rng(rng.gen());
    bundle.prices.reserve(spec.steps);
    for (int t = 0; t < spec.steps; ++t) {
      const double daily = 8.0 * std::sin(kTau * (hour_of(t) - 9.0) / 24.0);
      const double seasonal = 4.0 * std::sin(kTau * day_of(t) / 365.0);
      const double noise = price_rng.uniform(-2.0, 2.0);
      bundle.prices.push_back(std::max(5.0, 30.0 + daily + seasonal + noise));
    }
  }

  for (int i = 0; i < n; ++i) {
    Rng peer_rng(rng.gen());
    const std::string& id = inst.peers[i].id;
    std::vector<double>& series = bundle.profiles[id];
    series.reserve(spec.steps);
    switch (kinds[i]) {
      case PeerKind::consumer: {
        const double phase = peer_rng.uniform(-1.5, 1.5);
        const double base = peer_rng.uniform(0.35, 0.55);
        for (int t = 0; t < spec.steps; ++t) {
          const double h = hour_of(t);
          double v = base + 0.18 * std::sin(kTau * (h - 17.0 + phase) / 24.0) +
                     0.12 * std::sin(2.0 * kTau * (h - 7.5 + phase) / 24.0) +
                     peer_rng.uniform(-0.05, 0.05);
          series.push_back(std::clamp(v, 0.05, 1.0));
        }
        break;
      }
      case PeerKind::renewable: {
        const bool solar = i % 2 == 0;
        if (solar) {
          const double tilt = peer_rng.uniform(0.9, 1.3);
          for (int t = 0; t < spec.steps; ++t) {
            const double h = hour_of(t);
            const double season =
                0.75 + 0.25 * std::sin(kTau * (day_of(t) - 80.0) / 365.0);
            double v = std::sin(kTau * (h - 6.0) / 24.0 / 2.0);
            v = v > 0.0 ? std::pow(v, tilt) * season : 0.0;
            v += peer_rng.uniform(-0.04, 0.04) * (v > 0.0 ? 1.0 : 0.0);
            series.push_back(std::clamp(v, 0.0, 1.0));
          }
        } else {
          double w = peer_rng.uniform(0.3, 0.7);
          for (int t = 0; t < spec.steps; ++t) {
            w = std::clamp(w + peer_rng.uniform(-0.09, 0.09), 0.02, 1.0);
            series.push_back(w);
          }
        }
        break;
      }
      case PeerKind::dispatchable:
        for (int t = 0; t < spec.steps; ++t) series.push_back(1.0);
        break;
    }
  }

  return data;
}

}  // namespace peermarket
