#include <doctest.h>

#include <cmath>

#include "peermarket/harness.hpp"
#include "peermarket/timeseries.hpp"
#include "support/fixtures.hpp"

using namespace peermarket;

namespace {

const char* kToyInstance = R"({
  "design": "full_p2p",
  "grid": {"price": 30, "tariff": 10},
  "peers": [
    {"id": "pv", "role": "producer", "bounds": {"lower": 4, "upper": 4},
     "must_take": true},
    {"id": "load", "role": "consumer", "cost": {"a": 0.2, "b": 80, "c": 0},
     "bounds": {"lower": -6, "upper": 0}},
    {"id": "grid", "role": "grid"}
  ]
})";

TimeSeriesBundle toy_bundle(std::vector<double> pv,
                            std::vector<double> load,
                            std::vector<double> prices) {
  TimeSeriesBundle bundle;
  bundle.step_minutes = 30.0;
  for (std::size_t t = 0; t < pv.size(); ++t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "2013-06-01T%02zu:%02zu:00", t / 2,
                  (t % 2) * 30);
    bundle.timestamps.push_back(buf);
  }
  bundle.profiles["pv"] = std::move(pv);
  bundle.profiles["load"] = std::move(load);
  bundle.prices = std::move(prices);
  bundle.capacities["pv"] = 4.0;
  bundle.capacities["load"] = 6.0;
  return bundle;
}

}  // namespace

TEST_CASE("ingest scales must-take bounds by capacity times profile") {
  const std::string profiles =
      "timestamp,pv\n"
      "2013-06-01T00:00:00,0.0\n"
      "2013-06-01T00:30:00,1.0\n";
  const std::string prices =
      "timestamp,price\n"
      "2013-06-01T00:00:00,30\n"
      "2013-06-01T00:30:00,50\n";
  IngestResult in = ingest_text(profiles, prices, kToyInstance);
  CHECK(in.bundle.step_minutes == 30.0);
  CHECK(in.bundle.capacities.at("pv") == 4.0);

  HorizonReport report =
      simulate(in.bundle, in.instance, MarketDesign::full_p2p);
  // Step 0: no sun, nothing produced; step 1: the full 4 MW for half an hour.
  CHECK(report.steps[0].production_mwh == doctest::Approx(0.0));
  CHECK(report.steps[1].production_mwh == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("ingest rejects the documented malformed inputs") {
  const std::string good_prices =
      "timestamp,price\n2013-06-01T00:00:00,30\n2013-06-01T00:30:00,50\n";

  SUBCASE("profile out of range") {
    const std::string profiles =
        "timestamp,pv\n2013-06-01T00:00:00,0.4\n2013-06-01T00:30:00,1.2\n";
    CHECK_THROWS_WITH_AS(ingest_text(profiles, good_prices, kToyInstance),
                         doctest::Contains("ValueOutOfRange"), IngestError);
  }
  SUBCASE("length mismatch") {
    const std::string profiles = "timestamp,pv\n2013-06-01T00:00:00,0.4\n";
    CHECK_THROWS_WITH_AS(ingest_text(profiles, good_prices, kToyInstance),
                         doctest::Contains("LengthMismatch"), IngestError);
  }
  SUBCASE("unknown peer column") {
    const std::string profiles =
        "timestamp,ufo\n2013-06-01T00:00:00,0.4\n2013-06-01T00:30:00,0.5\n";
    CHECK_THROWS_WITH_AS(ingest_text(profiles, good_prices, kToyInstance),
                         doctest::Contains("UnknownPeer"), IngestError);
  }
  SUBCASE("non-uniform timestep") {
    const std::string profiles =
        "timestamp,pv\n2013-06-01T00:00:00,0.4\n2013-06-01T00:30:00,0.5\n"
        "2013-06-01T00:59:00,0.6\n";
    const std::string prices =
        "timestamp,price\n2013-06-01T00:00:00,30\n2013-06-01T00:30:00,50\n"
        "2013-06-01T00:59:00,50\n";
    CHECK_THROWS_WITH_AS(ingest_text(profiles, prices, kToyInstance),
                         doctest::Contains("NonUniformTimestep"), IngestError);
  }
  SUBCASE("ragged row") {
    const std::string profiles =
        "timestamp,pv\n2013-06-01T00:00:00,0.4,9\n2013-06-01T00:30:00,1\n";
    CHECK_THROWS_WITH_AS(ingest_text(profiles, good_prices, kToyInstance),
                         doctest::Contains("MalformedCsv"), IngestError);
  }
}

TEST_CASE("grid import price follows market price plus tariff") {
  // No local generation: the consumer can only import from the grid.
  TimeSeriesBundle bundle =
      toy_bundle({0.0, 0.0}, {1.0, 1.0}, {30.0, 50.0});
  MarketInstance inst = build_instance(kToyInstance);
  HorizonReport report = simulate(bundle, inst, MarketDesign::full_p2p);

  for (int t : {0, 1}) {
    const StepSummary& s = report.steps[t];
    REQUIRE(s.import_mwh > 0.1);
    const double effective = s.import_cost / s.import_mwh;
    CHECK(effective == doctest::Approx(t == 0 ? 40.0 : 60.0).epsilon(1e-9));
  }
}

TEST_CASE("all-zero profiles clear to all-zero aggregates") {
  TimeSeriesBundle bundle = toy_bundle({0.0, 0.0}, {0.0, 0.0}, {30.0, 50.0});
  MarketInstance inst = build_instance(kToyInstance);
  HorizonReport report = simulate(bundle, inst, MarketDesign::full_p2p);
  CHECK(report.totals.social_welfare == doctest::Approx(0.0));
  CHECK(report.totals.load_mwh == doctest::Approx(0.0));
  CHECK(report.totals.import_mwh == doctest::Approx(0.0));
  CHECK(report.totals.export_mwh == doctest::Approx(0.0));
  CHECK(report.totals.transaction_cost == doctest::Approx(0.0));
}

TEST_CASE("bilateral oracle horizon accumulates energy-scaled welfare") {
  MarketInstance inst = testfix::bilateral();
  TimeSeriesBundle bundle;
  bundle.step_minutes = 30.0;
  bundle.timestamps = {"2013-06-01T00:00:00", "2013-06-01T00:30:00"};
  bundle.prices = {30.0, 30.0};
  // No profiles: static bounds repeat each step.
  HorizonReport report = simulate(bundle, inst, MarketDesign::full_p2p);
  CHECK(report.totals.social_welfare == doctest::Approx(25.0).epsilon(1e-6));
  CHECK(report.steps[0].welfare == doctest::Approx(12.5).epsilon(1e-6));
}

TEST_CASE("trade breakdown of the bilateral step") {
  MarketInstance inst = testfix::bilateral();
  TimeSeriesBundle bundle;
  bundle.step_minutes = 30.0;
  bundle.timestamps = {"2013-06-01T00:00:00"};
  bundle.prices = {30.0};
  HorizonReport report = simulate(bundle, inst, MarketDesign::full_p2p);

  auto buyer_view = trade_breakdown(report, "buyer", 0, 1);
  REQUIRE(buyer_view.size() == 1);
  REQUIRE(buyer_view[0].size() == 1);
  CHECK(buyer_view[0].at("seller") == doctest::Approx(2.5).epsilon(1e-6));

  auto seller_view = trade_breakdown(report, "seller", 0, 1);
  CHECK(seller_view[0].at("buyer") == doctest::Approx(2.5).epsilon(1e-6));

  CHECK_THROWS_WITH_AS(trade_breakdown(report, "ufo", 0, 1),
                       doctest::Contains("UnknownPeer"), BreakdownError);
  CHECK_THROWS_WITH_AS(trade_breakdown(report, "buyer", 0, 2),
                       doctest::Contains("WindowOutOfRange"), BreakdownError);
}

TEST_CASE("breakdown sums equal consumption across designs") {
  SyntheticSpec spec;
  spec.seed = 5;
  spec.num_peers = 9;
  spec.num_communities = 3;
  spec.steps = 8;
  SyntheticData data = gen_synthetic(spec);

  for (MarketDesign design : {MarketDesign::full_p2p, MarketDesign::community,
                              MarketDesign::hybrid}) {
    HorizonReport report = simulate(data.bundle, data.instance, design);
    std::string consumer;
    for (const Peer& p : data.instance.peers)
      if (p.role == PeerRole::consumer) consumer = p.id;
    REQUIRE(!consumer.empty());
    auto view = trade_breakdown(report, consumer, 0, 8);
    const auto& profile = data.bundle.profiles.at(consumer);
    const double cap = data.bundle.capacities.at(consumer);
    for (int t = 0; t < 8; ++t) {
      double sum = 0.0;
      for (const auto& [partner, mwh] : view[t]) sum += mwh;
      // Elastic consumers never exceed capacity*profile; the breakdown must
      // sum to the consumption the clearing actually chose.
      CHECK(sum <= cap * profile[t] * 0.5 + 1e-6);
      CHECK(sum >= -1e-9);
    }
  }
}

TEST_CASE("must-take injections are absorbed exactly") {
  SyntheticSpec spec;
  spec.seed = 9;
  spec.num_peers = 8;
  spec.num_communities = 2;
  spec.steps = 6;
  SyntheticData data = gen_synthetic(spec);
  HorizonReport report =
      simulate(data.bundle, data.instance, MarketDesign::full_p2p);

  for (const Peer& p : data.instance.peers) {
    if (!p.must_take) continue;
    auto view = trade_breakdown(report, p.id, 0, spec.steps);
    const auto& profile = data.bundle.profiles.at(p.id);
    const double cap = data.bundle.capacities.at(p.id);
    for (int t = 0; t < spec.steps; ++t) {
      double sum = 0.0;
      for (const auto& [partner, mwh] : view[t]) sum += mwh;
      // The fixed net injection is exact; the trades summing to it carry
      // the solver's primal residual.
      CHECK(std::abs(sum - cap * profile[t] * 0.5) <= 1e-6);
    }
  }
}

TEST_CASE("energy conservation holds step by step in every design") {
  SyntheticSpec spec;
  spec.seed = 21;
  spec.num_peers = 12;
  spec.num_communities = 3;
  spec.steps = 16;
  SyntheticData data = gen_synthetic(spec);

  for (MarketDesign design : {MarketDesign::full_p2p, MarketDesign::community,
                              MarketDesign::hybrid}) {
    HorizonReport report = simulate(data.bundle, data.instance, design);
    const double h = report.hours_per_step();
    for (const StepSummary& s : report.steps) {
      CHECK(s.status == qp::SolveStatus::optimal);
      CHECK(s.kkt_max <= 1e-6);
      const double imbalance = s.production_mwh - s.load_mwh -
                               s.export_mwh + s.import_mwh;
      CHECK(std::abs(imbalance) <= 1e-6 * h);
    }
  }
}

TEST_CASE("report aggregates equal recomputed per-step sums") {
  SyntheticSpec spec;
  spec.seed = 33;
  spec.num_peers = 10;
  spec.num_communities = 2;
  spec.steps = 12;
  SyntheticData data = gen_synthetic(spec);
  HorizonReport report =
      simulate(data.bundle, data.instance, MarketDesign::hybrid);

  HorizonReport::Totals sums;
  for (const StepSummary& s : report.steps) {
    sums.social_welfare += s.welfare;
    sums.import_cost += s.import_cost;
    sums.export_revenue += s.export_revenue;
    sums.load_mwh += s.load_mwh;
    sums.import_mwh += s.import_mwh;
    sums.export_mwh += s.export_mwh;
    sums.community_exchange_mwh += s.community_exchange_mwh;
    sums.transaction_cost += s.transaction_cost;
    sums.production_mwh += s.production_mwh;
  }
  CHECK(report.totals.social_welfare ==
        doctest::Approx(sums.social_welfare).epsilon(1e-9));
  CHECK(report.totals.load_mwh == doctest::Approx(sums.load_mwh).epsilon(1e-9));
  CHECK(report.totals.import_mwh ==
        doctest::Approx(sums.import_mwh).epsilon(1e-9));
  CHECK(report.totals.transaction_cost ==
        doctest::Approx(sums.transaction_cost).epsilon(1e-9));
}

TEST_CASE("community design never exchanges energy across communities") {
  SyntheticSpec spec;
  spec.seed = 3;
  spec.num_peers = 10;
  spec.num_communities = 3;
  spec.steps = 10;
  SyntheticData data = gen_synthetic(spec);
  HorizonReport report =
      simulate(data.bundle, data.instance, MarketDesign::community);
  CHECK(report.totals.community_exchange_mwh == 0.0);
}

TEST_CASE("synthetic generation is deterministic and valid") {
  SyntheticSpec spec;
  spec.seed = 42;
  spec.num_peers = 19;
  spec.num_communities = 3;
  spec.steps = 24;
  SyntheticData a = gen_synthetic(spec);
  SyntheticData b = gen_synthetic(spec);
  CHECK(a.instance == b.instance);
  CHECK(a.bundle.prices == b.bundle.prices);
  CHECK(a.bundle.profiles == b.bundle.profiles);
  CHECK(a.bundle.timestamps == b.bundle.timestamps);

  // The benchmark layout: 19 peers in 3 communities plus the grid peer.
  CHECK(a.instance.peers.size() == 20);
  CHECK(a.instance.communities.size() == 3);
  std::size_t members = 0;
  for (const auto& c : a.instance.communities) members += c.members.size();
  CHECK(members == 19);
  CHECK(a.instance.grid_peer() != nullptr);
  CHECK(validate(a.instance).empty());

  CHECK(a.instance.tx_costs.per_trade_fee == 0.001);
  CHECK(a.instance.grid.tariff == 10.0);
  CHECK(a.instance.tx_costs.inter_community_fee("c1", "c2") == 2.0);
  CHECK(a.instance.tx_costs.inter_community_fee("c1", "c3") == 1.0);
  CHECK(a.instance.tx_costs.inter_community_fee("c2", "c3") == 1.5);

  SyntheticSpec other = spec;
  other.seed = 43;
  SyntheticData c = gen_synthetic(other);
  CHECK(c.bundle.prices != a.bundle.prices);
}

TEST_CASE("infeasible steps abort by default and can be skipped") {
  // A must-take producer with no grid and a consumer too small at step 1.
  MarketInstance inst;
  Peer pv;
  pv.id = "pv";
  pv.role = PeerRole::producer;
  pv.must_take = true;
  pv.bounds = PowerBounds::fixed(2.0);
  Peer load;
  load.id = "load";
  load.role = PeerRole::consumer;
  load.cost = {0.1, 50.0, 0.0};
  load.bounds = {-4.0, 0.0};
  inst.peers = {pv, load};
  inst.partner_graph = PartnerGraph::default_graph(inst.peers);

  TimeSeriesBundle bundle;
  bundle.step_minutes = 30.0;
  bundle.timestamps = {"2013-06-01T00:00:00", "2013-06-01T00:30:00",
                       "2013-06-01T01:00:00"};
  bundle.prices = {30.0, 30.0, 30.0};
  bundle.profiles["pv"] = {0.5, 1.0, 0.25};
  bundle.profiles["load"] = {1.0, 0.1, 1.0};  // step 1 cannot absorb 2 MW
  bundle.capacities["pv"] = 2.0;
  bundle.capacities["load"] = 4.0;

  CHECK_THROWS_WITH_AS(simulate(bundle, inst, MarketDesign::full_p2p),
                       doctest::Contains("step 1"), InfeasibleError);

  SimulateOptions opts;
  opts.skip_infeasible = true;
  HorizonReport report = simulate(bundle, inst, MarketDesign::full_p2p, opts);
  CHECK(report.skipped_steps == std::vector<int>{1});
  CHECK(report.steps[1].skipped);
  CHECK(report.steps[0].status == qp::SolveStatus::optimal);
  CHECK(report.steps[2].status == qp::SolveStatus::optimal);
}

TEST_CASE("simulation output does not depend on the worker count") {
  SyntheticSpec spec;
  spec.seed = 99;
  spec.num_peers = 8;
  spec.num_communities = 2;
  spec.steps = 130;  // crosses the 64-step task boundary
  SyntheticData data = gen_synthetic(spec);

  SimulateOptions serial;
  serial.workers = 1;
  SimulateOptions parallel;
  parallel.workers = 4;
  HorizonReport a = simulate(data.bundle, data.instance,
                             MarketDesign::full_p2p, serial);
  HorizonReport b = simulate(data.bundle, data.instance,
                             MarketDesign::full_p2p, parallel);
  CHECK(to_json(a, 2) == to_json(b, 2));
}
