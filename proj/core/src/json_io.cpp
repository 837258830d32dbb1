#include <fstream>
#include <sstream>

#include <json.hpp>

#include "csv_util.hpp"
#include "peermarket/clearing.hpp"
#include "peermarket/harness.hpp"
#include "peermarket/model.hpp"

namespace peermarket {

using ordered_json = nlohmann::ordered_json;

namespace {

double bound_from_json(const ordered_json& j, double infinity) {
  if (j.is_null()) return infinity;
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf" || s == "+inf") return kInf;
    if (s == "-inf") return -kInf;
    throw ParseError("bounds: expected number, null, or \"[-+]inf\", got '" +
                     s + "'");
  }
  if (!j.is_number()) throw ParseError("bounds: expected a number");
  return j.get<double>();
}

ordered_json bound_to_json(double v) {
  if (v == kInf || v == -kInf) return nullptr;
  return v;
}

PeerRole role_from_string(const std::string& s) {
  if (s == "producer") return PeerRole::producer;
  if (s == "consumer") return PeerRole::consumer;
  if (s == "grid") return PeerRole::grid;
  throw ParseError("unknown peer role: '" + s + "'");
}

ExternalCostTerm term_from_json(const ordered_json& j) {
  ExternalCostTerm term;
  term.quadratic = j.value("quadratic", 0.0);
  term.linear = j.value("linear", 0.0);
  return term;
}

MarketInstance instance_from_json(const ordered_json& doc) {
  if (!doc.is_object()) throw ParseError("instance: expected a JSON object");
  MarketInstance inst;

  if (doc.contains("design"))
    inst.design = design_from_string(doc.at("design").get<std::string>());
  if (doc.contains("grid")) {
    const auto& g = doc.at("grid");
    inst.grid.price = g.value("price", 0.0);
    inst.grid.tariff = g.value("tariff", 0.0);
  }

  if (!doc.contains("peers") || !doc.at("peers").is_array())
    throw ParseError("instance: missing 'peers' array");
  for (const auto& pj : doc.at("peers")) {
    Peer peer;
    peer.id = pj.at("id").get<std::string>();
    peer.role = role_from_string(pj.at("role").get<std::string>());
    peer.bus = pj.value("bus", 0);
    if (pj.contains("community") && !pj.at("community").is_null())
      peer.community = pj.at("community").get<std::string>();
    if (pj.contains("cost")) {
      const auto& c = pj.at("cost");
      peer.cost.a = c.value("a", 0.0);
      peer.cost.b = c.value("b", 0.0);
      peer.cost.c = c.value("c", 0.0);
    }
    if (pj.contains("bounds") && !pj.at("bounds").is_null()) {
      const auto& b = pj.at("bounds");
      if (b.contains("lower")) peer.bounds.lower = bound_from_json(b.at("lower"), -kInf);
      if (b.contains("upper")) peer.bounds.upper = bound_from_json(b.at("upper"), kInf);
    }
    peer.must_take = pj.value("must_take", false);
    inst.peers.push_back(std::move(peer));
  }

  if (doc.contains("communities")) {
    for (const auto& cj : doc.at("communities")) {
      CommunitySpec spec;
      spec.id = cj.at("id").get<std::string>();
      for (const auto& m : cj.at("members"))
        spec.members.push_back(m.get<std::string>());
      spec.internal_fee = cj.value("internal_fee", 0.0);
      spec.import_weight = cj.value("import_weight", 0.0);
      spec.export_weight = cj.value("export_weight", 0.0);
      if (cj.contains("external_cost") && !cj.at("external_cost").is_null()) {
        const auto& g = cj.at("external_cost");
        ExternalCost cost;
        if (g.contains("import")) cost.import_term = term_from_json(g.at("import"));
        if (g.contains("export")) cost.export_term = term_from_json(g.at("export"));
        spec.external_cost = cost;
      }
      inst.communities.push_back(std::move(spec));
    }
  }

  if (doc.contains("transaction_costs")) {
    const auto& t = doc.at("transaction_costs");
    inst.tx_costs.per_trade_fee = t.value("per_trade_fee", 0.0);
    if (t.contains("inter_community_fees")) {
      for (const auto& fj : t.at("inter_community_fees")) {
        const auto& pair = fj.at("pair");
        if (!pair.is_array() || pair.size() != 2)
          throw ParseError("inter_community_fees: 'pair' must name two ids");
        inst.tx_costs.set_inter_community_fee(pair[0].get<std::string>(),
                                              pair[1].get<std::string>(),
                                              fj.at("fee").get<double>());
      }
    }
  }

  // Normalization: membership lists are authoritative for peer labels, and
  // the grid peer's linear cost is the instance market price.
  for (const CommunitySpec& c : inst.communities) {
    for (const std::string& m : c.members) {
      for (Peer& p : inst.peers)
        if (p.id == m && !p.community) p.community = c.id;
    }
  }
  for (Peer& p : inst.peers) {
    if (p.role == PeerRole::grid) {
      p.cost.a = 0.0;
      p.cost.b = inst.grid.price;
    }
  }

  inst.partner_graph = PartnerGraph::default_graph(inst.peers);
  return inst;
}

}  // namespace

MarketInstance build_instance(const std::string& json_text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("instance JSON: ") + e.what());
  }
  MarketInstance inst;
  try {
    inst = instance_from_json(doc);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("instance JSON: ") + e.what());
  }
  if (auto errors = validate(inst); !errors.empty())
    throw ValidationFailure(std::move(errors));
  return inst;
}

MarketInstance build_instance_from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return build_instance(ss.str());
}

std::string to_json(const MarketInstance& inst, int indent) {
  ordered_json doc;
  doc["design"] = to_string(inst.design);
  doc["grid"] = {{"price", inst.grid.price}, {"tariff", inst.grid.tariff}};
  doc["peers"] = ordered_json::array();
  for (const Peer& p : inst.peers) {
    ordered_json pj;
    pj["id"] = p.id;
    pj["role"] = to_string(p.role);
    pj["bus"] = p.bus;
    if (p.community) pj["community"] = *p.community;
    pj["cost"] = {{"a", p.cost.a}, {"b", p.cost.b}, {"c", p.cost.c}};
    pj["bounds"] = {{"lower", bound_to_json(p.bounds.lower)},
                    {"upper", bound_to_json(p.bounds.upper)}};
    pj["must_take"] = p.must_take;
    doc["peers"].push_back(std::move(pj));
  }
  doc["communities"] = ordered_json::array();
  for (const CommunitySpec& c : inst.communities) {
    ordered_json cj;
    cj["id"] = c.id;
    cj["members"] = c.members;
    cj["internal_fee"] = c.internal_fee;
    cj["import_weight"] = c.import_weight;
    cj["export_weight"] = c.export_weight;
    if (c.external_cost) {
      cj["external_cost"] = {
          {"import",
           {{"quadratic", c.external_cost->import_term.quadratic},
            {"linear", c.external_cost->import_term.linear}}},
          {"export",
           {{"quadratic", c.external_cost->export_term.quadratic},
            {"linear", c.external_cost->export_term.linear}}}};
    }
    doc["communities"].push_back(std::move(cj));
  }
  ordered_json fees = ordered_json::array();
  for (const auto& [pair, fee] : inst.tx_costs.inter_community_fees)
    fees.push_back({{"pair", {pair.first, pair.second}}, {"fee", fee}});
  doc["transaction_costs"] = {
      {"per_trade_fee", inst.tx_costs.per_trade_fee},
      {"inter_community_fees", std::move(fees)}};
  return doc.dump(indent);
}

std::string to_json(const ClearingResult& result, int indent) {
  ordered_json doc;
  doc["design"] = to_string(result.design);
  doc["status"] = qp::to_string(result.status);
  doc["objective_value"] = result.objective_value;
  doc["social_welfare"] = result.social_welfare;
  doc["transaction_cost_total"] = result.transaction_cost_total;
  doc["iterations"] = result.iterations;
  doc["kkt_residuals"] = {
      {"primal_eq", result.kkt_residuals.primal_eq},
      {"stationarity", result.kkt_residuals.stationarity},
      {"complementarity", result.kkt_residuals.complementarity}};

  ordered_json trades = ordered_json::array();
  for (const auto& [pair, entry] : result.trades.pairs()) {
    if (entry.quantity_mw == 0.0) continue;
    const bool forward = entry.quantity_mw >= 0.0;
    trades.push_back({{"from", forward ? pair.first : pair.second},
                      {"to", forward ? pair.second : pair.first},
                      {"mw", std::abs(entry.quantity_mw)},
                      {"price", entry.price}});
  }
  doc["trades"] = std::move(trades);

  ordered_json decisions = ordered_json::array();
  for (const CommunityDecision& d : result.community_decisions) {
    ordered_json dj;
    dj["community"] = d.community_id;
    dj["import_total_mw"] = d.import_total_mw;
    dj["export_total_mw"] = d.export_total_mw;
    ordered_json members = ordered_json::array();
    for (const auto& [id, m] : d.members) {
      members.push_back({{"id", id},
                         {"own_mw", m.own_mw},
                         {"pool_mw", m.pool_mw},
                         {"import_mw", m.import_mw},
                         {"export_mw", m.export_mw}});
    }
    dj["members"] = std::move(members);
    decisions.push_back(std::move(dj));
  }
  doc["community_decisions"] = std::move(decisions);

  ordered_json net;
  for (const auto& [id, mw] : result.net_injection_mw) net[id] = mw;
  doc["net_injection_mw"] = std::move(net);

  doc["welfare_decomposition"] = {
      {"generation_cost", result.welfare.generation_cost},
      {"consumer_utility", result.welfare.consumer_utility},
      {"transaction_costs", result.welfare.transaction_costs},
      {"grid_exchange_cost", result.welfare.grid_exchange_cost},
      {"includes_import_export_weights",
       result.welfare.includes_import_export_weights}};
  return doc.dump(indent);
}

std::string to_json(const HorizonReport& report, int indent) {
  ordered_json doc;
  doc["design"] = to_string(report.design);
  doc["step_minutes"] = report.step_minutes;
  doc["num_steps"] = report.steps.size();
  doc["totals"] = {
      {"social_welfare", report.totals.social_welfare},
      {"import_cost", report.totals.import_cost},
      {"export_revenue", report.totals.export_revenue},
      {"total_load_mwh", report.totals.load_mwh},
      {"total_import_mwh", report.totals.import_mwh},
      {"total_export_mwh", report.totals.export_mwh},
      {"community_exchange_mwh", report.totals.community_exchange_mwh},
      {"transaction_cost", report.totals.transaction_cost},
      {"total_production_mwh", report.totals.production_mwh}};
  doc["skipped_steps"] = report.skipped_steps;

  ordered_json steps = ordered_json::array();
  for (std::size_t t = 0; t < report.steps.size(); ++t) {
    const StepSummary& s = report.steps[t];
    steps.push_back({{"step", s.step},
                     {"timestamp", report.timestamps[t]},
                     {"status", qp::to_string(s.status)},
                     {"skipped", s.skipped},
                     {"welfare", s.welfare},
                     {"production_mwh", s.production_mwh},
                     {"load_mwh", s.load_mwh},
                     {"import_mwh", s.import_mwh},
                     {"export_mwh", s.export_mwh},
                     {"community_exchange_mwh", s.community_exchange_mwh},
                     {"import_cost", s.import_cost},
                     {"export_revenue", s.export_revenue},
                     {"transaction_cost", s.transaction_cost},
                     {"kkt_max", s.kkt_max}});
  }
  doc["steps"] = std::move(steps);
  return doc.dump(indent);
}

std::string report_to_csv(const HorizonReport& report) {
  std::ostringstream os;
  os << "step,timestamp,status,welfare,production_mwh,load_mwh,import_mwh,"
        "export_mwh,community_exchange_mwh,import_cost,export_revenue,"
        "transaction_cost,kkt_max\n";
  auto f = detail::format_double;
  for (std::size_t t = 0; t < report.steps.size(); ++t) {
    const StepSummary& s = report.steps[t];
    os << s.step << ',' << report.timestamps[t] << ','
       << (s.skipped ? "skipped" : qp::to_string(s.status)) << ','
       << f(s.welfare) << ',' << f(s.production_mwh) << ',' << f(s.load_mwh)
       << ',' << f(s.import_mwh) << ',' << f(s.export_mwh) << ','
       << f(s.community_exchange_mwh) << ',' << f(s.import_cost) << ','
       << f(s.export_revenue) << ',' << f(s.transaction_cost) << ','
       << f(s.kkt_max) << '\n';
  }
  const auto& a = report.totals;
  os << "TOTAL,,," << f(a.social_welfare) << ',' << f(a.production_mwh) << ','
     << f(a.load_mwh) << ',' << f(a.import_mwh) << ',' << f(a.export_mwh)
     << ',' << f(a.community_exchange_mwh) << ',' << f(a.import_cost) << ','
     << f(a.export_revenue) << ',' << f(a.transaction_cost) << ",\n";
  return os.str();
}

}  // namespace peermarket
