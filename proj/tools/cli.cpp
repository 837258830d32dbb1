#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "peermarket/clearing.hpp"
#include "peermarket/harness.hpp"
#include "peermarket/model.hpp"
#include "peermarket/negotiation.hpp"
#include "peermarket/qp.hpp"
#include "peermarket/timeseries.hpp"

namespace peermarket::cli {

namespace {

using ordered_json = nlohmann::ordered_json;

struct CliError {
  int exit_code;
  std::string diagnostic;  // JSON written to stderr
};

void write_output(const std::string& text, const std::string& out_path,
                  std::ostream& out) {
  if (out_path.empty()) {
    out << text;
    if (!text.empty() && text.back() != '\n') out << '\n';
    return;
  }
  std::ofstream f(out_path, std::ios::binary);
  if (!f) throw ParseError("cannot write to: " + out_path);
  f << text;
}

std::string diagnostic_json(const std::string& kind, const std::string& what) {
  ordered_json d;
  d["error"] = kind;
  d["detail"] = what;
  return d.dump(2);
}

/// Table-3/Table-4 shaped row for one design.
struct DesignRow {
  double social_welfare = 0.0;
  double import_cost = 0.0;
  double export_revenue = 0.0;
  double load = 0.0;
  double import_energy = 0.0;
  double export_energy = 0.0;
  double exchange = 0.0;
  double transaction_cost = 0.0;
};

DesignRow row_from_result(const MarketInstance& inst,
                          const ClearingResult& result) {
  DesignRow row;
  row.social_welfare = result.social_welfare;
  row.transaction_cost = result.transaction_cost_total;
  std::map<std::string, std::string> community_of;
  for (const CommunitySpec& c : inst.communities)
    for (const std::string& m : c.members) community_of[m] = c.id;

  const Peer* grid = inst.grid_peer();
  for (const auto& [id, mw] : result.net_injection_mw) {
    const Peer* peer = inst.find_peer(id);
    if (peer && peer->role != PeerRole::grid) row.load += std::max(-mw, 0.0);
  }
  if (grid) {
    for (const auto& [pair, entry] : result.trades.pairs()) {
      if (pair.first != grid->id && pair.second != grid->id) continue;
      const double from_grid = result.trades.trade(grid->id,
                                                   pair.first == grid->id
                                                       ? pair.second
                                                       : pair.first);
      row.import_energy += std::max(from_grid, 0.0);
      row.export_energy += std::max(-from_grid, 0.0);
      row.import_cost += inst.grid.import_price() * std::max(from_grid, 0.0);
      row.export_revenue +=
          inst.grid.export_price() * std::max(-from_grid, 0.0);
    }
  }
  if (result.design == MarketDesign::community) {
    row.import_cost = 0.0;
    row.export_revenue = 0.0;
    row.import_energy = 0.0;
    row.export_energy = 0.0;
    for (const CommunityDecision& d : result.community_decisions) {
      const CommunitySpec* spec = inst.find_community(d.community_id);
      const ExternalCost g = inst.external_cost_for(*spec);
      row.import_energy += d.import_total_mw;
      row.export_energy += d.export_total_mw;
      row.import_cost += g.import_term.quadratic * d.import_total_mw *
                             d.import_total_mw +
                         g.import_term.linear * d.import_total_mw;
      row.export_revenue -= g.export_term.quadratic * d.export_total_mw *
                                d.export_total_mw +
                            g.export_term.linear * d.export_total_mw;
    }
  }
  for (const auto& [pair, entry] : result.trades.pairs()) {
    std::string ca, cb;
    if (result.design == MarketDesign::hybrid) {
      if (inst.find_community(pair.first)) ca = pair.first;
      if (inst.find_community(pair.second)) cb = pair.second;
    } else {
      auto ita = community_of.find(pair.first);
      auto itb = community_of.find(pair.second);
      if (ita != community_of.end()) ca = ita->second;
      if (itb != community_of.end()) cb = itb->second;
    }
    if (!ca.empty() && !cb.empty() && ca != cb)
      row.exchange += std::abs(entry.quantity_mw);
  }
  return row;
}

DesignRow row_from_report(const HorizonReport& report) {
  DesignRow row;
  row.social_welfare = report.totals.social_welfare;
  row.import_cost = report.totals.import_cost;
  row.export_revenue = report.totals.export_revenue;
  row.load = report.totals.load_mwh;
  row.import_energy = report.totals.import_mwh;
  row.export_energy = report.totals.export_mwh;
  row.exchange = report.totals.community_exchange_mwh;
  row.transaction_cost = report.totals.transaction_cost;
  return row;
}

ordered_json row_to_json(MarketDesign design, const DesignRow& row) {
  ordered_json j;
  j["design"] = to_string(design);
  j["Total SW"] = row.social_welfare;
  j["Import cost"] = row.import_cost;
  j["Export revenue"] = row.export_revenue;
  j["Total load"] = row.load;
  j["Total import"] = row.import_energy;
  j["Total export"] = row.export_energy;
  j["Community exchange"] = row.exchange;
  j["Transaction cost"] = row.transaction_cost;
  return j;
}

std::string rows_to_csv(const std::vector<ordered_json>& rows) {
  std::ostringstream os;
  os << "design,Total SW,Import cost,Export revenue,Total load,"
        "Total import,Total export,Community exchange,Transaction cost\n";
  for (const auto& r : rows) {
    os << r.at("design").get<std::string>();
    for (const char* key :
         {"Total SW", "Import cost", "Export revenue", "Total load",
          "Total import", "Total export", "Community exchange",
          "Transaction cost"})
      os << ',' << ordered_json(r.at(key)).dump();
    os << '\n';
  }
  return os.str();
}

int run_impl(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"peer-to-peer electricity market clearing and simulation"};
  app.require_subcommand(1);

  std::string instance_path, profiles_path, prices_path, out_path;
  std::string design_str = "full_p2p", format = "json", community_id;
  std::string trace_path, out_dir = ".";
  double tol = 1e-6, rho = 1.0;
  int max_iter = 50000, workers = 0, steps = 48, peers = 19, communities = 3;
  double step_minutes = 30.0;
  std::uint64_t seed = 42;
  bool skip_infeasible = false;

  auto add_instance = [&](CLI::App* cmd) {
    cmd->add_option("--instance", instance_path, "instance JSON file")
        ->required();
  };
  auto add_solver = [&](CLI::App* cmd) {
    cmd->add_option("--tol", tol, "solver KKT tolerance");
    cmd->add_option("--max-iter", max_iter, "solver iteration cap");
  };

  CLI::App* validate_cmd = app.add_subcommand("validate", "check an instance");
  add_instance(validate_cmd);

  CLI::App* clear_cmd =
      app.add_subcommand("clear", "centralized clearing of one instance");
  add_instance(clear_cmd);
  clear_cmd->add_option("--design", design_str,
                        "full_p2p | community | hybrid (default: instance)");
  add_solver(clear_cmd);
  clear_cmd->add_option("--out", out_path, "output file (default: stdout)");

  CLI::App* negotiate_cmd = app.add_subcommand(
      "negotiate", "decentralized clearing with per-round trace");
  add_instance(negotiate_cmd);
  negotiate_cmd->add_option("--design", design_str, "full_p2p | community");
  negotiate_cmd->add_option("--community", community_id,
                            "community id (community design only)");
  negotiate_cmd->add_option("--rho", rho, "consensus penalty");
  negotiate_cmd->add_option("--tol", tol, "primal/dual tolerance");
  negotiate_cmd->add_option("--max-iter", max_iter, "round cap");
  negotiate_cmd->add_option("--trace", trace_path, "trace CSV path");
  negotiate_cmd->add_option("--out", out_path, "output file");

  CLI::App* simulate_cmd =
      app.add_subcommand("simulate", "clear a time-series horizon");
  add_instance(simulate_cmd);
  simulate_cmd->add_option("--profiles", profiles_path, "profiles CSV")
      ->required();
  simulate_cmd->add_option("--prices", prices_path, "prices CSV")->required();
  simulate_cmd->add_option("--design", design_str, "market design");
  add_solver(simulate_cmd);
  simulate_cmd->add_flag("--skip-infeasible", skip_infeasible,
                         "record infeasible steps and continue");
  simulate_cmd->add_option("--workers", workers, "worker threads (0: auto)");
  simulate_cmd->add_option("--format", format, "json | csv");
  simulate_cmd->add_option("--out", out_path, "output file");

  CLI::App* compare_cmd = app.add_subcommand(
      "compare", "run all three designs and tabulate welfare and energy");
  add_instance(compare_cmd);
  compare_cmd->add_option("--profiles", profiles_path,
                          "profiles CSV (optional: single-interval otherwise)");
  compare_cmd->add_option("--prices", prices_path, "prices CSV");
  add_solver(compare_cmd);
  compare_cmd->add_flag("--skip-infeasible", skip_infeasible,
                        "record infeasible steps and continue");
  compare_cmd->add_option("--workers", workers, "worker threads");
  compare_cmd->add_option("--format", format, "json | csv");
  compare_cmd->add_option("--out", out_path, "output file");

  CLI::App* gen_cmd =
      app.add_subcommand("gen-data", "deterministic synthetic dataset");
  gen_cmd->add_option("--seed", seed, "RNG seed");
  gen_cmd->add_option("--peers", peers, "non-grid peer count");
  gen_cmd->add_option("--communities", communities, "community count");
  gen_cmd->add_option("--steps", steps, "number of intervals");
  gen_cmd->add_option("--step-minutes", step_minutes, "interval length");
  gen_cmd->add_option("--out-dir", out_dir, "output directory");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      out << app.help();
      return 0;
    }
    err << e.what() << '\n';
    return 1;
  }

  qp::SolveOptions solver_opts;
  solver_opts.tol = tol;
  solver_opts.max_iter = max_iter;

  if (app.got_subcommand(validate_cmd)) {
    MarketInstance inst = build_instance_from_file(instance_path);
    out << "ok: " << inst.peers.size() << " peers, "
        << inst.communities.size() << " communities, design "
        << to_string(inst.design) << '\n';
    return 0;
  }

  if (app.got_subcommand(clear_cmd)) {
    MarketInstance inst = build_instance_from_file(instance_path);
    if (clear_cmd->count("--design"))
      inst.design = design_from_string(design_str);
    ClearingResult result = clear(inst, solver_opts);
    write_output(to_json(result, 2), out_path, out);
    if (result.status != qp::SolveStatus::optimal)
      throw CliError{2, diagnostic_json("NotOptimal",
                                        qp::to_string(result.status))};
    return 0;
  }

  if (app.got_subcommand(negotiate_cmd)) {
    MarketInstance inst = build_instance_from_file(instance_path);
    NegotiationConfig cfg;
    cfg.rho = rho;
    cfg.tol_primal = negotiate_cmd->count("--tol") ? tol : cfg.tol_primal;
    cfg.tol_dual = cfg.tol_primal;
    cfg.max_rounds = negotiate_cmd->count("--max-iter") ? max_iter : 10000;
    const MarketDesign design = design_from_string(design_str);

    auto write_trace = [&](const NegotiationTrace& trace,
                           const std::string& path) {
      std::ofstream f(path, std::ios::binary);
      if (!f) throw ParseError("cannot write to: " + path);
      trace.write_csv(f);
    };

    if (design == MarketDesign::full_p2p) {
      auto [result, trace] = negotiate_full_p2p(inst, cfg);
      if (!trace_path.empty()) write_trace(trace, trace_path);
      write_output(to_json(result, 2), out_path, out);
      if (!trace.converged)
        throw CliError{2, diagnostic_json("MaxRoundsExceeded",
                                          "negotiation did not converge")};
      return 0;
    }
    if (design != MarketDesign::community)
      throw ParseError("negotiate supports --design full_p2p or community");

    std::vector<const CommunitySpec*> targets;
    if (!community_id.empty()) {
      const CommunitySpec* spec = inst.find_community(community_id);
      if (!spec)
        throw ValidationFailure({{ValidationCode::UnknownCommunity,
                                  community_id, "not in the instance"}});
      targets.push_back(spec);
    } else {
      for (const CommunitySpec& c : inst.communities) targets.push_back(&c);
    }
    ordered_json results = ordered_json::array();
    bool all_converged = true;
    for (const CommunitySpec* spec : targets) {
      auto [result, trace] = negotiate_community(inst, *spec, cfg);
      all_converged = all_converged && trace.converged;
      if (!trace_path.empty()) {
        std::string path = trace_path;
        if (targets.size() > 1) {
          const auto dot = path.rfind('.');
          path = dot == std::string::npos
                     ? path + "." + spec->id
                     : path.substr(0, dot) + "." + spec->id +
                           path.substr(dot);
        }
        write_trace(trace, path);
      }
      results.push_back(ordered_json::parse(to_json(result, 2)));
    }
    ordered_json doc;
    doc["communities"] = std::move(results);
    write_output(doc.dump(2), out_path, out);
    if (!all_converged)
      throw CliError{2, diagnostic_json("MaxRoundsExceeded",
                                        "negotiation did not converge")};
    return 0;
  }

  if (app.got_subcommand(simulate_cmd)) {
    IngestResult in = ingest(profiles_path, prices_path, instance_path);
    const MarketDesign design = simulate_cmd->count("--design")
                                    ? design_from_string(design_str)
                                    : in.instance.design;
    SimulateOptions opts;
    if (simulate_cmd->count("--tol")) opts.solver.tol = tol;
    if (simulate_cmd->count("--max-iter")) opts.solver.max_iter = max_iter;
    opts.skip_infeasible = skip_infeasible;
    opts.workers = workers;
    HorizonReport report = simulate(in.bundle, in.instance, design, opts);
    write_output(format == "csv" ? report_to_csv(report)
                                 : to_json(report, 2),
                 out_path, out);
    return 0;
  }

  if (app.got_subcommand(compare_cmd)) {
    std::vector<ordered_json> rows;
    const MarketDesign designs[] = {MarketDesign::full_p2p,
                                    MarketDesign::community,
                                    MarketDesign::hybrid};
    if (!profiles_path.empty() || !prices_path.empty()) {
      if (profiles_path.empty() || prices_path.empty())
        throw ParseError("compare needs both --profiles and --prices");
      IngestResult in = ingest(profiles_path, prices_path, instance_path);
      SimulateOptions opts;
      if (compare_cmd->count("--tol")) opts.solver.tol = tol;
      if (compare_cmd->count("--max-iter")) opts.solver.max_iter = max_iter;
      opts.skip_infeasible = skip_infeasible;
      opts.workers = workers;
      opts.keep_trades = false;
      for (MarketDesign d : designs) {
        HorizonReport report = simulate(in.bundle, in.instance, d, opts);
        rows.push_back(row_to_json(d, row_from_report(report)));
      }
    } else {
      MarketInstance inst = build_instance_from_file(instance_path);
      qp::SolveOptions opts = solver_opts;
      opts.polish = qp::SolveOptions::Polish::always;  // exact comparisons
      for (MarketDesign d : designs) {
        inst.design = d;
        ClearingResult result = clear(inst, opts);
        rows.push_back(row_to_json(d, row_from_result(inst, result)));
      }
    }
    if (format == "csv") {
      write_output(rows_to_csv(rows), out_path, out);
    } else {
      ordered_json doc;
      doc["designs"] = rows;
      write_output(doc.dump(2), out_path, out);
    }
    return 0;
  }

  if (app.got_subcommand(gen_cmd)) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.num_peers = peers;
    spec.num_communities = communities;
    spec.steps = steps;
    spec.step_minutes = step_minutes;
    SyntheticData data = gen_synthetic(spec);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    write_output(to_json(data.instance, 2),
                 (fs::path(out_dir) / "instance.json").string(), out);
    write_output(profiles_to_csv(data.bundle),
                 (fs::path(out_dir) / "profiles.csv").string(), out);
    write_output(prices_to_csv(data.bundle),
                 (fs::path(out_dir) / "prices.csv").string(), out);
    out << "wrote instance.json, profiles.csv, prices.csv to " << out_dir
        << '\n';
    return 0;
  }

  return 1;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
  try {
    return run_impl(args, out, err);
  } catch (const CliError& e) {
    err << e.diagnostic << '\n';
    return e.exit_code;
  } catch (const ValidationFailure& e) {
    err << diagnostic_json("ValidationFailure", e.what()) << '\n';
    return 1;
  } catch (const ParseError& e) {
    err << diagnostic_json("ParseError", e.what()) << '\n';
    return 1;
  } catch (const IngestError& e) {
    err << diagnostic_json("IngestError", e.what()) << '\n';
    return 1;
  } catch (const InvalidConfigError& e) {
    err << diagnostic_json("InvalidConfig", e.what()) << '\n';
    return 1;
  } catch (const InfeasibleError& e) {
    err << diagnostic_json("Infeasible", e.what()) << '\n';
    return 2;
  } catch (const NotOptimalError& e) {
    err << diagnostic_json("NotOptimal", e.what()) << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << diagnostic_json("Error", e.what()) << '\n';
    return 1;
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace peermarket::cli
