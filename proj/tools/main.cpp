#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xbarnas/cost.hpp"
#include "xbarnas/dataio.hpp"
#include "xbarnas/errors.hpp"
#include "xbarnas/model.hpp"
#include "xbarnas/net.hpp"
#include "xbarnas/report.hpp"
#include "xbarnas/search.hpp"
#include "xbarnas/xbar.hpp"
#include "xbarnas/xbar_layer.hpp"

namespace fs = std::filesystem;
using namespace xbarnas;

namespace {

struct Args {
  std::string net, hw, cost, search, data, out, models;
  int64_t seed = -1;  // -1 = keep the config's seed
  bool force = false;
  bool skip_failures = false;
  std::string mode = "nonideal";
  int64_t rows = 0, cols = 0, instances = 100;
  bool sweep = false;
};

void refuse_existing(const std::string& path, bool force) {
  if (!force && fs::exists(path))
    throw ConfigError(path + " already exists (use --force to overwrite)");
}

void echo(const std::string& cmd, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cout << "# xbarnas " << cmd << "\n";
  for (const auto& [k, v] : kv)
    if (!v.empty()) std::cout << "# " << k << ": " << v << "\n";
}

CrossbarConfig load_hw(const Args& a) {
  CrossbarConfig hw = CrossbarConfig::from_file(a.hw);
  hw.validate();
  return hw;
}

ComponentCosts load_costs(const Args& a) {
  ComponentCosts c = ComponentCosts::from_config(KeyValueConfig::from_file(a.cost));
  c.validate();
  return c;
}

int cmd_gen(const Args& a) {
  SyntheticTaskSpec spec = SyntheticTaskSpec::from_config(KeyValueConfig::from_file(a.data));
  if (a.seed >= 0) spec.seed = static_cast<uint64_t>(a.seed);
  refuse_existing(a.out, a.force);
  echo("gen", {{"data", a.data}, {"out", a.out}, {"seed", std::to_string(spec.seed)}});
  Dataset ds = gen_synthetic(spec);
  save_dataset(ds, a.out);
  std::cout << "wrote " << ds.count << " samples (" << ds.classes << " classes, " << ds.channels
            << "x" << ds.height << "x" << ds.width << ") to " << a.out << "\n";
  return 0;
}

int cmd_lut(const Args& a) {
  NetworkSpec spec = NetworkSpec::parse_file(a.net);
  Elaborated net = elaborate(spec);
  CrossbarConfig hw = load_hw(a);
  ComponentCosts costs = load_costs(a);
  CandidateSpace space;
  if (!a.search.empty()) {
    SearchOptions so = SearchOptions::from_config(KeyValueConfig::from_file(a.search));
    space.kernels = so.kernels;
    space.sizes = so.sizes;
  }
  refuse_existing(a.out, a.force);
  echo("lut", {{"net", a.net}, {"hw", a.hw}, {"cost", a.cost}, {"search", a.search},
               {"out", a.out}});
  CostLut lut = CostLut::build(net, space, hw, costs);
  lut.save(a.out);
  for (int e = 0; e < net.num_edges; ++e) {
    size_t cnt = 0;
    for (const auto& [key, entry] : lut.entries())
      if (std::get<0>(key) == e) ++cnt;
    std::cout << "edge " << e << ": " << cnt << " entries\n";
  }
  std::cout << "wrote " << lut.size() << " entries to " << a.out << "\n";
  return 0;
}

CrossbarConfig mode_hw(const CrossbarConfig& hw, const std::string& mode) {
  if (mode == "nonideal") return hw;
  CrossbarConfig ideal = hw;  // "ideal": quantization stays, parasitics vanish
  ideal.r_wire = 0.0;
  ideal.r_source = 0.0;
  ideal.r_sink = 0.0;
  ideal.beta = 0.0;
  return ideal;
}

int cmd_search(const Args& a) {
  NetworkSpec spec = NetworkSpec::parse_file(a.net);
  Elaborated net = elaborate(spec);
  CrossbarConfig hw = load_hw(a);
  ComponentCosts costs = load_costs(a);
  SearchOptions opt = SearchOptions::from_config(KeyValueConfig::from_file(a.search));
  if (a.seed >= 0) opt.seed = static_cast<uint64_t>(a.seed);
  Dataset full = load_dataset(a.data);

  fs::create_directories(a.out);
  const std::string result_path = a.out + "/result.net";
  const std::string trace_path = a.out + "/trace.csv";
  const std::string summary_path = a.out + "/summary.txt";
  refuse_existing(result_path, a.force);
  refuse_existing(trace_path, a.force);
  refuse_existing(summary_path, a.force);

  echo("search", {{"net", a.net},
                  {"hw", a.hw},
                  {"cost", a.cost},
                  {"search", a.search},
                  {"data", a.data},
                  {"out", a.out},
                  {"seed", std::to_string(opt.seed)},
                  {"mode", a.mode == "ideal" ? "i-search" : "ni-search"}});

  CandidateSpace space;
  space.kernels = opt.kernels;
  space.sizes = opt.sizes;
  CostLut lut = CostLut::build(net, space, hw, costs);
  auto [train, val] = split_dataset(full, opt.val_fraction, opt.seed);
  CrossbarConfig run_hw = mode_hw(hw, a.mode);

  std::vector<TraceRow> trace;
  SearchResult res;
  try {
    res = run_search(spec, train, val, lut, run_hw, opt, &std::cout, &trace);
  } catch (const NumericError&) {
    save_trace(trace_path, trace);  // preserve the trace for post-mortems
    throw;
  }
  write_text_atomic(result_path, res.compact.to_string());
  save_trace(trace_path, res.trace);
  std::string summary = search_summary(res.compact, res);
  write_text_atomic(summary_path, summary);
  std::cout << summary;
  return 0;
}

int cmd_train(const Args& a) {
  NetworkSpec spec = NetworkSpec::parse_file(a.net);
  Elaborated net = elaborate(spec);
  SearchOptions so = SearchOptions::from_config(KeyValueConfig::from_file(a.search));
  if (a.seed >= 0) so.seed = static_cast<uint64_t>(a.seed);
  Dataset train = load_dataset(a.data);

  fs::create_directories(a.out);
  const std::string net_path = a.out + "/model.net";
  const std::string weights_path = a.out + "/weights.bin";
  const std::string log_path = a.out + "/train.csv";
  refuse_existing(net_path, a.force);
  refuse_existing(weights_path, a.force);
  refuse_existing(log_path, a.force);

  echo("train", {{"net", a.net},
                 {"search", a.search},
                 {"data", a.data},
                 {"out", a.out},
                 {"seed", std::to_string(so.seed)}});

  Rng rng(so.seed);
  ParamStore store = init_params(net, rng);
  Model model(net, store);
  TrainOptions topt;
  topt.epochs = so.epochs;
  topt.batch = so.batch;
  topt.seed = so.seed;
  topt.sgd.lr = so.lr_w;
  topt.sgd.momentum = so.momentum;
  topt.sgd.weight_decay = so.lambda1;
  std::vector<EpochLog> logs = train_model(model, train, topt);

  std::string log_text = "epoch,loss,ce_loss,accuracy\n";
  char buf[128];
  for (const EpochLog& l : logs) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.6g\n", l.epoch, l.loss, l.ce_loss,
                  l.accuracy);
    log_text += buf;
  }
  write_text_atomic(net_path, spec.to_string());
  save_weights(weights_path, store);
  write_text_atomic(log_path, log_text);
  if (!logs.empty())
    std::cout << "final train accuracy " << logs.back().accuracy << " (loss " << logs.back().loss
              << ")\n";
  return 0;
}

int cmd_report(const Args& a) {
  CrossbarConfig hw = load_hw(a);
  ComponentCosts costs = load_costs(a);
  Dataset test = load_dataset(a.data);
  refuse_existing(a.out, a.force);
  echo("report", {{"models", a.models},
                  {"hw", a.hw},
                  {"cost", a.cost},
                  {"data", a.data},
                  {"out", a.out}});

  std::vector<std::string> dirs;
  std::string cur;
  for (char c : a.models) {
    if (c == ',') {
      if (!cur.empty()) dirs.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) dirs.push_back(cur);
  if (dirs.empty()) throw ConfigError("report: no model directories given");

  std::vector<ReportRow> rows;
  for (const std::string& dir : dirs) {
    const std::string net_path = dir + "/model.net";
    const std::string weights_path = dir + "/weights.bin";
    if (!fs::exists(net_path)) throw MissingArtifactError("missing model file " + net_path);
    if (!fs::exists(weights_path))
      throw MissingArtifactError("missing model file " + weights_path);
    NetworkSpec spec = NetworkSpec::parse_file(net_path);
    Elaborated net = elaborate(spec);
    Rng rng(0);
    ParamStore store = init_params(net, rng);
    load_weights(weights_path, store);
    Model model(net, store);

    EvalOptions ideal;
    ideal.mode = RunMode::kEvalIdeal;
    EvalResult ri = evaluate(model, test, {}, ideal);
    EvalOptions noni;
    noni.mode = RunMode::kEvalNonideal;
    noni.hw = &hw;
    noni.skip_failures = a.skip_failures;
    EvalResult rn = evaluate(model, test, {}, noni);

    NetworkTotals totals = network_totals(network_entries(net, hw, costs));
    std::string name = fs::path(dir).filename().string();
    if (name.empty()) name = dir;
    rows.push_back(make_report_row(name, net, hw.n, ri.accuracy, rn.accuracy, totals));
    std::cout << name << ": i " << ri.accuracy << " ni " << rn.accuracy << " energy "
              << totals.energy_mj << " mJ";
    if (rn.failed > 0) std::cout << " (skipped " << rn.failed << " failed samples)";
    std::cout << "\n";
  }
  save_report(a.out, rows);
  std::cout << "wrote " << rows.size() << " rows to " << a.out << "\n";
  return 0;
}

int cmd_simulate(const Args& a) {
  CrossbarConfig hw = load_hw(a);
  uint64_t seed = a.seed >= 0 ? static_cast<uint64_t>(a.seed) : 1;
  echo("simulate", {{"hw", a.hw}, {"seed", std::to_string(seed)},
                    {"mode", hw.fully_ideal() ? "ideal" : "nonideal"}});

  // Raw solver probe with diagnostics on one random pattern.
  {
    Rng rng(seed);
    int64_t n = hw.n;
    std::vector<double> g0(static_cast<size_t>(n * n));
    for (double& g : g0) g = hw.g_min() + (hw.g_max() - hw.g_min()) * rng.uniform();
    std::vector<uint8_t> x(static_cast<size_t>(n));
    for (uint8_t& b : x) b = rng.uniform() < 0.5 ? 1 : 0;
    CrossbarSolver solver(hw, g0);
    SolveWorkspace ws;
    std::vector<double> i_out(static_cast<size_t>(n));
    SolverReport rep;
    solver.solve(x.data(), i_out.data(), ws, &rep, nullptr, true);
    std::cout << "probe N=" << n << ": outer " << rep.outer_iters << ", sweeps " << rep.sweeps
              << ", residual " << rep.residual << " A, converged "
              << (rep.converged ? "yes" : "no") << "\n";
  }

  std::vector<int64_t> sizes = a.sweep ? std::vector<int64_t>{16, 32, 64, 128}
                                       : std::vector<int64_t>{hw.n};
  for (int64_t n : sizes) {
    CrossbarConfig chw = hw.with_n(n);
    int64_t rows = a.rows > 0 ? a.rows : llround(0.9 * static_cast<double>(n));
    int64_t cols = a.cols > 0 ? a.cols : llround(0.9 * static_cast<double>(n));
    Rng rng(seed);
    MvmErrorResult r = mvm_error_stat(chw, rows, cols, a.instances, rng);
    std::printf("N=%lld rows=%lld cols=%lld instances=%lld err=%.6g solves=%lld cached=%lld\n",
                static_cast<long long>(n), static_cast<long long>(rows),
                static_cast<long long>(cols), static_cast<long long>(a.instances),
                r.mean_rel_error, static_cast<long long>(r.stats.solves),
                static_cast<long long>(r.stats.cached));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"crossbar-aware neural architecture search toolkit"};
  app.require_subcommand(1);
  Args a;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--seed", a.seed, "override the config seed");
    sub->add_flag("--force", a.force, "overwrite existing outputs");
  };

  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--data", a.data, "task config file")->required();
  gen->add_option("--out", a.out, "output dataset file")->required();
  add_common(gen);

  CLI::App* lut = app.add_subcommand("lut", "build the per-edge hardware cost table");
  lut->add_option("--net", a.net, "network spec")->required();
  lut->add_option("--hw", a.hw, "hardware config")->required();
  lut->add_option("--cost", a.cost, "cost config")->required();
  lut->add_option("--search", a.search, "search config (candidate lists)");
  lut->add_option("--out", a.out, "output table")->required();
  add_common(lut);

  CLI::App* search = app.add_subcommand("search", "run the architecture search");
  search->add_option("--net", a.net, "super-network spec")->required();
  search->add_option("--hw", a.hw, "hardware config")->required();
  search->add_option("--cost", a.cost, "cost config")->required();
  search->add_option("--search", a.search, "search config")->required();
  search->add_option("--data", a.data, "dataset file")->required();
  search->add_option("--out", a.out, "output directory")->required();
  search->add_option("--mode", a.mode, "arch-step inference mode")
      ->check(CLI::IsMember({"ideal", "nonideal"}));
  add_common(search);

  CLI::App* train = app.add_subcommand("train", "train a compact network");
  train->add_option("--net", a.net, "network spec")->required();
  train->add_option("--search", a.search, "hyper-parameter config")->required();
  train->add_option("--data", a.data, "training dataset")->required();
  train->add_option("--out", a.out, "output directory")->required();
  add_common(train);

  CLI::App* report = app.add_subcommand("report", "evaluate trained models into a CSV");
  report->add_option("--models", a.models, "comma-separated model directories")->required();
  report->add_option("--hw", a.hw, "hardware config")->required();
  report->add_option("--cost", a.cost, "cost config")->required();
  report->add_option("--data", a.data, "evaluation dataset")->required();
  report->add_option("--out", a.out, "output CSV")->required();
  report->add_flag("--skip-failures", a.skip_failures,
                   "skip samples whose solver fails instead of aborting");
  add_common(report);

  CLI::App* sim = app.add_subcommand("simulate", "single-layer non-ideal MVM diagnostics");
  sim->add_option("--hw", a.hw, "hardware config")->required();
  sim->add_option("--rows", a.rows, "matrix rows (default 90% of N)");
  sim->add_option("--cols", a.cols, "matrix cols (default 90% of N)");
  sim->add_option("--instances", a.instances, "random instances");
  sim->add_flag("--sweep", a.sweep, "sweep N in {16,32,64,128}");
  add_common(sim);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(a);
    if (lut->parsed()) return cmd_lut(a);
    if (search->parsed()) return cmd_search(a);
    if (train->parsed()) return cmd_train(a);
    if (report->parsed()) return cmd_report(a);
    if (sim->parsed()) return cmd_simulate(a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
