#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "eres/run.hpp"

namespace {

using namespace eres;

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct Overrides {
  std::string config;
  std::string preset;
  std::optional<double> epsilon;
  std::string gate;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::string data;
  std::string out;
  std::string dtype;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key = value config file");
    app->add_option("--preset", preset, "cifar10-eps110 | cifar10-eps20");
    app->add_option("--epsilon", epsilon, "gate threshold (> 0)");
    app->add_option("--gate-realization", gate, "exact | circuit");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--epochs", epochs, "epoch budget");
    app->add_option("--data", data, "CIFAR-10 binary directory or synthetic:<kind>");
    app->add_option("--out", out, "run directory");
    app->add_option("--dtype", dtype, "f32 | f64");
    app->add_option("--set", sets, "extra key=value override (repeatable)");
  }

  RunConfig resolve() const {
    RunConfig c = preset.empty() ? RunConfig{} : eres::preset(preset);
    if (!config.empty()) c = RunConfig::load(config, c);
    if (epsilon) c.set("epsilon", format_real(*epsilon));
    if (!gate.empty()) c.set("gate_realization", gate);
    if (seed) c.set("seed", std::to_string(*seed));
    if (epochs) c.set("epochs", std::to_string(*epochs));
    if (!data.empty()) c.set("data", data);
    if (!out.empty()) c.set("out", out);
    if (!dtype.empty()) c.set("dtype", dtype);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      c.set(s.substr(0, eq), s.substr(eq + 1));
    }
    c.resolve();
    return c;
  }
};

template <typename T>
int cmd_train(const RunConfig& cfg, bool resume) {
  const CifarSplit data = load_run_data(cfg);
  const RunSummary s = run_training<T>(cfg, data, resume, &std::cout);
  std::printf("finished %d epochs: val_error %.4f discard_ratio %.4f\n", s.epochs, s.val_error,
              s.discard_ratio);
  return kExitOk;
}

std::string checkpoint_dtype(const Checkpoint& c) { return c.value("dtype"); }

template <typename T>
int cmd_eval(const Checkpoint& ckpt, const std::string& data_override, bool skip_collapsed) {
  Restored<T> r = restore_checkpoint<T>(ckpt);
  RunConfig cfg = r.config;
  if (!data_override.empty()) cfg.set("data", data_override);
  const CifarSplit data = load_run_data(cfg);
  if (data.test.size() == 0) throw ConfigError("no validation samples configured");
  const double err = evaluate(r.model, data.test, cfg.train.eval_batch, skip_collapsed);
  std::printf("error %.6f on %zu samples\n", err, data.test.size());
  return kExitOk;
}

std::vector<std::size_t> parse_positions(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start < s.size()) {
    const auto comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    try {
      out.push_back(std::stoul(item));
    } catch (const std::logic_error&) {
      throw ConfigError("--blocks expects comma-separated positions, got '" + s + "'");
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
int cmd_prune(const Checkpoint& ckpt, const std::filesystem::path& out, const PruneOptions& opts,
              const std::string& data_override) {
  Restored<T> r = restore_checkpoint<T>(ckpt);
  PruneResult<T> p = prune(r.model, opts);
  for (std::size_t d : p.deferred) {
    std::printf("block %zu is collapsed but above the zero tolerance; deferred\n", d);
  }
  std::printf("removed blocks:");
  for (std::size_t i : p.removed) std::printf(" %zu", i);
  std::printf("%s\n", p.removed.empty() ? " none" : "");
  std::printf("%s", p.report.table().c_str());

  RunConfig cfg = r.config;
  if (!data_override.empty()) cfg.set("data", data_override);
  bool pass = true;
  const CifarSplit data = load_run_data(cfg);
  if (data.test.size() > 0) {
    const EquivalenceReport zero = verify_equivalence(p.zeroed, p.reduced, data.test, 0.0);
    const EquivalenceReport full =
        verify_equivalence(r.model, p.reduced, data.test, cfg.equivalence_tolerance);
    std::printf("hard-zeroed vs reduced: max |logit diff| %.9g (sample %zu) %s\n", zero.max_abs_diff,
                zero.worst_sample, zero.pass ? "exact" : "MISMATCH");
    std::printf("original vs reduced:    max |logit diff| %.9g (sample %zu) tolerance %g -> %s\n",
                full.max_abs_diff, full.worst_sample, full.tolerance, full.pass ? "pass" : "fail");
    pass = zero.pass && full.pass;
  }

  RunState state = r.state;
  save_checkpoint(p.reduced, r.config, state, out, &r.velocity);
  std::filesystem::path csv = out;
  csv += ".report.csv";
  std::ofstream f(csv);
  f << CompressionReport::csv_header() << "\n" << p.report.csv_row() << "\n";
  if (!f) throw IoError("cannot write " + csv.string());
  std::printf("wrote %s\nverdict: %s\n", out.string().c_str(), pass ? "pass" : "fail");
  return pass ? kExitOk : kExitFailure;
}

template <typename T>
int cmd_inspect(const Checkpoint& ckpt) {
  Restored<T> r = restore_checkpoint<T>(ckpt);
  const CompressionReport rep = compression_report(r.model);
  std::printf("epoch %d  dtype %s  layers %zu (of %zu)  params %zu\n", r.state.next_epoch,
              r.config.dtype.c_str(), rep.layers_retained, rep.layers_total, rep.params_reduced);
  std::printf("%-6s %-6s %-5s %-6s %-10s %-10s %s\n", "origin", "index", "group", "gated", "status",
              "gate_off", "max_abs_weight");
  struct Row {
    std::size_t origin;
    std::string index;
    int group;
    bool gated;
    std::string status;
    std::string off;
    std::string max_abs;
  };
  std::vector<Row> rows;
  auto off_str = [](const BlockSpec& s) {
    if (!s.gated || s.status.gate_off_history.empty()) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", s.status.gate_off_history.back());
    return std::string(buf);
  };
  for (const auto& b : r.model.blocks()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", block_max_abs(b));
    rows.push_back({b.spec.origin, std::to_string(b.spec.index), b.spec.group, b.spec.gated,
                    to_string(b.spec.status.state), off_str(b.spec), buf});
  }
  for (const auto& s : r.model.pruned()) {
    rows.push_back({s.origin, "-", s.group, s.gated, to_string(s.status.state), off_str(s), "-"});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.origin < b.origin; });
  for (const auto& row : rows) {
    std::printf("%-6zu %-6s %-5d %-6s %-10s %-10s %s\n", row.origin, row.index.c_str(), row.group,
                row.gated ? "yes" : "no", row.status.c_str(), row.off.c_str(), row.max_abs.c_str());
  }
  return kExitOk;
}

template <typename T>
int cmd_sweep(const RunConfig& base, std::vector<double> eps) {
  std::vector<double> unique;
  for (double e : eps) {
    if (std::find(unique.begin(), unique.end(), e) != unique.end()) {
      std::fprintf(stderr, "warning: duplicate epsilon %g ignored\n", e);
      continue;
    }
    unique.push_back(e);
  }
  if (unique.size() < 2) throw ConfigError("sweep-epsilon needs at least two distinct epsilon values");
  const CifarSplit data = load_run_data(base);
  const std::filesystem::path root = base.out;
  std::filesystem::create_directories(root);
  std::ofstream csv(root / "sweep.csv");
  csv << "epsilon,discard_ratio,val_error\n";
  for (double e : unique) {
    RunConfig cfg = base;
    cfg.set("epsilon", format_real(e));
    cfg.out = (root / ("eps_" + format_real(e))).string();
    cfg.resolve();
    std::printf("== epsilon %g ==\n", e);
    const RunSummary s = run_training<T>(cfg, data, false, &std::cout);
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g\n", e, s.discard_ratio, s.val_error);
    csv << buf << std::flush;
  }
  if (!csv) throw IoError("cannot write sweep.csv");
  std::printf("wrote %s\n", (root / "sweep.csv").string().c_str());
  return kExitOk;
}

template <typename F>
int dispatch(const std::string& dtype, F&& f) {
  return dtype == "f64" ? f(double{}) : f(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"eresnet: residual networks that drop their own redundant blocks"};
  app.require_subcommand(1);

  Overrides train_opts;
  bool resume = false;
  auto* train = app.add_subcommand("train", "train a network");
  train_opts.attach(train);
  train->add_flag("--resume", resume, "continue from the checkpoint in the run directory");

  std::string ckpt_path;
  std::string data_override;
  bool skip_collapsed = false;
  auto* eval = app.add_subcommand("eval", "validation error of a checkpoint");
  eval->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  eval->add_option("--data", data_override, "dataset override");
  eval->add_flag("--skip-collapsed", skip_collapsed, "do not execute collapsed blocks");

  std::string prune_out;
  PruneOptions prune_opts;
  std::string prune_blocks;
  auto* prune_cmd = app.add_subcommand("prune", "remove collapsed blocks");
  prune_cmd->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
  prune_cmd->add_option("--out", prune_out, "reduced checkpoint file")->required();
  prune_cmd->add_option("--tolerance", prune_opts.zero_tolerance, "max-abs weight for eligibility");
  prune_cmd->add_option("--blocks", prune_blocks, "positions to prune (default: all collapsed)");
  prune_cmd->add_flag("--force", prune_opts.force, "prune regardless of state and tolerance");
  prune_cmd->add_option("--data", data_override, "dataset override for the equivalence check");

  auto* inspect = app.add_subcommand("inspect", "per-block status table");
  inspect->add_option("checkpoint", ckpt_path, "checkpoint file")->required();

  Overrides sweep_opts;
  std::vector<double> eps_list;
  auto* sweep = app.add_subcommand("sweep-epsilon", "one training run per epsilon");
  sweep_opts.attach(sweep);
  sweep->add_option("--eps", eps_list, "epsilon values")->delimiter(',')->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train) {
      const RunConfig cfg = train_opts.resolve();
      return dispatch(cfg.dtype, [&](auto t) { return cmd_train<decltype(t)>(cfg, resume); });
    }
    if (*sweep) {
      const RunConfig cfg = sweep_opts.resolve();
      return dispatch(cfg.dtype, [&](auto t) { return cmd_sweep<decltype(t)>(cfg, eps_list); });
    }
    const Checkpoint ckpt = read_checkpoint(ckpt_path);
    const std::string dtype = checkpoint_dtype(ckpt);
    if (*eval) {
      return dispatch(dtype, [&](auto t) { return cmd_eval<decltype(t)>(ckpt, data_override, skip_collapsed); });
    }
    if (*prune_cmd) {
      if (std::filesystem::exists(prune_out) && std::filesystem::equivalent(prune_out, ckpt_path)) {
        throw ConfigError("prune never overwrites its input checkpoint; choose another --out");
      }
      if (!prune_blocks.empty()) prune_opts.blocks = parse_positions(prune_blocks);
      return dispatch(dtype, [&](auto t) { return cmd_prune<decltype(t)>(ckpt, prune_out, prune_opts, data_override); });
    }
    return dispatch(dtype, [&](auto t) { return cmd_inspect<decltype(t)>(ckpt); });
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericFault& e) {
    std::fprintf(stderr, "numeric fault: %s\n", e.what());
    return kExitNumeric;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return kExitIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
}
