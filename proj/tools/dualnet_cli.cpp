// Command-line entry point: run, report, gradcheck, streamgen.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dualnet/checkpoint.hpp"
#include "dualnet/config.hpp"
#include "dualnet/gradcheck.hpp"
#include "dualnet/report.hpp"
#include "dualnet/trainer.hpp"

namespace fs = std::filesystem;
using namespace dualnet;

namespace {

enum Exit { kOk = 0, kFailure = 1, kBadConfig = 2, kNoData = 3, kDiverged = 4 };

struct CommonStreamFlags {
  std::string config_path;
  std::string manifest_path;
  std::vector<std::string> sets;
  std::string stream, protocol, mode, data_root;
  std::optional<std::size_t> seeds;
  std::vector<std::uint64_t> seed_list;
};

/// Applies "a.b.c=value" onto a JSON document; value is parsed as JSON when
/// possible, else taken as a string.
void apply_set(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::istringstream is(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(is, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

json base_document(const CommonStreamFlags& f) {
  if (!f.config_path.empty() && !f.manifest_path.empty()) throw ConfigError("use either --config or --manifest");
  if (!f.manifest_path.empty()) {
    std::ifstream in(f.manifest_path);
    if (!in) throw ConfigError("cannot open manifest " + f.manifest_path);
    const json m = json::parse(in);
    if (!m.contains("experiment")) throw ConfigError(f.manifest_path + ": not a run manifest");
    return m.at("experiment");
  }
  if (!f.config_path.empty()) {
    std::ifstream in(f.config_path);
    if (!in) throw ConfigError("cannot open config file " + f.config_path);
    try {
      return json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError(f.config_path + ": " + e.what());
    }
  }
  return to_json(ExperimentConfig{});
}

ExperimentConfig resolve_experiment(const CommonStreamFlags& f, json doc) {
  if (!f.stream.empty()) doc["stream"]["kind"] = f.stream;
  if (!f.protocol.empty()) doc["stream"]["protocol"] = f.protocol;
  if (!f.mode.empty()) doc["stream"]["mode"] = f.mode;
  if (!f.data_root.empty()) doc["data_root"] = f.data_root;
  if (f.seeds) {
    std::vector<std::uint64_t> s(*f.seeds);
    std::iota(s.begin(), s.end(), 0);
    doc["seeds"] = s;
  }
  if (!f.seed_list.empty()) doc["seeds"] = f.seed_list;
  for (const auto& a : f.sets) apply_set(doc, a);
  return experiment_from_json(doc);
}

SourceRegistry registry_for(const ExperimentConfig& e) {
  return SourceRegistry(e.data_root.empty() ? default_data_root() : fs::path(e.data_root), e.stream.synthetic_seed);
}

void add_stream_flags(CLI::App* app, CommonStreamFlags& f) {
  app->add_option("--config", f.config_path, "Experiment config (JSON)");
  app->add_option("--stream", f.stream, "Stream kind: split-<source> or ctrl-<S-|S+|S_in|S_out|S_pl>");
  app->add_option("--protocol", f.protocol, "task-aware or task-free");
  app->add_option("--mode", f.mode, "online or batch");
  app->add_option("--data-root", f.data_root, "Dataset directory (default $DUALNET_DATA or ./data)");
  app->add_option("--seeds", f.seeds, "Run seeds 0..N-1");
  app->add_option("--seed-list", f.seed_list, "Explicit seeds")->delimiter(',');
  app->add_option("--set", f.sets, "Override any config field, e.g. --set train.fast_lr=0.01");
}

int cmd_run(CommonStreamFlags& f, const std::string& method, std::optional<double> dropout_p,
            std::optional<std::size_t> ssl_iters, const std::string& output, bool checkpoint, bool quiet) {
  json doc = base_document(f);
  if (!method.empty()) doc["train"]["method"] = method;
  if (dropout_p) doc["train"]["dropout_p"] = *dropout_p;
  if (ssl_iters) doc["train"]["ssl_iters"] = *ssl_iters;
  if (!output.empty()) doc["output_dir"] = output;
  if (checkpoint) doc["save_checkpoint"] = true;
  const ExperimentConfig exp = resolve_experiment(f, doc);

  const fs::path out_dir = exp.output_dir;
  fs::create_directories(out_dir);
  SourceRegistry registry = registry_for(exp);
  std::vector<MetricRow> rows;
  json runs = json::array();
  for (std::uint64_t seed : exp.seeds) {
    const TaskStream stream = build_stream(exp.stream, registry, seed);
    TrainConfig cfg = exp.train;
    cfg.seed = seed;
    const TrainConfig resolved = cfg.resolve(stream);
    DualNetModel model = make_model(resolved, stream);
    EpisodicMemory memory = make_memory(resolved, stream);
    TrainHooks hooks;
    if (!quiet) {
      hooks.after_task = [&](std::size_t t, const AccuracyMatrix& m) {
        std::cerr << "seed " << seed << " task " << t << ":";
        for (std::size_t j = 0; j <= t; ++j) std::cerr << ' ' << m.at(t, j);
        std::cerr << '\n';
      };
    }
    const RunResult result = train_stream(resolved, stream, memory, model, hooks);
    const std::string tag = "seed" + std::to_string(seed);
    detail::write_text(out_dir / ("matrix_" + tag + ".csv"), matrix_csv(result.matrix));
    json run{{"seed", seed},
             {"resolved_train", to_json(result.config)},
             {"stream", manifest(stream)},
             {"task_seconds", result.task_seconds},
             {"matrix", result.matrix.rows()}};
    if (exp.save_checkpoint) {
      const std::string ck = "checkpoint_" + tag + ".json";
      save_checkpoint(model, out_dir / ck);
      run["checkpoint"] = ck;
    }
    runs.push_back(std::move(run));
    rows.push_back({to_string(exp.train.method), exp.stream.kind, seed, compute_metrics(result.matrix)});
    if (!quiet) {
      const auto& m = rows.back().metrics;
      std::cerr << "seed " << seed << ": ACC " << m.acc << " FM " << m.fm << " BWT " << m.bwt << " LA " << m.la << '\n';
    }
  }
  detail::write_text(out_dir / "metrics.csv", metrics_csv(rows));
  const json manifest_doc{{"format", "dualnet-run-manifest"}, {"experiment", to_json(exp)}, {"runs", runs}};
  detail::write_text(out_dir / "manifest.json", manifest_doc.dump(2) + "\n");
  const auto table = compare(rows);
  detail::write_text(out_dir / "summary.md", comparison_markdown(table));
  std::cout << comparison_markdown(table);
  return kOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& md_out, const std::string& csv_out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const auto rows = report_runs(paths);
  const std::string md = comparison_markdown(rows);
  std::cout << md;
  if (!md_out.empty()) detail::write_text(md_out, md);
  if (!csv_out.empty()) detail::write_text(csv_out, comparison_csv(rows));
  return kOk;
}

int cmd_gradcheck(std::size_t seeds, double tol) {
  GradCheckOptions opt;
  opt.tolerance = tol;
  const auto start = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& r : gradcheck_suite(seeds, opt)) {
    const bool pass = r.passed(tol);
    ok = ok && pass;
    std::cout << (pass ? "PASS " : "FAIL ") << r.name << ": " << r.checked << " coordinates, max relative error "
              << r.max_rel_error << " at " << r.worst << '\n';
  }
  std::cout << "seeds " << seeds << ", "
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
  return ok ? kOk : kFailure;
}

int cmd_streamgen(CommonStreamFlags& f, const std::string& output) {
  const ExperimentConfig exp = resolve_experiment(f, base_document(f));
  SourceRegistry registry = registry_for(exp);
  json all = json::array();
  for (std::uint64_t seed : exp.seeds) all.push_back(manifest(build_stream(exp.stream, registry, seed)));
  const std::string text = (all.size() == 1 ? all[0] : all).dump(2) + "\n";
  if (output.empty()) {
    std::cout << text;
  } else {
    detail::write_text(output, text);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fast/slow continual learner: training runs, reports, gradient checks, stream manifests"};
  app.require_subcommand(1);

  CommonStreamFlags run_flags;
  std::string method, output;
  std::optional<double> dropout_p;
  std::optional<std::size_t> ssl_iters;
  bool checkpoint = false, quiet = false;
  auto* run = app.add_subcommand("run", "Train one configuration over one or more seeds");
  add_stream_flags(run, run_flags);
  run->add_option("--manifest", run_flags.manifest_path, "Re-run the experiment recorded in a run manifest");
  run->add_option("--method", method, "dualnet, dualnetpp, finetune, er, derpp");
  run->add_option("--dropout-p", dropout_p, "DualNet++ spatial dropout ratio");
  run->add_option("--ssl-iters", ssl_iters, "Look-ahead rounds per incoming batch (0 disables the slow phase)");
  run->add_option("--output", output, "Output directory");
  run->add_flag("--checkpoint", checkpoint, "Save the final model of each seed");
  run->add_flag("--quiet", quiet, "No progress output");

  std::vector<std::string> dirs;
  std::string md_out, csv_out;
  auto* report = app.add_subcommand("report", "Merge run directories into a comparison table");
  report->add_option("dirs", dirs, "Run directories")->required();
  report->add_option("--markdown", md_out, "Write the Markdown table here");
  report->add_option("--csv", csv_out, "Write the CSV table here");

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-4;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--seeds", gc_seeds, "Random seeds per check");
  gradcheck->add_option("--tolerance", gc_tol, "Maximum relative error");

  CommonStreamFlags sg_flags;
  std::string sg_output;
  auto* streamgen = app.add_subcommand("streamgen", "Emit task manifests without training");
  add_stream_flags(streamgen, sg_flags);
  streamgen->add_option("--output", sg_output, "Write the manifest here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_flags, method, dropout_p, ssl_iters, output, checkpoint, quiet);
    if (*report) return cmd_report(dirs, md_out, csv_out);
    if (*gradcheck) return cmd_gradcheck(gc_seeds, gc_tol);
    if (*streamgen) return cmd_streamgen(sg_flags, sg_output);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const DatasetMissing& e) {
    std::cerr << "dataset missing: " << e.what() << '\n';
    return kNoData;
  } catch (const NumericError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
