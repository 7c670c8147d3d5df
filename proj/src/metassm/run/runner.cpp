#include "metassm/run/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <map>
#include <string>

#include <json.hpp>

#include "metassm/eval/metrics.hpp"
#include "metassm/ssm/checkpoint.hpp"
#include "metassm/synth/dataset.hpp"
#include "metassm/train/trainer.hpp"
#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"
#include "metassm/util/logging.hpp"

namespace metassm {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Manifest plus RunSummary bookkeeping shared by every command.
class RunScope {
 public:
  RunScope(std::string command, const ExperimentConfig& cfg,
           const fs::path& out_dir)
      : out_(out_dir), started_(now_ms()) {
    fs::create_directories(out_);
    manifest_["format_version"] = 1;
    manifest_["command"] = std::move(command);
    manifest_["version"] = kVersion;
    manifest_["config"] = json::parse(experiment_json(cfg));
    manifest_["args"] = json::object();
  }

  void arg(const std::string& key, const json& value) {
    manifest_["args"][key] = value;
  }

  const fs::path& dir() const { return out_; }

  fs::path add_output(const fs::path& p) {
    outputs_.push_back(p);
    return p;
  }

  RunSummary finish(std::string report = "") {
    json rel = json::array();
    for (const auto& p : outputs_)
      rel.push_back(fs::relative(p, out_).generic_string());
    manifest_["outputs"] = rel;
    manifest_["started_unix_ms"] = started_;
    manifest_["elapsed_ms"] = now_ms() - started_;
    const fs::path mp = out_ / "manifest.json";
    write_text_file(mp, manifest_.dump(2) + "\n");
    return RunSummary{mp, outputs_, std::move(report)};
  }

 private:
  fs::path out_;
  std::int64_t started_;
  json manifest_;
  std::vector<fs::path> outputs_;
};

const std::vector<int>& split_of(const DatasetBundle& b,
                                 const std::string& name) {
  if (name == "train") return b.splits.train;
  if (name == "val") return b.splits.val;
  return b.splits.test;
}

std::vector<int> eval_trials(const DatasetBundle& b, const EvalConfig& e) {
  std::vector<int> trials = split_of(b, e.split);
  if (trials.empty())
    throw UsageError("dataset " + b.id + " has no " + e.split + " trials");
  if (e.max_trials > 0 && static_cast<int>(trials.size()) > e.max_trials)
    trials.resize(e.max_trials);
  return trials;
}

void export_vector_field(Model& model, const DatasetBundle& b,
                         const std::vector<double>& e_mean,
                         const EvalConfig& ecfg, RunScope& scope) {
  if (model.config().dyn.d_z != 2)
    throw UsageError("vector-field export needs d_z == 2");
  const std::vector<double> axis = parse_grid(ecfg.grid);
  const int n = static_cast<int>(axis.size());
  Tensor points(n * n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      points.at(i * n + j, 0) = axis[i];
      points.at(i * n + j, 1) = axis[j];
    }
  Tensor e(1, static_cast<int>(e_mean.size()));
  e.v = e_mean;
  const Tensor f =
      vector_field(model.store(), model.config().dyn, e, points);
  std::string csv = "z1,z2,f1,f2\n";
  for (int r = 0; r < f.rows; ++r)
    csv += fmt(points.at(r, 0)) + "," + fmt(points.at(r, 1)) + "," +
           fmt(f.at(r, 0)) + "," + fmt(f.at(r, 1)) + "\n";
  write_text_file(scope.add_output(scope.dir() / ("field_" + b.id + ".csv")),
                  csv);
}

json export_interpolation(Model& model, const DatasetBundle& b,
                          const std::vector<double>& e_mean,
                          const std::vector<int>& trials,
                          const EvalConfig& ecfg, std::uint64_t seed,
                          RunScope& scope) {
  const int ctx = std::min(ecfg.context, b.spec.T);
  DatasetBatch cb{b.id, context_slab(b, {trials[0]}, ctx), ctx, 1};
  PosteriorMeans pm = infer_posterior_means(model, cb);
  Tensor z0(1, pm.z_mean.cols);
  for (int j = 0; j < pm.z_mean.cols; ++j)
    z0.at(0, j) = pm.z_mean.at(ctx - 1, j);

  const std::vector<double> axis = parse_grid(ecfg.grid);
  const int n = static_cast<int>(axis.size());
  const double spacing =
      n > 1 ? (axis.back() - axis.front()) / (n - 1) : 0.0;
  auto cells = interpolation_grid(model, b.id, e_mean, n, n, spacing, z0,
                                  ecfg.interp_steps, ecfg.interp_sd, seed);

  std::vector<ArrayBlock> blocks;
  json es = json::array();
  for (const auto& cell : cells) {
    blocks.push_back(
        {{static_cast<std::uint64_t>(cell.z.rows),
          static_cast<std::uint64_t>(cell.z.cols)},
         cell.z.v});
    es.push_back(cell.e);
  }
  write_blocks_file(
      scope.add_output(scope.dir() / ("interp_" + b.id + ".bin")), blocks);
  return json{{"cells", es},
              {"steps", ecfg.interp_steps},
              {"spacing", spacing}};
}

/// Scores every bundle and writes report.json, kstep.csv and embedding.csv
/// (plus optional exports) into the scope. Returns the report text.
std::string evaluate_into(Model& model,
                          const std::vector<const DatasetBundle*>& data,
                          const EvalConfig& ecfg, std::uint64_t seed,
                          RunScope& scope) {
  if (data.empty()) throw UsageError("no datasets to evaluate");

  json report;
  report["context"] = ecfg.context;
  report["split"] = ecfg.split;
  json sets = json::array();
  std::string kcsv = "dataset_id,k,r2\n";
  std::vector<EmbeddingPoint> pts;
  std::vector<int> labels;
  std::map<int, R2Sums> pooled;
  std::map<int, std::pair<double, int>> macro_k;
  double macro_recon = 0;

  for (std::size_t i = 0; i < data.size(); ++i) {
    const DatasetBundle& b = *data[i];
    const std::vector<int> trials = eval_trials(b, ecfg);
    if (ecfg.context >= b.spec.T)
      throw UsageError("context " + std::to_string(ecfg.context) +
                       " leaves no forecast room in dataset " + b.id);
    const int horizon = std::min(ecfg.kstep, b.spec.T - ecfg.context);

    const double recon = r2_reconstruction(model, b, trials);
    const auto sums = r2_kstep_sums(model, b, trials, ecfg.context, horizon);
    const std::vector<double> e_mean = embedding_mean(model, b, trials);

    json ks;
    for (const auto& [k, s] : sums) {
      const double r2 = s.sst == 0.0 ? -1e300 : 1.0 - s.sse / s.sst;
      ks[std::to_string(k)] = r2;
      kcsv += b.id + "," + std::to_string(k) + "," + fmt(r2) + "\n";
      pooled[k].sse += s.sse;
      pooled[k].sst += s.sst;
      auto& m = macro_k[k];
      m.first += r2;
      m.second += 1;
    }
    macro_recon += recon;

    const double param = b.spec.regime_param();
    pts.push_back({b.id, e_mean, param});
    labels.push_back(param > 0 ? 1 : 0);

    sets.push_back(json{{"id", b.id},
                        {"param", param},
                        {"label", b.spec.label()},
                        {"trials", static_cast<int>(trials.size())},
                        {"T", b.spec.T},
                        {"horizon", horizon},
                        {"recon_r2", recon},
                        {"kstep_r2", ks},
                        {"e_mean", e_mean}});

    if (ecfg.exports == "field")
      export_vector_field(model, b, e_mean, ecfg, scope);
    if (ecfg.exports == "interp")
      sets.back()["interp"] = export_interpolation(
          model, b, e_mean, trials, ecfg, RngStream::derive(seed, "interp", i),
          scope);
  }

  report["datasets"] = sets;
  json macro{{"recon_r2", macro_recon / static_cast<double>(data.size())}};
  json mk, pk;
  for (const auto& [k, m] : macro_k) mk[std::to_string(k)] = m.first / m.second;
  for (const auto& [k, s] : pooled)
    pk[std::to_string(k)] = s.sst == 0.0 ? -1e300 : 1.0 - s.sse / s.sst;
  macro["kstep_r2"] = mk;
  report["macro"] = macro;
  report["pooled"] = json{{"kstep_r2", pk}};

  if (pts.size() >= 3)
    report["spearman_abs_embedding"] = embedding_velocity_correlation(pts);
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                    std::count(labels.begin(), labels.end(), 0) > 0;
  if (both && pts.size() >= 2)
    report["separability"] = regime_separability(pts, labels);

  write_text_file(scope.add_output(scope.dir() / "kstep.csv"), kcsv);
  if (ecfg.exports != "none")
    write_text_file(scope.add_output(scope.dir() / "embedding.csv"),
                    embedding_scatter_csv(pts));

  const std::string text = report.dump(2) + "\n";
  write_text_file(scope.add_output(scope.dir() / "report.json"), text);
  return text;
}

std::vector<fs::path> training_inputs(const ExperimentConfig& cfg,
                                      const fs::path& out_dir) {
  std::vector<fs::path> dirs;
  for (const auto& g : cfg.generate)
    if (!g.held_out) dirs.push_back(out_dir / "datasets" / g.id);
  for (const auto& p : cfg.load) dirs.push_back(p);
  return dirs;
}

RunSummary train_from_dirs(const ExperimentConfig& cfg,
                           const std::vector<fs::path>& dirs,
                           const fs::path& out_dir) {
  if (dirs.empty()) throw UsageError("no datasets to train on");
  RunScope scope("train", cfg, out_dir);
  json inputs = json::array();
  for (const auto& d : dirs) inputs.push_back(fs::absolute(d).generic_string());
  scope.arg("inputs", inputs);

  std::vector<DatasetBundle> bundles;
  bundles.reserve(dirs.size());
  for (const auto& d : dirs) {
    if (!fs::exists(d / "manifest.json"))
      throw IoError("dataset not found: " + d.string());
    bundles.push_back(load_bundle(d));
  }

  Model model(cfg.model, RngStream::derive(cfg.seed, "model"));
  std::vector<const DatasetBundle*> ptrs;
  for (const auto& b : bundles) {
    model.register_dataset(b.id, b.d_y);
    ptrs.push_back(&b);
  }

  TrainConfig tcfg = cfg.training;
  tcfg.seed = RngStream::derive(cfg.seed, "train");
  tcfg.trace_path =
      scope.add_output(scope.dir() / "trace.csv").string();
  LOG_INFO("training on " << bundles.size() << " datasets for " << tcfg.steps
                          << " steps");
  TrainResult res = train_multisession(model, ptrs, tcfg);

  save_checkpoint(model, scope.add_output(scope.dir() / "checkpoint.bin"));
  if (!res.trace.empty())
    LOG_INFO("final objective " << res.trace.back().total);
  return scope.finish();
}

}  // namespace

RunSummary run_generate(const ExperimentConfig& cfg, const fs::path& out_dir) {
  if (cfg.generate.empty())
    throw UsageError("the config lists no datasets to generate");
  RunScope scope("generate", cfg, out_dir);
  std::string summary = "id,family,trials,T,d_y\n";
  for (std::size_t i = 0; i < cfg.generate.size(); ++i) {
    const GeneratorSpec& g = cfg.generate[i];
    DatasetBundle b =
        generate_dataset(g.id, g.sde, g.n_train, g.n_val, g.n_test, g.d_y,
                         RngStream::derive(cfg.seed, "data", i));
    const fs::path dir = scope.dir() / "datasets" / g.id;
    save_bundle(b, dir);
    scope.add_output(dir / "manifest.json");
    scope.add_output(dir / "observations.bin");
    scope.add_output(dir / "latents.bin");
    summary += b.id + "," + b.spec.label() + "," + std::to_string(b.trials) +
               "," + std::to_string(b.spec.T) + "," + std::to_string(b.d_y) +
               "\n";
    LOG_INFO("generated " << b.id << ": " << b.trials << " trials of "
                          << b.spec.label());
  }
  write_text_file(scope.add_output(scope.dir() / "summary.csv"), summary);
  return scope.finish(summary);
}

RunSummary run_train(const ExperimentConfig& cfg, const fs::path& out_dir) {
  return train_from_dirs(cfg, training_inputs(cfg, out_dir), out_dir);
}

RunSummary run_align(const ExperimentConfig& cfg, const fs::path& checkpoint,
                     const fs::path& dataset_dir, int ns,
                     const fs::path& out_dir) {
  if (ns < 1) throw UsageError("alignment needs at least one trial");
  RunScope scope("align", cfg, out_dir);
  scope.arg("checkpoint", fs::absolute(checkpoint).generic_string());
  scope.arg("dataset", fs::absolute(dataset_dir).generic_string());
  scope.arg("ns", ns);

  Model model = load_checkpoint(checkpoint);
  DatasetBundle bundle = load_bundle(dataset_dir);
  if (ns > static_cast<int>(bundle.splits.train.size()))
    throw UsageError("alignment wants " + std::to_string(ns) +
                     " trials but " + bundle.id + " provides " +
                     std::to_string(bundle.splits.train.size()));
  std::vector<int> trials(bundle.splits.train.begin(),
                          bundle.splits.train.begin() + ns);

  TrainConfig acfg = cfg.alignment;
  acfg.seed = RngStream::derive(cfg.seed, "align");
  acfg.trace_path =
      scope.add_output(scope.dir() / "align_trace.csv").string();
  LOG_INFO("aligning " << bundle.id << " with " << ns << " trials for "
                       << acfg.steps << " steps");
  align_few_shot(model, bundle, trials, acfg);

  save_checkpoint(model, scope.add_output(scope.dir() / "checkpoint.bin"));
  std::vector<const DatasetBundle*> data{&bundle};
  std::string report = evaluate_into(model, data, cfg.eval,
                                     RngStream::derive(cfg.seed, "eval"),
                                     scope);
  return scope.finish(std::move(report));
}

RunSummary run_eval(const ExperimentConfig& cfg, const fs::path& checkpoint,
                    const std::vector<fs::path>& dataset_dirs,
                    const fs::path& out_dir) {
  if (dataset_dirs.empty())
    throw UsageError("evaluating an empty dataset list");
  RunScope scope("eval", cfg, out_dir);
  scope.arg("checkpoint", fs::absolute(checkpoint).generic_string());
  json ds = json::array();
  for (const auto& d : dataset_dirs)
    ds.push_back(fs::absolute(d).generic_string());
  scope.arg("datasets", ds);

  Model model = load_checkpoint(checkpoint);
  std::vector<DatasetBundle> bundles;
  bundles.reserve(dataset_dirs.size());
  std::vector<const DatasetBundle*> ptrs;
  for (const auto& d : dataset_dirs) {
    bundles.push_back(load_bundle(d));
    ptrs.push_back(&bundles.back());
  }
  std::string report = evaluate_into(model, ptrs, cfg.eval,
                                     RngStream::derive(cfg.seed, "eval"),
                                     scope);
  return scope.finish(std::move(report));
}

RunSummary rerun_manifest(const fs::path& manifest, const fs::path& out_dir) {
  json j = json::parse(read_text_file(manifest), nullptr, false);
  if (j.is_discarded())
    throw IoError("manifest is not valid JSON: " + manifest.string());
  if (!j.contains("command") || !j.contains("config"))
    throw IoError("manifest lacks command or config: " + manifest.string());
  const ExperimentConfig cfg = parse_experiment(j["config"].dump());
  const std::string cmd = j["command"].get<std::string>();
  const json args = j.value("args", json::object());

  if (cmd == "generate") return run_generate(cfg, out_dir);
  if (cmd == "train") {
    std::vector<fs::path> dirs;
    for (const auto& d : args.value("inputs", json::array()))
      dirs.push_back(d.get<std::string>());
    return train_from_dirs(cfg, dirs, out_dir);
  }
  if (cmd == "align")
    return run_align(cfg, args.at("checkpoint").get<std::string>(),
                     args.at("dataset").get<std::string>(),
                     args.at("ns").get<int>(), out_dir);
  if (cmd == "eval") {
    std::vector<fs::path> dirs;
    for (const auto& d : args.value("datasets", json::array()))
      dirs.push_back(d.get<std::string>());
    return run_eval(cfg, args.at("checkpoint").get<std::string>(), dirs,
                    out_dir);
  }
  throw UsageError("manifest command not recognized: " + cmd);
}

}  // namespace metassm
