#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <metassm/metassm.h>

namespace {

using nlohmann::json;

/// Override flags shared by every subcommand; only flags the user actually
/// passed end up in the overrides object handed to the library.
struct Flags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string variant, objective, exports, grid;
  int particles = 0, ns = 0, kstep = 0, context = 0;
  std::int64_t steps = 0;

  CLI::App* cmd = nullptr;

  void attach(CLI::App& app, const std::string& name, const std::string& desc,
              bool needs_config = true) {
    cmd = app.add_subcommand(name, desc);
    auto* c = cmd->add_option("--config", config, "experiment config JSON");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", out, "output directory")->required();
    cmd->add_option("--seed", seed, "master seed override");
    cmd->add_option("--threads", threads, "worker cap override");
    cmd->add_option("--variant", variant,
                    "dynamics variant (lowrank|shared|embedding_input|linear_adapter)");
    cmd->add_option("--objective", objective, "objective (dkf|vsmc|dvbf)");
    cmd->add_option("--particles", particles, "VSMC particle count");
    cmd->add_option("--steps", steps, "training step budget");
    cmd->add_option("--ns", ns, "alignment trial count");
    cmd->add_option("--kstep", kstep, "forecast horizon");
    cmd->add_option("--context", context, "forecast context length");
    cmd->add_option("--export", exports, "eval export kind (none|scatter|field|interp)");
    cmd->add_option("--grid", grid, "export grid spec lo:hi:n");
  }

  std::string overrides() const {
    json ov = json::object();
    if (cmd->count("--seed")) ov["seed"] = seed;
    if (cmd->count("--threads")) ov["threads"] = threads;
    if (cmd->count("--variant")) ov["variant"] = variant;
    if (cmd->count("--objective")) ov["objective"] = objective;
    if (cmd->count("--particles")) ov["particles"] = particles;
    if (cmd->count("--steps")) ov["steps"] = steps;
    if (cmd->count("--ns")) ov["ns"] = ns;
    if (cmd->count("--kstep")) ov["kstep"] = kstep;
    if (cmd->count("--context")) ov["context"] = context;
    if (cmd->count("--export")) ov["export"] = exports;
    if (cmd->count("--grid")) ov["grid"] = grid;
    return ov.empty() ? std::string() : ov.dump();
  }
};

int finish(metassm_session* s, int status) {
  if (status != METASSM_OK)
    std::fprintf(stderr, "error: %s\n", metassm_last_error(s));
  else if (*metassm_last_report(s))
    std::fputs(metassm_last_report(s), stdout);
  metassm_session_free(s);
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{std::string("metassm ") + metassm_version() +
               " — meta-learned latent dynamics over time-series collections"};
  app.require_subcommand(1);

  Flags gen, train, align, eval;
  gen.attach(app, "generate", "synthesize the configured datasets");
  train.attach(app, "train", "pretrain the shared model on generated datasets");
  align.attach(app, "align", "few-shot align a checkpoint to one new dataset");
  eval.attach(app, "eval", "score a checkpoint and export figure data");

  std::string ckpt_align, dataset_align, ckpt_eval;
  std::vector<std::string> datasets_eval;
  align.cmd->add_option("--checkpoint", ckpt_align, "pretrained checkpoint")
      ->required()
      ->check(CLI::ExistingFile);
  align.cmd->add_option("--dataset", dataset_align, "bundle directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval.cmd->add_option("--checkpoint", ckpt_eval, "checkpoint to score")
      ->required()
      ->check(CLI::ExistingFile);
  eval.cmd
      ->add_option("--dataset", datasets_eval,
                   "bundle directories (repeatable)")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* rerun = app.add_subcommand("rerun", "re-execute a recorded manifest");
  std::string manifest, rerun_out;
  rerun->add_option("--manifest", manifest, "manifest.json of a previous run")
      ->required()
      ->check(CLI::ExistingFile);
  rerun->add_option("--out", rerun_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : METASSM_ERROR_USAGE;
  }

  metassm_session* s = metassm_session_new();
  if (!s) {
    std::fprintf(stderr, "error: session allocation failed\n");
    return METASSM_ERROR_INTERNAL;
  }

  if (gen.cmd->parsed())
    return finish(s, metassm_generate(s, gen.config.c_str(),
                                      gen.overrides().c_str(),
                                      gen.out.c_str()));
  if (train.cmd->parsed())
    return finish(s, metassm_train(s, train.config.c_str(),
                                   train.overrides().c_str(),
                                   train.out.c_str()));
  if (align.cmd->parsed())
    return finish(s, metassm_align(s, align.config.c_str(),
                                   align.overrides().c_str(),
                                   ckpt_align.c_str(), dataset_align.c_str(),
                                   align.ns, align.out.c_str()));
  if (eval.cmd->parsed()) {
    std::vector<const char*> dirs;
    for (const auto& d : datasets_eval) dirs.push_back(d.c_str());
    dirs.push_back(nullptr);
    return finish(s, metassm_eval(s, eval.config.c_str(),
                                  eval.overrides().c_str(), ckpt_eval.c_str(),
                                  dirs.data(), eval.out.c_str()));
  }
  if (rerun->parsed())
    return finish(s, metassm_rerun(s, manifest.c_str(), rerun_out.c_str()));

  metassm_session_free(s);
  return METASSM_ERROR_USAGE;
}
