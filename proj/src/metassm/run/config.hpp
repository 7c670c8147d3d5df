#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metassm/ssm/model.hpp"
#include "metassm/synth/sde.hpp"
#include "metassm/train/trainer.hpp"

namespace metassm {

inline constexpr const char* kVersion = "0.1.0";

/// One dataset to synthesize: a regime plus trial counts and readout width.
struct GeneratorSpec {
  std::string id;
  SdeSpec sde;
  int n_train = 128;
  int n_val = 64;
  int n_test = 64;
  int d_y = 0;            // 0 = draw the width uniformly from [30, 100]
  bool held_out = false;  // generated but excluded from pretraining
};

struct EvalConfig {
  int context = 100;
  int kstep = 50;               // forecast horizon; clamped to T - context
  std::string split = "test";   // trials scored: train | val | test
  int max_trials = 0;           // cap on scored trials per dataset; 0 = all
  std::string exports = "none";  // none | scatter | field | interp
  std::string grid = "-2:2:21";  // lo:hi:n axis spec for field/interp
  int interp_steps = 250;
  double interp_sd = 0.1;
};

/// Full description of one experiment. Every run derives its randomness
/// from `seed`, so the config snapshot plus inputs reproduce any output.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  ModelConfig model;
  TrainConfig training;    // objective/optimizer shared with alignment
  TrainConfig alignment;   // few-shot budget (steps/batch/lr overrides)
  int align_ns = 8;        // training trials consumed by alignment
  EvalConfig eval;
  std::vector<GeneratorSpec> generate;
  std::vector<std::string> load;  // extra pre-generated bundle directories
};

/// Parses the JSON schema; unknown keys and malformed values raise config
/// errors naming the offending field path.
ExperimentConfig parse_experiment(const std::string& json_text);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Canonical snapshot: parse_experiment(experiment_json(c)) == c, field for
/// field, including bit-exact floating-point values.
std::string experiment_json(const ExperimentConfig& cfg);

/// Applies a flat override object (keys: seed, threads, variant, objective,
/// particles, steps, ns, kstep, context, export, grid) over a parsed config.
void apply_overrides(ExperimentConfig& cfg, const std::string& overrides_json);

/// "lo:hi:n" -> n evenly spaced values, inclusive of both endpoints.
std::vector<double> parse_grid(const std::string& spec);

}  // namespace metassm
