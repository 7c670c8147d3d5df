#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "metassm/run/config.hpp"

namespace metassm {

/// What a command produced: the manifest path plus every artifact listed in
/// it, in manifest order.
struct RunSummary {
  std::filesystem::path manifest;
  std::vector<std::filesystem::path> outputs;
  std::string report;  // metrics JSON for align/eval, else empty
};

/// Synthesizes every configured dataset under <out>/datasets/<id>.
RunSummary run_generate(const ExperimentConfig& cfg,
                        const std::filesystem::path& out_dir);

/// Pretrains on every non-held-out generated dataset (expected under
/// <out>/datasets) plus every explicitly loaded bundle directory. Writes
/// <out>/checkpoint.bin and <out>/trace.csv.
RunSummary run_train(const ExperimentConfig& cfg,
                     const std::filesystem::path& out_dir);

/// Few-shot aligns a checkpoint to one new dataset using the first `ns`
/// training trials, then scores the dataset's eval split. Writes the aligned
/// checkpoint, a metrics report and an alignment trace.
RunSummary run_align(const ExperimentConfig& cfg,
                     const std::filesystem::path& checkpoint,
                     const std::filesystem::path& dataset_dir, int ns,
                     const std::filesystem::path& out_dir);

/// Scores a checkpoint on each dataset's eval split and writes the metrics
/// report, per-k forecast curves, the embedding scatter and any configured
/// exports.
RunSummary run_eval(const ExperimentConfig& cfg,
                    const std::filesystem::path& checkpoint,
                    const std::vector<std::filesystem::path>& dataset_dirs,
                    const std::filesystem::path& out_dir);

/// Re-executes the command a manifest records, into a fresh directory.
/// Outputs are bit-identical to the original run on the same build.
RunSummary rerun_manifest(const std::filesystem::path& manifest,
                          const std::filesystem::path& out_dir);

}  // namespace metassm
