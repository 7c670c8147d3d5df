#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metassm/infer/objectives.hpp"
#include "metassm/ssm/model.hpp"
#include "metassm/synth/dataset.hpp"
#include "metassm/train/optimizer.hpp"

namespace metassm {

struct TrainConfig {
  ObjectiveConfig objective;
  AdamWConfig optimizer;
  std::int64_t steps = 1000;
  int batch_size = 8;  // trials sampled from every dataset per step
  std::uint64_t seed = 0;
  std::vector<std::string> freeze;  // parameter name prefixes left untouched
  std::string trace_path;           // optional loss-trace CSV destination
  int log_every = 0;                // info-log cadence in steps; 0 = silent
};

/// One optimization step of the loss trace. Objective terms are normalized
/// per (step, trial) so traces are comparable across batch shapes.
struct TraceRow {
  std::int64_t step = 0;
  double total = 0, recon = 0, kl_state = 0, kl_embed = 0, penalty = 0;
  double lr = 0;
};

struct TrainResult {
  std::vector<TraceRow> trace;
  double norm = 0;  // trial-step count each objective sum was divided by
};

std::string trace_csv(const std::vector<TraceRow>& trace);

/// Joint pretraining: every step samples `batch_size` training trials from
/// each bundle, maximizes the summed objective and updates all trainable
/// parameters. Deterministic given the config seed. Throws a numeric error
/// naming the step, dataset and trial ids if the objective leaves the
/// finite range.
TrainResult train_multisession(Model& model,
                               const std::vector<const DatasetBundle*>& data,
                               const TrainConfig& cfg);

/// Few-shot alignment of one new dataset: registers it, then trains only
/// its read-in, emission and state-noise parameters on the given trials,
/// with everything shared frozen. Verifies by hash that frozen parameters
/// never moved.
TrainResult align_few_shot(Model& model, const DatasetBundle& data,
                           const std::vector<int>& trials,
                           const TrainConfig& cfg);

}  // namespace metassm
