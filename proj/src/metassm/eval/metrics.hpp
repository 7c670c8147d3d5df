#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "metassm/infer/objectives.hpp"
#include "metassm/ssm/model.hpp"
#include "metassm/synth/dataset.hpp"

namespace metassm {

/// Posterior means for one batch, computed without sampling: the embedding
/// posterior mean conditions the state encoder directly, so every metric
/// built on top is deterministic.
struct PosteriorMeans {
  Tensor e_mean;  // 1 x d_e (zeros for the shared-dynamics variant)
  Tensor z_mean;  // (T*B) x d_z, t-major like the batch
};

PosteriorMeans infer_posterior_means(const Model& model,
                                     const DatasetBatch& batch);

/// Context-limited t-major slab: the first `context` steps of each trial.
Tensor context_slab(const DatasetBundle& data, const std::vector<int>& trials,
                    int context);

/// Pooled reconstruction score over the given trials: posterior state means
/// through the emission mean, 1 - SSE/SST where SST measures each trial's
/// observations against that trial's own mean activity.
double r2_reconstruction(const Model& model, const DatasetBundle& data,
                         const std::vector<int>& trials);

/// Forecast scores for k = 1..horizon: embedding and states are inferred
/// from the first `context` observations only, the dynamics mean is rolled
/// forward and mapped through the emission mean, and each k is scored
/// across trials against the per-trial mean activity.
std::map<int, double> r2_kstep(const Model& model, const DatasetBundle& data,
                               const std::vector<int>& trials, int context,
                               int horizon);

/// Raw error sums behind r2_kstep (r2 = 1 - sse/sst), exposed so reports
/// can pool scores across datasets at the observation level.
struct R2Sums {
  double sse = 0;
  double sst = 0;
};
std::map<int, R2Sums> r2_kstep_sums(const Model& model,
                                    const DatasetBundle& data,
                                    const std::vector<int>& trials,
                                    int context, int horizon);

/// Forecast core behind r2_kstep: rolls the dynamics mean from the supplied
/// end-of-context states (one row per trial) under embedding `e_row` and
/// scores the emissions. Lets oracles bypass the amortized inference.
std::map<int, double> r2_kstep_from_states(const Model& model,
                                           const DatasetBundle& data,
                                           const std::vector<int>& trials,
                                           const Tensor& z_end,
                                           const Tensor& e_row, int context,
                                           int horizon);

/// Aggregated embedding posterior mean over the given trials.
std::vector<double> embedding_mean(const Model& model,
                                   const DatasetBundle& data,
                                   const std::vector<int>& trials);

/// One dataset's point in the embedding diagnostics.
struct EmbeddingPoint {
  std::string dataset_id;
  std::vector<double> e_mean;
  double param = 0.0;  // generator parameter (omega, mu or a)
};

/// Spearman rank correlation between the embedding magnitude |e| and the
/// generator parameter across datasets (magnitude because the embedding's
/// sign is not identified). Needs >= 3 points.
double embedding_velocity_correlation(const std::vector<EmbeddingPoint>& pts);

/// Leave-one-out nearest-centroid accuracy of binary regime labels on the
/// embedding means. Distance ties go to the fold's larger class, then to
/// class 0.
double regime_separability(const std::vector<EmbeddingPoint>& pts,
                           const std::vector<int>& labels);

/// CSV `dataset_id,e1,e2,param` (e2 = 0 when d_e == 1).
std::string embedding_scatter_csv(const std::vector<EmbeddingPoint>& pts);

/// One grid point of an embedding interpolation sweep.
struct GridRollout {
  std::vector<double> e;  // embedding actually used (grid point + noise)
  Tensor z;               // steps x d_z dynamics-mean rollout from z0
};

/// Rollouts on an nx x ny embedding grid centered on `anchor` with the
/// given spacing; each point is perturbed by N(0, perturb_sd^2 I).
std::vector<GridRollout> interpolation_grid(
    const Model& model, const std::string& dataset_id,
    const std::vector<double>& anchor, int nx, int ny, double spacing,
    const Tensor& z0, int steps, double perturb_sd, std::uint64_t seed);

/// Least-squares affine map x -> A x + b from `from` rows to `to` rows,
/// used only to align latent spaces for plotting exports.
struct AffineMap {
  Tensor A;  // d_to x d_from
  Tensor b;  // 1 x d_to
  Tensor apply(const Tensor& x) const;
};
AffineMap affine_fit(const Tensor& from, const Tensor& to);

}  // namespace metassm
