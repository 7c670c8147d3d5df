#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metassm/infer/encoders.hpp"
#include "metassm/ssm/model.hpp"
#include "metassm/util/rng.hpp"

namespace metassm {

enum class Objective { kDkf, kVsmc, kDvbf };

Objective parse_objective(const std::string& tag);
const std::string& objective_name(Objective o);

struct ObjectiveConfig {
  Objective objective = Objective::kDkf;
  double lambda_fro = 1e-3;  // weight of the adaptation Frobenius penalty
  int particles = 4;         // VSMC only
  /// Closed-form Gaussian KLs (default) vs sampled log-density ratios.
  bool analytic_kl = true;
  /// Charge the embedding KL once per trial instead of once per dataset.
  bool kl_embed_per_trial = false;
};

/// One dataset's mini-batch as a t-major slab: row t*B+b is trial b at step t.
struct DatasetBatch {
  std::string id;
  Tensor y;  // (T*B) x d_y
  int T = 0;
  int B = 0;
};

/// Objective value decomposed on the tape (sign convention: maximize total).
/// total = recon - kl_state - kl_embed - lambda * penalty. For VSMC, recon
/// holds the particle bound and kl_state is zero; for the filtering
/// objective, kl_state holds the innovation KL.
struct ElboTermVars {
  Var total, recon, kl_state, kl_embed, penalty;
  Var e_mean, e_logvar;  // embedding posterior; invalid when unused
  Var states;            // latent sample behind recon ((T*B) x d_z); invalid
                         // for the particle bound
  int rows = 0;          // T*B, the number of (step, trial) terms
};

/// Builds the configured objective's graph for one dataset batch. Noise is
/// drawn from `noise` in a fixed order (embedding first, then state slabs),
/// so a given stream state yields a bit-identical value.
ElboTermVars objective_graph(Binder& bind, const Model& model,
                             const DatasetBatch& batch,
                             const ObjectiveConfig& cfg, RngStream& noise);

/// Same graphs but with the posteriors supplied by the caller instead of the
/// encoders; exactness tests drive these with externally computed posteriors.
/// `q_e` may be null (shared-dynamics variant), in which case `e_sample` is
/// ignored; otherwise `e_sample` must be the draw that conditioned `q_z`.
ElboTermVars elbo_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_z,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise);
ElboTermVars vsmc_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_z,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise);
ElboTermVars dvbf_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_u,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise);

/// Host-side objective values, summed over datasets.
struct ElboReport {
  double total = 0, recon = 0, kl_state = 0, kl_embed = 0, penalty = 0;
  std::vector<std::pair<std::string, double>> per_dataset;  // id -> total
  int rows = 0;

  void check_finite() const;  // throws NumericError naming the bad term
};

/// Evaluates the objective without touching gradients. Per-dataset noise
/// streams are derived from (seed, dataset id), so dataset order is
/// irrelevant and results are reproducible.
ElboReport evaluate_objective(const Model& model,
                              const std::vector<DatasetBatch>& batches,
                              const ObjectiveConfig& cfg, std::uint64_t seed);

/// Noise stream for one dataset's objective evaluation at a given seed.
RngStream objective_noise(std::uint64_t seed, const std::string& dataset_id);

}  // namespace metassm
