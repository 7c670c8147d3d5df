#pragma once

#include "metassm/ssm/model.hpp"

namespace metassm {

/// Diagonal Gaussian expressed as tape nodes (mean and log-variance share a
/// shape).
struct GaussianVars {
  Var mean;
  Var logvar;
};

/// Trial-aggregated embedding posterior from a t-major batch ((T*B) x d_ybar
/// read-in outputs): per-trial recurrent pass, final-step head, then means
/// and softplus-variances averaged across the B trials -> 1 x d_e.
GaussianVars infer_embedding(Binder& bind, const ModelConfig& cfg, Var ybar,
                             int T, int B);

/// Per-step state posterior from concat(ybar_t, e), one diagonal Gaussian
/// per row of the slab -> (T*B) x d_z. Bidirectional by default.
GaussianVars infer_states(Binder& bind, const ModelConfig& cfg, Var ybar,
                          Var e_row, int T, int B);

/// Innovation posterior for the filtering-style objective: a backward-only
/// recurrent pass, so the step-t output depends on observations t..T only.
GaussianVars infer_innovations(Binder& bind, const ModelConfig& cfg, Var ybar,
                               Var e_row, int T, int B);

}  // namespace metassm
