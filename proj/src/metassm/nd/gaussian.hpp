#pragma once

#include <cmath>
#include <numbers>
#include <span>

namespace metassm {

/// Host-side diagonal-Gaussian helpers (no autodiff); the tape has fused
/// counterparts for training graphs.

inline double gauss_kl_diag(std::span<const double> mu_q,
                            std::span<const double> lv_q,
                            std::span<const double> mu_p,
                            std::span<const double> lv_p) {
  double acc = 0.0;
  for (std::size_t i = 0; i < mu_q.size(); ++i) {
    const double dm = mu_q[i] - mu_p[i];
    acc += std::exp(lv_q[i] - lv_p[i]) + dm * dm * std::exp(-lv_p[i]) - 1.0 +
           lv_p[i] - lv_q[i];
  }
  return 0.5 * acc;
}

inline double gauss_logpdf_diag(std::span<const double> x,
                                std::span<const double> mu,
                                std::span<const double> lv) {
  const double ln2pi = std::log(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mu[i];
    acc += ln2pi + lv[i] + d * d * std::exp(-lv[i]);
  }
  return -0.5 * acc;
}

}  // namespace metassm
