#pragma once

#include <functional>
#include <span>
#include <string>

#include "metassm/nd/tensor.hpp"
#include "metassm/util/rng.hpp"

namespace metassm {

enum class SdeFamily { kLimitCycle, kHopf, kDuffing };

SdeFamily parse_family(const std::string& tag);
const std::string& family_name(SdeFamily f);

/// One synthetic dynamical regime. Only the fields of the active family are
/// meaningful (omega for the limit cycle, mu for Hopf, a/b/c for Duffing).
struct SdeSpec {
  SdeFamily family = SdeFamily::kLimitCycle;
  double omega = 2.0;
  double mu = 0.0;
  double a = 0.0;
  double b = 0.0;
  double c = 0.1;
  double sigma_w = 5.0;  // diffusion scale; multiplied by sqrt(dt) per step
  double dt = 0.04;
  int T = 300;

  std::string label() const;

  /// The scalar regime parameter diagnostics correlate against.
  double regime_param() const;
};

/// Euler-Maruyama rollout: row 0 is z0, then
/// z_{t+1} = z_t + drift(z_t) dt + sigma_w sqrt(dt) eps_t. Throws a numeric
/// error named `what` if the state grows past 1e6.
Tensor euler_maruyama(const std::function<void(const double*, double*)>& drift,
                      int dim, std::span<const double> z0, double dt, int T,
                      double sigma_w, RngStream& rng,
                      const std::string& what = "sde");

/// One latent trajectory (T x 2) of the given regime. The limit cycle
/// integrates (r, theta) noise-free from r=1 and a random phase and applies
/// the diffusion term to the Cartesian readout; the other families are
/// integrated directly with state noise.
Tensor gen_trial(const SdeSpec& spec, RngStream& rng);

}  // namespace metassm
