#include "metassm/synth/sde.hpp"

#include <array>
#include <cmath>
#include <numbers>

#include "metassm/util/errors.hpp"

namespace metassm {

namespace {
const std::array<std::string, 3> kFamilyNames = {"limit_cycle", "hopf",
                                                 "duffing"};
}

SdeFamily parse_family(const std::string& tag) {
  for (std::size_t i = 0; i < kFamilyNames.size(); ++i)
    if (tag == kFamilyNames[i]) return static_cast<SdeFamily>(i);
  throw ConfigError("unknown sde family: " + tag);
}

const std::string& family_name(SdeFamily f) {
  return kFamilyNames[static_cast<std::size_t>(f)];
}

std::string SdeSpec::label() const {
  switch (family) {
    case SdeFamily::kLimitCycle:
      return "limit_cycle(omega=" + std::to_string(omega) + ")";
    case SdeFamily::kHopf:
      return "hopf(mu=" + std::to_string(mu) + ")";
    case SdeFamily::kDuffing:
      return "duffing(a=" + std::to_string(a) + ",b=" + std::to_string(b) +
             ",c=" + std::to_string(c) + ")";
  }
  return "sde";
}

double SdeSpec::regime_param() const {
  switch (family) {
    case SdeFamily::kLimitCycle: return omega;
    case SdeFamily::kHopf: return mu;
    case SdeFamily::kDuffing: return a;
  }
  return 0.0;
}

Tensor euler_maruyama(const std::function<void(const double*, double*)>& drift,
                      int dim, std::span<const double> z0, double dt, int T,
                      double sigma_w, RngStream& rng,
                      const std::string& what) {
  if (T < 1 || dt <= 0.0) throw UsageError("integrator needs T >= 1, dt > 0");
  if (static_cast<int>(z0.size()) != dim)
    throw DimensionError("initial state size does not match dim");

  Tensor out(T, dim);
  std::vector<double> z(z0.begin(), z0.end());
  std::vector<double> dz(dim), eps(dim);
  const double noise = sigma_w * std::sqrt(dt);
  for (int t = 0; t < T; ++t) {
    for (int j = 0; j < dim; ++j) {
      if (!std::isfinite(z[j]) || std::abs(z[j]) > 1e6)
        throw NumericError("sde diverged: " + what);
      out.at(t, j) = z[j];
    }
    if (t + 1 == T) break;
    drift(z.data(), dz.data());
    rng.fill_normal(std::span<double>(eps));
    for (int j = 0; j < dim; ++j) z[j] += dz[j] * dt + noise * eps[j];
  }
  return out;
}

Tensor gen_trial(const SdeSpec& spec, RngStream& rng) {
  if (spec.T < 1 || spec.dt <= 0.0 || spec.sigma_w < 0.0)
    throw ConfigError("bad sde spec: " + spec.label());

  switch (spec.family) {
    case SdeFamily::kLimitCycle: {
      if (spec.omega <= 0.0)
        throw ConfigError("limit cycle needs omega > 0: " + spec.label());
      // noise-free polar flow from the invariant circle, random phase
      double r = 1.0;
      double th = rng.uniform() * 2.0 * std::numbers::pi;
      Tensor out(spec.T, 2);
      std::vector<double> eps(2);
      const double noise = spec.sigma_w * std::sqrt(spec.dt);
      for (int t = 0; t < spec.T; ++t) {
        rng.fill_normal(std::span<double>(eps));
        out.at(t, 0) = r * std::cos(th) + noise * eps[0];
        out.at(t, 1) = r * std::sin(th) + noise * eps[1];
        r += r * (1.0 - r) * (1.0 - r) * spec.dt;
        th += spec.omega * spec.dt;
      }
      return out;
    }
    case SdeFamily::kHopf: {
      std::vector<double> z0(2);
      rng.fill_normal(std::span<double>(z0));
      auto drift = [&spec](const double* z, double* dz) {
        dz[0] = z[1];
        dz[1] = -z[0] + (spec.mu - z[0] * z[0]) * z[1];
      };
      return euler_maruyama(drift, 2, z0, spec.dt, spec.T, spec.sigma_w, rng,
                            spec.label());
    }
    case SdeFamily::kDuffing: {
      std::vector<double> z0(2);
      rng.fill_normal(std::span<double>(z0));
      auto drift = [&spec](const double* z, double* dz) {
        dz[0] = z[1];
        dz[1] = spec.a * z[1] - z[0] * (spec.b + spec.c * z[0] * z[0]);
      };
      return euler_maruyama(drift, 2, z0, spec.dt, spec.T, spec.sigma_w, rng,
                            spec.label());
    }
  }
  throw ConfigError("unreachable sde family");
}

}  // namespace metassm
