#include "metassm/train/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "metassm/util/errors.hpp"

namespace metassm {

double cosine_lr(std::int64_t step, std::int64_t total, double base) {
  if (total < 1) throw UsageError("schedule needs total >= 1");
  if (step < 0 || step > total)
    throw UsageError("schedule step out of [0, total]");
  if (step == 0) return base;
  if (step == total) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

void AdamW::freeze_prefix(const std::string& prefix) {
  frozen_.push_back(prefix);
}

void AdamW::allow_only(const std::vector<std::string>& prefixes) {
  allow_ = prefixes;
}

namespace {
bool starts_with_any(const std::string& name,
                     const std::vector<std::string>& prefixes) {
  for (const auto& p : prefixes)
    if (name.rfind(p, 0) == 0) return true;
  return false;
}
}  // namespace

bool AdamW::trainable(const std::string& name) const {
  if (!allow_.empty() && !starts_with_any(name, allow_)) return false;
  return !starts_with_any(name, frozen_);
}

double AdamW::step(ParamStore& store, const std::vector<std::int32_t>& touched,
                   double lr) {
  std::vector<std::int32_t> ids(touched);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());

  std::vector<std::int32_t> active;
  active.reserve(ids.size());
  double norm2 = 0.0;
  for (std::int32_t id : ids) {
    if (!trainable(store.name(id))) continue;
    active.push_back(id);
    for (double g : store.grad(id).v) {
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient in " + store.name(id));
      norm2 += g * g;
    }
  }
  const double norm = std::sqrt(norm2);
  const double scale =
      (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm
                                                      : 1.0;

  for (std::int32_t id : active) {
    Tensor& p = store.value(id);
    const Tensor& g = store.grad(id);
    Moments& st = moments_[store.name(id)];
    if (st.t == 0) {
      st.m = Tensor::zeros(p.rows, p.cols);
      st.v = Tensor::zeros(p.rows, p.cols);
    }
    ++st.t;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.v[i] * scale;
      st.m.v[i] = cfg_.beta1 * st.m.v[i] + (1.0 - cfg_.beta1) * gi;
      st.v.v[i] = cfg_.beta2 * st.v.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mh = st.m.v[i] / c1;
      const double vh = st.v.v[i] / c2;
      p.v[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) +
                      cfg_.weight_decay * p.v[i]);
    }
  }
  return norm;
}

}  // namespace metassm
