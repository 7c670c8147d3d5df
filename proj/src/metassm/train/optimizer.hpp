#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "metassm/ssm/params.hpp"

namespace metassm {

struct AdamWConfig {
  double lr = 0.005;  // peak rate; the schedule scales it per step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
  double clip_norm = 10.0;  // global gradient norm cap; <= 0 disables
};

/// Cosine annealing: base/2 * (1 + cos(pi * step / total)). Exactly `base`
/// at step 0 and exactly 0 at step == total.
double cosine_lr(std::int64_t step, std::int64_t total, double base);

/// Adam with decoupled weight decay over a ParamStore. Moments live per
/// parameter name with their own step counts, so parameters registered
/// late (few-shot alignment) still get correct bias correction.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }

  /// Skip updates for parameters whose names start with `prefix`.
  void freeze_prefix(const std::string& prefix);
  /// If any allow prefixes are set, only matching names are trainable.
  void allow_only(const std::vector<std::string>& prefixes);
  bool trainable(const std::string& name) const;

  /// One update with learning rate `lr` over the `touched` parameter ids
  /// (deduped; frozen names skipped), consuming store gradients. Returns
  /// the pre-clip global gradient norm. Non-finite gradients fail fast.
  double step(ParamStore& store, const std::vector<std::int32_t>& touched,
              double lr);

 private:
  struct Moments {
    Tensor m, v;
    std::int64_t t = 0;
  };

  AdamWConfig cfg_;
  std::unordered_map<std::string, Moments> moments_;
  std::vector<std::string> frozen_;
  std::vector<std::string> allow_;
};

}  // namespace metassm
