#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metassm/dyn/dynamics.hpp"
#include "metassm/ssm/params.hpp"

namespace metassm {

struct ModelConfig {
  DynamicsConfig dyn;
  int d_ybar = 8;
  int readin_hidden = 64;     // 0 = single linear read-in layer
  int embed_rnn_width = 16;
  int state_rnn_width = 64;
  bool embed_bidirectional = false;
  bool state_bidirectional = true;
  double var_floor = 1e-6;
  double init_emission_var = 0.1;
  double init_state_var = 0.01;
};

struct DatasetInfo {
  std::string id;
  int d_y = 0;
  int readin_layers = 2;
};

inline double softplus_inv(double y) {
  // inverse of log(1+e^x); y must be > 0
  return y > 30.0 ? y : std::log(std::expm1(y));
}

/// Hierarchical generative model: shared dynamics family + encoders +
/// per-dataset likelihood, read-in and state noise. All parameters live in
/// one named store; "ds.<id>." prefixes isolate per-dataset parameters.
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  void register_dataset(const std::string& id, int d_y);
  bool has_dataset(const std::string& id) const;
  const DatasetInfo& dataset(const std::string& id) const;
  const std::vector<DatasetInfo>& datasets() const { return datasets_; }

  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  // --- tape-side builders (shapes are per-row batched) ---

  /// Per-dataset read-in network: (N x d_y) -> (N x d_ybar).
  Var read_in(Binder& bind, const std::string& id, Var y) const;
  /// Emission mean C z + D: (N x d_z) -> (N x d_y).
  Var emit_mean(Binder& bind, const std::string& id, Var z) const;
  /// log R_diag as 1 x d_y (softplus parameterization + variance floor).
  Var emission_logvar_row(Binder& bind, const std::string& id) const;
  /// log Q_diag as 1 x d_z.
  Var state_logvar_row(Binder& bind, const std::string& id) const;
  /// Initial-state prior mean, 1 x d_z (variance fixed at 1).
  Var prior_mu0_row(Binder& bind) const;
  /// Embedding-conditioned dynamics bound to this graph.
  Dynamics dynamics(Binder& bind, Var e_row) const;

  // --- host-side helpers ---

  /// Current state-noise variance vector for a dataset (host copy).
  std::vector<double> state_var(const std::string& id) const;

  struct Trajectory {
    Tensor z;  // T x d_z
    Tensor y;  // T x d_y
  };
  /// Ancestral sampling through the transition and emission; `noise_free`
  /// propagates means only. z1 defaults to the initial prior mean.
  Trajectory sample_trajectory(const std::string& id, const Tensor& e_row,
                               int T, const Tensor* z1, std::uint64_t seed,
                               bool noise_free);

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  ParamStore store_;
  std::vector<DatasetInfo> datasets_;

  std::string ds_prefix(const std::string& id) const { return "ds." + id + "."; }
  const DatasetInfo* find(const std::string& id) const;
};

}  // namespace metassm
