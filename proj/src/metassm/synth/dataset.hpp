#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "metassm/synth/sde.hpp"

namespace metassm {

/// Random linear readout y = C z + noise lifting 2-D latents into d_y dims.
struct ObservationLift {
  Tensor C;  // d_y x d_z, entries N(0, 1/sqrt(d_z))
  double noise_var = 0.01;
};

ObservationLift make_lift(int d_z, int d_y, RngStream& rng);

/// Applies the lift to one trajectory (T x d_z) -> T x d_y.
Tensor lift_observations(const Tensor& latents, const ObservationLift& lift,
                         RngStream& rng);

struct DatasetSplits {
  std::vector<int> train, val, test;  // trial indices, disjoint + exhaustive
};

/// A generated dataset: trial-major stacks (row = trial * T + t), the true
/// latents and the regime that produced them.
struct DatasetBundle {
  std::string id;
  SdeSpec spec;
  std::uint64_t seed = 0;
  int trials = 0;
  int d_y = 0;
  int d_z = 2;
  Tensor observations;  // (trials * T) x d_y
  Tensor latents;       // (trials * T) x d_z
  DatasetSplits splits;

  /// One trial's observations as a T x d_y view copy.
  Tensor trial_obs(int k) const;
  Tensor trial_latents(int k) const;

  /// t-major slab of the given trials ((T*n) x d_y), the training layout.
  Tensor slab_obs(const std::vector<int>& trial_ids) const;
};

/// Generates `n_train + n_val + n_test` trials of the regime with a fresh
/// random lift. `d_y` = 0 draws the width uniformly from [30, 100]. Trials
/// use per-index derived streams, so the bundle is a pure function of
/// (id, spec, counts, seed).
DatasetBundle generate_dataset(const std::string& id, const SdeSpec& spec,
                               int n_train, int n_val, int n_test, int d_y,
                               std::uint64_t seed);

/// Directory layout: manifest.json + observations.bin + latents.bin.
void save_bundle(const DatasetBundle& bundle,
                 const std::filesystem::path& dir);
DatasetBundle load_bundle(const std::filesystem::path& dir);

}  // namespace metassm
