#pragma once

#include <optional>
#include <string>

#include "metassm/ssm/params.hpp"

namespace metassm {

enum class Variant {
  kLowRankHypernet,
  kSharedOnly,
  kEmbeddingInput,
  kLinearAdapter,
};

enum class Nonlin { kTanh, kRelu, kIdentity };

Variant parse_variant(const std::string& tag);
const std::string& variant_name(Variant v);
Nonlin parse_nonlin(const std::string& tag);
const std::string& nonlin_name(Nonlin n);

struct DynamicsConfig {
  int d_z = 2;
  int d1 = 32;
  int d2 = 32;
  int d_e = 2;
  int d_r = 1;
  int hyper_hidden = 16;
  bool adapt_in = true;
  bool adapt_hh = true;
  Variant variant = Variant::kLowRankHypernet;
  Nonlin nonlin = Nonlin::kTanh;

  /// Input width of W_in (embedding is concatenated for EmbeddingInput).
  int input_width() const {
    return variant == Variant::kEmbeddingInput ? d_z + d_e : d_z;
  }
  /// Hypernetwork head width: (rows+cols)*d_r per adapted matrix.
  int hyper_out_dim() const;
  /// Flattened size of all dynamics parameters (LinearAdapter delta width).
  int theta_dim() const;
};

/// Registers the shared dynamics parameters (and the variant's adaptation
/// parameters) into the store under "dyn.*", "hyper.*", "adapter.*".
void add_dynamics_params(ParamStore& store, const DynamicsConfig& cfg,
                         RngStream& rng);

/// Low-rank factors emitted by the hypernetwork for one embedding.
/// Each factor is rows x d_r; only the adapted matrices' fields are valid.
struct LowRankFactors {
  Var u_in, v_in;
  Var u_hh, v_hh;
};

/// Runs the hypernetwork on e (1 x d_e) and slices its head into factors.
LowRankFactors hypernet_factors(Binder& bind, const DynamicsConfig& cfg,
                                Var e_row);

/// LinearAdapter delta over all flattened dynamics parameters: e * A,
/// 1 x theta_dim, linear in e with no bias.
Var adapter_delta_row(Binder& bind, const DynamicsConfig& cfg, Var e_row);

/// Embedding-conditioned dynamics bound to one tape/graph. The adaptation
/// (hypernet factors or adapter delta) is computed once at construction and
/// reused by every mean() call, so a whole trajectory costs one hypernet
/// evaluation.
class Dynamics {
 public:
  /// `e_row` is a 1 x d_e node; pass an invalid Var for SharedOnly.
  Dynamics(Binder& bind, const DynamicsConfig& cfg, Var e_row);

  /// One-step mean: z (N x d_z) -> f(z) (N x d_z).
  Var mean(Var z) const;

  /// Frobenius norm of the embedding-conditioned weight change (1 x 1).
  Var penalty() const { return penalty_; }

 private:
  Binder& bind_;
  const DynamicsConfig cfg_;
  Var e_row_;
  // low-rank factors (rows x d_r each), valid per adapt flags
  Var u_in_, v_in_, u_hh_, v_hh_;
  // full-parameter deltas for LinearAdapter
  Var dw_in_, dw_hh_, dw_o_, db_in_, db_hh_, db_o_;
  Var penalty_;

  Var activate(Var x) const;
};

/// Displacements f(z) - z for each row of `points`, with parameters read
/// from the store (no gradients). `e_row` must be 1 x d_e (ignored for
/// SharedOnly).
Tensor vector_field(ParamStore& store, const DynamicsConfig& cfg,
                    const Tensor& e_row, const Tensor& points);

}  // namespace metassm
