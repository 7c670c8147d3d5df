#include "metassm/dyn/dynamics.hpp"

#include <array>

#include "metassm/util/errors.hpp"

namespace metassm {

namespace {
const std::array<std::string, 4> kVariantNames = {
    "lowrank", "shared", "embedding_input", "linear_adapter"};
const std::array<std::string, 3> kNonlinNames = {"tanh", "relu", "identity"};
}  // namespace

Variant parse_variant(const std::string& tag) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (tag == kVariantNames[i]) return static_cast<Variant>(i);
  throw ConfigError("unknown dynamics variant: " + tag);
}

const std::string& variant_name(Variant v) {
  return kVariantNames[static_cast<std::size_t>(v)];
}

Nonlin parse_nonlin(const std::string& tag) {
  for (std::size_t i = 0; i < kNonlinNames.size(); ++i)
    if (tag == kNonlinNames[i]) return static_cast<Nonlin>(i);
  throw ConfigError("unknown nonlinearity: " + tag);
}

const std::string& nonlin_name(Nonlin n) {
  return kNonlinNames[static_cast<std::size_t>(n)];
}

int DynamicsConfig::hyper_out_dim() const {
  int out = 0;
  if (adapt_in) out += (d1 + input_width()) * d_r;
  if (adapt_hh) out += (d2 + d1) * d_r;
  return out;
}

int DynamicsConfig::theta_dim() const {
  return d1 * input_width() + d2 * d1 + d_z * d2 + d1 + d2 + d_z;
}

void add_dynamics_params(ParamStore& store, const DynamicsConfig& cfg,
                         RngStream& rng) {
  if (cfg.d_z < 1 || cfg.d1 < 1 || cfg.d2 < 1)
    throw ConfigError("dynamics widths must be positive");
  if (cfg.d_r > std::min({cfg.d1, cfg.d2, cfg.input_width()}))
    throw ConfigError("adaptation rank exceeds a matrix dimension");

  const int in_w = cfg.input_width();
  store.add("dyn.W_in", init_linear_weight(cfg.d1, in_w, rng));
  store.add("dyn.W_hh", init_linear_weight(cfg.d2, cfg.d1, rng));
  store.add("dyn.W_o", init_linear_weight(cfg.d_z, cfg.d2, rng));
  store.add("dyn.b_in", Tensor::zeros(1, cfg.d1));
  store.add("dyn.b_hh", Tensor::zeros(1, cfg.d2));
  store.add("dyn.b_o", Tensor::zeros(1, cfg.d_z));

  if (cfg.variant == Variant::kLowRankHypernet) {
    add_mlp(store, "hyper",
            {cfg.d_e, cfg.hyper_hidden, cfg.hyper_hidden, cfg.hyper_out_dim()},
            rng);
    // Zero only the V-producing outputs of the head: the delta U·V^T starts
    // at exactly zero (shared model), but gradients still flow into V.
    // Zeroing U as well would park the factors on a gradient-free saddle.
    Tensor& w = store.value("hyper.l2.W");
    Tensor& b = store.value("hyper.l2.b");
    int off = 0;
    auto zero_rows = [&](int first, int count) {
      for (int r = first; r < first + count; ++r) {
        for (int c = 0; c < w.cols; ++c) w.at(r, c) = 0.0;
        b.v[r] = 0.0;
      }
    };
    if (cfg.adapt_in) {
      zero_rows(off + cfg.d1 * cfg.d_r, in_w * cfg.d_r);
      off += (cfg.d1 + in_w) * cfg.d_r;
    }
    if (cfg.adapt_hh) zero_rows(off + cfg.d2 * cfg.d_r, cfg.d1 * cfg.d_r);
  } else if (cfg.variant == Variant::kLinearAdapter) {
    // Delta is linear in e with no bias; zero start = shared model, and the
    // additive structure keeps gradients nonzero at zero.
    store.add("adapter.A", Tensor::zeros(cfg.d_e, cfg.theta_dim()));
  }
}

LowRankFactors hypernet_factors(Binder& bind, const DynamicsConfig& cfg,
                                Var e_row) {
  Tape& tp = bind.tape();
  Var out = apply_mlp(bind, "hyper", 3, e_row);
  LowRankFactors f;
  int off = 0;
  auto take = [&](int rows) {
    Var s = tp.slice_cols(out, off, off + rows * cfg.d_r);
    off += rows * cfg.d_r;
    return tp.reshape(s, rows, cfg.d_r);
  };
  if (cfg.adapt_in) {
    f.u_in = take(cfg.d1);
    f.v_in = take(cfg.input_width());
  }
  if (cfg.adapt_hh) {
    f.u_hh = take(cfg.d2);
    f.v_hh = take(cfg.d1);
  }
  return f;
}

Var adapter_delta_row(Binder& bind, const DynamicsConfig& cfg, Var e_row) {
  Tape& tp = bind.tape();
  if (tp.cols(e_row) != cfg.d_e)
    throw DimensionError("embedding must be 1 x d_e");
  return tp.matmul(e_row, bind("adapter.A"));
}

Dynamics::Dynamics(Binder& bind, const DynamicsConfig& cfg, Var e_row)
    : bind_(bind), cfg_(cfg), e_row_(e_row) {
  Tape& tp = bind.tape();
  const bool needs_e = cfg.variant != Variant::kSharedOnly;
  if (needs_e) {
    if (!e_row.ok()) throw UsageError("this dynamics variant needs an embedding");
    if (tp.rows(e_row) != 1 || tp.cols(e_row) != cfg.d_e)
      throw DimensionError("embedding must be 1 x d_e");
  }

  penalty_ = tp.constant_scalar(0.0);
  if (cfg.variant == Variant::kLowRankHypernet) {
    const LowRankFactors f = hypernet_factors(bind, cfg, e_row);
    if (cfg.adapt_in) {
      u_in_ = f.u_in;
      v_in_ = f.v_in;
      penalty_ = tp.add(penalty_,
                        tp.sqrt_guard(tp.lowrank_fro2(u_in_, v_in_)));
    }
    if (cfg.adapt_hh) {
      u_hh_ = f.u_hh;
      v_hh_ = f.v_hh;
      penalty_ = tp.add(penalty_,
                        tp.sqrt_guard(tp.lowrank_fro2(u_hh_, v_hh_)));
    }
  } else if (cfg.variant == Variant::kLinearAdapter) {
    Var delta = adapter_delta_row(bind, cfg, e_row);
    const int in_w = cfg.input_width();
    int off = 0;
    auto take = [&](int rows, int cols) {
      Var s = tp.slice_cols(delta, off, off + rows * cols);
      off += rows * cols;
      return tp.reshape(s, rows, cols);
    };
    dw_in_ = take(cfg.d1, in_w);
    dw_hh_ = take(cfg.d2, cfg.d1);
    dw_o_ = take(cfg.d_z, cfg.d2);
    db_in_ = take(1, cfg.d1);
    db_hh_ = take(1, cfg.d2);
    db_o_ = take(1, cfg.d_z);
    penalty_ = tp.sqrt_guard(tp.sum_all(tp.square(delta)));
  }
}

Var Dynamics::activate(Var x) const {
  Tape& tp = bind_.tape();
  switch (cfg_.nonlin) {
    case Nonlin::kTanh: return tp.tanh(x);
    case Nonlin::kRelu: return tp.relu(x);
    case Nonlin::kIdentity: return x;
  }
  return x;
}

Var Dynamics::mean(Var z) const {
  Tape& tp = bind_.tape();
  if (tp.cols(z) != cfg_.d_z)
    throw DimensionError("dynamics input must have d_z columns");
  Var x = z;
  if (cfg_.variant == Variant::kEmbeddingInput)
    x = tp.concat_cols(z, tp.tile_rows(e_row_, tp.rows(z)));

  Var w_in = bind_("dyn.W_in");
  Var w_hh = bind_("dyn.W_hh");
  Var w_o = bind_("dyn.W_o");
  Var b_in = bind_("dyn.b_in");
  Var b_hh = bind_("dyn.b_hh");
  Var b_o = bind_("dyn.b_o");

  if (cfg_.variant == Variant::kLinearAdapter) {
    w_in = tp.add(w_in, dw_in_);
    w_hh = tp.add(w_hh, dw_hh_);
    w_o = tp.add(w_o, dw_o_);
    b_in = tp.add(b_in, db_in_);
    b_hh = tp.add(b_hh, db_hh_);
    b_o = tp.add(b_o, db_o_);
  }

  Var a1 = tp.add(tp.matmul(x, w_in, false, true), b_in);
  if (cfg_.variant == Variant::kLowRankHypernet && cfg_.adapt_in)
    a1 = tp.add(a1, tp.matmul(tp.matmul(x, v_in_), u_in_, false, true));
  Var h1 = activate(a1);

  Var a2 = tp.add(tp.matmul(h1, w_hh, false, true), b_hh);
  if (cfg_.variant == Variant::kLowRankHypernet && cfg_.adapt_hh)
    a2 = tp.add(a2, tp.matmul(tp.matmul(h1, v_hh_), u_hh_, false, true));
  Var h2 = activate(a2);

  return tp.add(tp.matmul(h2, w_o, false, true), b_o);
}

Tensor vector_field(ParamStore& store, const DynamicsConfig& cfg,
                    const Tensor& e_row, const Tensor& points) {
  Tape tp;
  Binder bind(tp, store);
  Var e = cfg.variant == Variant::kSharedOnly ? Var{} : tp.constant(e_row);
  Dynamics dyn(bind, cfg, e);
  Var z = tp.constant(points);
  return tp.value_copy(tp.sub(dyn.mean(z), z));
}

}  // namespace metassm
