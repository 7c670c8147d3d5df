#include "metassm/infer/encoders.hpp"

#include "metassm/util/errors.hpp"

namespace metassm {

namespace {

void check_slab(Tape& tp, Var ybar, int T, int B, int width) {
  if (T < 1 || B < 1) throw UsageError("encoder batch needs T >= 1, B >= 1");
  if (tp.rows(ybar) != T * B || tp.cols(ybar) != width)
    throw DimensionError("encoder slab must be (T*B) x input width");
}

/// Splits a head output (N x 2d) into mean and log(softplus(pre-variance)).
GaussianVars split_head(Tape& tp, Var head, int d) {
  GaussianVars g;
  g.mean = tp.slice_cols(head, 0, d);
  g.logvar = tp.log(tp.softplus(tp.slice_cols(head, d, 2 * d)));
  return g;
}

Var with_embedding(Tape& tp, Var ybar, Var e_row, int rows) {
  return tp.concat_cols(ybar, tp.tile_rows(e_row, rows));
}

}  // namespace

GaussianVars infer_embedding(Binder& bind, const ModelConfig& cfg, Var ybar,
                             int T, int B) {
  Tape& tp = bind.tape();
  check_slab(tp, ybar, T, B, cfg.d_ybar);
  const int w = cfg.embed_rnn_width;

  Var fwd = apply_gru_slab(bind, "enc.embed.fwd", ybar, T, B, w);
  Var h = tp.slice_rows(fwd, (T - 1) * B, T * B);
  if (cfg.embed_bidirectional) {
    Var bwd = apply_gru_slab(bind, "enc.embed.bwd", ybar, T, B, w,
                             /*reverse=*/true);
    h = tp.concat_cols(h, tp.slice_rows(bwd, 0, B));
  }
  Var head = apply_mlp(bind, "enc.embed.head", 1, h);  // B x 2 d_e

  const int d_e = cfg.dyn.d_e;
  Var means = tp.slice_cols(head, 0, d_e);
  Var vars = tp.softplus(tp.slice_cols(head, d_e, 2 * d_e));
  GaussianVars g;
  g.mean = tp.col_mean(means);
  g.logvar = tp.log(tp.col_mean(vars));
  return g;
}

GaussianVars infer_states(Binder& bind, const ModelConfig& cfg, Var ybar,
                          Var e_row, int T, int B) {
  Tape& tp = bind.tape();
  check_slab(tp, ybar, T, B, cfg.d_ybar);
  const int w = cfg.state_rnn_width;

  Var x = with_embedding(tp, ybar, e_row, T * B);
  Var h = apply_gru_slab(bind, "enc.state.fwd", x, T, B, w);
  if (cfg.state_bidirectional) {
    Var bwd = apply_gru_slab(bind, "enc.state.bwd", x, T, B, w,
                             /*reverse=*/true);
    h = tp.concat_cols(h, bwd);
  }
  Var head = apply_mlp(bind, "enc.state.head", 1, h);  // (T*B) x 2 d_z
  return split_head(tp, head, cfg.dyn.d_z);
}

GaussianVars infer_innovations(Binder& bind, const ModelConfig& cfg, Var ybar,
                               Var e_row, int T, int B) {
  Tape& tp = bind.tape();
  check_slab(tp, ybar, T, B, cfg.d_ybar);

  Var x = with_embedding(tp, ybar, e_row, T * B);
  Var h = apply_gru_slab(bind, "enc.innov.bwd", x, T, B, cfg.state_rnn_width,
                         /*reverse=*/true);
  Var head = apply_mlp(bind, "enc.innov.head", 1, h);
  return split_head(tp, head, cfg.dyn.d_z);
}

}  // namespace metassm
