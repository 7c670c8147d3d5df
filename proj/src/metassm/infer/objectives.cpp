#include "metassm/infer/objectives.hpp"

#include <cmath>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

namespace {

const std::string kNames[] = {"dkf", "vsmc", "dvbf"};

Var noise_const(Tape& tp, RngStream& noise, int r, int c) {
  Tensor t(r, c);
  noise.fill_normal(std::span<double>(t.v));
  return tp.constant(t);
}

void check_batch(const DatasetBatch& b) {
  if (b.T < 1 || b.B < 1) throw UsageError("batch needs T >= 1 and B >= 1");
  if (b.y.rows != b.T * b.B)
    throw DimensionError("batch slab rows must equal T*B");
}

struct Pieces {
  Tape& tp;
  const Model& model;
  const DatasetBatch& batch;
  Var zeros_z, zeros_e;  // 1 x d rows of zeros (standard-normal priors)
  Var mu0;               // 1 x d_z
  Var q_lv;              // 1 x d_z transition log-variance
  Var r_lv;              // 1 x d_y emission log-variance
  Var y;                 // (T*B) x d_y observation slab

  Pieces(Binder& bind, const Model& m, const DatasetBatch& b)
      : tp(bind.tape()), model(m), batch(b) {
    const int d_z = m.config().dyn.d_z;
    zeros_z = tp.constant(Tensor::zeros(1, d_z));
    zeros_e = tp.constant(Tensor::zeros(1, m.config().dyn.d_e));
    mu0 = m.prior_mu0_row(bind);
    q_lv = m.state_logvar_row(bind, b.id);
    r_lv = m.emission_logvar_row(bind, b.id);
    y = tp.constant(b.y);
  }

  /// Sum over steps and trials of log p(y_t | z_t).
  Var recon(Binder& bind, Var z) {
    Var mean = model.emit_mean(bind, batch.id, z);
    return tp.sum_all(tp.gauss_logpdf_rows(y, mean, r_lv));
  }

  /// Transition-prior mean rows aligned with z rows B..T*B.
  Var prior_mean_tail(const Dynamics& dyn, Var z) {
    return dyn.mean(tp.slice_rows(z, 0, (batch.T - 1) * batch.B));
  }

  /// Sum over steps and trials of log p(z_t | z_{t-1}, e); t=1 against the
  /// initial-state prior N(mu0, I).
  Var transition_logpdf(const Dynamics& dyn, Var z) {
    const int B = batch.B, TB = batch.T * batch.B;
    Var head = tp.gauss_logpdf_rows(tp.slice_rows(z, 0, B), mu0, zeros_z);
    Var total = tp.sum_all(head);
    if (batch.T > 1) {
      Var tail = tp.gauss_logpdf_rows(tp.slice_rows(z, B, TB),
                                      prior_mean_tail(dyn, z), q_lv);
      total = tp.add(total, tp.sum_all(tail));
    }
    return total;
  }

  /// KL(q(e) || N(0, I)) with the configured weighting; zero constant when
  /// there is no embedding posterior.
  Var embed_kl(const GaussianVars* q_e, Var e_sample,
               const ObjectiveConfig& cfg) {
    if (!q_e) return tp.constant_scalar(0.0);
    Var kl;
    if (cfg.analytic_kl) {
      kl = tp.gauss_kl_rows(q_e->mean, q_e->logvar, zeros_e, zeros_e);
    } else {
      Var lq = tp.gauss_logpdf_rows(e_sample, q_e->mean, q_e->logvar);
      Var lp = tp.gauss_logpdf_rows(e_sample, zeros_e, zeros_e);
      kl = tp.sub(lq, lp);
    }
    if (cfg.kl_embed_per_trial)
      kl = tp.scalar_affine(kl, static_cast<double>(batch.B), 0.0);
    return kl;
  }

  Var assemble(ElboTermVars& t, const ObjectiveConfig& cfg) {
    Var total = tp.sub(t.recon, t.kl_state);
    total = tp.sub(total, t.kl_embed);
    total = tp.sub(total, tp.scalar_affine(t.penalty, cfg.lambda_fro, 0.0));
    return total;
  }
};

Var dyn_embedding(const Model& model, Var e_sample) {
  return model.config().dyn.variant == Variant::kSharedOnly ? Var{} : e_sample;
}

}  // namespace

Objective parse_objective(const std::string& tag) {
  for (int i = 0; i < 3; ++i)
    if (tag == kNames[i]) return static_cast<Objective>(i);
  throw ConfigError("unknown objective: " + tag +
                    " (expected dkf, vsmc or dvbf)");
}

const std::string& objective_name(Objective o) {
  return kNames[static_cast<int>(o)];
}

ElboTermVars elbo_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_z,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise) {
  check_batch(batch);
  Tape& tp = bind.tape();
  Pieces pc(bind, model, batch);
  const int B = batch.B, TB = batch.T * batch.B;
  const int d_z = model.config().dyn.d_z;

  Dynamics dyn(bind, model.config().dyn, dyn_embedding(model, e_sample));
  Var z = tp.reparam(q_z.mean, q_z.logvar, noise_const(tp, noise, TB, d_z));

  ElboTermVars t;
  t.rows = TB;
  t.states = z;
  t.recon = pc.recon(bind, z);
  if (cfg.analytic_kl) {
    Var head = tp.gauss_kl_rows(tp.slice_rows(q_z.mean, 0, B),
                                tp.slice_rows(q_z.logvar, 0, B), pc.mu0,
                                pc.zeros_z);
    t.kl_state = tp.sum_all(head);
    if (batch.T > 1) {
      Var tail = tp.gauss_kl_rows(tp.slice_rows(q_z.mean, B, TB),
                                  tp.slice_rows(q_z.logvar, B, TB),
                                  pc.prior_mean_tail(dyn, z), pc.q_lv);
      t.kl_state = tp.add(t.kl_state, tp.sum_all(tail));
    }
  } else {
    Var lq = tp.sum_all(tp.gauss_logpdf_rows(z, q_z.mean, q_z.logvar));
    t.kl_state = tp.sub(lq, pc.transition_logpdf(dyn, z));
  }
  t.kl_embed = pc.embed_kl(q_e, e_sample, cfg);
  t.penalty = dyn.penalty();
  if (q_e) {
    t.e_mean = q_e->mean;
    t.e_logvar = q_e->logvar;
  }
  t.total = pc.assemble(t, cfg);
  return t;
}

ElboTermVars vsmc_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_z,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise) {
  check_batch(batch);
  if (cfg.particles < 1) throw UsageError("particle count must be >= 1");
  Tape& tp = bind.tape();
  Pieces pc(bind, model, batch);
  const int TB = batch.T * batch.B;
  const int d_z = model.config().dyn.d_z;
  const int N = cfg.particles;

  Dynamics dyn(bind, model.config().dyn, dyn_embedding(model, e_sample));

  std::vector<Var> log_w(N);
  for (int i = 0; i < N; ++i) {
    Var z = tp.reparam(q_z.mean, q_z.logvar, noise_const(tp, noise, TB, d_z));
    Var emit = tp.gauss_logpdf_rows(pc.y, model.emit_mean(bind, batch.id, z),
                                    pc.r_lv);
    Var trans_head = tp.gauss_logpdf_rows(tp.slice_rows(z, 0, batch.B),
                                          pc.mu0, pc.zeros_z);
    Var trans = batch.T > 1
                    ? tp.concat_rows(trans_head,
                                     tp.gauss_logpdf_rows(
                                         tp.slice_rows(z, batch.B, TB),
                                         pc.prior_mean_tail(dyn, z), pc.q_lv))
                    : trans_head;
    Var prop = tp.gauss_logpdf_rows(z, q_z.mean, q_z.logvar);
    log_w[i] = tp.sub(tp.add(emit, trans), prop);
  }
  Var w = N == 1 ? log_w[0] : tp.concat_cols(log_w);

  ElboTermVars t;
  t.rows = TB;
  // sum over (t, trial) of log( (1/N) sum_i w_t^i )
  t.recon = tp.scalar_affine(tp.sum_all(tp.logsumexp_rows(w)), 1.0,
                             -static_cast<double>(TB) * std::log(N));
  t.kl_state = tp.constant_scalar(0.0);
  ObjectiveConfig sampled = cfg;
  sampled.analytic_kl = false;  // bound uses log p(e) - log q(e) at the draw
  t.kl_embed = pc.embed_kl(q_e, e_sample, sampled);
  t.penalty = dyn.penalty();
  if (q_e) {
    t.e_mean = q_e->mean;
    t.e_logvar = q_e->logvar;
  }
  t.total = pc.assemble(t, cfg);
  return t;
}

ElboTermVars dvbf_from_posteriors(Binder& bind, const Model& model,
                                  const DatasetBatch& batch,
                                  const GaussianVars* q_e, Var e_sample,
                                  GaussianVars q_u,
                                  const ObjectiveConfig& cfg,
                                  RngStream& noise) {
  check_batch(batch);
  Tape& tp = bind.tape();
  Pieces pc(bind, model, batch);
  const int B = batch.B, TB = batch.T * batch.B;
  const int d_z = model.config().dyn.d_z;

  Dynamics dyn(bind, model.config().dyn, dyn_embedding(model, e_sample));
  Var u = tp.reparam(q_u.mean, q_u.logvar, noise_const(tp, noise, TB, d_z));

  // z_1 = mu0 + u_1 (unit prior scale); z_t = f(z_{t-1}) + Q^{1/2} u_t
  Var sqrt_q = tp.exp(tp.scalar_affine(pc.q_lv, 0.5, 0.0));
  std::vector<Var> zs(batch.T);
  zs[0] = tp.add(tp.slice_rows(u, 0, B), pc.mu0);
  for (int t = 1; t < batch.T; ++t) {
    Var ut = tp.slice_rows(u, t * B, (t + 1) * B);
    zs[t] = tp.add(dyn.mean(zs[t - 1]), tp.mul(ut, sqrt_q));
  }
  Var z = batch.T == 1 ? zs[0] : tp.concat_rows(zs);

  ElboTermVars t;
  t.rows = TB;
  t.states = z;
  t.recon = pc.recon(bind, z);
  t.kl_state = tp.sum_all(
      tp.gauss_kl_rows(q_u.mean, q_u.logvar, pc.zeros_z, pc.zeros_z));
  t.kl_embed = pc.embed_kl(q_e, e_sample, cfg);
  t.penalty = dyn.penalty();
  if (q_e) {
    t.e_mean = q_e->mean;
    t.e_logvar = q_e->logvar;
  }
  t.total = pc.assemble(t, cfg);
  return t;
}

ElboTermVars objective_graph(Binder& bind, const Model& model,
                             const DatasetBatch& batch,
                             const ObjectiveConfig& cfg, RngStream& noise) {
  check_batch(batch);
  Tape& tp = bind.tape();
  const ModelConfig& mc = model.config();
  if (batch.y.cols != model.dataset(batch.id).d_y)
    throw DimensionError("batch width does not match dataset " + batch.id);

  Var ybar = model.read_in(bind, batch.id, tp.constant(batch.y));
  const bool has_e = mc.dyn.variant != Variant::kSharedOnly;
  GaussianVars q_e;
  Var e;
  Var e_enc;
  if (has_e) {
    q_e = infer_embedding(bind, mc, ybar, batch.T, batch.B);
    e = tp.reparam(q_e.mean, q_e.logvar,
                   noise_const(tp, noise, 1, mc.dyn.d_e));
    e_enc = e;
  } else {
    e_enc = tp.constant(Tensor::zeros(1, mc.dyn.d_e));
  }
  const GaussianVars* q_e_ptr = has_e ? &q_e : nullptr;

  switch (cfg.objective) {
    case Objective::kDkf: {
      GaussianVars q_z = infer_states(bind, mc, ybar, e_enc, batch.T, batch.B);
      return elbo_from_posteriors(bind, model, batch, q_e_ptr, e, q_z, cfg,
                                  noise);
    }
    case Objective::kVsmc: {
      GaussianVars q_z = infer_states(bind, mc, ybar, e_enc, batch.T, batch.B);
      return vsmc_from_posteriors(bind, model, batch, q_e_ptr, e, q_z, cfg,
                                  noise);
    }
    case Objective::kDvbf: {
      GaussianVars q_u =
          infer_innovations(bind, mc, ybar, e_enc, batch.T, batch.B);
      return dvbf_from_posteriors(bind, model, batch, q_e_ptr, e, q_u, cfg,
                                  noise);
    }
  }
  throw UsageError("unreachable objective tag");
}

void ElboReport::check_finite() const {
  const std::pair<const char*, double> terms[] = {{"total", total},
                                                  {"recon", recon},
                                                  {"kl_state", kl_state},
                                                  {"kl_embed", kl_embed},
                                                  {"penalty", penalty}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v))
      throw NumericError(std::string("objective term is not finite: ") + name);
}

RngStream objective_noise(std::uint64_t seed, const std::string& dataset_id) {
  return RngStream(RngStream::derive(
      seed, "objective_noise", hash_bytes(dataset_id.data(), dataset_id.size())));
}

ElboReport evaluate_objective(const Model& model,
                              const std::vector<DatasetBatch>& batches,
                              const ObjectiveConfig& cfg, std::uint64_t seed) {
  ElboReport rep;
  // Binder only creates leaves during evaluation; the store is not written.
  ParamStore& store = const_cast<Model&>(model).store();
  for (const auto& batch : batches) {
    Tape tp;
    Binder bind(tp, store);
    RngStream noise = objective_noise(seed, batch.id);
    ElboTermVars t = objective_graph(bind, model, batch, cfg, noise);
    const double total = tp.scalar_value(t.total);
    rep.total += total;
    rep.recon += tp.scalar_value(t.recon);
    rep.kl_state += tp.scalar_value(t.kl_state);
    rep.kl_embed += tp.scalar_value(t.kl_embed);
    rep.penalty += tp.scalar_value(t.penalty);
    rep.rows += t.rows;
    rep.per_dataset.emplace_back(batch.id, total);
  }
  rep.check_finite();
  return rep;
}

}  // namespace metassm
