#include "metassm/ssm/model.hpp"

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

Model::Model(ModelConfig cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed) {
  RngStream rng(RngStream::derive(seed, "model_init"));
  add_dynamics_params(store_, cfg_.dyn, rng);
  store_.add("prior.mu0", Tensor::zeros(1, cfg_.dyn.d_z));

  const int d_e = cfg_.dyn.d_e;
  const int d_z = cfg_.dyn.d_z;

  RngStream enc_rng = rng.child("encoders");
  add_gru(store_, "enc.embed.fwd", cfg_.d_ybar, cfg_.embed_rnn_width, enc_rng);
  if (cfg_.embed_bidirectional)
    add_gru(store_, "enc.embed.bwd", cfg_.d_ybar, cfg_.embed_rnn_width,
            enc_rng);
  const int embed_head_in =
      cfg_.embed_rnn_width * (cfg_.embed_bidirectional ? 2 : 1);
  add_mlp(store_, "enc.embed.head", {embed_head_in, 2 * d_e}, enc_rng);

  const int state_in = cfg_.d_ybar + d_e;
  add_gru(store_, "enc.state.fwd", state_in, cfg_.state_rnn_width, enc_rng);
  if (cfg_.state_bidirectional)
    add_gru(store_, "enc.state.bwd", state_in, cfg_.state_rnn_width, enc_rng);
  const int state_head_in =
      cfg_.state_rnn_width * (cfg_.state_bidirectional ? 2 : 1);
  add_mlp(store_, "enc.state.head", {state_head_in, 2 * d_z}, enc_rng);

  // innovation encoder for the filtering-style objective: backward pass only
  add_gru(store_, "enc.innov.bwd", state_in, cfg_.state_rnn_width, enc_rng);
  add_mlp(store_, "enc.innov.head", {cfg_.state_rnn_width, 2 * d_z}, enc_rng);
}

const DatasetInfo* Model::find(const std::string& id) const {
  for (const auto& d : datasets_)
    if (d.id == id) return &d;
  return nullptr;
}

bool Model::has_dataset(const std::string& id) const {
  return find(id) != nullptr;
}

const DatasetInfo& Model::dataset(const std::string& id) const {
  const DatasetInfo* d = find(id);
  if (!d) throw LookupError("unknown dataset id: " + id);
  return *d;
}

void Model::register_dataset(const std::string& id, int d_y) {
  if (id.empty() || id.find('.') != std::string::npos)
    throw ConfigError("dataset id must be non-empty and dot-free: " + id);
  if (has_dataset(id)) throw UsageError("dataset already registered: " + id);
  if (d_y < 1) throw ConfigError("observation dimension must be positive");

  DatasetInfo info;
  info.id = id;
  info.d_y = d_y;
  info.readin_layers = cfg_.readin_hidden > 0 ? 2 : 1;

  RngStream rng(RngStream::derive(seed_, "dataset_init",
                                  hash_bytes(id.data(), id.size())));
  const std::string p = ds_prefix(id);
  if (cfg_.readin_hidden > 0)
    add_mlp(store_, p + "readin", {d_y, cfg_.readin_hidden, cfg_.d_ybar}, rng);
  else
    add_mlp(store_, p + "readin", {d_y, cfg_.d_ybar}, rng);

  store_.add(p + "C", init_linear_weight(d_y, cfg_.dyn.d_z, rng));
  store_.add(p + "D", Tensor::zeros(1, d_y));
  store_.add(p + "R_raw",
             Tensor::full(1, d_y,
                          softplus_inv(cfg_.init_emission_var -
                                       cfg_.var_floor)));
  store_.add(p + "Q_raw",
             Tensor::full(1, cfg_.dyn.d_z,
                          softplus_inv(cfg_.init_state_var - cfg_.var_floor)));
  datasets_.push_back(std::move(info));
}

Var Model::read_in(Binder& bind, const std::string& id, Var y) const {
  const DatasetInfo& info = dataset(id);
  if (bind.tape().cols(y) != info.d_y)
    throw DimensionError("observation width does not match dataset " + id);
  return apply_mlp(bind, ds_prefix(id) + "readin", info.readin_layers, y);
}

Var Model::emit_mean(Binder& bind, const std::string& id, Var z) const {
  dataset(id);
  Tape& tp = bind.tape();
  return linear(tp, z, bind(ds_prefix(id) + "C"), bind(ds_prefix(id) + "D"));
}

Var Model::emission_logvar_row(Binder& bind, const std::string& id) const {
  dataset(id);
  Tape& tp = bind.tape();
  Var sp = tp.softplus(bind(ds_prefix(id) + "R_raw"));
  return tp.log(tp.scalar_affine(sp, 1.0, cfg_.var_floor));
}

Var Model::state_logvar_row(Binder& bind, const std::string& id) const {
  dataset(id);
  Tape& tp = bind.tape();
  Var sp = tp.softplus(bind(ds_prefix(id) + "Q_raw"));
  return tp.log(tp.scalar_affine(sp, 1.0, cfg_.var_floor));
}

Var Model::prior_mu0_row(Binder& bind) const { return bind("prior.mu0"); }

Dynamics Model::dynamics(Binder& bind, Var e_row) const {
  return Dynamics(bind, cfg_.dyn, e_row);
}

std::vector<double> Model::state_var(const std::string& id) const {
  dataset(id);
  const Tensor& raw = store_.value(ds_prefix(id) + "Q_raw");
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log1p(std::exp(raw.v[i])) + cfg_.var_floor;
  return out;
}

Model::Trajectory Model::sample_trajectory(const std::string& id,
                                           const Tensor& e_row, int T,
                                           const Tensor* z1,
                                           std::uint64_t seed,
                                           bool noise_free) {
  const DatasetInfo& info = dataset(id);
  if (T < 1) throw UsageError("trajectory length must be >= 1");
  const int d_z = cfg_.dyn.d_z;

  Tape tp;
  Binder bind(tp, store_);
  const bool needs_e = cfg_.dyn.variant != Variant::kSharedOnly;
  Var e = needs_e ? tp.constant(e_row) : Var{};
  Dynamics dyn = dynamics(bind, e);
  Var q_lv = state_logvar_row(bind, id);
  Var r_lv = emission_logvar_row(bind, id);

  RngStream rng(seed);
  auto noise_row = [&](int n) {
    Tensor eps(1, n);
    rng.fill_normal(std::span<double>(eps.v));
    return tp.constant(eps);
  };

  Var z = z1 ? tp.constant(*z1)
             : tp.constant(store_.value("prior.mu0"));
  if (tp.cols(z) != d_z || tp.rows(z) != 1)
    throw DimensionError("initial state must be 1 x d_z");

  Trajectory out;
  out.z = Tensor(T, d_z);
  out.y = Tensor(T, info.d_y);
  for (int t = 0; t < T; ++t) {
    if (t > 0) {
      Var mean = dyn.mean(z);
      z = noise_free ? mean : tp.reparam(mean, q_lv, noise_row(d_z));
    }
    Var ym = emit_mean(bind, id, z);
    Var y = noise_free ? ym : tp.reparam(ym, r_lv, noise_row(info.d_y));
    const double* zp = tp.value(z);
    const double* yp = tp.value(y);
    for (int j = 0; j < d_z; ++j) out.z.at(t, j) = zp[j];
    for (int j = 0; j < info.d_y; ++j) out.y.at(t, j) = yp[j];
  }
  return out;
}

}  // namespace metassm
