#include "metassm/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include <Eigen/Dense>

#include "metassm/util/errors.hpp"

namespace metassm {

namespace {

Tensor node_copy(const Tape& tp, Var v) {
  Tensor out(tp.rows(v), tp.cols(v));
  const double* p = tp.value(v);
  std::copy_n(p, out.size(), out.v.begin());
  return out;
}

/// Per-trial, per-coordinate mean activity over the full trial window.
Tensor trial_means(const DatasetBundle& data, const std::vector<int>& trials) {
  const int T = data.spec.T;
  Tensor out = Tensor::zeros(static_cast<int>(trials.size()), data.d_y);
  for (std::size_t b = 0; b < trials.size(); ++b) {
    const int k = trials[b];
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < data.d_y; ++j)
        out.at(static_cast<int>(b), j) +=
            data.observations.v[(static_cast<std::size_t>(k) * T + t) *
                                    data.d_y +
                                j];
    for (int j = 0; j < data.d_y; ++j) out.at(static_cast<int>(b), j) /= T;
  }
  return out;
}

void check_dataset(const Model& model, const DatasetBundle& data) {
  if (model.dataset(data.id).d_y != data.d_y)
    throw DimensionError("dataset width mismatch: " + data.id);
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;  // no rank variation to correlate
  return sab / std::sqrt(saa * sbb);
}

double magnitude(const std::vector<double>& e) {
  double s = 0;
  for (double x : e) s += x * x;
  return std::sqrt(s);
}

}  // namespace

PosteriorMeans infer_posterior_means(const Model& model,
                                     const DatasetBatch& batch) {
  // Binder only creates leaves during evaluation; the store is not written.
  ParamStore& store = const_cast<Model&>(model).store();
  if (batch.y.cols != model.dataset(batch.id).d_y)
    throw DimensionError("batch width does not match dataset " + batch.id);
  if (batch.T < 1 || batch.B < 1 ||
      batch.y.rows != batch.T * batch.B)
    throw DimensionError("batch slab shape does not match T*B");

  Tape tp;
  Binder bind(tp, store);
  const ModelConfig& mc = model.config();
  Var ybar = model.read_in(bind, batch.id, tp.constant(batch.y));

  PosteriorMeans out;
  Var e_row;
  if (mc.dyn.variant != Variant::kSharedOnly) {
    GaussianVars q_e = infer_embedding(bind, mc, ybar, batch.T, batch.B);
    out.e_mean = node_copy(tp, q_e.mean);
    e_row = q_e.mean;
  } else {
    out.e_mean = Tensor::zeros(1, mc.dyn.d_e);
    e_row = tp.constant(out.e_mean);
  }
  GaussianVars q_z = infer_states(bind, mc, ybar, e_row, batch.T, batch.B);
  out.z_mean = node_copy(tp, q_z.mean);
  return out;
}

Tensor context_slab(const DatasetBundle& data, const std::vector<int>& trials,
                    int context) {
  if (context < 1 || context > data.spec.T)
    throw UsageError("context length out of range");
  const int B = static_cast<int>(trials.size());
  if (B < 1) throw UsageError("context slab needs at least one trial");
  Tensor out(context * B, data.d_y);
  for (int b = 0; b < B; ++b) {
    const int k = trials[b];
    if (k < 0 || k >= data.trials)
      throw UsageError("trial index out of range");
    for (int t = 0; t < context; ++t)
      for (int j = 0; j < data.d_y; ++j)
        out.at(t * B + b, j) =
            data.observations.v[(static_cast<std::size_t>(k) * data.spec.T +
                                 t) *
                                    data.d_y +
                                j];
  }
  return out;
}

double r2_reconstruction(const Model& model, const DatasetBundle& data,
                         const std::vector<int>& trials) {
  check_dataset(model, data);
  if (trials.empty()) throw UsageError("reconstruction needs trials");
  const int T = data.spec.T, B = static_cast<int>(trials.size());
  DatasetBatch batch{data.id, data.slab_obs(trials), T, B};
  PosteriorMeans pm = infer_posterior_means(model, batch);

  ParamStore& store = const_cast<Model&>(model).store();
  Tape tp;
  Binder bind(tp, store);
  Var yhat = model.emit_mean(bind, data.id, tp.constant(pm.z_mean));
  const double* yv = tp.value(yhat);

  const Tensor ybar = trial_means(data, trials);
  double sse = 0, sst = 0;
  for (int t = 0; t < T; ++t)
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < data.d_y; ++j) {
        const std::size_t row = static_cast<std::size_t>(t) * B + b;
        const double y = batch.y.v[row * data.d_y + j];
        const double f = yv[row * data.d_y + j];
        sse += (y - f) * (y - f);
        sst += (y - ybar.at(b, j)) * (y - ybar.at(b, j));
      }
  if (sst == 0.0)
    throw NumericError("constant observations leave r2 undefined");
  return 1.0 - sse / sst;
}

namespace {

std::map<int, R2Sums> kstep_sums_from_states(const Model& model,
                                             const DatasetBundle& data,
                                             const std::vector<int>& trials,
                                             const Tensor& z_end,
                                             const Tensor& e_row, int context,
                                             int horizon);

std::map<int, double> sums_to_r2(const std::map<int, R2Sums>& sums) {
  std::map<int, double> out;
  for (const auto& [k, s] : sums)
    out[k] = s.sst == 0.0 ? -std::numeric_limits<double>::infinity()
                          : 1.0 - s.sse / s.sst;
  return out;
}

Tensor end_states(const PosteriorMeans& pm, int context, int B, int d_z) {
  Tensor zt(B, d_z);
  for (int b = 0; b < B; ++b)
    for (int j = 0; j < d_z; ++j)
      zt.at(b, j) = pm.z_mean.at((context - 1) * B + b, j);
  return zt;
}

}  // namespace

std::map<int, double> r2_kstep(const Model& model, const DatasetBundle& data,
                               const std::vector<int>& trials, int context,
                               int horizon) {
  return sums_to_r2(r2_kstep_sums(model, data, trials, context, horizon));
}

std::map<int, R2Sums> r2_kstep_sums(const Model& model,
                                    const DatasetBundle& data,
                                    const std::vector<int>& trials,
                                    int context, int horizon) {
  const int B = static_cast<int>(trials.size());
  const int d_z = model.config().dyn.d_z;

  DatasetBatch batch{data.id, context_slab(data, trials, context), context, B};
  PosteriorMeans pm = infer_posterior_means(model, batch);
  return kstep_sums_from_states(model, data, trials,
                                end_states(pm, context, B, d_z), pm.e_mean,
                                context, horizon);
}

std::map<int, double> r2_kstep_from_states(const Model& model,
                                           const DatasetBundle& data,
                                           const std::vector<int>& trials,
                                           const Tensor& z_end,
                                           const Tensor& e_row, int context,
                                           int horizon) {
  return sums_to_r2(kstep_sums_from_states(model, data, trials, z_end, e_row,
                                           context, horizon));
}

namespace {

std::map<int, R2Sums> kstep_sums_from_states(const Model& model,
                                             const DatasetBundle& data,
                                             const std::vector<int>& trials,
                                             const Tensor& z_end,
                                             const Tensor& e_row, int context,
                                             int horizon) {
  check_dataset(model, data);
  if (horizon < 1) throw UsageError("horizon must be >= 1");
  if (context < 1 || context + horizon > data.spec.T)
    throw UsageError("context + horizon exceeds the trial length");
  const int B = static_cast<int>(trials.size());
  if (B < 1) throw UsageError("forecasting needs trials");
  if (z_end.rows != B || z_end.cols != model.config().dyn.d_z)
    throw DimensionError("z_end must be trials x d_z");
  for (int k : trials)
    if (k < 0 || k >= data.trials)
      throw UsageError("trial index out of range");

  ParamStore& store = const_cast<Model&>(model).store();
  Tape tp;
  Binder bind(tp, store);
  Dynamics dyn = model.dynamics(bind, tp.constant(e_row));
  Var z = tp.constant(z_end);

  const Tensor ybar = trial_means(data, trials);
  std::map<int, R2Sums> out;
  for (int k = 1; k <= horizon; ++k) {
    z = dyn.mean(z);
    Var yh = model.emit_mean(bind, data.id, z);
    const double* yv = tp.value(yh);
    R2Sums s;
    for (int b = 0; b < B; ++b) {
      const int trial = trials[b];
      const std::size_t row =
          (static_cast<std::size_t>(trial) * data.spec.T + context - 1 + k) *
          data.d_y;
      for (int j = 0; j < data.d_y; ++j) {
        const double y = data.observations.v[row + j];
        const double f = yv[static_cast<std::size_t>(b) * data.d_y + j];
        s.sse += (y - f) * (y - f);
        s.sst += (y - ybar.at(b, j)) * (y - ybar.at(b, j));
      }
    }
    out[k] = s;
  }
  return out;
}

}  // namespace

std::vector<double> embedding_mean(const Model& model,
                                   const DatasetBundle& data,
                                   const std::vector<int>& trials) {
  check_dataset(model, data);
  if (trials.empty()) throw UsageError("embedding mean needs trials");
  DatasetBatch batch{data.id, data.slab_obs(trials), data.spec.T,
                     static_cast<int>(trials.size())};
  PosteriorMeans pm = infer_posterior_means(model, batch);
  return pm.e_mean.v;
}

double embedding_velocity_correlation(const std::vector<EmbeddingPoint>& pts) {
  if (pts.size() < 3)
    throw UsageError("correlation needs at least 3 datasets");
  std::vector<double> mags, params;
  mags.reserve(pts.size());
  params.reserve(pts.size());
  for (const auto& p : pts) {
    mags.push_back(magnitude(p.e_mean));
    params.push_back(p.param);
  }
  return pearson(average_ranks(mags), average_ranks(params));
}

double regime_separability(const std::vector<EmbeddingPoint>& pts,
                           const std::vector<int>& labels) {
  const std::size_t n = pts.size();
  if (labels.size() != n)
    throw UsageError("one label per embedding point required");
  if (n < 2) throw UsageError("separability needs at least 2 points");
  int n1 = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw UsageError("labels must be 0 or 1");
    n1 += l;
  }
  if (n1 == 0 || n1 == static_cast<int>(n))
    throw UsageError("separability needs both classes");
  const std::size_t d = pts[0].e_mean.size();
  for (const auto& p : pts)
    if (p.e_mean.size() != d)
      throw DimensionError("embedding dimensions disagree");

  int correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> c0(d, 0.0), c1(d, 0.0);
    int k0 = 0, k1 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& c = labels[j] ? c1 : c0;
      for (std::size_t x = 0; x < d; ++x) c[x] += pts[j].e_mean[x];
      (labels[j] ? k1 : k0) += 1;
    }
    int pred;
    if (k0 == 0 || k1 == 0) {
      pred = k0 == 0 ? 1 : 0;
    } else {
      double d0 = 0, d1 = 0;
      for (std::size_t x = 0; x < d; ++x) {
        const double a = pts[i].e_mean[x] - c0[x] / k0;
        const double b = pts[i].e_mean[x] - c1[x] / k1;
        d0 += a * a;
        d1 += b * b;
      }
      if (d0 < d1)
        pred = 0;
      else if (d1 < d0)
        pred = 1;
      else
        pred = k1 > k0 ? 1 : 0;  // distance tie: larger fold class, then 0
    }
    correct += pred == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::string embedding_scatter_csv(const std::vector<EmbeddingPoint>& pts) {
  std::string out = "dataset_id,e1,e2,param\n";
  char buf[160];
  for (const auto& p : pts) {
    const double e1 = p.e_mean.empty() ? 0.0 : p.e_mean[0];
    const double e2 = p.e_mean.size() > 1 ? p.e_mean[1] : 0.0;
    std::snprintf(buf, sizeof(buf), ",%.10g,%.10g,%.10g\n", e1, e2, p.param);
    out += p.dataset_id;
    out += buf;
  }
  return out;
}

std::vector<GridRollout> interpolation_grid(
    const Model& model, const std::string& dataset_id,
    const std::vector<double>& anchor, int nx, int ny, double spacing,
    const Tensor& z0, int steps, double perturb_sd, std::uint64_t seed) {
  const int d_e = model.config().dyn.d_e;
  if (d_e != 2) throw UsageError("embedding grids need d_e == 2");
  if (static_cast<int>(anchor.size()) != d_e)
    throw DimensionError("anchor size must match d_e");
  if (nx < 1 || ny < 1 || steps < 1 || spacing < 0.0 || perturb_sd < 0.0)
    throw UsageError("bad grid shape");
  if (z0.rows != 1 || z0.cols != model.config().dyn.d_z)
    throw DimensionError("z0 must be 1 x d_z");

  Model& m = const_cast<Model&>(model);  // sampling reads parameters only
  RngStream rng(seed);
  std::vector<GridRollout> out;
  out.reserve(static_cast<std::size_t>(nx) * ny);
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      Tensor e(1, 2);
      e.at(0, 0) = anchor[0] + (i - 0.5 * (nx - 1)) * spacing +
                   perturb_sd * rng.normal();
      e.at(0, 1) = anchor[1] + (j - 0.5 * (ny - 1)) * spacing +
                   perturb_sd * rng.normal();
      auto traj = m.sample_trajectory(dataset_id, e, steps, &z0,
                                      RngStream::derive(seed, "roll",
                                                        static_cast<std::uint64_t>(
                                                            i * ny + j)),
                                      /*noise_free=*/true);
      out.push_back({e.v, std::move(traj.z)});
    }
  return out;
}

Tensor AffineMap::apply(const Tensor& x) const {
  if (x.cols != A.cols) throw DimensionError("affine input width mismatch");
  Tensor out(x.rows, A.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int r = 0; r < A.rows; ++r) {
      double acc = b.at(0, r);
      for (int c = 0; c < A.cols; ++c) acc += A.at(r, c) * x.at(i, c);
      out.at(i, r) = acc;
    }
  return out;
}

AffineMap affine_fit(const Tensor& from, const Tensor& to) {
  if (from.rows != to.rows)
    throw DimensionError("affine fit needs matching row counts");
  if (from.rows < from.cols + 1)
    throw UsageError("affine fit is underdetermined");
  using Mat =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat X(from.rows, from.cols + 1);
  for (int i = 0; i < from.rows; ++i) {
    for (int c = 0; c < from.cols; ++c) X(i, c) = from.at(i, c);
    X(i, from.cols) = 1.0;
  }
  Eigen::Map<const Mat> Y(to.v.data(), to.rows, to.cols);
  Mat M = X.colPivHouseholderQr().solve(Y);  // (d_from+1) x d_to

  AffineMap map;
  map.A = Tensor(to.cols, from.cols);
  map.b = Tensor(1, to.cols);
  for (int r = 0; r < to.cols; ++r) {
    for (int c = 0; c < from.cols; ++c) map.A.at(r, c) = M(c, r);
    map.b.at(0, r) = M(from.cols, r);
  }
  return map;
}

}  // namespace metassm
