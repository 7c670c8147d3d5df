#include "metassm/ssm/params.hpp"

#include <algorithm>
#include <cmath>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

std::int32_t ParamStore::add(const std::string& name, Tensor init) {
  if (by_name_.count(name))
    throw UsageError("duplicate parameter name: " + name);
  Entry e;
  e.name = name;
  e.grad = Tensor::zeros(init.rows, init.cols);
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  const auto id = static_cast<std::int32_t>(entries_.size()) - 1;
  by_name_.emplace(name, id);
  return id;
}

std::int32_t ParamStore::id(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw LookupError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) std::fill(e.grad.v.begin(), e.grad.v.end(), 0.0);
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::uint64_t ParamStore::hash_values(const std::string& prefix) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : entries_) {
    if (!prefix.empty() && e.name.rfind(prefix, 0) != 0) continue;
    const std::uint64_t hn = hash_bytes(e.name.data(), e.name.size());
    const std::uint64_t hv =
        hash_bytes(e.value.data(), e.value.size() * sizeof(double));
    h ^= hn;
    h *= 0x100000001b3ULL;
    h ^= hv;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Var Binder::operator()(const std::string& name) {
  return get(store_.id(name));
}

Var Binder::get(std::int32_t id) {
  auto it = bound_.find(id);
  if (it != bound_.end()) return it->second;
  Var v = tape_.leaf(store_.value(id));
  bound_.emplace(id, v);
  return v;
}

void Binder::inject(const std::string& name, Var v) {
  bound_[store_.id(name)] = v;
}

void Binder::pull_grads() {
  std::vector<std::pair<std::int32_t, Var>> ordered(bound_.begin(),
                                                    bound_.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [id, var] : ordered) {
    Tensor& g = store_.grad(id);
    const double* tg = tape_.grad(var);
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += tg[i];
  }
}

std::vector<std::int32_t> Binder::bound_ids() const {
  std::vector<std::int32_t> ids;
  ids.reserve(bound_.size());
  for (const auto& [id, var] : bound_) ids.push_back(id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Tensor init_linear_weight(int out, int in, RngStream& rng) {
  return Tensor::randn(out, in, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor init_gru_wih(int hidden, int in, RngStream& rng) {
  return Tensor::randn(3 * hidden, in, rng,
                       1.0 / std::sqrt(static_cast<double>(in)));
}

Tensor init_gru_whh(int hidden, RngStream& rng) {
  return Tensor::randn(3 * hidden, hidden, rng,
                       1.0 / std::sqrt(static_cast<double>(hidden)));
}

void add_mlp(ParamStore& store, const std::string& prefix,
             const std::vector<int>& widths, RngStream& rng, bool zero_last) {
  if (widths.size() < 2) throw UsageError("mlp needs at least two widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const bool last = l + 2 == widths.size();
    const std::string base = prefix + ".l" + std::to_string(l);
    Tensor w = (last && zero_last)
                   ? Tensor::zeros(widths[l + 1], widths[l])
                   : init_linear_weight(widths[l + 1], widths[l], rng);
    store.add(base + ".W", std::move(w));
    store.add(base + ".b", Tensor::zeros(1, widths[l + 1]));
  }
}

void add_gru(ParamStore& store, const std::string& prefix, int in, int hidden,
             RngStream& rng) {
  store.add(prefix + ".W_ih", init_gru_wih(hidden, in, rng));
  store.add(prefix + ".W_hh", init_gru_whh(hidden, rng));
  store.add(prefix + ".b_ih", Tensor::zeros(1, 3 * hidden));
  store.add(prefix + ".b_hh", Tensor::zeros(1, 3 * hidden));
}

Var apply_mlp(Binder& bind, const std::string& prefix, int n_layers, Var x,
              bool relu_hidden) {
  Tape& tp = bind.tape();
  Var h = x;
  for (int l = 0; l < n_layers; ++l) {
    const std::string base = prefix + ".l" + std::to_string(l);
    h = linear(tp, h, bind(base + ".W"), bind(base + ".b"));
    if (l + 1 < n_layers) h = relu_hidden ? tp.relu(h) : tp.tanh(h);
  }
  return h;
}

Var apply_gru_slab(Binder& bind, const std::string& prefix, Var slab, int T,
                   int B, int hidden, bool reverse) {
  Tape& tp = bind.tape();
  Var w_ih = bind(prefix + ".W_ih");
  Var w_hh = bind(prefix + ".W_hh");
  Var b_ih = bind(prefix + ".b_ih");
  Var b_hh = bind(prefix + ".b_hh");
  Var h = tp.constant(Tensor::zeros(B, hidden));
  std::vector<Var> states(T);
  for (int s = 0; s < T; ++s) {
    const int t = reverse ? T - 1 - s : s;
    Var x_t = tp.slice_rows(slab, t * B, (t + 1) * B);
    h = tp.gru(x_t, h, w_ih, w_hh, b_ih, b_hh);
    states[t] = h;
  }
  return tp.concat_rows(states);
}

}  // namespace metassm
