#include "metassm/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"
#include "metassm/util/logging.hpp"

namespace metassm {

namespace {

std::vector<int> sample_trials(const std::vector<int>& pool, int n,
                               RngStream& rng) {
  if (pool.empty()) throw UsageError("cannot sample from an empty trial pool");
  std::vector<int> out;
  out.reserve(n);
  if (static_cast<int>(pool.size()) >= n) {
    std::vector<int> idx(pool);  // partial shuffle, distinct draws
    for (int k = 0; k < n; ++k) {
      const std::size_t j = k + rng.integer(idx.size() - k);
      std::swap(idx[k], idx[j]);
      out.push_back(idx[k]);
    }
  } else {
    for (int k = 0; k < n; ++k)
      out.push_back(pool[rng.integer(pool.size())]);
  }
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::ostringstream oss;
  for (std::size_t i = 0; i < v.size(); ++i)
    oss << (i ? "," : "") << v[i];
  return oss.str();
}

/// Value hash of every parameter whose name does NOT start with `prefix`.
std::uint64_t hash_excluding(const ParamStore& store,
                             const std::string& prefix) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : store.entries()) {
    if (e.name.rfind(prefix, 0) == 0) continue;
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

struct StepData {
  const DatasetBundle* bundle = nullptr;
  const std::vector<int>* pool = nullptr;  // trial indices to sample from
};

TrainResult run_loop(Model& model, AdamW& opt,
                     const std::vector<StepData>& sets,
                     const TrainConfig& cfg) {
  if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (cfg.steps < 0) throw ConfigError("step count must be >= 0");
  if (cfg.optimizer.lr <= 0.0) throw ConfigError("learning rate must be > 0");
  for (const auto& s : sets) {
    if (!model.has_dataset(s.bundle->id))
      throw UsageError("dataset not registered: " + s.bundle->id);
    if (model.dataset(s.bundle->id).d_y != s.bundle->d_y)
      throw DimensionError("dataset width mismatch: " + s.bundle->id);
    if (s.pool->empty())
      throw UsageError("no training trials in " + s.bundle->id);
  }

  double norm = 0.0;
  for (const auto& s : sets)
    norm += static_cast<double>(s.bundle->spec.T) * cfg.batch_size;

  TrainResult result;
  result.norm = norm;
  result.trace.reserve(static_cast<std::size_t>(cfg.steps));
  ParamStore& store = model.store();

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = cosine_lr(step, cfg.steps, cfg.optimizer.lr);
    store.zero_grads();
    std::vector<std::int32_t> touched;
    TraceRow row;
    row.step = step;
    row.lr = lr;

    const std::uint64_t bseed =
        RngStream::derive(cfg.seed, "batch", static_cast<std::uint64_t>(step));
    const std::uint64_t nseed =
        RngStream::derive(cfg.seed, "noise", static_cast<std::uint64_t>(step));

    for (const auto& s : sets) {
      RngStream brng = RngStream(bseed).child(s.bundle->id);
      const std::vector<int> ids =
          sample_trials(*s.pool, cfg.batch_size, brng);

      DatasetBatch batch{s.bundle->id, s.bundle->slab_obs(ids),
                         s.bundle->spec.T, cfg.batch_size};
      Tape tape;
      Binder bind(tape, store);
      RngStream noise = RngStream(nseed).child(s.bundle->id);
      ElboTermVars terms =
          objective_graph(bind, model, batch, cfg.objective, noise);

      const double total = tape.scalar_value(terms.total);
      if (!std::isfinite(total))
        throw NumericError("objective diverged at step " +
                           std::to_string(step) + " on dataset " +
                           s.bundle->id + " (trials " + join_ints(ids) + ")");
      row.total += total;
      row.recon += tape.scalar_value(terms.recon);
      row.kl_state += tape.scalar_value(terms.kl_state);
      row.kl_embed += tape.scalar_value(terms.kl_embed);
      row.penalty += tape.scalar_value(terms.penalty);

      tape.backward(tape.scalar_affine(terms.total, -1.0 / norm, 0.0));
      bind.pull_grads();
      for (std::int32_t id : bind.bound_ids()) touched.push_back(id);
    }

    row.total /= norm;
    row.recon /= norm;
    row.kl_state /= norm;
    row.kl_embed /= norm;
    row.penalty /= norm;

    const double gnorm = opt.step(store, touched, lr);
    result.trace.push_back(row);
    if (cfg.log_every > 0 && step % cfg.log_every == 0)
      LOG_INFO("step " << step << " total " << row.total << " recon "
                       << row.recon << " lr " << lr << " |g| " << gnorm);
  }

  if (!cfg.trace_path.empty())
    write_text_file(cfg.trace_path, trace_csv(result.trace));
  return result;
}

}  // namespace

std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,total,recon,kl_state,kl_embed,penalty,lr\n";
  char buf[256];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof(buf),
                  "%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n",
                  static_cast<long long>(r.step), r.total, r.recon,
                  r.kl_state, r.kl_embed, r.penalty, r.lr);
    out += buf;
  }
  return out;
}

TrainResult train_multisession(Model& model,
                               const std::vector<const DatasetBundle*>& data,
                               const TrainConfig& cfg) {
  if (data.empty()) throw UsageError("training needs at least one dataset");
  AdamW opt(cfg.optimizer);
  for (const auto& p : cfg.freeze) opt.freeze_prefix(p);

  std::vector<StepData> sets;
  sets.reserve(data.size());
  for (const DatasetBundle* b : data)
    sets.push_back({b, &b->splits.train});
  return run_loop(model, opt, sets, cfg);
}

TrainResult align_few_shot(Model& model, const DatasetBundle& data,
                           const std::vector<int>& trials,
                           const TrainConfig& cfg) {
  if (trials.empty()) throw UsageError("alignment needs at least one trial");
  for (int k : trials)
    if (k < 0 || k >= data.trials)
      throw UsageError("alignment trial index out of range");
  if (model.has_dataset(data.id))
    throw UsageError("dataset already registered: " + data.id);

  model.register_dataset(data.id, data.d_y);
  const std::string prefix = "ds." + data.id + ".";
  const std::uint64_t before = hash_excluding(model.store(), prefix);

  AdamW opt(cfg.optimizer);
  opt.allow_only({prefix});
  for (const auto& p : cfg.freeze) opt.freeze_prefix(p);

  std::vector<StepData> sets{{&data, &trials}};
  TrainResult result = run_loop(model, opt, sets, cfg);

  if (hash_excluding(model.store(), prefix) != before)
    throw Error("shared parameters changed during alignment");
  return result;
}

}  // namespace metassm
