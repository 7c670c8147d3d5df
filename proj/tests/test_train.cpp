#include <cmath>
#include <filesystem>
#include <vector>

#include <doctest.h>

#include "metassm/ssm/model.hpp"
#include "metassm/synth/dataset.hpp"
#include "metassm/train/optimizer.hpp"
#include "metassm/train/trainer.hpp"
#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

using namespace metassm;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(Variant v = Variant::kLowRankHypernet) {
  ModelConfig cfg;
  cfg.dyn.d_z = 2;
  cfg.dyn.d1 = 3;
  cfg.dyn.d2 = 3;
  cfg.dyn.d_e = 2;
  cfg.dyn.d_r = 1;
  cfg.dyn.hyper_hidden = 2;
  cfg.dyn.variant = v;
  cfg.d_ybar = 2;
  cfg.readin_hidden = 0;
  cfg.embed_rnn_width = 2;
  cfg.state_rnn_width = 3;
  return cfg;
}

/// Hand-built bundle from a stable 2-D linear system with a random readout.
DatasetBundle linear_bundle(const std::string& id, int trials, int T, int d_y,
                            std::uint64_t seed) {
  DatasetBundle b;
  b.id = id;
  b.spec.T = T;
  b.spec.sigma_w = 0.0;
  b.seed = seed;
  b.trials = trials;
  b.d_y = d_y;
  b.d_z = 2;
  RngStream rng(seed);
  Tensor C = Tensor::randn(d_y, 2, rng, 0.7);
  b.latents = Tensor(trials * T, 2);
  b.observations = Tensor(trials * T, d_y);
  for (int k = 0; k < trials; ++k) {
    double z1 = rng.normal(), z2 = rng.normal();
    for (int t = 0; t < T; ++t) {
      if (t > 0) {
        const double n1 = 0.9 * z1 - 0.15 * z2 + 0.1 * rng.normal();
        const double n2 = 0.15 * z1 + 0.9 * z2 + 0.1 * rng.normal();
        z1 = n1;
        z2 = n2;
      }
      b.latents.at(k * T + t, 0) = z1;
      b.latents.at(k * T + t, 1) = z2;
      for (int j = 0; j < d_y; ++j)
        b.observations.at(k * T + t, j) =
            C.at(j, 0) * z1 + C.at(j, 1) * z2 + 0.1 * rng.normal();
    }
  }
  for (int k = 0; k < trials; ++k) b.splits.train.push_back(k);
  return b;
}

/// Independent scalar reference of the decoupled-decay update.
struct ScalarAdamRef {
  double m = 0, v = 0;
  long long t = 0;

  void step(double& w, double g, const AdamWConfig& c, double lr) {
    if (c.clip_norm > 0.0 && std::abs(g) > c.clip_norm)
      g *= c.clip_norm / std::abs(g);
    ++t;
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g * g;
    const double mh = m / (1.0 - std::pow(c.beta1, static_cast<double>(t)));
    const double vh = v / (1.0 - std::pow(c.beta2, static_cast<double>(t)));
    w -= lr * (mh / (std::sqrt(vh) + c.eps) + c.weight_decay * w);
  }
};

}  // namespace

TEST_CASE("cosine schedule hits its boundary values exactly") {
  CHECK(cosine_lr(0, 100, 0.005) == 0.005);
  CHECK(cosine_lr(100, 100, 0.005) == 0.0);
  CHECK(std::abs(cosine_lr(50, 100, 0.005) - 0.0025) < 1e-15);
  CHECK(cosine_lr(25, 100, 1.0) > cosine_lr(26, 100, 1.0));
  CHECK_THROWS_AS(cosine_lr(-1, 100, 0.005), UsageError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 0.005), UsageError);
  CHECK_THROWS_AS(cosine_lr(0, 0, 0.005), UsageError);
}

TEST_CASE("zero gradient with zero decay leaves parameters untouched") {
  ParamStore store;
  const std::int32_t id = store.add("w", Tensor::from(1, 2, {1.5, -0.25}));
  store.zero_grads();
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  opt.step(store, {id}, 0.01);
  CHECK(store.value(id).v[0] == 1.5);
  CHECK(store.value(id).v[1] == -0.25);
}

TEST_CASE("one step on w^2 moves toward zero by at most the learning rate") {
  ParamStore store;
  const std::int32_t id = store.add("w", Tensor::scalar(1.0));
  store.grad(id).v[0] = 2.0;  // d/dw w^2 at w=1
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(cfg);
  opt.step(store, {id}, 0.1);
  const double w = store.value(id).v[0];
  CHECK(w < 1.0);
  CHECK(1.0 - w <= 0.1 + 1e-12);
  CHECK(std::abs(w - 0.9) < 1e-7);  // first-step update is ~lr exactly
}

TEST_CASE("updates match an independent scalar reference to 1e-12") {
  for (double clip : {0.0, 0.05}) {
    AdamWConfig cfg;
    cfg.clip_norm = clip;
    ParamStore store;
    const std::int32_t id = store.add("w", Tensor::scalar(0.8));
    AdamW opt(cfg);
    ScalarAdamRef ref;
    double w_ref = 0.8;
    RngStream rng(42);
    for (int k = 0; k < 50; ++k) {
      const double g = rng.normal() * (k % 7 == 0 ? 30.0 : 0.3);
      const double lr = cosine_lr(k, 50, 0.004);
      store.zero_grads();
      store.grad(id).v[0] = g;
      opt.step(store, {id}, lr);
      ref.step(w_ref, g, cfg, lr);
      CHECK(std::abs(store.value(id).v[0] - w_ref) < 1e-12);
    }
  }
}

TEST_CASE("global norm clipping equals feeding pre-scaled gradients") {
  AdamWConfig clipped;
  clipped.clip_norm = 10.0;
  AdamWConfig open;
  open.clip_norm = 0.0;

  ParamStore s1, s2;
  const auto a1 = s1.add("a", Tensor::scalar(0.3));
  const auto b1 = s1.add("b", Tensor::scalar(-0.6));
  const auto a2 = s2.add("a", Tensor::scalar(0.3));
  const auto b2 = s2.add("b", Tensor::scalar(-0.6));

  s1.grad(a1).v[0] = 12.0;  // global norm 20 -> scale 0.5
  s1.grad(b1).v[0] = 16.0;
  s2.grad(a2).v[0] = 6.0;
  s2.grad(b2).v[0] = 8.0;

  AdamW o1(clipped), o2(open);
  const double norm = o1.step(s1, {a1, b1}, 0.01);
  o2.step(s2, {a2, b2}, 0.01);
  CHECK(std::abs(norm - 20.0) < 1e-12);
  CHECK(std::abs(s1.value(a1).v[0] - s2.value(a2).v[0]) < 1e-15);
  CHECK(std::abs(s1.value(b1).v[0] - s2.value(b2).v[0]) < 1e-15);
}

TEST_CASE("frozen and non-allowed parameters never move") {
  ParamStore store;
  const auto a = store.add("dyn.W", Tensor::scalar(1.0));
  const auto b = store.add("ds.x.C", Tensor::scalar(2.0));
  const auto c = store.add("ds.y.C", Tensor::scalar(3.0));
  store.grad(a).v[0] = store.grad(b).v[0] = store.grad(c).v[0] = 1.0;

  AdamW opt;
  opt.freeze_prefix("dyn.");
  opt.allow_only({"dyn.", "ds.x."});
  CHECK(!opt.trainable("dyn.W"));
  CHECK(opt.trainable("ds.x.C"));
  CHECK(!opt.trainable("ds.y.C"));

  opt.step(store, {a, b, c}, 0.01);
  CHECK(store.value(a).v[0] == 1.0);
  CHECK(store.value(b).v[0] != 2.0);
  CHECK(store.value(c).v[0] == 3.0);
}

TEST_CASE("non-finite gradients fail fast") {
  ParamStore store;
  const auto id = store.add("w", Tensor::scalar(1.0));
  store.grad(id).v[0] = std::numeric_limits<double>::quiet_NaN();
  AdamW opt;
  CHECK_THROWS_WITH_AS(opt.step(store, {id}, 0.01), doctest::Contains("w"),
                       NumericError);
}

TEST_CASE("training improves the objective on a linear toy in nearly all seeds") {
  int improved = 0;
  const int n_seeds = 20;
  for (int s = 0; s < n_seeds; ++s) {
    DatasetBundle data = linear_bundle("lin", 6, 16, 3, 500 + s);
    Model model(tiny_config(), 900 + s);
    model.register_dataset("lin", 3);
    TrainConfig cfg;
    cfg.steps = 200;
    cfg.batch_size = 2;
    cfg.seed = 40 + s;
    TrainResult res = train_multisession(model, {&data}, cfg);
    REQUIRE(res.trace.size() == 200);
    if (res.trace.back().total > res.trace.front().total) ++improved;
  }
  CAPTURE(improved);
  CHECK(improved >= 19);
}

TEST_CASE("training is deterministic in the seed and touches every dataset") {
  DatasetBundle a = linear_bundle("a", 5, 10, 3, 1);
  DatasetBundle b = linear_bundle("b", 4, 10, 4, 2);

  auto run = [&](std::uint64_t seed) {
    Model model(tiny_config(), 77);
    model.register_dataset("a", 3);
    model.register_dataset("b", 4);
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = seed;
    const std::uint64_t pre_a = model.store().hash_values("ds.a.");
    const std::uint64_t pre_b = model.store().hash_values("ds.b.");
    const std::uint64_t pre_dyn = model.store().hash_values("dyn.");
    TrainResult res = train_multisession(model, {&a, &b}, cfg);
    CHECK(model.store().hash_values("ds.a.") != pre_a);
    CHECK(model.store().hash_values("ds.b.") != pre_b);
    CHECK(model.store().hash_values("dyn.") != pre_dyn);
    return std::pair(model.store().hash_values(), res);
  };

  auto [h1, r1] = run(123);
  auto [h2, r2] = run(123);
  auto [h3, r3] = run(124);
  CHECK(h1 == h2);
  CHECK(h1 != h3);
  REQUIRE(r1.trace.size() == r2.trace.size());
  for (std::size_t k = 0; k < r1.trace.size(); ++k) {
    CHECK(r1.trace[k].total == r2.trace[k].total);
    CHECK(r1.trace[k].recon == r2.trace[k].recon);
  }
  CHECK(r1.trace[0].total != r3.trace[0].total);
}

TEST_CASE("the learning-rate column follows the cosine schedule") {
  DatasetBundle data = linear_bundle("lin", 4, 8, 2, 11);
  Model model(tiny_config(), 5);
  model.register_dataset("lin", 2);
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 2;
  cfg.optimizer.lr = 0.01;
  TrainResult res = train_multisession(model, {&data}, cfg);
  REQUIRE(res.trace.size() == 10);
  CHECK(res.trace[0].lr == 0.01);
  for (std::size_t k = 0; k < res.trace.size(); ++k)
    CHECK(res.trace[k].lr == cosine_lr(static_cast<std::int64_t>(k), 10, 0.01));
}

TEST_CASE("the loss trace CSV has the documented columns and one row per step") {
  DatasetBundle data = linear_bundle("lin", 4, 8, 2, 12);
  Model model(tiny_config(), 6);
  model.register_dataset("lin", 2);
  const fs::path path =
      fs::temp_directory_path() / "metassm_train_trace.csv";
  fs::remove(path);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.trace_path = path.string();
  TrainResult res = train_multisession(model, {&data}, cfg);

  const std::string csv = read_text_file(path);
  CHECK(csv.rfind("step,total,recon,kl_state,kl_embed,penalty,lr\n", 0) == 0);
  int lines = 0;
  for (char ch : csv)
    if (ch == '\n') ++lines;
  CHECK(lines == 4);  // header + 3 steps
  CHECK(csv == trace_csv(res.trace));
  fs::remove(path);
}

TEST_CASE("a diverged objective aborts naming the step, dataset and trials") {
  DatasetBundle data = linear_bundle("lin", 4, 8, 2, 13);
  Model model(tiny_config(), 7);
  model.register_dataset("lin", 2);
  for (auto& v : model.store().value("ds.lin.C").v) v = 1e200;
  TrainConfig cfg;
  cfg.steps = 2;
  cfg.batch_size = 2;
  CHECK_THROWS_WITH_AS(train_multisession(model, {&data}, cfg),
                       doctest::Contains("trials"), NumericError);
}

TEST_CASE("training validates its inputs") {
  DatasetBundle data = linear_bundle("lin", 4, 8, 2, 14);
  Model model(tiny_config(), 8);
  TrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(train_multisession(model, {}, cfg), UsageError);
  CHECK_THROWS_AS(train_multisession(model, {&data}, cfg), UsageError);
  model.register_dataset("lin", 5);  // wrong width
  CHECK_THROWS_AS(train_multisession(model, {&data}, cfg), DimensionError);

  Model ok(tiny_config(), 9);
  ok.register_dataset("lin", 2);
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train_multisession(ok, {&data}, cfg), ConfigError);
  cfg.batch_size = 2;
  cfg.optimizer.lr = 0.0;
  CHECK_THROWS_AS(train_multisession(ok, {&data}, cfg), ConfigError);
}

TEST_CASE("alignment trains only the new dataset's parameters") {
  DatasetBundle base = linear_bundle("base", 5, 10, 3, 21);
  DatasetBundle fresh = linear_bundle("fresh", 4, 10, 4, 22);

  Model model(tiny_config(), 31);
  model.register_dataset("base", 3);
  const std::uint64_t dyn_pre = model.store().hash_values("dyn.");
  const std::uint64_t enc_pre = model.store().hash_values("enc.");
  const std::uint64_t base_pre = model.store().hash_values("ds.base.");

  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 2;
  cfg.seed = 3;
  TrainResult res = align_few_shot(model, fresh, {0, 1}, cfg);
  REQUIRE(res.trace.size() == 5);

  CHECK(model.has_dataset("fresh"));
  CHECK(model.store().hash_values("dyn.") == dyn_pre);
  CHECK(model.store().hash_values("enc.") == enc_pre);
  CHECK(model.store().hash_values("ds.base.") == base_pre);

  Model twin(tiny_config(), 31);
  twin.register_dataset("base", 3);
  twin.register_dataset("fresh", 4);
  CHECK(model.store().hash_values("ds.fresh.") !=
        twin.store().hash_values("ds.fresh."));
}

TEST_CASE("alignment with zero steps returns the fresh initialization") {
  DatasetBundle fresh = linear_bundle("fresh", 3, 8, 3, 23);
  Model model(tiny_config(), 41);
  model.register_dataset("base", 2);
  TrainConfig cfg;
  cfg.steps = 0;
  align_few_shot(model, fresh, {0}, cfg);

  Model twin(tiny_config(), 41);
  twin.register_dataset("base", 2);
  twin.register_dataset("fresh", 3);
  CHECK(model.store().hash_values("ds.fresh.") ==
        twin.store().hash_values("ds.fresh."));
}

TEST_CASE("alignment is deterministic and honors extra freezes") {
  DatasetBundle fresh = linear_bundle("fresh", 4, 8, 3, 24);
  auto run = [&](std::vector<std::string> freeze) {
    Model model(tiny_config(), 51);
    model.register_dataset("base", 2);
    TrainConfig cfg;
    cfg.steps = 4;
    cfg.batch_size = 2;
    cfg.seed = 9;
    cfg.freeze = std::move(freeze);
    align_few_shot(model, fresh, {0, 1, 2}, cfg);
    return model;
  };

  Model m1 = run({});
  Model m2 = run({});
  CHECK(m1.store().hash_values() == m2.store().hash_values());

  Model m3 = run({"ds.fresh.R_raw"});
  Model twin(tiny_config(), 51);
  twin.register_dataset("base", 2);
  twin.register_dataset("fresh", 3);
  CHECK(m3.store().hash_values("ds.fresh.R_raw") ==
        twin.store().hash_values("ds.fresh.R_raw"));
  CHECK(m3.store().hash_values("ds.fresh.C") !=
        twin.store().hash_values("ds.fresh.C"));
}

TEST_CASE("alignment validates trials and rejects known datasets") {
  DatasetBundle fresh = linear_bundle("fresh", 3, 8, 3, 25);
  Model model(tiny_config(), 61);
  model.register_dataset("base", 2);
  TrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(align_few_shot(model, fresh, {}, cfg), UsageError);
  CHECK_THROWS_AS(align_few_shot(model, fresh, {3}, cfg), UsageError);

  Model taken(tiny_config(), 62);
  taken.register_dataset("fresh", 3);
  CHECK_THROWS_AS(align_few_shot(taken, fresh, {0}, cfg), UsageError);
}

TEST_CASE("one-trial alignment resamples the same trial every step") {
  DatasetBundle fresh = linear_bundle("fresh", 3, 8, 3, 26);
  Model model(tiny_config(), 71);
  model.register_dataset("base", 2);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;  // more than available -> draws with replacement
  cfg.seed = 1;
  TrainResult res = align_few_shot(model, fresh, {1}, cfg);
  CHECK(res.trace.size() == 3);
  for (const auto& row : res.trace) CHECK(std::isfinite(row.total));
}
