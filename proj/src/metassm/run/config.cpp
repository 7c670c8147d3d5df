#include "metassm/run/config.hpp"

#include <cstdio>
#include <set>

#include <json.hpp>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

using nlohmann::json;

namespace {

/// Typed field access over one JSON object that tracks the config path for
/// error messages and rejects keys the schema does not know.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  double num(const char* key, double def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
    return v.get<double>();
  }

  int integer(const char* key, int def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_integer())
      throw ConfigError(at(key) + ": expected an integer");
    return v.get<int>();
  }

  std::int64_t integer64(const char* key, std::int64_t def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_integer())
      throw ConfigError(at(key) + ": expected an integer");
    return v.get<std::int64_t>();
  }

  std::uint64_t uinteger(const char* key, std::uint64_t def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ConfigError(at(key) + ": expected a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* key, bool def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(at(key) + ": expected a boolean");
    return v.get<bool>();
  }

  std::string str(const char* key, const std::string& def) {
    if (!take(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
    return v.get<std::string>();
  }

  std::vector<std::string> str_list(const char* key) {
    std::vector<std::string> out;
    if (!take(key)) return out;
    const json& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(at(key) + ": expected an array");
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string())
        throw ConfigError(at(key) + "[" + std::to_string(i) +
                          "]: expected a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  const json* object(const char* key) {
    if (!take(key)) return nullptr;
    return &j_.at(key);
  }

  std::string at(const char* key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const std::string& path() const { return path_; }

  /// Call after all reads: any key the schema never asked for is a typo.
  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(at(it.key().c_str()) + ": unknown field");
  }

 private:
  bool take(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_model(const json& j, const std::string& path, ModelConfig& m) {
  Fields f(j, path);
  m.dyn.d_z = f.integer("d_z", m.dyn.d_z);
  m.dyn.d1 = f.integer("d1", m.dyn.d1);
  m.dyn.d2 = f.integer("d2", m.dyn.d2);
  m.dyn.d_e = f.integer("d_e", m.dyn.d_e);
  m.dyn.d_r = f.integer("d_r", m.dyn.d_r);
  m.dyn.hyper_hidden = f.integer("hyper_hidden", m.dyn.hyper_hidden);
  m.dyn.adapt_in = f.boolean("adapt_in", m.dyn.adapt_in);
  m.dyn.adapt_hh = f.boolean("adapt_hh", m.dyn.adapt_hh);
  if (f.has("variant")) m.dyn.variant = parse_variant(f.str("variant", ""));
  if (f.has("nonlin")) m.dyn.nonlin = parse_nonlin(f.str("nonlin", ""));
  m.d_ybar = f.integer("d_ybar", m.d_ybar);
  m.readin_hidden = f.integer("readin_hidden", m.readin_hidden);
  m.embed_rnn_width = f.integer("embed_rnn_width", m.embed_rnn_width);
  m.state_rnn_width = f.integer("state_rnn_width", m.state_rnn_width);
  m.embed_bidirectional =
      f.boolean("embed_bidirectional", m.embed_bidirectional);
  m.state_bidirectional =
      f.boolean("state_bidirectional", m.state_bidirectional);
  m.var_floor = f.num("var_floor", m.var_floor);
  m.init_emission_var = f.num("init_emission_var", m.init_emission_var);
  m.init_state_var = f.num("init_state_var", m.init_state_var);
  f.done();
}

void parse_objective_block(const json& j, const std::string& path,
                           ObjectiveConfig& o) {
  Fields f(j, path);
  if (f.has("kind")) o.objective = parse_objective(f.str("kind", ""));
  o.lambda_fro = f.num("lambda_fro", o.lambda_fro);
  o.particles = f.integer("particles", o.particles);
  o.analytic_kl = f.boolean("analytic_kl", o.analytic_kl);
  o.kl_embed_per_trial =
      f.boolean("kl_embed_per_trial", o.kl_embed_per_trial);
  f.done();
}

void parse_budget(const json& j, const std::string& path, TrainConfig& t) {
  Fields f(j, path);
  t.steps = f.integer64("steps", t.steps);
  t.batch_size = f.integer("batch_size", t.batch_size);
  t.optimizer.lr = f.num("lr", t.optimizer.lr);
  t.optimizer.beta1 = f.num("beta1", t.optimizer.beta1);
  t.optimizer.beta2 = f.num("beta2", t.optimizer.beta2);
  t.optimizer.eps = f.num("eps", t.optimizer.eps);
  t.optimizer.weight_decay = f.num("weight_decay", t.optimizer.weight_decay);
  t.optimizer.clip_norm = f.num("clip_norm", t.optimizer.clip_norm);
  t.log_every = f.integer("log_every", t.log_every);
  const bool has_freeze = f.has("freeze");
  auto freeze = f.str_list("freeze");
  if (has_freeze) t.freeze = std::move(freeze);
  f.done();
}

void parse_eval(const json& j, const std::string& path, EvalConfig& e) {
  Fields f(j, path);
  e.context = f.integer("context", e.context);
  e.kstep = f.integer("kstep", e.kstep);
  e.split = f.str("split", e.split);
  e.max_trials = f.integer("max_trials", e.max_trials);
  e.exports = f.str("export", e.exports);
  e.grid = f.str("grid", e.grid);
  e.interp_steps = f.integer("interp_steps", e.interp_steps);
  e.interp_sd = f.num("interp_sd", e.interp_sd);
  f.done();
  if (e.split != "train" && e.split != "val" && e.split != "test")
    throw ConfigError(path + ".split: expected train, val or test");
  if (e.exports != "none" && e.exports != "scatter" && e.exports != "field" &&
      e.exports != "interp")
    throw ConfigError(path + ".export: expected none, scatter, field or interp");
}

GeneratorSpec parse_generator(const json& j, const std::string& path) {
  GeneratorSpec g;
  Fields f(j, path);
  g.id = f.str("id", "");
  if (g.id.empty() || g.id.find('.') != std::string::npos ||
      g.id.find('/') != std::string::npos)
    throw ConfigError(f.at("id") + ": must be non-empty without '.' or '/'");
  g.sde.family = parse_family(f.str("family", "limit_cycle"));
  g.sde.omega = f.num("omega", g.sde.omega);
  g.sde.mu = f.num("mu", g.sde.mu);
  g.sde.a = f.num("a", g.sde.a);
  g.sde.b = f.num("b", g.sde.b);
  g.sde.c = f.num("c", g.sde.c);
  g.sde.sigma_w = f.num("sigma_w", g.sde.sigma_w);
  g.sde.dt = f.num("dt", g.sde.dt);
  g.sde.T = f.integer("T", g.sde.T);
  g.n_train = f.integer("n_train", g.n_train);
  g.n_val = f.integer("n_val", g.n_val);
  g.n_test = f.integer("n_test", g.n_test);
  g.d_y = f.integer("d_y", g.d_y);
  g.held_out = f.boolean("held_out", g.held_out);
  f.done();
  if (g.sde.T < 2) throw ConfigError(f.at("T") + ": need at least 2 steps");
  if (g.sde.dt <= 0.0) throw ConfigError(f.at("dt") + ": must be positive");
  if (g.n_train < 1 || g.n_val < 0 || g.n_test < 0)
    throw ConfigError(path + ": trial counts must be positive");
  if (g.d_y < 0) throw ConfigError(f.at("d_y") + ": must be >= 0");
  return g;
}

json model_json(const ModelConfig& m) {
  return json{{"d_z", m.dyn.d_z},
              {"d1", m.dyn.d1},
              {"d2", m.dyn.d2},
              {"d_e", m.dyn.d_e},
              {"d_r", m.dyn.d_r},
              {"hyper_hidden", m.dyn.hyper_hidden},
              {"adapt_in", m.dyn.adapt_in},
              {"adapt_hh", m.dyn.adapt_hh},
              {"variant", variant_name(m.dyn.variant)},
              {"nonlin", nonlin_name(m.dyn.nonlin)},
              {"d_ybar", m.d_ybar},
              {"readin_hidden", m.readin_hidden},
              {"embed_rnn_width", m.embed_rnn_width},
              {"state_rnn_width", m.state_rnn_width},
              {"embed_bidirectional", m.embed_bidirectional},
              {"state_bidirectional", m.state_bidirectional},
              {"var_floor", m.var_floor},
              {"init_emission_var", m.init_emission_var},
              {"init_state_var", m.init_state_var}};
}

json budget_json(const TrainConfig& t) {
  return json{{"steps", t.steps},
              {"batch_size", t.batch_size},
              {"lr", t.optimizer.lr},
              {"beta1", t.optimizer.beta1},
              {"beta2", t.optimizer.beta2},
              {"eps", t.optimizer.eps},
              {"weight_decay", t.optimizer.weight_decay},
              {"clip_norm", t.optimizer.clip_norm},
              {"log_every", t.log_every},
              {"freeze", t.freeze}};
}

}  // namespace

ExperimentConfig parse_experiment(const std::string& json_text) {
  json j = json::parse(json_text, nullptr, false);
  if (j.is_discarded())
    throw ConfigError("experiment config is not valid JSON");

  ExperimentConfig cfg;
  Fields f(j, "");
  cfg.seed = f.uinteger("seed", cfg.seed);
  cfg.threads = f.integer("threads", cfg.threads);
  if (cfg.threads < 1) throw ConfigError("threads: must be >= 1");
  if (const json* m = f.object("model")) parse_model(*m, "model", cfg.model);
  if (const json* o = f.object("objective"))
    parse_objective_block(*o, "objective", cfg.training.objective);
  if (const json* t = f.object("training"))
    parse_budget(*t, "training", cfg.training);

  // Alignment starts from the training budget and overrides selectively.
  cfg.alignment = cfg.training;
  cfg.alignment.steps = 400;
  cfg.alignment.batch_size = 4;
  if (const json* a = f.object("alignment")) {
    json rest = *a;
    if (rest.is_object() && rest.contains("ns")) {
      if (!rest["ns"].is_number_integer())
        throw ConfigError("alignment.ns: expected an integer");
      cfg.align_ns = rest["ns"].get<int>();
      rest.erase("ns");
    }
    parse_budget(rest, "alignment", cfg.alignment);
  }
  cfg.alignment.objective = cfg.training.objective;
  if (cfg.align_ns < 1) throw ConfigError("alignment.ns: must be >= 1");

  if (const json* e = f.object("eval")) parse_eval(*e, "eval", cfg.eval);

  if (const json* d = f.object("datasets")) {
    Fields fd(*d, "datasets");
    if (const json* gen = fd.object("generate")) {
      if (!gen->is_array())
        throw ConfigError("datasets.generate: expected an array");
      std::set<std::string> ids;
      for (std::size_t i = 0; i < gen->size(); ++i) {
        const std::string path =
            "datasets.generate[" + std::to_string(i) + "]";
        cfg.generate.push_back(parse_generator((*gen)[i], path));
        if (!ids.insert(cfg.generate.back().id).second)
          throw ConfigError(path + ".id: duplicate dataset id " +
                            cfg.generate.back().id);
      }
    }
    cfg.load = fd.str_list("load");
    fd.done();
  }
  f.done();
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  return parse_experiment(read_text_file(path));
}

std::string experiment_json(const ExperimentConfig& cfg) {
  json gen = json::array();
  for (const auto& g : cfg.generate)
    gen.push_back(json{{"id", g.id},
                       {"family", family_name(g.sde.family)},
                       {"omega", g.sde.omega},
                       {"mu", g.sde.mu},
                       {"a", g.sde.a},
                       {"b", g.sde.b},
                       {"c", g.sde.c},
                       {"sigma_w", g.sde.sigma_w},
                       {"dt", g.sde.dt},
                       {"T", g.sde.T},
                       {"n_train", g.n_train},
                       {"n_val", g.n_val},
                       {"n_test", g.n_test},
                       {"d_y", g.d_y},
                       {"held_out", g.held_out}});

  json align = budget_json(cfg.alignment);
  align["ns"] = cfg.align_ns;

  json j{{"seed", cfg.seed},
         {"threads", cfg.threads},
         {"model", model_json(cfg.model)},
         {"objective",
          json{{"kind", objective_name(cfg.training.objective.objective)},
               {"lambda_fro", cfg.training.objective.lambda_fro},
               {"particles", cfg.training.objective.particles},
               {"analytic_kl", cfg.training.objective.analytic_kl},
               {"kl_embed_per_trial",
                cfg.training.objective.kl_embed_per_trial}}},
         {"training", budget_json(cfg.training)},
         {"alignment", align},
         {"eval", json{{"context", cfg.eval.context},
                       {"kstep", cfg.eval.kstep},
                       {"split", cfg.eval.split},
                       {"max_trials", cfg.eval.max_trials},
                       {"export", cfg.eval.exports},
                       {"grid", cfg.eval.grid},
                       {"interp_steps", cfg.eval.interp_steps},
                       {"interp_sd", cfg.eval.interp_sd}}},
         {"datasets", json{{"generate", gen}, {"load", cfg.load}}}};
  return j.dump(2) + "\n";
}

void apply_overrides(ExperimentConfig& cfg,
                     const std::string& overrides_json) {
  if (overrides_json.empty()) return;
  json j = json::parse(overrides_json, nullptr, false);
  if (j.is_discarded()) throw ConfigError("overrides are not valid JSON");
  Fields f(j, "overrides");
  cfg.seed = f.uinteger("seed", cfg.seed);
  cfg.threads = f.integer("threads", cfg.threads);
  if (f.has("variant"))
    cfg.model.dyn.variant = parse_variant(f.str("variant", ""));
  if (f.has("objective")) {
    cfg.training.objective.objective =
        metassm::parse_objective(f.str("objective", ""));
    cfg.alignment.objective.objective = cfg.training.objective.objective;
  }
  if (f.has("particles")) {
    cfg.training.objective.particles = f.integer("particles", 0);
    cfg.alignment.objective.particles = cfg.training.objective.particles;
  }
  cfg.training.steps = f.integer64("steps", cfg.training.steps);
  cfg.align_ns = f.integer("ns", cfg.align_ns);
  cfg.eval.kstep = f.integer("kstep", cfg.eval.kstep);
  cfg.eval.context = f.integer("context", cfg.eval.context);
  cfg.eval.exports = f.str("export", cfg.eval.exports);
  cfg.eval.grid = f.str("grid", cfg.eval.grid);
  f.done();
  if (cfg.threads < 1) throw ConfigError("threads: must be >= 1");
}

std::vector<double> parse_grid(const std::string& spec) {
  double lo = 0, hi = 0;
  int n = 0;
  char tail = 0;
  if (std::sscanf(spec.c_str(), "%lf:%lf:%d%c", &lo, &hi, &n, &tail) != 3)
    throw ConfigError("grid spec must be lo:hi:n, got " + spec);
  if (n < 1) throw ConfigError("grid spec needs at least one point: " + spec);
  if (n > 1 && hi <= lo)
    throw ConfigError("grid spec needs hi > lo for n > 1: " + spec);
  std::vector<double> out(n);
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  for (int i = 0; i < n; ++i)
    out[i] = lo + (hi - lo) * i / static_cast<double>(n - 1);
  return out;
}

}  // namespace metassm
