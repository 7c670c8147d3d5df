#include "metassm/synth/dataset.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

using nlohmann::json;

ObservationLift make_lift(int d_z, int d_y, RngStream& rng) {
  if (d_z < 1 || d_y < 1) throw ConfigError("lift dims must be positive");
  ObservationLift lift;
  const double sd = std::pow(static_cast<double>(d_z), -0.25);  // var 1/sqrt(d_z)
  lift.C = Tensor::randn(d_y, d_z, rng, sd);
  return lift;
}

Tensor lift_observations(const Tensor& latents, const ObservationLift& lift,
                         RngStream& rng) {
  if (latents.cols != lift.C.cols)
    throw DimensionError("latent dim does not match lift");
  const int T = latents.rows, d_y = lift.C.rows, d_z = lift.C.cols;
  Tensor out(T, d_y);
  const double sd = std::sqrt(lift.noise_var);
  std::vector<double> eps(d_y);
  for (int t = 0; t < T; ++t) {
    rng.fill_normal(std::span<double>(eps));
    for (int i = 0; i < d_y; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d_z; ++j) acc += lift.C.at(i, j) * latents.at(t, j);
      out.at(t, i) = acc + sd * eps[i];
    }
  }
  return out;
}

Tensor DatasetBundle::trial_obs(int k) const {
  if (k < 0 || k >= trials) throw UsageError("trial index out of range");
  Tensor out(spec.T, d_y);
  std::copy_n(observations.v.begin() + static_cast<std::size_t>(k) * spec.T * d_y,
              static_cast<std::size_t>(spec.T) * d_y, out.v.begin());
  return out;
}

Tensor DatasetBundle::trial_latents(int k) const {
  if (k < 0 || k >= trials) throw UsageError("trial index out of range");
  Tensor out(spec.T, d_z);
  std::copy_n(latents.v.begin() + static_cast<std::size_t>(k) * spec.T * d_z,
              static_cast<std::size_t>(spec.T) * d_z, out.v.begin());
  return out;
}

Tensor DatasetBundle::slab_obs(const std::vector<int>& trial_ids) const {
  const int B = static_cast<int>(trial_ids.size());
  if (B < 1) throw UsageError("slab needs at least one trial");
  Tensor out(spec.T * B, d_y);
  for (int b = 0; b < B; ++b) {
    const int k = trial_ids[b];
    if (k < 0 || k >= trials) throw UsageError("trial index out of range");
    for (int t = 0; t < spec.T; ++t)
      for (int j = 0; j < d_y; ++j)
        out.at(t * B + b, j) =
            observations.v[(static_cast<std::size_t>(k) * spec.T + t) * d_y + j];
  }
  return out;
}

DatasetBundle generate_dataset(const std::string& id, const SdeSpec& spec,
                               int n_train, int n_val, int n_test, int d_y,
                               std::uint64_t seed) {
  if (id.empty() || id.find('.') != std::string::npos)
    throw ConfigError("dataset id must be non-empty and dot-free: " + id);
  if (n_train < 1 || n_val < 0 || n_test < 0)
    throw ConfigError("dataset needs n_train >= 1 and non-negative splits");

  DatasetBundle b;
  b.id = id;
  b.spec = spec;
  b.seed = seed;
  b.trials = n_train + n_val + n_test;
  b.d_z = 2;

  RngStream setup(RngStream::derive(seed, "setup"));
  b.d_y = d_y > 0 ? d_y : static_cast<int>(30 + setup.integer(71));
  const ObservationLift lift = make_lift(b.d_z, b.d_y, setup);

  b.latents = Tensor(b.trials * spec.T, b.d_z);
  b.observations = Tensor(b.trials * spec.T, b.d_y);
  for (int k = 0; k < b.trials; ++k) {
    RngStream trial_rng(RngStream::derive(seed, "trial", k));
    const Tensor z = gen_trial(spec, trial_rng);
    const Tensor y = lift_observations(z, lift, trial_rng);
    std::copy(z.v.begin(), z.v.end(),
              b.latents.v.begin() + static_cast<std::size_t>(k) * spec.T * b.d_z);
    std::copy(y.v.begin(), y.v.end(),
              b.observations.v.begin() +
                  static_cast<std::size_t>(k) * spec.T * b.d_y);
  }

  for (int k = 0; k < n_train; ++k) b.splits.train.push_back(k);
  for (int k = 0; k < n_val; ++k) b.splits.val.push_back(n_train + k);
  for (int k = 0; k < n_test; ++k) b.splits.test.push_back(n_train + n_val + k);
  return b;
}

namespace {

json spec_to_json(const SdeSpec& s) {
  return json{{"family", family_name(s.family)}, {"omega", s.omega},
              {"mu", s.mu},                      {"a", s.a},
              {"b", s.b},                        {"c", s.c},
              {"sigma_w", s.sigma_w},            {"dt", s.dt},
              {"T", s.T}};
}

SdeSpec spec_from_json(const json& j) {
  SdeSpec s;
  s.family = parse_family(j.at("family").get<std::string>());
  s.omega = j.at("omega").get<double>();
  s.mu = j.at("mu").get<double>();
  s.a = j.at("a").get<double>();
  s.b = j.at("b").get<double>();
  s.c = j.at("c").get<double>();
  s.sigma_w = j.at("sigma_w").get<double>();
  s.dt = j.at("dt").get<double>();
  s.T = j.at("T").get<int>();
  return s;
}

void write_array(const std::filesystem::path& path, const Tensor& t,
                 std::uint64_t trials, std::uint64_t T, std::uint64_t width) {
  ArrayBlock block;
  block.dims = {trials, T, width};
  block.data = t.v;
  write_blocks_file(path, {block});
}

Tensor read_array(const std::filesystem::path& path, int trials, int T,
                  int width) {
  const auto blocks = read_blocks_file(path);
  if (blocks.size() != 1 || blocks[0].dims.size() != 3)
    throw IoError("expected one rank-3 array in " + path.string());
  const auto& b = blocks[0];
  if (b.dims[0] != static_cast<std::uint64_t>(trials) ||
      b.dims[1] != static_cast<std::uint64_t>(T) ||
      b.dims[2] != static_cast<std::uint64_t>(width))
    throw IoError("array shape does not match manifest in " + path.string());
  Tensor t(trials * T, width);
  t.v = b.data;
  return t;
}

}  // namespace

void save_bundle(const DatasetBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json m;
  m["format_version"] = 1;
  m["id"] = b.id;
  m["seed"] = b.seed;
  m["trials"] = b.trials;
  m["T"] = b.spec.T;
  m["d_y"] = b.d_y;
  m["d_z"] = b.d_z;
  m["spec"] = spec_to_json(b.spec);
  m["splits"] = json{{"train", b.splits.train},
                     {"val", b.splits.val},
                     {"test", b.splits.test}};
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
  write_array(dir / "observations.bin", b.observations, b.trials, b.spec.T,
              b.d_y);
  write_array(dir / "latents.bin", b.latents, b.trials, b.spec.T, b.d_z);
}

DatasetBundle load_bundle(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_text_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("bad dataset manifest in " + dir.string() + ": " + e.what());
  }
  if (m.at("format_version").get<int>() != 1)
    throw IoError("unsupported dataset format version");

  DatasetBundle b;
  b.id = m.at("id").get<std::string>();
  b.seed = m.at("seed").get<std::uint64_t>();
  b.trials = m.at("trials").get<int>();
  b.d_y = m.at("d_y").get<int>();
  b.d_z = m.at("d_z").get<int>();
  b.spec = spec_from_json(m.at("spec"));
  b.splits.train = m.at("splits").at("train").get<std::vector<int>>();
  b.splits.val = m.at("splits").at("val").get<std::vector<int>>();
  b.splits.test = m.at("splits").at("test").get<std::vector<int>>();
  if (static_cast<int>(b.splits.train.size() + b.splits.val.size() +
                       b.splits.test.size()) != b.trials)
    throw IoError("split sizes do not sum to trial count in " + dir.string());
  b.observations =
      read_array(dir / "observations.bin", b.trials, b.spec.T, b.d_y);
  b.latents = read_array(dir / "latents.bin", b.trials, b.spec.T, b.d_z);
  return b;
}

}  // namespace metassm
