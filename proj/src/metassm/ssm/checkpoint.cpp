#include "metassm/ssm/checkpoint.hpp"

#include <sstream>

#include <json.hpp>

#include "metassm/util/binio.hpp"
#include "metassm/util/errors.hpp"

namespace metassm {

using nlohmann::json;

namespace {

json config_to_json(const ModelConfig& c) {
  json m;
  m["d_z"] = c.dyn.d_z;
  m["d1"] = c.dyn.d1;
  m["d2"] = c.dyn.d2;
  m["d_e"] = c.dyn.d_e;
  m["d_r"] = c.dyn.d_r;
  m["hyper_hidden"] = c.dyn.hyper_hidden;
  m["adapt_in"] = c.dyn.adapt_in;
  m["adapt_hh"] = c.dyn.adapt_hh;
  m["variant"] = variant_name(c.dyn.variant);
  m["nonlin"] = nonlin_name(c.dyn.nonlin);
  m["d_ybar"] = c.d_ybar;
  m["readin_hidden"] = c.readin_hidden;
  m["embed_rnn_width"] = c.embed_rnn_width;
  m["state_rnn_width"] = c.state_rnn_width;
  m["embed_bidirectional"] = c.embed_bidirectional;
  m["state_bidirectional"] = c.state_bidirectional;
  m["var_floor"] = c.var_floor;
  m["init_emission_var"] = c.init_emission_var;
  m["init_state_var"] = c.init_state_var;
  return m;
}

ModelConfig config_from_json(const json& m) {
  ModelConfig c;
  c.dyn.d_z = m.at("d_z").get<int>();
  c.dyn.d1 = m.at("d1").get<int>();
  c.dyn.d2 = m.at("d2").get<int>();
  c.dyn.d_e = m.at("d_e").get<int>();
  c.dyn.d_r = m.at("d_r").get<int>();
  c.dyn.hyper_hidden = m.at("hyper_hidden").get<int>();
  c.dyn.adapt_in = m.at("adapt_in").get<bool>();
  c.dyn.adapt_hh = m.at("adapt_hh").get<bool>();
  c.dyn.variant = parse_variant(m.at("variant").get<std::string>());
  c.dyn.nonlin = parse_nonlin(m.at("nonlin").get<std::string>());
  c.d_ybar = m.at("d_ybar").get<int>();
  c.readin_hidden = m.at("readin_hidden").get<int>();
  c.embed_rnn_width = m.at("embed_rnn_width").get<int>();
  c.state_rnn_width = m.at("state_rnn_width").get<int>();
  c.embed_bidirectional = m.at("embed_bidirectional").get<bool>();
  c.state_bidirectional = m.at("state_bidirectional").get<bool>();
  c.var_floor = m.at("var_floor").get<double>();
  c.init_emission_var = m.at("init_emission_var").get<double>();
  c.init_state_var = m.at("init_state_var").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = model.seed();
  manifest["model"] = config_to_json(model.config());
  json ds = json::array();
  for (const auto& d : model.datasets())
    ds.push_back(json{{"id", d.id}, {"d_y", d.d_y}});
  manifest["datasets"] = ds;
  manifest["param_count"] = model.store().size();

  std::ostringstream os(std::ios::binary);
  const std::string mbytes = manifest.dump();
  write_u64(os, mbytes.size());
  os.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  for (const auto& e : model.store().entries()) {
    write_u64(os, e.name.size());
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u64(os, 2);
    write_u64(os, static_cast<std::uint64_t>(e.value.rows));
    write_u64(os, static_cast<std::uint64_t>(e.value.cols));
    write_f64(os, e.value.data(), e.value.size());
  }
  write_text_file(path, os.str());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::istringstream is(read_text_file(path), std::ios::binary);
  const std::uint64_t mlen = read_u64(is);
  std::string mbytes(mlen, '\0');
  is.read(mbytes.data(), static_cast<std::streamsize>(mlen));
  if (!is) throw IoError("checkpoint manifest truncated: " + path.string());

  json manifest;
  try {
    manifest = json::parse(mbytes);
  } catch (const json::exception& e) {
    throw IoError("checkpoint manifest is not valid JSON: " +
                  std::string(e.what()));
  }
  if (manifest.at("format_version").get<int>() != 1)
    throw IoError("unsupported checkpoint format version");

  Model model(config_from_json(manifest.at("model")),
              manifest.at("seed").get<std::uint64_t>());
  for (const auto& d : manifest.at("datasets"))
    model.register_dataset(d.at("id").get<std::string>(),
                           d.at("d_y").get<int>());

  const auto expected = manifest.at("param_count").get<std::int32_t>();
  if (expected != model.store().size())
    throw IoError("checkpoint parameter count does not match its config");

  for (auto& e : model.store().entries()) {
    const std::uint64_t nlen = read_u64(is);
    std::string name(nlen, '\0');
    is.read(name.data(), static_cast<std::streamsize>(nlen));
    if (!is || name != e.name)
      throw IoError("checkpoint tensor order mismatch: expected " + e.name);
    const std::uint64_t rank = read_u64(is);
    if (rank != 2) throw IoError("checkpoint tensors must be rank 2");
    const auto rows = static_cast<int>(read_u64(is));
    const auto cols = static_cast<int>(read_u64(is));
    if (rows != e.value.rows || cols != e.value.cols)
      throw IoError("checkpoint tensor shape mismatch for " + e.name);
    read_f64(is, e.value.data(), e.value.size());
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw IoError("trailing bytes after checkpoint payload");
  return model;
}

}  // namespace metassm
