#include "metassm/metassm.h"

#include <exception>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metassm/run/config.hpp"
#include "metassm/run/runner.hpp"
#include "metassm/util/errors.hpp"

struct metassm_session {
  std::string error;
  std::string report;
};

namespace {

using namespace metassm;

int status_of(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return METASSM_ERROR_CONFIG;
  if (dynamic_cast<const IoError*>(&e)) return METASSM_ERROR_IO;
  if (dynamic_cast<const NumericError*>(&e)) return METASSM_ERROR_NUMERIC;
  if (dynamic_cast<const UsageError*>(&e)) return METASSM_ERROR_USAGE;
  return METASSM_ERROR_INTERNAL;
}

template <class F>
int guarded(metassm_session* s, F&& body) {
  if (!s) return METASSM_ERROR_USAGE;
  s->error.clear();
  s->report.clear();
  try {
    s->report = body();
    return METASSM_OK;
  } catch (const std::exception& e) {
    s->error = e.what();
    return status_of(e);
  } catch (...) {
    s->error = "unrecognized failure";
    return METASSM_ERROR_INTERNAL;
  }
}

std::string need(const char* v, const char* what) {
  if (!v || !*v) throw UsageError(std::string(what) + " is required");
  return v;
}

ExperimentConfig load_config(const char* config_path, const char* overrides) {
  ExperimentConfig cfg = load_experiment(need(config_path, "config path"));
  if (overrides && *overrides) apply_overrides(cfg, overrides);
  Eigen::setNbThreads(cfg.threads);
  return cfg;
}

}  // namespace

extern "C" {

const char* metassm_version(void) { return metassm::kVersion; }

metassm_session* metassm_session_new(void) {
  try {
    return new metassm_session();
  } catch (...) {
    return nullptr;
  }
}

void metassm_session_free(metassm_session* s) { delete s; }

const char* metassm_last_error(const metassm_session* s) {
  return s ? s->error.c_str() : "null session";
}

const char* metassm_last_report(const metassm_session* s) {
  return s ? s->report.c_str() : "";
}

int metassm_generate(metassm_session* s, const char* config_path,
                     const char* overrides, const char* out_dir) {
  return guarded(s, [&] {
    return run_generate(load_config(config_path, overrides),
                        need(out_dir, "output directory"))
        .report;
  });
}

int metassm_train(metassm_session* s, const char* config_path,
                  const char* overrides, const char* out_dir) {
  return guarded(s, [&] {
    return run_train(load_config(config_path, overrides),
                     need(out_dir, "output directory"))
        .report;
  });
}

int metassm_align(metassm_session* s, const char* config_path,
                  const char* overrides, const char* checkpoint,
                  const char* dataset_dir, int ns, const char* out_dir) {
  return guarded(s, [&] {
    ExperimentConfig cfg = load_config(config_path, overrides);
    return run_align(cfg, need(checkpoint, "checkpoint path"),
                     need(dataset_dir, "dataset directory"),
                     ns > 0 ? ns : cfg.align_ns,
                     need(out_dir, "output directory"))
        .report;
  });
}

int metassm_eval(metassm_session* s, const char* config_path,
                 const char* overrides, const char* checkpoint,
                 const char* const* dataset_dirs, const char* out_dir) {
  return guarded(s, [&] {
    std::vector<std::filesystem::path> dirs;
    for (const char* const* p = dataset_dirs; p && *p; ++p)
      dirs.emplace_back(*p);
    return run_eval(load_config(config_path, overrides),
                    need(checkpoint, "checkpoint path"), dirs,
                    need(out_dir, "output directory"))
        .report;
  });
}

int metassm_rerun(metassm_session* s, const char* manifest_path,
                  const char* out_dir) {
  return guarded(s, [&] {
    return rerun_manifest(need(manifest_path, "manifest path"),
                          need(out_dir, "output directory"))
        .report;
  });
}

}  // extern "C"
