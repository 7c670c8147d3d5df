#ifndef METASSM_H
#define METASSM_H

/* C surface of the metassm library. Every command reads a JSON experiment
 * config, applies optional flat JSON overrides and writes its artifacts
 * plus a re-executable manifest.json under an output directory. All state
 * lives in the session; the library keeps no globals beyond logging. */

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define METASSM_API __declspec(dllexport)
#else
#define METASSM_API __attribute__((visibility("default")))
#endif

/* Status codes; also used verbatim as CLI exit codes. */
enum {
  METASSM_OK = 0,
  METASSM_ERROR_CONFIG = 2,
  METASSM_ERROR_IO = 3,
  METASSM_ERROR_NUMERIC = 4,
  METASSM_ERROR_USAGE = 5,
  METASSM_ERROR_INTERNAL = 6
};

typedef struct metassm_session metassm_session;

/* Library semantic version, e.g. "0.1.0". Static storage. */
METASSM_API const char* metassm_version(void);

/* Creates a session. Returns NULL only on allocation failure. */
METASSM_API metassm_session* metassm_session_new(void);
METASSM_API void metassm_session_free(metassm_session* s);

/* Message of the session's most recent failure, or "" if the last call
 * succeeded. Owned by the session; valid until its next call. */
METASSM_API const char* metassm_last_error(const metassm_session* s);

/* Report produced by the most recent command: metrics JSON for align/eval,
 * the summary table for generate, "" otherwise. Owned by the session. */
METASSM_API const char* metassm_last_report(const metassm_session* s);

/* Synthesizes the configured datasets under <out_dir>/datasets. */
METASSM_API int metassm_generate(metassm_session* s, const char* config_path,
                                 const char* overrides, const char* out_dir);

/* Pretrains on the generated (non-held-out) plus loaded datasets; writes
 * checkpoint.bin and trace.csv. */
METASSM_API int metassm_train(metassm_session* s, const char* config_path,
                              const char* overrides, const char* out_dir);

/* Few-shot aligns `checkpoint` to the bundle in `dataset_dir` using `ns`
 * training trials (ns <= 0 takes the config's alignment.ns), then scores
 * the dataset and writes the aligned checkpoint plus a report. */
METASSM_API int metassm_align(metassm_session* s, const char* config_path,
                              const char* overrides, const char* checkpoint,
                              const char* dataset_dir, int ns,
                              const char* out_dir);

/* Scores `checkpoint` on each bundle directory in the NULL-terminated
 * `dataset_dirs` array; writes report.json, kstep.csv and any exports. */
METASSM_API int metassm_eval(metassm_session* s, const char* config_path,
                             const char* overrides, const char* checkpoint,
                             const char* const* dataset_dirs,
                             const char* out_dir);

/* Re-executes the command recorded in `manifest_path` into `out_dir`;
 * outputs are bit-identical on the same build. */
METASSM_API int metassm_rerun(metassm_session* s, const char* manifest_path,
                              const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif /* METASSM_H */
