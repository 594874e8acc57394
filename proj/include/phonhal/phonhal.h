/* C interface to the phoneme hallucinator and kNN conversion core. */
#ifndef PHONHAL_H
#define PHONHAL_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PHONHAL_API __declspec(dllexport)
#else
#define PHONHAL_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum phh_status {
  PHH_OK = 0,
  PHH_ERR_INVALID_ARGUMENT = 1,
  PHH_ERR_IO = 2,
  PHH_ERR_BAD_MAGIC = 3,
  PHH_ERR_UNSUPPORTED_VERSION = 4,
  PHH_ERR_TRUNCATED = 5,
  PHH_ERR_NON_FINITE = 6,
  PHH_ERR_CONFIG = 7,
  PHH_ERR_CORRUPT = 8,
  PHH_ERR_NUMERIC = 9,
  PHH_ERR_INTERNAL = 10
} phh_status;

/* Message for the last failing call on this thread; "" when none. */
PHONHAL_API const char* phh_last_error(void);
PHONHAL_API const char* phh_status_name(phh_status status);
PHONHAL_API const char* phh_version(void);

/* Warnings go to stderr unless a callback is installed (NULL restores it). */
typedef void (*phh_warning_fn)(const char* message);
PHONHAL_API void phh_set_warning_callback(phh_warning_fn fn);

/* ---- feature collections ---------------------------------------------- */

typedef enum phh_kind { PHH_KIND_SET = 0, PHH_KIND_SEQUENCE = 1 } phh_kind;

typedef struct phh_features phh_features;

/* Copies count * dim floats from values (may be NULL when count is 0). */
PHONHAL_API phh_status phh_features_create(phh_kind kind, uint32_t dim, uint64_t count, const float* values,
                                           phh_features** out);
PHONHAL_API phh_status phh_features_read(const char* path, phh_features** out);
/* Writes the file and, when a speaker tag is set, its manifest. */
PHONHAL_API phh_status phh_features_write(const phh_features* features, const char* path);
PHONHAL_API void phh_features_free(phh_features* features);

PHONHAL_API phh_kind phh_features_kind(const phh_features* features);
PHONHAL_API uint32_t phh_features_dim(const phh_features* features);
PHONHAL_API uint64_t phh_features_count(const phh_features* features);
/* Row-major count x dim; valid until the handle is freed. */
PHONHAL_API const float* phh_features_data(const phh_features* features);
/* NULL when untagged. */
PHONHAL_API const char* phh_features_speaker(const phh_features* features);
PHONHAL_API phh_status phh_features_set_speaker(phh_features* features, const char* speaker);

/* ---- models ------------------------------------------------------------ */

typedef enum phh_preset { PHH_PRESET_PAPER = 0, PHH_PRESET_DESK = 1, PHH_PRESET_TOY = 2 } phh_preset;

typedef struct phh_model phh_model;

typedef struct phh_model_options {
  phh_preset preset;
  uint32_t feature_dim;
  int peq, cat, mod; /* ablation switches, non-zero = on */
  int conditional_z_prior;
  uint64_t seed;
} phh_model_options;

PHONHAL_API void phh_model_options_init(phh_model_options* options);
PHONHAL_API phh_status phh_model_create(const phh_model_options* options, phh_model** out);
PHONHAL_API phh_status phh_model_load(const char* path, phh_model** out);
PHONHAL_API phh_status phh_model_save(const phh_model* model, const char* path);
PHONHAL_API void phh_model_free(phh_model* model);
PHONHAL_API uint32_t phh_model_feature_dim(const phh_model* model);
PHONHAL_API uint64_t phh_model_trained_steps(const phh_model* model);
PHONHAL_API uint64_t phh_model_parameter_count(const phh_model* model);

/* ---- sampling and conversion ------------------------------------------ */

typedef struct phh_hallucinate_options {
  uint64_t seed;
  unsigned threads; /* 0: PHONHAL_NUM_THREADS or hardware concurrency */
} phh_hallucinate_options;

PHONHAL_API void phh_hallucinate_options_init(phh_hallucinate_options* options);
/* target and result are raw (un-normalized) feature sets. */
PHONHAL_API phh_status phh_hallucinate(const phh_model* model, const phh_features* target, uint64_t count,
                                       const phh_hallucinate_options* options, phh_features** out);

typedef struct phh_convert_options {
  size_t k;
  uint64_t count; /* hallucinations added to the target before matching */
  uint64_t seed;
  unsigned threads;
} phh_convert_options;

PHONHAL_API void phh_convert_options_init(phh_convert_options* options);
/* model may be NULL when count is 0. Result is a sequence of source length. */
PHONHAL_API phh_status phh_convert(const phh_model* model, const phh_features* source, const phh_features* target,
                                   const phh_convert_options* options, phh_features** out);

/* ---- synthetic benchmark ---------------------------------------------- */

typedef struct phh_synth_options {
  uint64_t seed;
  uint32_t phonemes;
  uint32_t dim;
  uint32_t train_speakers;
  uint32_t heldout_speakers;
  uint64_t frames_per_utterance;
  uint32_t utterances_per_speaker;
  double sigma;
} phh_synth_options;

PHONHAL_API void phh_synth_options_init(phh_synth_options* options);
PHONHAL_API phh_status phh_synth_corpus(const phh_synth_options* options, const char* out_dir);

typedef struct phh_train_options {
  const char* data_dir;   /* synthetic corpus or any directory of FSF files */
  const char* checkpoint; /* best model; "<checkpoint>.last" keeps resumable state */
  const char* history;    /* CSV loss history, may be NULL */
  const char* resume;     /* checkpoint with trainer state, may be NULL */
  phh_model_options model;
  int epochs;
  size_t batch_size;
  double lr;
  uint64_t seed;
  int patience;
  double max_seconds;
  size_t validation_splits;
  int verbose;
} phh_train_options;

typedef struct phh_train_summary {
  int epochs;
  uint64_t steps;
  double initial_val_elbo;
  double best_val_elbo;
  int best_epoch;
} phh_train_summary;

PHONHAL_API void phh_train_options_init(phh_train_options* options);
PHONHAL_API phh_status phh_train(const phh_train_options* options, phh_train_summary* summary);

typedef struct phh_eval_options {
  const char* corpus_dir;
  const char* checkpoint; /* NULL scores the ground-truth oracle rows only */
  const char* out_csv;
  const uint64_t* counts;
  size_t n_counts;
  size_t observed;
  size_t k;
  uint64_t seed;
} phh_eval_options;

PHONHAL_API void phh_eval_options_init(phh_eval_options* options);
PHONHAL_API phh_status phh_eval(const phh_eval_options* options);

typedef struct phh_ablate_options {
  const char* corpus_dir;
  const char* out_csv;
  const char* work_dir; /* per-variant checkpoints and histories, may be NULL */
  const uint64_t* counts;
  size_t n_counts;
  unsigned variants; /* bit i selects V(i+1); 0 means all six */
  phh_train_options train;
  size_t observed;
  size_t k;
} phh_ablate_options;

PHONHAL_API void phh_ablate_options_init(phh_ablate_options* options);
PHONHAL_API phh_status phh_ablate(const phh_ablate_options* options);

/* PCA of the union of the given files; rows "x,y,label". */
PHONHAL_API phh_status phh_project(const char* const* paths, const char* const* labels, size_t n, const char* out_csv,
                                   uint64_t* rows_written);

#ifdef __cplusplus
}
#endif

#endif /* PHONHAL_H */
