/*
 * ssch: variational MDL probing and subspace comparison over layered
 * embedding stores.
 *
 * All functions return an ssch_status. On failure a human-readable message
 * is available from ssch_last_error() on the calling thread until the next
 * call into the library from that thread. Handles are opaque; every
 * *_open / *_load / *_train / *_run output must be released with the
 * matching *_free / *_close function. Strings returned through char** are
 * owned by the caller and released with ssch_string_free().
 */
#ifndef SSCH_SSCH_H
#define SSCH_SSCH_H

#include <stddef.h>
#include <stdint.h>

#if defined(SSCH_BUILDING_LIBRARY)
#define SSCH_API __attribute__((visibility("default")))
#else
#define SSCH_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ssch_status {
  SSCH_OK = 0,
  SSCH_ERR_INVALID_ARGUMENT = 1, /* validation failure, bad shapes, unknown names */
  SSCH_ERR_IO = 2,               /* missing or unwritable files */
  SSCH_ERR_FORMAT = 3,           /* corrupt or incompatible files */
  SSCH_ERR_NUMERIC = 4,          /* non-finite values during training */
  SSCH_ERR_PARTIAL = 5,          /* grid finished with failed cells; result is valid */
  SSCH_ERR_INTERNAL = 6
} ssch_status;

typedef struct ssch_dataset ssch_dataset;
typedef struct ssch_probe ssch_probe;
typedef struct ssch_chronicle ssch_chronicle;

typedef struct ssch_dataset_info {
  uint64_t n_tokens;
  uint64_t n_layers;
  uint64_t dim;
  uint64_t n_classes;
  uint32_t checksum;
} ssch_dataset_info;

typedef struct ssch_train_config {
  double learning_rate;
  double adam_beta1;
  double adam_beta2;
  double weight_decay;
  uint64_t batch_size;
  uint64_t max_epochs;
  uint64_t patience;
  uint64_t mc_samples_train;
  uint64_t mc_samples_eval;
  uint64_t seed;
  double kl_weight;
} ssch_train_config;

typedef struct ssch_codelength {
  double data_bits;
  double data_bits_std;
  double model_bits;
  double codelength;
} ssch_codelength;

SSCH_API const char* ssch_last_error(void);
SSCH_API const char* ssch_version(void);
SSCH_API void ssch_string_free(char* s);

/* ---- embedding store ---------------------------------------------------- */

/* manifest_json: the store manifest as JSON text. embeddings holds
 * n_tokens * n_layers * dim floats (token, layer, dim order). */
SSCH_API ssch_status ssch_dataset_write(const char* manifest_json, const float* embeddings,
                                        size_t n_embeddings, const uint32_t* labels,
                                        size_t n_labels, const char* path);
SSCH_API ssch_status ssch_dataset_open(const char* path, ssch_dataset** out);
SSCH_API void ssch_dataset_close(ssch_dataset* ds);
SSCH_API ssch_status ssch_dataset_info_get(const ssch_dataset* ds, ssch_dataset_info* out);
/* JSON summary: manifest, label histogram, split sizes. */
SSCH_API ssch_status ssch_dataset_summary(const ssch_dataset* ds, char** out_json);
/* Copies one token/layer vector (dim floats) into out. */
SSCH_API ssch_status ssch_dataset_vector(const ssch_dataset* ds, uint64_t token, uint64_t layer,
                                         float* out, size_t capacity);

/* ---- probes ------------------------------------------------------------- */

SSCH_API void ssch_train_config_default(ssch_train_config* out);
SSCH_API ssch_status ssch_probe_train(const ssch_dataset* train, const char* train_split,
                                      const ssch_dataset* dev, const char* dev_split,
                                      const ssch_train_config* config, ssch_probe** out);
SSCH_API ssch_status ssch_probe_save(const ssch_probe* probe, const char* path);
SSCH_API ssch_status ssch_probe_load(const char* path, ssch_probe** out);
SSCH_API void ssch_probe_free(ssch_probe* probe);
/* JSON: dims, config, training log, codelength components, alpha. */
SSCH_API ssch_status ssch_probe_summary(const ssch_probe* probe, char** out_json);
SSCH_API ssch_status ssch_probe_cog(const ssch_probe* probe, double* out);

SSCH_API ssch_status ssch_probe_codelength(const ssch_probe* probe, const ssch_dataset* ds,
                                           const char* split, uint64_t mc_samples, uint64_t seed,
                                           ssch_codelength* out);
/* Full evaluation report as JSON. F1 on f1_split, codelength on code_split.
 * group_map_path may be NULL. */
SSCH_API ssch_status ssch_probe_evaluate(const ssch_probe* probe, const ssch_dataset* ds,
                                         const char* f1_split, const char* code_split,
                                         uint64_t mc_samples, uint64_t seed,
                                         const char* group_map_path, char** out_json);

/* Principal subspace angles in degrees, ascending. *count receives the number
 * of angles; angles may be NULL to query it. */
SSCH_API ssch_status ssch_ssa(const ssch_probe* a, const ssch_probe* b, double* angles,
                              size_t capacity, size_t* count, double* mean_angle);

SSCH_API double ssch_codelength_ratio(double codelength, double control_codelength);

/* ---- chronicle ---------------------------------------------------------- */

/* workers == 0 uses SSCH_WORKERS or the hardware concurrency. Returns
 * SSCH_ERR_PARTIAL (with *out set) when some cells failed. */
SSCH_API ssch_status ssch_chronicle_run(const char* manifest_path, unsigned workers,
                                        ssch_chronicle** out);
/* path: an output directory or its result.json. */
SSCH_API ssch_status ssch_chronicle_load(const char* path, ssch_chronicle** out);
SSCH_API void ssch_chronicle_free(ssch_chronicle* c);
SSCH_API ssch_status ssch_chronicle_counts(const ssch_chronicle* c, size_t* cells,
                                           size_t* failures, size_t* recomputed);
/* format: "csv" or "json". */
SSCH_API ssch_status ssch_chronicle_emit(const ssch_chronicle* c, const char* format,
                                         const char* destination);

#ifdef __cplusplus
}
#endif

#endif /* SSCH_SSCH_H */
