#ifndef DRKF_H
#define DRKF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum DrkfStatus {
  DRKF_STATUS_OK = 0,
  DRKF_STATUS_NULL_POINTER = 1,
  DRKF_STATUS_INVALID_ARGUMENT = 2,
  DRKF_STATUS_IO = 3,
  DRKF_STATUS_DATA = 4,
  DRKF_STATUS_CONFIG = 5,
  DRKF_STATUS_CHECKPOINT = 6,
  DRKF_STATUS_SHAPE = 7,
  DRKF_STATUS_NON_FINITE = 8,
  DRKF_STATUS_PANIC = 9,
} DrkfStatus;

/**
 * A loaded or generated dataset.
 */
typedef struct DrkfDataset DrkfDataset;

/**
 * A model together with its optimizer state and batch schedule.
 */
typedef struct DrkfTrainer DrkfTrainer;

/**
 * Settings for [`drkf_dataset_generate`].
 */
typedef struct DrkfSyntheticSpec {
  size_t classes;
  size_t d_z;
  size_t records;
  size_t speech_len;
  size_t text_len;
  double separation;
  double inconsistency_rate;
  uint64_t seed;
} DrkfSyntheticSpec;

/**
 * Loss components of one training step.
 */
typedef struct DrkfLosses {
  double l_mse;
  double l_kld;
  double l_a;
  double l_mi_s;
  double l_mi_t;
  double l_mi_cross;
  double l_c;
  double l_f;
  double l_b;
  double total;
} DrkfLosses;

/**
 * Summary metrics of an evaluation.
 */
typedef struct DrkfMetrics {
  double acc_unweighted;
  double acc_weighted;
  double precision;
  double recall;
  double micro_f1;
  double weighted_f1;
  double ed_pair_accuracy;
  uint64_t samples;
} DrkfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The string
 * stays valid until the next failing call on the same thread.
 */
const char *drkf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *drkf_version(void);

/**
 * Loads a JSONL fixture (metadata read from `<path>.meta.json`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum DrkfStatus drkf_dataset_load(const char *path, struct DrkfDataset **out);

/**
 * Draws a synthetic dataset.
 *
 * # Safety
 * `spec` must point to a valid spec; `out` must be writable.
 */
enum DrkfStatus drkf_dataset_generate(const struct DrkfSyntheticSpec *spec,
                                      struct DrkfDataset **out);

/**
 * Writes the dataset as a JSONL fixture plus `<path>.meta.json`.
 *
 * # Safety
 * `dataset` must come from this library; `path` must be NUL-terminated.
 */
enum DrkfStatus drkf_dataset_save(const struct DrkfDataset *dataset, const char *path);

/**
 * Number of records, or 0 for NULL.
 *
 * # Safety
 * `dataset` must be NULL or come from this library.
 */
size_t drkf_dataset_len(const struct DrkfDataset *dataset);

/**
 * Releases a dataset. NULL is ignored.
 *
 * # Safety
 * `dataset` must be NULL or a handle not yet freed.
 */
void drkf_dataset_free(struct DrkfDataset *dataset);

/**
 * Creates a freshly initialized trainer. `config_json` is a flat JSON
 * object with run settings (same keys as the CLI config file) or NULL for
 * defaults.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be writable.
 */
enum DrkfStatus drkf_trainer_new(const char *config_json, struct DrkfTrainer **out);

/**
 * Runs the next scheduled training step on `dataset`. `losses` may be NULL.
 *
 * # Safety
 * Handles must come from this library; `losses` must be NULL or writable.
 */
enum DrkfStatus drkf_trainer_step(struct DrkfTrainer *trainer,
                                  const struct DrkfDataset *dataset,
                                  struct DrkfLosses *losses);

/**
 * Optimizer steps taken so far, or 0 for NULL.
 *
 * # Safety
 * `trainer` must be NULL or come from this library.
 */
uint64_t drkf_trainer_steps_done(const struct DrkfTrainer *trainer);

/**
 * Evaluates both heads on `dataset`.
 *
 * # Safety
 * Handles must come from this library; `metrics` must be writable.
 */
enum DrkfStatus drkf_trainer_evaluate(const struct DrkfTrainer *trainer,
                                      const struct DrkfDataset *dataset,
                                      struct DrkfMetrics *metrics);

/**
 * Writes parameters and optimizer state to `path`.
 *
 * # Safety
 * `trainer` must come from this library; `path` must be NUL-terminated.
 */
enum DrkfStatus drkf_trainer_save(const struct DrkfTrainer *trainer, const char *path);

/**
 * Restores parameters and optimizer state from `path`. On failure the
 * trainer is unchanged.
 *
 * # Safety
 * `trainer` must come from this library; `path` must be NUL-terminated.
 */
enum DrkfStatus drkf_trainer_load(struct DrkfTrainer *trainer, const char *path);

/**
 * Writes the fused vector of every record of `dataset` as CSV.
 *
 * # Safety
 * Handles must come from this library; `path` must be NUL-terminated.
 */
enum DrkfStatus drkf_trainer_export_embeddings(const struct DrkfTrainer *trainer,
                                               const struct DrkfDataset *dataset,
                                               const char *path);

/**
 * Releases a trainer. NULL is ignored.
 *
 * # Safety
 * `trainer` must be NULL or a handle not yet freed.
 */
void drkf_trainer_free(struct DrkfTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRKF_H */
