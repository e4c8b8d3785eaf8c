#ifndef PMLM_H
#define PMLM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PmlmStatus {
  PMLM_STATUS_OK = 0,
  PMLM_STATUS_NULL_ARGUMENT = 1,
  PMLM_STATUS_INVALID_ARGUMENT = 2,
  PMLM_STATUS_IO = 3,
  PMLM_STATUS_CONFIG = 4,
  PMLM_STATUS_DATA = 5,
  PMLM_STATUS_CHECKPOINT = 6,
  PMLM_STATUS_NUMERIC = 7,
  PMLM_STATUS_BUFFER_TOO_SMALL = 8,
  PMLM_STATUS_PANIC = 9,
} PmlmStatus;

/**
 * One assembled PMLM instance.
 */
typedef struct PmlmInstance PmlmInstance;

/**
 * 32-bit transformer with its run config.
 */
typedef struct PmlmModel PmlmModel;

/**
 * Token vocabulary.
 */
typedef struct PmlmVocab PmlmVocab;

/**
 * Model dimensions accepted by [`pmlm_model_new`].
 */
typedef struct PmlmModelConfig {
  size_t layers;
  size_t hidden_size;
  size_t heads;
  size_t ffn_size;
  size_t vocab_size;
  size_t max_positions;
  size_t relative_buckets;
  size_t max_relative_distance;
  double dropout;
} PmlmModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pmlm_version(void);

/**
 * Message of the last failed call on this thread, or "" after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *pmlm_last_error_message(void);

/**
 * Loads a one-token-per-line vocabulary file.
 */
enum PmlmStatus pmlm_vocab_load(const char *path, struct PmlmVocab **out);

/**
 * Entry count, or 0 for a null handle.
 */
size_t pmlm_vocab_size(const struct PmlmVocab *vocab);

/**
 * Word-tokenizes NUL-terminated UTF-8 `text` (lowercased) into ids.
 */
enum PmlmStatus pmlm_vocab_encode(const struct PmlmVocab *vocab,
                                  const char *text,
                                  uint32_t *buf,
                                  size_t cap,
                                  size_t *out_len);

void pmlm_vocab_free(struct PmlmVocab *vocab);

/**
 * The small two-layer configuration used in tests.
 */
struct PmlmModelConfig pmlm_model_config_tiny(size_t vocab_size);

/**
 * Freshly initialized model.
 */
enum PmlmStatus pmlm_model_new(struct PmlmModelConfig config,
                               uint64_t seed,
                               struct PmlmModel **out);

enum PmlmStatus pmlm_model_load(const char *path, struct PmlmModel **out);

enum PmlmStatus pmlm_model_save(const struct PmlmModel *model, const char *path);

/**
 * Dimensions of a loaded model.
 */
enum PmlmStatus pmlm_model_config(const struct PmlmModel *model, struct PmlmModelConfig *out);

void pmlm_model_free(struct PmlmModel *model);

/**
 * Packs `[SOS] s1 [EOS] s2 [EOS]` and assembles the combined instance for a
 * factorization order given as concatenated step positions plus per-step
 * lengths. Every masked position becomes `[MASK]`.
 */
enum PmlmStatus pmlm_instance_assemble(const uint32_t *s1,
                                       size_t s1_len,
                                       const uint32_t *s2,
                                       size_t s2_len,
                                       const size_t *positions,
                                       const size_t *step_lens,
                                       size_t num_steps,
                                       size_t max_len,
                                       struct PmlmInstance **out);

/**
 * Row count, or 0 for a null handle.
 */
size_t pmlm_instance_len(const struct PmlmInstance *inst);

enum PmlmStatus pmlm_instance_tokens(const struct PmlmInstance *inst,
                                     uint32_t *buf,
                                     size_t cap,
                                     size_t *out_len);

enum PmlmStatus pmlm_instance_positions(const struct PmlmInstance *inst,
                                        size_t *buf,
                                        size_t cap,
                                        size_t *out_len);

/**
 * Row-major `len × len` attention mask, 1 where the row may attend the
 * column.
 */
enum PmlmStatus pmlm_instance_mask(const struct PmlmInstance *inst,
                                   uint8_t *buf,
                                   size_t cap,
                                   size_t *out_len);

/**
 * Runs the leakage audit; `violations` receives the number of forbidden
 * paths found.
 */
enum PmlmStatus pmlm_instance_audit(const struct PmlmInstance *inst, size_t *violations);

void pmlm_instance_free(struct PmlmInstance *inst);

/**
 * Logits for every prediction row (`[M]` rows, then `[P]` rows, in row
 * order), row-major `rows × vocab`.
 */
enum PmlmStatus pmlm_model_target_logits(const struct PmlmModel *model,
                                         const struct PmlmInstance *inst,
                                         float *buf,
                                         size_t cap,
                                         size_t *out_len,
                                         size_t *out_rows);

/**
 * Beam-search decode of `src`; `max_out` of 0 uses the model's default.
 * The output excludes the terminating `[EOS]`.
 */
enum PmlmStatus pmlm_generate(const struct PmlmModel *model,
                              const uint32_t *src,
                              size_t src_len,
                              size_t beam,
                              double alpha,
                              size_t max_out,
                              uint32_t *buf,
                              size_t cap,
                              size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMLM_H */
