#ifndef CACHETRAP_H
#define CACHETRAP_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdint.h>
#include <stddef.h>
#include <stdbool.h>

#define CT_MODE_XOR 0

#define CT_MODE_SET_TO_ONE 1

#define CT_DTYPE_FP32 0

#define CT_DTYPE_FP16 1

// Status returned by every fallible call. `Ok` is zero.
typedef enum CtStatus {
  CT_STATUS_OK = 0,
  CT_STATUS_NULL_POINTER = 1,
  CT_STATUS_INVALID_ARGUMENT = 2,
  CT_STATUS_CONFIG = 3,
  CT_STATUS_INPUT = 4,
  CT_STATUS_LOAD = 5,
  CT_STATUS_INJECTION = 6,
  CT_STATUS_ADDRESS = 7,
  CT_STATUS_UNDEFINED_PREDICTION = 8,
  CT_STATUS_GUARD = 9,
  CT_STATUS_IO = 10,
  CT_STATUS_BUFFER_TOO_SMALL = 11,
  CT_STATUS_PANIC = 12,
} CtStatus;

// Opaque KV-cache handle.
typedef struct CtCache CtCache;

// Opaque model handle.
typedef struct CtModel CtModel;

// `token_index < 0` targets the last prefix token.
typedef struct CtBitCoordinate {
  uint32_t layer;
  uint32_t kv_head;
  uint32_t channel;
  uint32_t bit;
  int64_t token_index;
  // 0 = xor, 1 = set to one.
  uint32_t mode;
} CtBitCoordinate;

// Record of an applied fault; pass back to `ct_cache_revert_fault`.
typedef struct CtFaultReceipt {
  struct CtBitCoordinate coordinate;
  uint64_t resolved_token;
  uint64_t word_offset;
  uint32_t old_word;
  uint32_t new_word;
  bool changed;
  // 0 = none, 1 = 0 -> 1, 2 = 1 -> 0.
  uint32_t transition;
} CtFaultReceipt;

typedef struct CtPhysicalBit {
  uint64_t byte_address;
  uint32_t bit_offset;
} CtPhysicalBit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *ct_version(void);

// Loads a CTKV v1 checkpoint from `path`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CtStatus ct_model_load(const char *path, struct CtModel **out);

// Loads a CTKV v1 checkpoint from memory.
//
// # Safety
// `data` must point to `len` readable bytes; `out` must be writable.
enum CtStatus ct_model_load_bytes(const uint8_t *data, uintptr_t len, struct CtModel **out);

// Deterministic synthetic model from a JSON model config.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum CtStatus ct_model_synthetic(const char *config_json, uint64_t seed, struct CtModel **out);

// Hand-wired demo model; `targets_json` is an array of
// `{"layer", "kv_head", "channel"}`, one per class.
//
// # Safety
// Both strings must be NUL-terminated; `out` must be writable.
enum CtStatus ct_model_trojan_demo(const char *config_json,
                                   const char *targets_json,
                                   uint64_t seed,
                                   struct CtModel **out);

// # Safety
// `model` must be NULL or a handle from this library, freed at most once.
void ct_model_free(struct CtModel *model);

// # Safety
// `model` must be a live handle.
uintptr_t ct_model_vocab_size(const struct CtModel *model);

// Label tokens of a demo model's verbalizer, copied into `out`. Writes the
// class count to `count` even when `out` is too small.
//
// # Safety
// `model` must be a live handle; `out` must hold `out_len` values.
enum CtStatus ct_model_label_tokens(const struct CtModel *model,
                                    uint32_t *out,
                                    uintptr_t out_len,
                                    uintptr_t *count);

// Runs the prefix and returns a new cache; optionally writes the logits at
// the last prefix position (`logits` may be NULL).
//
// # Safety
// `tokens` must hold `n_tokens` ids; `logits` NULL or `logits_len` floats.
enum CtStatus ct_prefill(const struct CtModel *model,
                         const uint32_t *tokens,
                         uintptr_t n_tokens,
                         struct CtCache **out_cache,
                         float *logits,
                         uintptr_t logits_len);

// # Safety
// `cache` must be NULL or a handle from this library, freed at most once.
void ct_cache_free(struct CtCache *cache);

// # Safety
// `cache` must be a live handle.
uintptr_t ct_cache_filled_len(const struct CtCache *cache);

// Size of the cache arena in bytes.
//
// # Safety
// `cache` must be a live handle.
uintptr_t ct_cache_byte_len(const struct CtCache *cache);

// Copies the raw cache arena into `out`.
//
// # Safety
// `cache` must be a live handle; `out` must hold `out_len` bytes.
enum CtStatus ct_cache_copy_bytes(const struct CtCache *cache, uint8_t *out, uintptr_t out_len);

// Applies a single-bit fault to the value cache.
//
// # Safety
// `cache` must be a live handle; `coord` and `receipt` valid pointers.
enum CtStatus ct_cache_apply_fault(struct CtCache *cache,
                                   const struct CtBitCoordinate *coord,
                                   struct CtFaultReceipt *receipt);

// Restores the word a receipt recorded.
//
// # Safety
// `cache` must be a live handle; `receipt` from `ct_cache_apply_fault` on it.
enum CtStatus ct_cache_revert_fault(struct CtCache *cache, const struct CtFaultReceipt *receipt);

// One decode step for `token`. With `coord` non-NULL and `armed` the fault
// is applied for this step only; the cache is restored before returning.
//
// # Safety
// Handles must be live; `coord` NULL or valid; `logits` holds `logits_len`.
enum CtStatus ct_decode(const struct CtModel *model,
                        struct CtCache *cache,
                        uint32_t token,
                        const struct CtBitCoordinate *coord,
                        bool armed,
                        float *logits,
                        uintptr_t logits_len);

// Classification decode over `n_classes` label tokens (NULL uses the demo
// model's verbalizer). Writes the predicted class.
//
// # Safety
// Handles must be live; `label_tokens` NULL or `n_classes` ids.
enum CtStatus ct_decode_classify(const struct CtModel *model,
                                 struct CtCache *cache,
                                 uint32_t token,
                                 const uint32_t *label_tokens,
                                 uintptr_t n_classes,
                                 const struct CtBitCoordinate *coord,
                                 bool armed,
                                 uint32_t *predicted);

// Flips or sets bit `bit` of a stored word.
//
// # Safety
// `out` must be writable.
enum CtStatus ct_flip_bit(uint32_t word,
                          uint32_t bit,
                          uint32_t mode,
                          uint32_t dtype,
                          uint32_t *out);

// # Safety
// `out` must be writable.
enum CtStatus ct_read_bit(uint32_t word, uint32_t bit, uint32_t dtype, uint32_t *out);

// Byte address and bit of the value word `coord` targets, for a cache with
// `filled_len` tokens placed at `arena_base` (in words).
//
// # Safety
// `model`, `coord` and `out` must be valid.
enum CtStatus ct_linear_address(const struct CtModel *model,
                                const struct CtBitCoordinate *coord,
                                uintptr_t filled_len,
                                uint64_t arena_base,
                                struct CtPhysicalBit *out);

// Bank of `address` under the default four-bank XOR-fold mapping.
uint32_t ct_default_bank_of(uint64_t address);

// Message for the most recent failed call on this thread, or NULL. Valid
// until the next call into this library on the same thread.
const char *ct_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CACHETRAP_H */
