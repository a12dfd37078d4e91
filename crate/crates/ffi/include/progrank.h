#ifndef PROGRANK_H
#define PROGRANK_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PG_LABEL_CLEAN 0

#define PG_LABEL_POISON 1

#define PG_LABEL_UNKNOWN 2

#define PG_SELECTION_FUSED 0

#define PG_SELECTION_RANK_DROP 1

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_CONFIG = 1,
  PG_STATUS_FORMAT = 2,
  PG_STATUS_NUMERICAL = 3,
  PG_STATUS_IO = 4,
  PG_STATUS_NULL_POINTER = 5,
  PG_STATUS_OUT_OF_RANGE = 6,
  PG_STATUS_PANIC = 7,
} PgStatus;

typedef struct PgDump PgDump;

typedef struct PgPool PgPool;

typedef struct PgRanking PgRanking;

typedef struct PgPenaltyConfig {
  double epsilon;
  double alpha;
  double tau;
  double cap;
  bool clamp_nonnegative;
} PgPenaltyConfig;

typedef struct PgRerankConfig {
  size_t k;
  bool gate_enabled;
  bool dr_enabled;
  bool rep_enabled;
  double gate_temperature;
  /**
   * One of the `PG_SELECTION_*` constants.
   */
  uint32_t selection_mode;
  double rank_drop_rho;
} PgRerankConfig;

/**
 * Scalar penalty trace for one signature.
 */
typedef struct PgPenalties {
  double rep;
  double p_rep;
  double c_quantile;
  double p_dr_raw;
  double p_dr;
} PgPenalties;

/**
 * One candidate of a defended ranking, without its passage id.
 */
typedef struct PgRecord {
  uint32_t label;
  double base_score;
  double gate_weight;
  double p_dr;
  double p_rep;
  double defended_score;
  size_t base_rank;
  size_t defended_rank;
} PgRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length, or 0 if
 * no error was recorded.
 */
size_t pg_last_error_message(char *buf, size_t len);

struct PgPenaltyConfig pg_penalty_config_default(void);

struct PgRerankConfig pg_rerank_config_default(void);

/**
 * Penalties of a row-major `runs x dim` gradient signature. A null config
 * selects the defaults.
 */
enum PgStatus pg_signature_penalties(const double *data,
                                     size_t runs,
                                     size_t dim,
                                     const struct PgPenaltyConfig *cfg,
                                     struct PgPenalties *out);

struct PgPool *pg_pool_new(const char *query_id);

/**
 * Appends a candidate. A null `penalties` leaves the candidate unprobed, so
 * it keeps its base score.
 */
enum PgStatus pg_pool_add(struct PgPool *pool,
                          const char *passage_id,
                          double base_score,
                          uint32_t label,
                          const struct PgPenalties *penalties);

size_t pg_pool_len(const struct PgPool *pool);

void pg_pool_free(struct PgPool *pool);

/**
 * Reranks a pool. A null config selects the defaults. On success `*out`
 * owns a new ranking handle.
 */
enum PgStatus pg_rerank(const struct PgPool *pool,
                        const struct PgRerankConfig *cfg,
                        struct PgRanking **out);

size_t pg_ranking_len(const struct PgRanking *ranking);

double pg_ranking_gate_center(const struct PgRanking *ranking);

/**
 * The `position`-th candidate in defended order (0-based).
 */
enum PgStatus pg_ranking_record(const struct PgRanking *ranking,
                                size_t position,
                                struct PgRecord *out);

/**
 * Passage id of the `position`-th candidate in defended order. The string
 * lives as long as the ranking handle; null when out of range.
 */
const char *pg_ranking_passage_id(const struct PgRanking *ranking, size_t position);

size_t pg_ranking_top_k_len(const struct PgRanking *ranking);

/**
 * Id of the `position`-th selected passage. Lives as long as the handle.
 */
const char *pg_ranking_top_k_id(const struct PgRanking *ranking, size_t position);

void pg_ranking_free(struct PgRanking *ranking);

/**
 * Loads a signature dump; `.bin` selects the binary layout, anything else
 * the line-delimited text layout.
 */
enum PgStatus pg_dump_load(const char *path, struct PgDump **out);

size_t pg_dump_len(const struct PgDump *dump);

size_t pg_dump_runs(const struct PgDump *dump);

size_t pg_dump_dim(const struct PgDump *dump);

size_t pg_dump_query_count(const struct PgDump *dump);

/**
 * Query ids in first-appearance order. Lives as long as the dump handle.
 */
const char *pg_dump_query_id(const struct PgDump *dump, size_t index);

/**
 * Penalties of the `index`-th record of the dump.
 */
enum PgStatus pg_dump_penalties(const struct PgDump *dump,
                                size_t index,
                                const struct PgPenaltyConfig *cfg,
                                struct PgPenalties *out);

/**
 * Builds the candidate pool of one query from the dump, with penalties
 * computed under `cfg` (null selects the defaults).
 */
enum PgStatus pg_dump_pool(const struct PgDump *dump,
                           const char *query_id,
                           const struct PgPenaltyConfig *cfg,
                           struct PgPool **out);

void pg_dump_free(struct PgDump *dump);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* PROGRANK_H */
