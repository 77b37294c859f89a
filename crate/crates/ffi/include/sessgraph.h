#ifndef SESSGRAPH_H
#define SESSGRAPH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_CONFIG = 3,
  SG_STATUS_IO = 4,
  SG_STATUS_FORMAT = 5,
  SG_STATUS_SHAPE = 6,
  SG_STATUS_TRAINING = 7,
  SG_STATUS_BUFFER_TOO_SMALL = 8,
  SG_STATUS_PANIC = 99,
} SgStatus;

// Opaque embedding matrix, one row per item.
typedef struct SgEmbeddings SgEmbeddings;

// Opaque item co-occurrence graph.
typedef struct SgGraph SgGraph;

// Opaque nearest-neighbor recommender.
typedef struct SgKnn SgKnn;

// Options for [`sg_knn_new`]. A negative `distance_threshold` disables
// embedding matching.
typedef struct SgKnnOptions {
  size_t k;
  size_t m_sample;
  size_t k_rec;
  // Nonzero weights neighbors by the position of the last shared item.
  uint8_t positional;
  uint8_t exclude_input_items;
  double distance_threshold;
} SgKnnOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next call into this library from the same thread.
const char *sg_last_error(void);

// Library version as a static NUL-terminated string.
const char *sg_version(void);

// Builds a graph from an undirected weighted edge list, either endpoint
// order, weights in (0, 1]. `features` is row-major
// `node_count x feature_dim`.
//
// # Safety
// Array arguments must hold the stated number of elements.
enum SgStatus sg_graph_from_edges(size_t node_count,
                                  const size_t *src,
                                  const size_t *dst,
                                  const double *weights,
                                  size_t edge_count,
                                  const double *features,
                                  size_t feature_dim,
                                  struct SgGraph **out_graph);

// # Safety
// `graph` must come from this library and not be used afterwards.
void sg_graph_free(struct SgGraph *graph);

// # Safety
// `graph` must be a live handle or null.
size_t sg_graph_node_count(const struct SgGraph *graph);

// # Safety
// `graph` must be a live handle or null.
size_t sg_graph_edge_count(const struct SgGraph *graph);

// Trains embeddings with default settings except epochs and seed. Items are
// named by their decimal index.
//
// # Safety
// `graph` must be a live handle.
enum SgStatus sg_embeddings_train(const struct SgGraph *graph,
                                  size_t epochs,
                                  uint64_t seed,
                                  struct SgEmbeddings **out_embeddings);

// Reads an embedding file in the binary layout written by the CLI.
//
// # Safety
// `path` must be a NUL-terminated string.
enum SgStatus sg_embeddings_read(const char *path, struct SgEmbeddings **out_embeddings);

// # Safety
// `embeddings` must come from this library and not be used afterwards.
void sg_embeddings_free(struct SgEmbeddings *embeddings);

// # Safety
// `embeddings` must be a live handle or null.
size_t sg_embeddings_rows(const struct SgEmbeddings *embeddings);

// # Safety
// `embeddings` must be a live handle or null.
size_t sg_embeddings_dim(const struct SgEmbeddings *embeddings);

// Copies row `row` into `buffer`, which must hold `sg_embeddings_dim` values.
//
// # Safety
// `buffer` must hold `capacity` values.
enum SgStatus sg_embeddings_row(const struct SgEmbeddings *embeddings,
                                size_t row,
                                double *buffer,
                                size_t capacity);

// Defaults matching the library configuration.
struct SgKnnOptions sg_knn_default_options(void);

// Indexes training sessions given in CSR form: session `s` holds
// `items[offsets[s]..offsets[s + 1]]`, sessions ordered oldest first.
// `embeddings` may be null when matching is disabled.
//
// # Safety
// `offsets` must hold `session_count + 1` values and `items` the last one.
enum SgStatus sg_knn_new(const size_t *items,
                         const size_t *offsets,
                         size_t session_count,
                         size_t item_count,
                         const struct SgKnnOptions *options,
                         const struct SgEmbeddings *embeddings,
                         struct SgKnn **out_knn);

// # Safety
// `knn` must come from this library and not be used afterwards.
void sg_knn_free(struct SgKnn *knn);

// Ranks items for a session prefix. Writes at most `capacity` results and
// stores the number written in `written`.
//
// # Safety
// `input` must hold `input_len` values; output buffers `capacity` values.
enum SgStatus sg_knn_recommend(const struct SgKnn *knn,
                               const size_t *input,
                               size_t input_len,
                               size_t *out_items,
                               double *out_scores,
                               size_t capacity,
                               size_t *written);

// Two-sided paired t-test. `t` and `p` are NaN when every difference is equal.
//
// # Safety
// `a` and `b` must hold `n` values.
enum SgStatus sg_paired_t_test(const double *a, const double *b, size_t n, double *t, double *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SESSGRAPH_H */
