#ifndef SPARC_H
#define SPARC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum SparcStatus {
  SPARC_STATUS_OK = 0,
  SPARC_STATUS_NULL_POINTER = 1,
  SPARC_STATUS_INVALID_ARGUMENT = 2,
  SPARC_STATUS_MALFORMED_INPUT = 3,
  SPARC_STATUS_DIMENSION = 4,
  SPARC_STATUS_DOMAIN = 5,
  SPARC_STATUS_CAPACITY = 6,
  SPARC_STATUS_STATE = 7,
  SPARC_STATUS_DIVERGENCE = 8,
  SPARC_STATUS_DEGENERATE = 9,
  SPARC_STATUS_INVARIANT = 10,
  SPARC_STATUS_CONFIG = 11,
  SPARC_STATUS_IO = 12,
  SPARC_STATUS_PANIC = 13,
} SparcStatus;

/**
 * A loaded graph with node features and optional labels.
 */
typedef struct SparcGraph SparcGraph;

/**
 * A trained spectral map.
 */
typedef struct SparcMap SparcMap;

/**
 * Training parameters for [`sparc_map_train`]. Obtain defaults from
 * [`sparc_map_params_default`] and override fields as needed.
 */
typedef struct SparcMapParams {
  /**
   * Embedding dimension.
   */
  size_t k;
  /**
   * Width of each hidden layer.
   */
  size_t hidden_width;
  /**
   * Number of hidden layers.
   */
  size_t hidden_layers;
  /**
   * Nodes per training batch; must exceed `k`.
   */
  size_t batch_size;
  size_t epochs;
  double learning_rate;
  uint64_t seed;
} SparcMapParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next library call on the same thread.
 */
const char *sparc_last_error(void);

/**
 * Loads a graph from an edge file, a feature file and an optional labels
 * file (pass null to skip).
 *
 * # Safety
 * Path arguments must be null or NUL-terminated strings; `out` must be valid
 * for writes.
 */
enum SparcStatus sparc_graph_load(const char *edges,
                                  const char *features,
                                  const char *labels,
                                  struct SparcGraph **out);

/**
 * Writes the node count and feature dimension of `graph`.
 *
 * # Safety
 * `graph` must come from [`sparc_graph_load`]; outputs must be valid for writes.
 */
enum SparcStatus sparc_graph_shape(const struct SparcGraph *graph,
                                   size_t *nodes,
                                   size_t *feature_dim);

/**
 * Releases a graph. Null is ignored.
 *
 * # Safety
 * `graph` must be null or come from [`sparc_graph_load`] and not be freed twice.
 */
void sparc_graph_free(struct SparcGraph *graph);

/**
 * Default training parameters.
 */
struct SparcMapParams sparc_map_params_default(void);

/**
 * Trains a spectral map on the whole graph.
 *
 * # Safety
 * `graph` must come from [`sparc_graph_load`]; `params` must be readable and
 * `out` writable.
 */
enum SparcStatus sparc_map_train(const struct SparcGraph *graph,
                                 const struct SparcMapParams *params,
                                 struct SparcMap **out);

/**
 * Loads a map checkpoint written by [`sparc_map_save`] or the CLI.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum SparcStatus sparc_map_load(const char *path, struct SparcMap **out);

/**
 * Writes a map checkpoint.
 *
 * # Safety
 * `map` must be a live handle and `path` a NUL-terminated string.
 */
enum SparcStatus sparc_map_save(const struct SparcMap *map, const char *path);

/**
 * Writes the feature dimension the map expects and its embedding dimension.
 *
 * # Safety
 * `map` must be a live handle; outputs must be writable.
 */
enum SparcStatus sparc_map_shape(const struct SparcMap *map, size_t *input_dim, size_t *k);

/**
 * Embeds `rows` feature vectors of width `cols` into `out`, which must hold
 * `rows * k` doubles. Works for nodes the map never saw, edges or not.
 *
 * # Safety
 * `features` must hold `rows * cols` doubles and `out` `rows * k`.
 */
enum SparcStatus sparc_map_embed(const struct SparcMap *map,
                                 const double *features,
                                 size_t rows,
                                 size_t cols,
                                 double *out);

/**
 * Releases a map. Null is ignored.
 *
 * # Safety
 * `map` must be null or a handle not yet freed.
 */
void sparc_map_free(struct SparcMap *map);

/**
 * Exact Euclidean k nearest neighbors of `query` among the `rows` pool
 * vectors, ascending by distance with ties broken by lower index.
 *
 * # Safety
 * `pool` must hold `rows * cols` doubles, `query` `cols`, and both outputs `k`
 * entries.
 */
enum SparcStatus sparc_knn(const double *pool,
                           size_t rows,
                           size_t cols,
                           const double *query,
                           size_t k,
                           size_t *out_ids,
                           double *out_distances);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARC_H */
