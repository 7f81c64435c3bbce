#ifndef DPGRAPH_H
#define DPGRAPH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum DpgStatus {
  DPG_STATUS_OK = 0,
  DPG_STATUS_NULL_POINTER = 1,
  DPG_STATUS_INVALID_ARGUMENT = 2,
  DPG_STATUS_INVALID_GRAPH = 3,
  DPG_STATUS_PARSE = 4,
  DPG_STATUS_IO = 5,
  DPG_STATUS_OVERFLOW = 6,
  DPG_STATUS_BUDGET_OVERFLOW = 7,
  DPG_STATUS_TARGET_UNREACHABLE = 8,
  DPG_STATUS_RUNTIME = 9,
  DPG_STATUS_PANIC = 10,
} DpgStatus;

// A loaded or generated graph dataset.
typedef struct DpgGraph DpgGraph;

// Training subgraphs from one run of constrained sampling.
typedef struct DpgSubgraphs DpgSubgraphs;

// Summary counts of a sample.
typedef struct DpgSampleStats {
  size_t num_subgraphs;
  size_t dropped_count;
  size_t max_occurrence;
  uint64_t n_bound;
} DpgSampleStats;

// Shape of one tree.
typedef struct DpgSubgraphInfo {
  size_t root;
  size_t size;
  size_t depth;
  size_t max_fanout;
} DpgSubgraphInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into this library on the thread.
const char *dpg_last_error(void);

// Library version as a static NUL-terminated string.
const char *dpg_version(void);

// `N(K, r) = 1 + K + ... + K^r`.
//
// # Safety
// `out` must be valid for writes.
enum DpgStatus dpg_n_bound(uint64_t k, uint32_t r, uint64_t *out);

// Loads `edges.csv`, `features.csv`, `labels.csv` and `splits.csv` from `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string and `out` valid for writes.
enum DpgStatus dpg_graph_load_dir(const char *dir, bool has_header, struct DpgGraph **out);

// Generates a stochastic block model graph.
//
// # Safety
// `out` must be valid for writes.
enum DpgStatus dpg_graph_generate_sbm(size_t n,
                                      size_t num_classes,
                                      double p_in,
                                      double p_out,
                                      size_t feature_dim,
                                      double feature_noise,
                                      uint64_t seed,
                                      struct DpgGraph **out);

// # Safety
// `g` must come from this library and not have been freed; null is ignored.
void dpg_graph_free(struct DpgGraph *g);

// Node count, or 0 for a null handle.
//
// # Safety
// `g` must be null or a live handle.
size_t dpg_graph_num_nodes(const struct DpgGraph *g);

// Edge count after deduplication, or 0 for a null handle.
//
// # Safety
// `g` must be null or a live handle.
size_t dpg_graph_num_edges(const struct DpgGraph *g);

// Training set size, or 0 for a null handle.
//
// # Safety
// `g` must be null or a live handle.
size_t dpg_graph_num_train(const struct DpgGraph *g);

// Samples in-degree-capped edge lists and unrolls one depth-`r` tree per
// training node.
//
// # Safety
// `g` must be a live handle and `out` valid for writes.
enum DpgStatus dpg_sample_subgraphs(const struct DpgGraph *g,
                                    size_t k,
                                    size_t r,
                                    uint64_t seed,
                                    struct DpgSubgraphs **out);

// # Safety
// `s` must come from this library and not have been freed; null is ignored.
void dpg_subgraphs_free(struct DpgSubgraphs *s);

// Number of subgraphs, or 0 for a null handle.
//
// # Safety
// `s` must be null or a live handle.
size_t dpg_subgraphs_count(const struct DpgSubgraphs *s);

// # Safety
// `s` must be a live handle and `out` valid for writes.
enum DpgStatus dpg_subgraphs_stats(const struct DpgSubgraphs *s, struct DpgSampleStats *out);

// # Safety
// `s` must be a live handle and `out` valid for writes.
enum DpgStatus dpg_subgraph_info(const struct DpgSubgraphs *s,
                                 size_t index,
                                 struct DpgSubgraphInfo *out);

// Epsilon after `t` steps with noise multiplier `lambda`, minimised over the
// default order grid. `best_alpha` may be null.
//
// # Safety
// `epsilon` must be valid for writes; `best_alpha` null or valid.
enum DpgStatus dpg_epsilon(uint64_t n,
                           uint64_t k,
                           uint32_t r,
                           uint64_t m,
                           double lambda,
                           uint64_t t,
                           double delta,
                           double *epsilon,
                           double *best_alpha);

// Noise multiplier whose epsilon after `t` steps is within `1e-3` relative
// of `target_epsilon`.
//
// # Safety
// `lambda` must be valid for writes.
enum DpgStatus dpg_calibrate_noise_multiplier(uint64_t n,
                                              uint64_t k,
                                              uint32_t r,
                                              uint64_t m,
                                              uint64_t t,
                                              double delta,
                                              double target_epsilon,
                                              double *lambda);

// Probability that a node with `d_v` training in-edges is dropped by the
// in-degree cap `k`.
double dpg_drop_probability(uint64_t d_v, uint64_t k);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPGRAPH_H */
