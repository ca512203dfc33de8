/* C interface to the proqe library. Every function returns a proqe_status;
 * on failure proqe_last_error() describes the problem for the calling thread.
 * Strings handed out through char** parameters are owned by the caller and
 * released with proqe_free(). */
#ifndef PROQE_H
#define PROQE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PROQE_API __declspec(dllexport)
#else
#define PROQE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum proqe_status {
  PROQE_OK = 0,
  PROQE_ERR_INVALID = 1,  /* bad argument or configuration */
  PROQE_ERR_PARSE = 2,    /* malformed input text */
  PROQE_ERR_IO = 3,       /* file system failure */
  PROQE_ERR_QUERY = 4,    /* malformed or unsupported query graph */
  PROQE_ERR_NUMERIC = 5,  /* non-finite values */
  PROQE_ERR_INTERNAL = 6
} proqe_status;

PROQE_API const char* proqe_last_error(void);
PROQE_API const char* proqe_status_name(proqe_status s);
PROQE_API const char* proqe_version(void);
PROQE_API void proqe_free(void* p);

/* ---- graphs ------------------------------------------------------------- */

typedef struct proqe_graph proqe_graph;

/* `path` is a head<TAB>relation<TAB>tail file, or a directory holding
 * graph.tsv with entities.dict and relations.dict (ids pinned by the dicts). */
PROQE_API proqe_status proqe_graph_load(const char* path, proqe_graph** out);

typedef struct proqe_synth_options {
  size_t entities;
  size_t relations;
  size_t clusters;
  size_t sources_per_relation;
  size_t triples; /* 0 selects 8 * entities */
  uint64_t seed;
} proqe_synth_options;

PROQE_API void proqe_synth_options_default(proqe_synth_options* opts);
PROQE_API proqe_status proqe_graph_synthesize(const proqe_synth_options* opts, proqe_graph** out);
PROQE_API void proqe_graph_free(proqe_graph* g);

PROQE_API proqe_status proqe_graph_stats(const proqe_graph* g, size_t* entities, size_t* relations,
                                         size_t* triples);
PROQE_API proqe_status proqe_graph_write_tsv(const proqe_graph* g, const char* path);

/* Names stay valid until the graph is freed. */
PROQE_API proqe_status proqe_graph_entity_name(const proqe_graph* g, uint32_t id, const char** name);
PROQE_API proqe_status proqe_graph_entity_id(const proqe_graph* g, const char* name, uint32_t* id);
PROQE_API proqe_status proqe_graph_relation_id(const proqe_graph* g, const char* name, uint32_t* id);

typedef struct proqe_neighbor {
  uint32_t relation;
  uint32_t entity;
  int32_t incoming; /* 1 when the neighbor is the head of the edge */
} proqe_neighbor;

/* Writes up to `capacity` entries; `*count` always receives the total. */
PROQE_API proqe_status proqe_graph_neighbors(const proqe_graph* g, uint32_t entity,
                                             proqe_neighbor* buf, size_t capacity, size_t* count);

/* ---- queries -------------------------------------------------------------
 * A query is a structure tag (1p 2p 3p 2i 3i pi ip 2u up) with its anchors and
 * relations in flat post-order layout. */

PROQE_API proqe_status proqe_query_answers(const proqe_graph* g, const char* structure,
                                           const uint32_t* anchors, size_t n_anchors,
                                           const uint32_t* relations, size_t n_relations,
                                           uint32_t* buf, size_t capacity, size_t* count);

/* Token string of the canonical form, e.g. "[BCK_L0] [ENT] [r_3] [MASK] [BCK_R0] [ENT]". */
PROQE_API proqe_status proqe_query_serialize(const char* structure, const uint32_t* anchors,
                                             size_t n_anchors, const uint32_t* relations,
                                             size_t n_relations, char** tokens);

/* ---- benchmark ---------------------------------------------------------- */

typedef struct proqe_bench_options {
  double fraction;
  uint64_t seed;
  size_t train_queries; /* total over the nine structures */
  size_t eval_queries;  /* per class and eval split, over the nine structures */
  size_t threads;
} proqe_bench_options;

PROQE_API void proqe_bench_options_default(proqe_bench_options* opts);
/* Writes split.json, train/valid/test.jsonl, graph.tsv and the dicts into
 * `out_dir`. `summary_json` (optional) receives counts and warnings. */
PROQE_API proqe_status proqe_bench_build(const proqe_graph* g, const proqe_bench_options* opts,
                                         const char* out_dir, char** summary_json);

/* ---- training ----------------------------------------------------------- */

typedef void (*proqe_step_callback)(void* user, size_t step, double lr, double loss,
                                    double sample_loss);

/* `config_text` holds `key = value` lines; `overrides_text` is applied on top.
 * Either may be NULL. Writes model.ckpt and train_log.csv into `out_dir`. */
PROQE_API proqe_status proqe_train(const char* data_dir, const char* config_text,
                                   const char* overrides_text, const char* out_dir,
                                   proqe_step_callback cb, void* user, char** summary_json);

/* Every recognised configuration key with its default, one per line. */
PROQE_API proqe_status proqe_config_defaults(char** text);

/* ---- evaluation --------------------------------------------------------- */

typedef struct proqe_model proqe_model;

PROQE_API proqe_status proqe_model_load(const char* path, proqe_model** out);
PROQE_API void proqe_model_free(proqe_model* m);
/* JSON with the model configuration and size. */
PROQE_API proqe_status proqe_model_info(const proqe_model* m, char** json);

typedef enum proqe_se_rule { PROQE_SE_EMERGING = 0, PROQE_SE_SEEN = 1 } proqe_se_rule;

typedef struct proqe_eval_options {
  int filtered;
  proqe_se_rule se_rule;
  size_t threads;
} proqe_eval_options;

PROQE_API void proqe_eval_options_default(proqe_eval_options* opts);

typedef struct proqe_report proqe_report;

/* Scores `queries_path` (JSONL) against the benchmark directory `data_dir`. */
PROQE_API proqe_status proqe_evaluate(proqe_model* m, const char* data_dir,
                                      const char* queries_path, const proqe_eval_options* opts,
                                      proqe_report** out);
/* Analytic uniform-random ranking under the same protocol. */
PROQE_API proqe_status proqe_random_baseline(const char* data_dir, const char* queries_path,
                                             const proqe_eval_options* opts, proqe_report** out);
PROQE_API void proqe_report_free(proqe_report* r);

/* Class columns: 0 = EE, 1 = ES, 2 = SE. Structures follow the tag order
 * above; structure 9 is the average row. `*present` is 0 for empty cells. */
PROQE_API proqe_status proqe_report_cell(const proqe_report* r, size_t structure, size_t cls,
                                         double* mrr, int* present);
/* Mean of the class averages; `*present` is 0 when nothing was evaluated. */
PROQE_API proqe_status proqe_report_overall(const proqe_report* r, double* mrr, int* present);
PROQE_API proqe_status proqe_report_skipped(const proqe_report* r, size_t* skipped);
PROQE_API proqe_status proqe_report_csv(const proqe_report* r, char** csv);
PROQE_API proqe_status proqe_report_text(const proqe_report* r, char** text);

/* ---- gradient checks ---------------------------------------------------- */

/* Runs the primitive suite and the composite checks. `report` receives one
 * line per check; `*all_passed` is 1 when every check is under tolerance. */
PROQE_API proqe_status proqe_gradcheck(uint64_t seed, char** report, int* all_passed);

#ifdef __cplusplus
}
#endif

#endif /* PROQE_H */
