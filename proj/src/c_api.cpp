#include "proqe/proqe.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include <json.hpp>

#include "proqe/bench.hpp"
#include "proqe/error.hpp"
#include "proqe/evaluator.hpp"
#include "proqe/gradcheck.hpp"
#include "proqe/kg.hpp"
#include "proqe/model.hpp"
#include "proqe/prompt.hpp"
#include "proqe/query.hpp"
#include "proqe/symbolic.hpp"
#include "proqe/synth.hpp"
#include "proqe/trainer.hpp"

struct proqe_graph {
  proqe::KnowledgeGraph kg;
};

struct proqe_model {
  std::unique_ptr<proqe::Model> model;
};

struct proqe_report {
  proqe::EvalReport report;
  std::size_t warnings = 0;
};

namespace {

thread_local std::string g_last_error;

template <class F>
proqe_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return PROQE_OK;
  } catch (const proqe::ParseError& e) {
    g_last_error = e.what();
    return PROQE_ERR_PARSE;
  } catch (const proqe::InvalidArgument& e) {
    g_last_error = e.what();
    return PROQE_ERR_INVALID;
  } catch (const proqe::IoError& e) {
    g_last_error = e.what();
    return PROQE_ERR_IO;
  } catch (const proqe::QueryError& e) {
    g_last_error = e.what();
    return PROQE_ERR_QUERY;
  } catch (const proqe::NumericError& e) {
    g_last_error = e.what();
    return PROQE_ERR_NUMERIC;
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return PROQE_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PROQE_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return PROQE_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw proqe::InvalidArgument(std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

proqe::QueryGraph make_query(const char* structure, const uint32_t* anchors, size_t n_anchors,
                             const uint32_t* relations, size_t n_relations) {
  require(structure, "structure");
  if (n_anchors) require(anchors, "anchors");
  if (n_relations) require(relations, "relations");
  const auto s = proqe::parse_structure(structure);
  return proqe::instantiate(s, std::span<const uint32_t>(anchors, n_anchors),
                            std::span<const uint32_t>(relations, n_relations));
}

proqe::EvalProtocol protocol(const proqe_eval_options* opts) {
  proqe_eval_options o;
  proqe_eval_options_default(&o);
  if (opts) o = *opts;
  if (o.se_rule != PROQE_SE_EMERGING && o.se_rule != PROQE_SE_SEEN)
    throw proqe::InvalidArgument("unknown SE rule " + std::to_string(static_cast<int>(o.se_rule)));
  return {o.filtered != 0, o.se_rule == PROQE_SE_SEEN ? proqe::SeRule::Seen : proqe::SeRule::Emerging};
}

}  // namespace

extern "C" {

const char* proqe_last_error(void) { return g_last_error.c_str(); }

const char* proqe_status_name(proqe_status s) {
  switch (s) {
    case PROQE_OK: return "ok";
    case PROQE_ERR_INVALID: return "invalid argument";
    case PROQE_ERR_PARSE: return "parse error";
    case PROQE_ERR_IO: return "i/o error";
    case PROQE_ERR_QUERY: return "query error";
    case PROQE_ERR_NUMERIC: return "numeric error";
    case PROQE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* proqe_version(void) { return "1.0.0"; }

void proqe_free(void* p) { std::free(p); }

// ---- graphs -----------------------------------------------------------------

proqe_status proqe_graph_load(const char* path, proqe_graph** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    const std::filesystem::path p(path);
    auto g = std::make_unique<proqe_graph>();
    g->kg = std::filesystem::is_directory(p) ? proqe::KnowledgeGraph::load_with_dicts(p)
                                             : proqe::KnowledgeGraph::load_tsv(p);
    *out = g.release();
  });
}

void proqe_synth_options_default(proqe_synth_options* opts) {
  if (!opts) return;
  const proqe::SynthOptions d;
  *opts = {d.entities, d.relations, d.clusters, d.sources_per_relation, d.triples, d.seed};
}

proqe_status proqe_graph_synthesize(const proqe_synth_options* opts, proqe_graph** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    proqe::SynthOptions o;
    if (opts)
      o = {opts->entities, opts->relations, opts->clusters, opts->sources_per_relation,
           opts->triples, opts->seed};
    auto g = std::make_unique<proqe_graph>();
    g->kg = proqe::synthesize_kg(o);
    *out = g.release();
  });
}

void proqe_graph_free(proqe_graph* g) { delete g; }

proqe_status proqe_graph_stats(const proqe_graph* g, size_t* entities, size_t* relations,
                               size_t* triples) {
  return guarded([&] {
    require(g, "graph");
    if (entities) *entities = g->kg.num_entities();
    if (relations) *relations = g->kg.num_relations();
    if (triples) *triples = g->kg.num_triples();
  });
}

proqe_status proqe_graph_write_tsv(const proqe_graph* g, const char* path) {
  return guarded([&] {
    require(g, "graph");
    require(path, "path");
    g->kg.write_tsv(path);
  });
}

proqe_status proqe_graph_entity_name(const proqe_graph* g, uint32_t id, const char** name) {
  return guarded([&] {
    require(g, "graph");
    require(name, "name");
    if (id >= g->kg.num_entities())
      throw proqe::InvalidArgument("entity id " + std::to_string(id) + " out of range");
    *name = g->kg.entities().name(id).c_str();
  });
}

proqe_status proqe_graph_entity_id(const proqe_graph* g, const char* name, uint32_t* id) {
  return guarded([&] {
    require(g, "graph");
    require(name, "name");
    require(id, "id");
    auto v = g->kg.entities().find(name);
    if (!v) throw proqe::InvalidArgument(std::string("unknown entity '") + name + "'");
    *id = *v;
  });
}

proqe_status proqe_graph_relation_id(const proqe_graph* g, const char* name, uint32_t* id) {
  return guarded([&] {
    require(g, "graph");
    require(name, "name");
    require(id, "id");
    auto v = g->kg.relations().find(name);
    if (!v) throw proqe::InvalidArgument(std::string("unknown relation '") + name + "'");
    *id = *v;
  });
}

proqe_status proqe_graph_neighbors(const proqe_graph* g, uint32_t entity, proqe_neighbor* buf,
                                   size_t capacity, size_t* count) {
  return guarded([&] {
    require(g, "graph");
    require(count, "count");
    if (capacity) require(buf, "buf");
    const auto nbrs = g->kg.neighbors(entity);
    *count = nbrs.size();
    for (std::size_t i = 0; i < nbrs.size() && i < capacity; ++i)
      buf[i] = {nbrs[i].relation, nbrs[i].entity, nbrs[i].direction == proqe::Direction::In ? 1 : 0};
  });
}

// ---- queries ----------------------------------------------------------------

proqe_status proqe_query_answers(const proqe_graph* g, const char* structure,
                                 const uint32_t* anchors, size_t n_anchors,
                                 const uint32_t* relations, size_t n_relations, uint32_t* buf,
                                 size_t capacity, size_t* count) {
  return guarded([&] {
    require(g, "graph");
    require(count, "count");
    if (capacity) require(buf, "buf");
    const auto q = make_query(structure, anchors, n_anchors, relations, n_relations);
    for (auto a : q.anchors())
      if (a >= g->kg.num_entities())
        throw proqe::InvalidArgument("anchor " + std::to_string(a) + " out of range");
    for (auto r : q.relations())
      if (r >= g->kg.num_relations())
        throw proqe::InvalidArgument("relation " + std::to_string(r) + " out of range");
    const auto ans = proqe::answer_set(g->kg, q);
    *count = ans.size();
    std::size_t i = 0;
    for (auto e : ans) {
      if (i >= capacity) break;
      buf[i++] = e;
    }
  });
}

proqe_status proqe_query_serialize(const char* structure, const uint32_t* anchors, size_t n_anchors,
                                   const uint32_t* relations, size_t n_relations, char** tokens) {
  return guarded([&] {
    require(tokens, "tokens");
    *tokens = nullptr;
    const auto q = make_query(structure, anchors, n_anchors, relations, n_relations);
    *tokens = dup_string(proqe::render(proqe::serialize(q)));
  });
}

// ---- benchmark --------------------------------------------------------------

void proqe_bench_options_default(proqe_bench_options* opts) {
  if (!opts) return;
  const proqe::BenchOptions d;
  *opts = {d.fraction, d.seed, d.train_queries, d.eval_queries, d.threads};
}

proqe_status proqe_bench_build(const proqe_graph* g, const proqe_bench_options* opts,
                               const char* out_dir, char** summary_json) {
  return guarded([&] {
    require(g, "graph");
    require(out_dir, "out_dir");
    if (summary_json) *summary_json = nullptr;
    proqe::BenchOptions o;
    if (opts) {
      o.fraction = opts->fraction;
      o.seed = opts->seed;
      o.train_queries = opts->train_queries;
      o.eval_queries = opts->eval_queries;
      o.threads = opts->threads;
    }
    const auto s = proqe::build_benchmark(g->kg, o, out_dir);
    if (summary_json) {
      nlohmann::json j;
      j["v_train"] = s.split.v_train.size();
      j["v_test"] = s.split.v_test.size();
      j["t_train"] = s.split.t_train.size();
      j["t_aux"] = s.split.t_aux.size();
      j["train"] = s.train;
      j["valid"] = s.valid;
      j["test"] = s.test;
      j["warnings"] = s.warnings;
      *summary_json = dup_string(j.dump());
    }
  });
}

// ---- training ---------------------------------------------------------------

proqe_status proqe_train(const char* data_dir, const char* config_text, const char* overrides_text,
                         const char* out_dir, proqe_step_callback cb, void* user,
                         char** summary_json) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(out_dir, "out_dir");
    if (summary_json) *summary_json = nullptr;
    auto kv = proqe::KeyValueConfig::parse(config_text ? config_text : "");
    if (overrides_text) kv.merge(proqe::KeyValueConfig::parse(overrides_text));
    auto on_step = [&](const proqe::StepStats& s) {
      if (cb) cb(user, s.step, s.lr, s.loss, s.sample_loss);
    };
    const auto run = proqe::train_from_bench(data_dir, kv, out_dir, on_step);
    if (summary_json) {
      nlohmann::json j;
      j["checkpoint"] = run.checkpoint.string();
      j["log"] = run.log.string();
      j["steps"] = run.history.size();
      if (!run.history.empty()) {
        j["first_loss"] = run.history.front().loss;
        j["last_loss"] = run.history.back().loss;
      }
      *summary_json = dup_string(j.dump());
    }
  });
}

proqe_status proqe_config_defaults(char** text) {
  return guarded([&] {
    require(text, "text");
    proqe::KeyValueConfig kv;
    proqe::ModelConfig{}.write(kv);
    proqe::TrainConfig{}.write(kv);
    *text = dup_string(kv.text());
  });
}

// ---- evaluation -------------------------------------------------------------

proqe_status proqe_model_load(const char* path, proqe_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    auto loaded = proqe::Model::load(path);
    auto m = std::make_unique<proqe_model>();
    m->model = std::make_unique<proqe::Model>(std::move(loaded.model));
    *out = m.release();
  });
}

void proqe_model_free(proqe_model* m) { delete m; }

proqe_status proqe_model_info(const proqe_model* m, char** json) {
  return guarded([&] {
    require(m, "model");
    require(json, "json");
    proqe::KeyValueConfig kv;
    m->model->config().write(kv);
    nlohmann::json j;
    for (const auto& [k, v] : kv.entries()) j["config"][k] = v;
    j["num_entities"] = m->model->num_entities();
    j["num_relations"] = m->model->num_relations();
    j["num_seen"] = m->model->seen().size();
    j["num_scalars"] = m->model->num_scalars();
    *json = dup_string(j.dump());
  });
}

void proqe_eval_options_default(proqe_eval_options* opts) {
  if (!opts) return;
  opts->filtered = 1;
  opts->se_rule = PROQE_SE_EMERGING;
  opts->threads = 1;
}

proqe_status proqe_evaluate(proqe_model* m, const char* data_dir, const char* queries_path,
                            const proqe_eval_options* opts, proqe_report** out) {
  return guarded([&] {
    require(m, "model");
    require(data_dir, "data_dir");
    require(queries_path, "queries_path");
    require(out, "out");
    *out = nullptr;
    const auto proto = protocol(opts);
    const auto data = proqe::load_bench(data_dir);
    const auto records = proqe::read_dataset(queries_path);
    const auto res = proqe::evaluate_model(*m->model, data, records, proto, opts ? opts->threads : 1);
    auto r = std::make_unique<proqe_report>();
    r->report = res.report;
    r->warnings = res.warnings;
    *out = r.release();
  });
}

proqe_status proqe_random_baseline(const char* data_dir, const char* queries_path,
                                   const proqe_eval_options* opts, proqe_report** out) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(queries_path, "queries_path");
    require(out, "out");
    *out = nullptr;
    const auto proto = protocol(opts);
    const auto data = proqe::load_bench(data_dir);
    const auto records = proqe::read_dataset(queries_path);
    auto r = std::make_unique<proqe_report>();
    r->report = proqe::random_baseline(records, data.full.num_entities(), data.split, proto);
    *out = r.release();
  });
}

void proqe_report_free(proqe_report* r) { delete r; }

proqe_status proqe_report_cell(const proqe_report* r, size_t structure, size_t cls, double* mrr,
                               int* present) {
  return guarded([&] {
    require(r, "report");
    require(mrr, "mrr");
    require(present, "present");
    if (structure > 9 || cls > 2) throw proqe::InvalidArgument("report cell out of range");
    const auto v = structure == 9 ? r->report.average(proqe::kEvalClasses[cls])
                                  : r->report.cells[structure][cls];
    *present = v ? 1 : 0;
    *mrr = v.value_or(0.0);
  });
}

proqe_status proqe_report_overall(const proqe_report* r, double* mrr, int* present) {
  return guarded([&] {
    require(r, "report");
    require(mrr, "mrr");
    require(present, "present");
    const auto v = r->report.overall();
    *present = v ? 1 : 0;
    *mrr = v.value_or(0.0);
  });
}

proqe_status proqe_report_skipped(const proqe_report* r, size_t* skipped) {
  return guarded([&] {
    require(r, "report");
    require(skipped, "skipped");
    *skipped = r->report.skipped;
  });
}

proqe_status proqe_report_csv(const proqe_report* r, char** csv) {
  return guarded([&] {
    require(r, "report");
    require(csv, "csv");
    *csv = dup_string(r->report.csv());
  });
}

proqe_status proqe_report_text(const proqe_report* r, char** text) {
  return guarded([&] {
    require(r, "report");
    require(text, "text");
    *text = dup_string(r->report.text());
  });
}

// ---- gradient checks --------------------------------------------------------

proqe_status proqe_gradcheck(uint64_t seed, char** report, int* all_passed) {
  return guarded([&] {
    require(report, "report");
    require(all_passed, "all_passed");
    *report = nullptr;
    auto results = proqe::check_primitives(seed);
    results.push_back(proqe::check_composite(seed, proqe::Backbone::Gqe));
    results.push_back(proqe::check_composite(seed, proqe::Backbone::Q2b));
    std::string text;
    bool ok = true;
    for (const auto& r : results) {
      char line[160];
      std::snprintf(line, sizeof(line), "%-20s %-4s rel_err=%.3e scalars=%zu\n", r.name.c_str(),
                    r.passed ? "ok" : "FAIL", r.rel_error, r.scalars);
      text += line;
      ok = ok && r.passed;
    }
    *all_passed = ok ? 1 : 0;
    *report = dup_string(text);
  });
}

}  // extern "C"
