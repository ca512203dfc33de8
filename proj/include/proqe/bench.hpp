#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "proqe/kg.hpp"
#include "proqe/query.hpp"
#include "proqe/symbolic.hpp"

namespace proqe {

// Where emerging entities sit: E = emerging, S = seen; first letter anchors,
// second answers.
enum class QueryClass : std::uint8_t { EE, ES, SE, SS };

std::string_view to_string(QueryClass c);
QueryClass parse_class(std::string_view s);

struct InductiveSplit {
  double fraction = 0.2;
  std::uint64_t seed = 0;
  std::vector<EntityId> v_train;  // sorted
  std::vector<EntityId> v_test;   // sorted, the emerging entities
  std::vector<Triple> t_train;    // triples with no emerging endpoint
  std::vector<Triple> t_aux;      // triples touching v_test
  std::vector<std::uint8_t> emerging;  // per-entity mask

  bool is_emerging(EntityId e) const { return e < emerging.size() && emerging[e]; }
};

// |v_test| = round(fraction * |V|). Throws when either side would be empty.
InductiveSplit split_inductive(const KnowledgeGraph& kg, double fraction, std::uint64_t seed);
// Rebuilds the split from a stored emerging-entity list.
InductiveSplit split_from_emerging(const KnowledgeGraph& kg, std::vector<EntityId> v_test,
                                   double fraction, std::uint64_t seed);

void write_split_json(const std::filesystem::path& path, const InductiveSplit& split);
// Reads split.json and rebuilds the triple partition against `kg`.
InductiveSplit read_split_json(const std::filesystem::path& path, const KnowledgeGraph& kg);

// "Any anchor emerging" x "any answer emerging".
QueryClass classify(const QueryGraph& q, const EntitySet& answers,
                    std::span<const std::uint8_t> emerging);

struct QueryRecord {
  Structure tag = Structure::P1;
  std::vector<EntityId> anchors;  // flat post-order layout
  std::vector<RelationId> relations;
  EntitySet answers;
  QueryClass cls = QueryClass::SS;

  QueryGraph graph() const { return instantiate(tag, anchors, relations); }
  // Identity of the (structure, anchors, relations) tuple.
  std::string key() const;
  bool operator==(const QueryRecord&) const = default;
};

enum class DatasetSplit : std::uint8_t { Train, Valid, Test };

std::string to_json_line(const QueryRecord& r);
// `line` is 1-based and only used in error messages.
QueryRecord from_json_line(std::string_view text, std::size_t line = 0);
// Eval splits refuse SS records. Errors surface as IoError / InvalidArgument.
void write_dataset(const std::filesystem::path& path, std::span<const QueryRecord> records,
                   DatasetSplit split);
std::vector<QueryRecord> read_dataset(const std::filesystem::path& path);

enum class GroundMode : std::uint8_t { Train, Eval };

struct GroundOptions {
  std::size_t max_answers = 100;
  // Attempts allowed per requested record before giving up.
  std::size_t attempts_per_record = 200;
  // Eval mode: probability of steering a sampled target or in-edge towards an
  // emerging entity.
  double emerging_bias = 0.5;
};

struct GroundResult {
  std::vector<QueryRecord> records;
  std::size_t attempts = 0;
  bool exhausted = false;  // fewer records than requested
};

// Train mode grounds `count` queries on the training graph (class SS). Eval
// mode grounds on the full graph and keeps up to `count` records of each of
// EE, ES and SE. Keys in `exclude` are never produced.
GroundResult ground_queries(const KnowledgeGraph& full, const KnowledgeGraph& train_graph,
                            const InductiveSplit& split, Structure s, std::size_t count,
                            GroundMode mode, std::uint64_t seed, const GroundOptions& opts = {},
                            const std::unordered_set<std::string>* exclude = nullptr);

struct BenchOptions {
  double fraction = 0.2;
  std::uint64_t seed = 0;
  std::size_t train_queries = 900000;  // total over the nine structures
  std::size_t eval_queries = 22500;    // per class per eval split, over the nine structures
  std::size_t threads = 1;
  GroundOptions ground;
};

struct BenchSummary {
  InductiveSplit split;
  std::size_t train = 0, valid = 0, test = 0;
  std::vector<std::string> warnings;
};

// Writes split.json, train/valid/test.jsonl, graph.tsv and the two .dict files
// into `out_dir`. Output is identical for any thread count.
BenchSummary build_benchmark(const KnowledgeGraph& kg, const BenchOptions& opts,
                             const std::filesystem::path& out_dir);

// Reader for a build_benchmark() directory.
struct BenchData {
  KnowledgeGraph full;
  KnowledgeGraph train_graph;
  InductiveSplit split;
};
BenchData load_bench(const std::filesystem::path& dir);

}  // namespace proqe
