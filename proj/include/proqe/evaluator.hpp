#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "proqe/bench.hpp"
#include "proqe/model.hpp"

namespace proqe {

// Answer set used for SE queries: the emerging answers (default) or the seen
// ones.
enum class SeRule : std::uint8_t { Emerging, Seen };

struct EvalProtocol {
  bool filtered = true;
  SeRule se_rule = SeRule::Emerging;
};

// Candidates sorted by ascending score; ties go to the smaller id.
std::vector<EntityId> rank(std::span<const double> scores, std::span<const EntityId> candidates);

// Mean reciprocal rank of the members of `answers` within `ranking`. When
// `filtered`, other members of `answers` ranked above v do not count towards
// R(v). Throws on an empty answer set or an answer missing from the ranking.
double mrr(std::span<const EntityId> ranking, const EntitySet& answers, bool filtered);

// The answer set A the protocol evaluates for one record.
EntitySet evaluation_answers(const QueryRecord& r, const InductiveSplit& split, SeRule rule);

// Expected MRR under uniformly random ranking of `num_candidates` entities.
double expected_random_mrr(std::size_t num_candidates, std::size_t num_answers, bool filtered);

inline constexpr std::array<QueryClass, 3> kEvalClasses = {QueryClass::EE, QueryClass::ES,
                                                           QueryClass::SE};

struct EvalReport {
  // cells[structure][class]: mean MRR, absent when no query contributed.
  std::array<std::array<std::optional<double>, 3>, 9> cells{};
  std::array<std::array<std::size_t, 3>, 9> counts{};
  std::size_t skipped = 0;  // queries whose answer set was empty under the protocol

  // Mean over structures present for the class.
  std::optional<double> average(QueryClass c) const;
  // Mean of the class averages that exist.
  std::optional<double> overall() const;

  // structure,EE,ES,SE with an avg row; absent cells are empty.
  std::string csv() const;
  // Aligned table, absent cells shown as "-", values as MRR x 100.
  std::string text() const;
};

// Scores every candidate for one query; lower is better.
using Scorer = std::function<std::vector<double>(const QueryRecord&, std::size_t index)>;

// Aggregates per-(structure, class) MRR over `records` with scores from
// `scorer`. Candidates are all `num_entities` entities.
EvalReport evaluate(std::span<const QueryRecord> records, std::size_t num_entities,
                    const InductiveSplit& split, const EvalProtocol& protocol, const Scorer& scorer,
                    std::size_t threads = 1);

// Model-backed scorer: contexts on `graph` (the full graph), with the feature
// map installed when the model uses the feature encoder.
class ModelScorer {
 public:
  ModelScorer(const Model& model, const KnowledgeGraph& graph, std::uint64_t seed = 0);
  std::vector<double> operator()(const QueryRecord& r) const;
  std::size_t warnings() const { return cache_.warnings(); }

 private:
  const Model& model_;
  ContextCache cache_;
};

// Full protocol for a trained model over a benchmark directory's graphs.
// Installs the feature map first when the model uses the feature encoder.
struct ModelEval {
  EvalReport report;
  std::size_t warnings = 0;  // entities represented by a zero vector
};
ModelEval evaluate_model(Model& model, const BenchData& data, std::span<const QueryRecord> records,
                         const EvalProtocol& protocol, std::size_t threads = 1);

// Analytic uniform-random report with the same cells as evaluate().
EvalReport random_baseline(std::span<const QueryRecord> records, std::size_t num_entities,
                           const InductiveSplit& split, const EvalProtocol& protocol);

}  // namespace proqe
