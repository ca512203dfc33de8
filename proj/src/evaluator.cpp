#include "proqe/evaluator.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "parallel.hpp"
#include "proqe/error.hpp"

namespace proqe {

std::vector<EntityId> rank(std::span<const double> scores, std::span<const EntityId> candidates) {
  if (scores.size() != candidates.size())
    throw InvalidArgument("rank: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(candidates.size()) + " candidates");
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return candidates[a] < candidates[b];
  });
  std::vector<EntityId> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(candidates[i]);
  return out;
}

double mrr(std::span<const EntityId> ranking, const EntitySet& answers, bool filtered) {
  if (answers.empty()) throw InvalidArgument("mrr: empty answer set");
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < ranking.size(); ++i)
    if (answers.contains(ranking[i])) pos.push_back(i + 1);
  if (pos.size() != answers.size())
    throw InvalidArgument("mrr: " + std::to_string(answers.size() - pos.size()) +
                          " answer(s) missing from the ranking");
  double sum = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const std::size_t r = filtered ? pos[i] - i : pos[i];
    sum += 1.0 / static_cast<double>(r);
  }
  return sum / static_cast<double>(pos.size());
}

EntitySet evaluation_answers(const QueryRecord& r, const InductiveSplit& split, SeRule rule) {
  if (r.cls != QueryClass::SE) return r.answers;
  std::vector<EntityId> keep;
  for (auto e : r.answers)
    if (split.is_emerging(e) == (rule == SeRule::Emerging)) keep.push_back(e);
  return EntitySet::from_unsorted(std::move(keep));
}

double expected_random_mrr(std::size_t num_candidates, std::size_t num_answers, bool filtered) {
  if (num_answers == 0 || num_answers > num_candidates)
    throw InvalidArgument("expected_random_mrr: need 1 <= answers <= candidates");
  const std::size_t m = filtered ? num_candidates - num_answers + 1 : num_candidates;
  double h = 0.0;
  for (std::size_t i = m; i >= 1; --i) h += 1.0 / static_cast<double>(i);
  return h / static_cast<double>(m);
}

// ---- report -----------------------------------------------------------------

std::optional<double> EvalReport::average(QueryClass c) const {
  const auto k = static_cast<std::size_t>(c);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& row : cells)
    if (row[k]) {
      sum += *row[k];
      ++n;
    }
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::optional<double> EvalReport::overall() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (auto c : kEvalClasses)
    if (auto a = average(c)) {
      sum += *a;
      ++n;
    }
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

namespace {
std::string fmt(const char* f, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}
}  // namespace

std::string EvalReport::csv() const {
  std::string out = "structure,EE,ES,SE\n";
  auto row = [&](std::string_view name, auto get) {
    out += name;
    for (std::size_t k = 0; k < 3; ++k) {
      out += ',';
      if (auto v = get(k)) out += fmt("%.6f", *v);
    }
    out += '\n';
  };
  for (std::size_t s = 0; s < 9; ++s)
    row(to_string(kAllStructures[s]), [&](std::size_t k) { return cells[s][k]; });
  row("avg", [&](std::size_t k) { return average(kEvalClasses[k]); });
  return out;
}

std::string EvalReport::text() const {
  std::string out = "structure      EE      ES      SE\n";
  auto row = [&](std::string_view name, auto get) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%-9s", std::string(name).c_str());
    out += buf;
    for (std::size_t k = 0; k < 3; ++k) {
      auto v = get(k);
      out += v ? fmt("%8.2f", *v * 100.0) : std::string("       -");
    }
    out += '\n';
  };
  for (std::size_t s = 0; s < 9; ++s)
    row(to_string(kAllStructures[s]), [&](std::size_t k) { return cells[s][k]; });
  row("avg", [&](std::size_t k) { return average(kEvalClasses[k]); });
  return out;
}

namespace {
std::size_t class_slot(QueryClass c) {
  if (c == QueryClass::SS) throw InvalidArgument("SS queries are not evaluated");
  return static_cast<std::size_t>(c);
}

EvalReport reduce(std::span<const QueryRecord> records, const std::vector<std::optional<double>>& per) {
  EvalReport rep;
  std::array<std::array<double, 3>, 9> sums{};
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!per[i]) {
      ++rep.skipped;
      continue;
    }
    const auto s = static_cast<std::size_t>(records[i].tag);
    const auto k = class_slot(records[i].cls);
    sums[s][k] += *per[i];
    ++rep.counts[s][k];
  }
  for (std::size_t s = 0; s < 9; ++s)
    for (std::size_t k = 0; k < 3; ++k)
      if (rep.counts[s][k]) rep.cells[s][k] = sums[s][k] / static_cast<double>(rep.counts[s][k]);
  return rep;
}
}  // namespace

EvalReport evaluate(std::span<const QueryRecord> records, std::size_t num_entities,
                    const InductiveSplit& split, const EvalProtocol& protocol, const Scorer& scorer,
                    std::size_t threads) {
  for (const auto& r : records) class_slot(r.cls);
  std::vector<EntityId> candidates(num_entities);
  std::iota(candidates.begin(), candidates.end(), 0u);
  std::vector<std::optional<double>> per(records.size());
  detail::parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto A = evaluation_answers(records[i], split, protocol.se_rule);
    if (A.empty()) return;
    const auto scores = scorer(records[i], i);
    per[i] = mrr(rank(scores, candidates), A, protocol.filtered);
  });
  return reduce(records, per);
}

EvalReport random_baseline(std::span<const QueryRecord> records, std::size_t num_entities,
                           const InductiveSplit& split, const EvalProtocol& protocol) {
  std::vector<std::optional<double>> per(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    class_slot(records[i].cls);
    const auto A = evaluation_answers(records[i], split, protocol.se_rule);
    if (!A.empty()) per[i] = expected_random_mrr(num_entities, A.size(), protocol.filtered);
  }
  return reduce(records, per);
}

// ---- model scorer -----------------------------------------------------------

ModelScorer::ModelScorer(const Model& model, const KnowledgeGraph& graph, std::uint64_t seed)
    : model_(model), cache_(model, graph, seed) {}

std::vector<double> ModelScorer::operator()(const QueryRecord& r) const {
  ad::Tape tape(false);
  Forward fw(model_, tape);
  for (auto a : r.anchors) cache_.install(fw, a);
  const auto pass = fw.run_query(r.graph());
  std::vector<ad::Tensor> centers, offsets;
  for (const auto& b : pass.embedding.conjuncts) {
    centers.push_back(b.center.value());
    if (b.offset) offsets.push_back(b.offset->value());
  }
  const double* p = pass.answer_prompt ? pass.answer_prompt->value().data() : nullptr;
  std::vector<double> scores(model_.num_entities());
  for (EntityId e = 0; e < scores.size(); ++e) {
    const auto rep = cache_.represent(e, p);
    scores[e] = distance_value(model_, centers, offsets, rep.data());
  }
  return scores;
}

ModelEval evaluate_model(Model& model, const BenchData& data, std::span<const QueryRecord> records,
                         const EvalProtocol& protocol, std::size_t threads) {
  if (model.num_entities() != data.full.num_entities() ||
      model.num_relations() != data.full.num_relations())
    throw InvalidArgument("checkpoint was trained for " + std::to_string(model.num_entities()) +
                          " entities / " + std::to_string(model.num_relations()) +
                          " relations, graph has " + std::to_string(data.full.num_entities()) +
                          " / " + std::to_string(data.full.num_relations()));
  if (model.config().encoder == Encoder::Feature)
    model.set_feature_map(build_feature_map(data.train_graph, data.full, model));
  ModelScorer scorer(model, data.full);
  ModelEval out;
  out.report = evaluate(records, data.full.num_entities(), data.split, protocol,
                        [&](const QueryRecord& r, std::size_t) { return scorer(r); }, threads);
  out.warnings = scorer.warnings();
  return out;
}

}  // namespace proqe
