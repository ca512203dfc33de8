#include "proqe/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "parallel.hpp"
#include "proqe/error.hpp"
#include "proqe/rng.hpp"

namespace proqe {

using nlohmann::json;

std::string_view to_string(QueryClass c) {
  switch (c) {
    case QueryClass::EE: return "EE";
    case QueryClass::ES: return "ES";
    case QueryClass::SE: return "SE";
    case QueryClass::SS: return "SS";
  }
  return "?";
}

QueryClass parse_class(std::string_view s) {
  if (s == "EE") return QueryClass::EE;
  if (s == "ES") return QueryClass::ES;
  if (s == "SE") return QueryClass::SE;
  if (s == "SS") return QueryClass::SS;
  throw InvalidArgument("unknown query class '" + std::string(s) + "'");
}

// ---- split ------------------------------------------------------------------

InductiveSplit split_from_emerging(const KnowledgeGraph& kg, std::vector<EntityId> v_test,
                                   double fraction, std::uint64_t seed) {
  InductiveSplit s;
  s.fraction = fraction;
  s.seed = seed;
  s.emerging.assign(kg.num_entities(), 0);
  std::sort(v_test.begin(), v_test.end());
  v_test.erase(std::unique(v_test.begin(), v_test.end()), v_test.end());
  for (auto e : v_test) {
    if (e >= kg.num_entities()) throw InvalidArgument("emerging entity id out of range");
    s.emerging[e] = 1;
  }
  s.v_test = std::move(v_test);
  for (EntityId e = 0; e < kg.num_entities(); ++e)
    if (!s.emerging[e]) s.v_train.push_back(e);
  for (const auto& t : kg.triples()) {
    if (s.emerging[t.head] || s.emerging[t.tail]) s.t_aux.push_back(t);
    else s.t_train.push_back(t);
  }
  return s;
}

InductiveSplit split_inductive(const KnowledgeGraph& kg, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw InvalidArgument("split fraction must lie in (0, 1)");
  const std::size_t n = kg.num_entities();
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k == 0 || k >= n)
    throw InvalidArgument("fraction " + std::to_string(fraction) + " of " + std::to_string(n) +
                          " entities leaves one side of the split empty");
  std::vector<EntityId> ids(n);
  for (EntityId i = 0; i < n; ++i) ids[i] = i;
  Rng rng(derive_seed({seed, 0x5711}));
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + uniform_index(rng, n - i)]);
  ids.resize(k);
  return split_from_emerging(kg, std::move(ids), fraction, seed);
}

void write_split_json(const std::filesystem::path& path, const InductiveSplit& split) {
  json j;
  j["fraction"] = split.fraction;
  j["seed"] = split.seed;
  j["v_test"] = split.v_test;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump() << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

InductiveSplit read_split_json(const std::filesystem::path& path, const KnowledgeGraph& kg) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    json j = json::parse(in);
    return split_from_emerging(kg, j.at("v_test").get<std::vector<EntityId>>(),
                               j.at("fraction").get<double>(), j.at("seed").get<std::uint64_t>());
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

QueryClass classify(const QueryGraph& q, const EntitySet& answers,
                    std::span<const std::uint8_t> emerging) {
  auto em = [&](EntityId e) { return e < emerging.size() && emerging[e]; };
  const auto anchors = q.anchors();
  const bool a = std::any_of(anchors.begin(), anchors.end(), em);
  const bool b = std::any_of(answers.begin(), answers.end(), em);
  if (a) return b ? QueryClass::EE : QueryClass::ES;
  return b ? QueryClass::SE : QueryClass::SS;
}

// ---- records ----------------------------------------------------------------

std::string QueryRecord::key() const {
  std::string k(to_string(tag));
  for (auto a : anchors) k += " a" + std::to_string(a);
  for (auto r : relations) k += " r" + std::to_string(r);
  return k;
}

std::string to_json_line(const QueryRecord& r) {
  json j;
  j["tag"] = std::string(to_string(r.tag));
  j["anchors"] = r.anchors;
  j["relations"] = r.relations;
  j["answers"] = std::vector<EntityId>(r.answers.begin(), r.answers.end());
  j["class"] = std::string(to_string(r.cls));
  return j.dump();
}

QueryRecord from_json_line(std::string_view text, std::size_t line) {
  const std::string where = line ? "line " + std::to_string(line) + ": " : std::string();
  try {
    json j = json::parse(text);
    QueryRecord r;
    r.tag = parse_structure(j.at("tag").get<std::string>());
    r.anchors = j.at("anchors").get<std::vector<EntityId>>();
    r.relations = j.at("relations").get<std::vector<RelationId>>();
    r.answers = EntitySet::from_unsorted(j.at("answers").get<std::vector<EntityId>>());
    r.cls = parse_class(j.value("class", std::string("SS")));
    const auto ar = arity(r.tag);
    if (r.anchors.size() != ar.anchors || r.relations.size() != ar.relations)
      throw ParseError(where + "anchor/relation counts do not match tag " +
                           std::string(to_string(r.tag)),
                       line);
    if (r.answers.empty()) throw ParseError(where + "empty answer set", line);
    return r;
  } catch (const json::exception& e) {
    throw ParseError(where + e.what(), line);
  } catch (const InvalidArgument& e) {
    throw ParseError(where + e.what(), line);
  }
}

void write_dataset(const std::filesystem::path& path, std::span<const QueryRecord> records,
                   DatasetSplit split) {
  if (split != DatasetSplit::Train) {
    for (const auto& r : records)
      if (r.cls == QueryClass::SS)
        throw InvalidArgument("SS record " + r.key() + " cannot be written to an evaluation split");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<QueryRecord> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<QueryRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    try {
      out.push_back(from_json_line(line, n));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": " + e.what(), e.location());
    }
  }
  return out;
}

// ---- grounding --------------------------------------------------------------

namespace {

std::string subtree_form(const QueryGraph& q, NodeId n) {
  const auto& node = q.node(n);
  if (node.kind == NodeKind::Anchor) return "a" + std::to_string(node.entity);
  std::string s = "(";
  s += node.op == Op::Projection ? "p" + std::to_string(node.relation) : std::to_string(int(node.op));
  for (auto in : node.inputs) s += " " + subtree_form(q, in);
  return s + ")";
}

bool has_identical_branches(const QueryGraph& q) {
  for (const auto& node : q.nodes()) {
    if (node.op != Op::Intersection && node.op != Op::Union) continue;
    std::vector<std::string> forms;
    for (auto in : node.inputs) forms.push_back(subtree_form(q, in));
    std::sort(forms.begin(), forms.end());
    if (std::adjacent_find(forms.begin(), forms.end()) != forms.end()) return true;
  }
  return false;
}

struct Grounder {
  const KnowledgeGraph& g;
  const InductiveSplit& split;
  bool eval;
  double bias;
  Rng& rng;
  const QueryGraph& tmpl;
  std::vector<EntityId> anchors;
  std::vector<RelationId> rels;

  bool biased() { return eval && uniform01(rng) < bias; }

  bool ground(NodeId n, EntityId target) {
    const auto& node = tmpl.node(n);
    if (node.kind == NodeKind::Anchor) {
      anchors[node.entity] = target;
      return true;
    }
    if (node.op == Op::Projection) {
      const auto nbrs = g.neighbors(target);
      std::vector<std::size_t> in, in_emerging;
      for (std::size_t i = 0; i < nbrs.size(); ++i) {
        if (nbrs[i].direction != Direction::In) continue;
        in.push_back(i);
        if (split.is_emerging(nbrs[i].entity)) in_emerging.push_back(i);
      }
      if (in.empty()) return false;
      const auto& pool = !in_emerging.empty() && biased() ? in_emerging : in;
      const auto& pick = nbrs[pool[uniform_index(rng, pool.size())]];
      rels[node.relation] = pick.relation;
      return ground(node.inputs[0], pick.entity);
    }
    for (auto in : node.inputs)
      if (!ground(in, target)) return false;
    return true;
  }
};

std::vector<EntityId> with_in_edges(const KnowledgeGraph& g, const InductiveSplit& split,
                                    bool emerging_only) {
  std::vector<EntityId> out;
  for (EntityId e = 0; e < g.num_entities(); ++e) {
    if (emerging_only && !split.is_emerging(e)) continue;
    for (const auto& n : g.neighbors(e))
      if (n.direction == Direction::In) {
        out.push_back(e);
        break;
      }
  }
  return out;
}

}  // namespace

GroundResult ground_queries(const KnowledgeGraph& full, const KnowledgeGraph& train_graph,
                            const InductiveSplit& split, Structure s, std::size_t count,
                            GroundMode mode, std::uint64_t seed, const GroundOptions& opts,
                            const std::unordered_set<std::string>* exclude) {
  if (count == 0) throw InvalidArgument("ground_queries: count must be positive");
  const bool eval = mode == GroundMode::Eval;
  const KnowledgeGraph& g = eval ? full : train_graph;
  const auto ar = arity(s);
  std::vector<EntityId> slots_a(ar.anchors), slots_r(ar.relations);
  for (std::size_t i = 0; i < slots_a.size(); ++i) slots_a[i] = static_cast<EntityId>(i);
  for (std::size_t i = 0; i < slots_r.size(); ++i) slots_r[i] = static_cast<RelationId>(i);
  const QueryGraph tmpl = instantiate(s, slots_a, slots_r);

  const auto targets = with_in_edges(g, split, false);
  const auto emerging_targets = eval ? with_in_edges(g, split, true) : std::vector<EntityId>{};
  GroundResult res;
  if (targets.empty()) {
    res.exhausted = true;
    return res;
  }

  Rng rng(derive_seed({seed, static_cast<std::uint64_t>(s), eval ? 2u : 1u}));
  std::unordered_set<std::string> seen_keys;
  std::array<std::size_t, 3> per_class{};
  const std::size_t want = eval ? 3 * count : count;
  const std::size_t max_attempts = std::max<std::size_t>(1000, want * opts.attempts_per_record);

  while (res.records.size() < want && res.attempts < max_attempts) {
    ++res.attempts;
    Grounder gr{g, split, eval, opts.emerging_bias, rng, tmpl,
                std::vector<EntityId>(ar.anchors), std::vector<RelationId>(ar.relations)};
    const auto& pool = eval && !emerging_targets.empty() && gr.biased() ? emerging_targets : targets;
    const EntityId target = pool[uniform_index(rng, pool.size())];
    if (!gr.ground(tmpl.answer(), target)) continue;

    QueryRecord rec;
    rec.tag = s;
    QueryGraph q = instantiate(s, gr.anchors, gr.rels);
    rec.anchors = q.anchors();
    rec.relations = q.relations();
    const std::string key = rec.key();
    if (seen_keys.count(key) || (exclude && exclude->count(key))) continue;
    if (has_identical_branches(q)) continue;
    rec.answers = answer_set(g, q);
    if (rec.answers.empty() || rec.answers.size() > opts.max_answers) continue;
    if (eval) {
      rec.cls = classify(q, rec.answers, split.emerging);
      if (rec.cls == QueryClass::SS) continue;
      auto& quota = per_class[static_cast<std::size_t>(rec.cls)];
      if (quota >= count) continue;
      ++quota;
    } else {
      rec.cls = QueryClass::SS;
    }
    seen_keys.insert(key);
    res.records.push_back(std::move(rec));
  }
  res.exhausted = res.records.size() < want;
  return res;
}

// ---- benchmark directory ----------------------------------------------------

namespace {
std::vector<std::size_t> spread(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++out[i];
  return out;
}
}  // namespace

BenchSummary build_benchmark(const KnowledgeGraph& kg, const BenchOptions& opts,
                             const std::filesystem::path& out_dir) {
  BenchSummary sum;
  sum.split = split_inductive(kg, opts.fraction, opts.seed);
  const KnowledgeGraph train_graph = kg.with_triples(sum.split.t_train);
  std::filesystem::create_directories(out_dir);

  const std::size_t S = kAllStructures.size();
  const auto train_counts = spread(opts.train_queries, S);
  const auto eval_counts = spread(opts.eval_queries, S);

  auto run = [&](GroundMode mode, const std::vector<std::size_t>& counts, std::uint64_t stream,
                 const std::vector<std::unordered_set<std::string>>* exclude) {
    std::vector<GroundResult> out(S);
    detail::parallel_for(S, opts.threads, [&](std::size_t i) {
      if (counts[i] == 0) return;
      out[i] = ground_queries(kg, train_graph, sum.split, kAllStructures[i], counts[i], mode,
                              derive_seed({opts.seed, stream}), opts.ground,
                              exclude ? &(*exclude)[i] : nullptr);
    });
    return out;
  };
  auto flatten = [&](std::vector<GroundResult>& parts, const char* name,
                     const std::vector<std::size_t>& counts, std::size_t mult) {
    std::vector<QueryRecord> all;
    for (std::size_t i = 0; i < S; ++i) {
      if (parts[i].exhausted && counts[i] > 0) {
        sum.warnings.push_back(std::string(name) + " " + std::string(to_string(kAllStructures[i])) +
                               ": sampled " + std::to_string(parts[i].records.size()) + " of " +
                               std::to_string(counts[i] * mult) + " requested records");
      }
      for (auto& r : parts[i].records) all.push_back(std::move(r));
    }
    return all;
  };

  auto train_parts = run(GroundMode::Train, train_counts, 1, nullptr);
  // Eval splits never repeat a tuple already used by an earlier split.
  std::vector<std::unordered_set<std::string>> used(S);
  for (std::size_t i = 0; i < S; ++i)
    for (const auto& r : train_parts[i].records) used[i].insert(r.key());
  auto train = flatten(train_parts, "train", train_counts, 1);
  auto valid_parts = run(GroundMode::Eval, eval_counts, 2, &used);
  for (std::size_t i = 0; i < S; ++i)
    for (const auto& r : valid_parts[i].records) used[i].insert(r.key());
  auto valid = flatten(valid_parts, "valid", eval_counts, 3);
  auto test_parts = run(GroundMode::Eval, eval_counts, 3, &used);
  auto test = flatten(test_parts, "test", eval_counts, 3);

  write_split_json(out_dir / "split.json", sum.split);
  write_dataset(out_dir / "train.jsonl", train, DatasetSplit::Train);
  write_dataset(out_dir / "valid.jsonl", valid, DatasetSplit::Valid);
  write_dataset(out_dir / "test.jsonl", test, DatasetSplit::Test);
  kg.write_tsv(out_dir / "graph.tsv");
  kg.write_dicts(out_dir);
  sum.train = train.size();
  sum.valid = valid.size();
  sum.test = test.size();
  return sum;
}

BenchData load_bench(const std::filesystem::path& dir) {
  KnowledgeGraph full = KnowledgeGraph::load_with_dicts(dir);
  InductiveSplit split = read_split_json(dir / "split.json", full);
  KnowledgeGraph train_graph = full.with_triples(split.t_train);
  return BenchData{std::move(full), std::move(train_graph), std::move(split)};
}

}  // namespace proqe
