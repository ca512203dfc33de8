#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "helpers.hpp"
#include "proqe/bench.hpp"
#include "proqe/error.hpp"
#include "proqe/synth.hpp"

using namespace proqe;

namespace {
KnowledgeGraph small_kg() {
  SynthOptions o;
  o.entities = 120;
  o.relations = 6;
  o.clusters = 6;
  o.seed = 1;
  return synthesize_kg(o);
}

BenchOptions small_opts() {
  BenchOptions o;
  o.train_queries = 180;
  o.eval_queries = 45;
  o.seed = 2;
  return o;
}
}  // namespace

TEST_CASE("inductive split sizes and partition") {
  auto kg = small_kg();
  auto s = split_inductive(kg, 0.2, 5);
  CHECK(s.v_test.size() == static_cast<std::size_t>(std::lround(0.2 * 120)));
  CHECK(s.v_train.size() + s.v_test.size() == 120);
  std::vector<EntityId> both;
  std::set_intersection(s.v_train.begin(), s.v_train.end(), s.v_test.begin(), s.v_test.end(),
                        std::back_inserter(both));
  CHECK(both.empty());
  for (const auto& t : s.t_train) CHECK((!s.is_emerging(t.head) && !s.is_emerging(t.tail)));
  for (const auto& t : s.t_aux) CHECK((s.is_emerging(t.head) || s.is_emerging(t.tail)));
  CHECK(s.t_train.size() + s.t_aux.size() == kg.num_triples());

  auto again = split_inductive(kg, 0.2, 5);
  CHECK(again.v_test == s.v_test);
  CHECK(split_inductive(kg, 0.2, 6).v_test != s.v_test);
  CHECK_THROWS_AS(split_inductive(kg, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(split_inductive(kg, 1.0, 1), InvalidArgument);
}

TEST_CASE("split json round trip") {
  testing::TempDir dir;
  auto kg = small_kg();
  auto s = split_inductive(kg, 0.25, 9);
  write_split_json(dir / "split.json", s);
  auto back = read_split_json(dir / "split.json", kg);
  CHECK(back.v_test == s.v_test);
  CHECK(back.v_train == s.v_train);
  CHECK(back.t_train == s.t_train);
}

TEST_CASE("classify") {
  std::vector<std::uint8_t> em{0, 1, 0, 1};
  auto q_seen = instantiate(Structure::P1, std::vector<EntityId>{0}, std::vector<RelationId>{0});
  auto q_em = instantiate(Structure::I2, std::vector<EntityId>{0, 1}, std::vector<RelationId>{0, 0});
  CHECK(classify(q_seen, EntitySet{2}, em) == QueryClass::SS);
  CHECK(classify(q_seen, EntitySet{2, 3}, em) == QueryClass::SE);
  CHECK(classify(q_em, EntitySet{2}, em) == QueryClass::ES);
  CHECK(classify(q_em, EntitySet{3}, em) == QueryClass::EE);
  for (auto c : {QueryClass::EE, QueryClass::ES, QueryClass::SE, QueryClass::SS})
    CHECK(parse_class(to_string(c)) == c);
}

TEST_CASE("records round trip through JSONL") {
  testing::TempDir dir;
  std::vector<QueryRecord> recs;
  recs.push_back({Structure::PI, {3, 1}, {0, 2, 1}, EntitySet{4, 9}, QueryClass::ES});
  recs.push_back({Structure::P1, {0}, {5}, EntitySet{1}, QueryClass::SE});
  write_dataset(dir / "test.jsonl", recs, DatasetSplit::Test);
  CHECK(read_dataset(dir / "test.jsonl") == recs);
  CHECK(from_json_line(to_json_line(recs[0])) == recs[0]);

  write_dataset(dir / "empty.jsonl", {}, DatasetSplit::Valid);
  CHECK(read_dataset(dir / "empty.jsonl").empty());

  std::vector<QueryRecord> ss{{Structure::P1, {0}, {5}, EntitySet{1}, QueryClass::SS}};
  CHECK_THROWS_AS(write_dataset(dir / "bad.jsonl", ss, DatasetSplit::Test), InvalidArgument);
  CHECK_NOTHROW(write_dataset(dir / "train.jsonl", ss, DatasetSplit::Train));

  CHECK_THROWS(from_json_line("{\"structure\": \"2p\"}", 3));
  CHECK_THROWS_AS(read_dataset(dir / "absent.jsonl"), IoError);
}

TEST_CASE("built benchmark respects the protocol") {
  testing::TempDir dir;
  auto kg = small_kg();
  auto opts = small_opts();
  auto summary = build_benchmark(kg, opts, dir.path());
  auto data = load_bench(dir.path());
  CHECK(data.split.v_test == summary.split.v_test);
  CHECK(data.train_graph.num_triples() == data.split.t_train.size());

  auto train = read_dataset(dir / "train.jsonl");
  CHECK(train.size() == summary.train);
  CHECK(!train.empty());
  std::set<std::string> train_keys;
  for (const auto& r : train) {
    CHECK(r.cls == QueryClass::SS);
    auto q = r.graph();
    for (auto a : q.anchors()) CHECK_FALSE(data.split.is_emerging(a));
    CHECK(answer_set(data.train_graph, q) == r.answers);
    train_keys.insert(r.key());
  }

  for (const char* name : {"valid.jsonl", "test.jsonl"}) {
    auto recs = read_dataset(dir / name);
    CHECK(!recs.empty());
    for (const auto& r : recs) {
      CHECK(r.cls != QueryClass::SS);
      auto q = r.graph();
      CHECK(answer_set(data.full, q) == r.answers);
      CHECK(classify(q, r.answers, data.split.emerging) == r.cls);
      // the training graph is a subgraph, so its answers are contained
      auto sub = answer_set(data.train_graph, q);
      CHECK(std::includes(r.answers.begin(), r.answers.end(), sub.begin(), sub.end()));
      CHECK(train_keys.count(r.key()) == 0);
    }
  }
}

TEST_CASE("benchmark output is independent of thread count") {
  testing::TempDir a, b;
  auto kg = small_kg();
  auto o1 = small_opts(), o2 = small_opts();
  o2.threads = 3;
  build_benchmark(kg, o1, a.path());
  build_benchmark(kg, o2, b.path());
  for (const char* f : {"split.json", "train.jsonl", "valid.jsonl", "test.jsonl", "graph.tsv"})
    CHECK(testing::read_text(a / f) == testing::read_text(b / f));
}
