#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <tuple>

#include "helpers.hpp"
#include "proqe/error.hpp"
#include "proqe/model.hpp"

using namespace proqe;
using namespace proqe::ad;

namespace {
ModelConfig small_cfg(Backbone b = Backbone::Gqe, Encoder e = Encoder::ProQE) {
  ModelConfig c;
  c.dim = 8;
  c.heads = 2;
  c.layers = 1;
  c.max_len = 24;
  c.neighbor_cap = 4;
  c.backbone = b;
  c.encoder = e;
  c.init_range = 0.5;
  return c;
}

std::vector<EntityId> all_ids(std::size_t n) {
  std::vector<EntityId> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t({r, c});
  for (auto& x : t.values()) x = uniform01(rng) * 2 - 1;
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}
}  // namespace

TEST_CASE("exchange of a single row is its value projection") {
  Tape t;
  auto E = t.constant(random_matrix(1, 4, 1));
  auto Wq = t.constant(random_matrix(4, 4, 2)), Wk = t.constant(random_matrix(4, 4, 3)),
       Wv = t.constant(random_matrix(4, 4, 4));
  auto out = exchange(E, Wq, Wk, Wv, false).value();
  auto want = matmul(E, Wv).value();
  CHECK(max_abs_diff(out, want) < 1e-12);
}

TEST_CASE("exchange is permutation equivariant") {
  Tape t;
  auto E = random_matrix(5, 4, 9);
  auto Wq = t.constant(random_matrix(4, 4, 2)), Wk = t.constant(random_matrix(4, 4, 3)),
       Wv = t.constant(random_matrix(4, 4, 4));
  std::vector<std::uint32_t> perm{3, 0, 4, 1, 2};
  auto out = exchange(t.constant(E), Wq, Wk, Wv, false);
  auto permuted_in = gather_rows(t.constant(E), perm);
  auto out_p = exchange(permuted_in, Wq, Wk, Wv, false).value();
  auto want = gather_rows(out, perm).value();
  CHECK(max_abs_diff(out_p, want) < 1e-12);
}

TEST_CASE("aggregate") {
  Tape t;
  auto E = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  // no prompt: uniform average
  CHECK(aggregate(E, std::nullopt, false).value().values() == std::vector<double>{0.5, 0.5});
  // alpha = E p^T: p = [2, 3] weights rows by 2 and 3
  CHECK(aggregate(E, t.constant(Tensor::row({2, 3})), false).value().values() == std::vector<double>{2, 3});
  // linear in p without normalization
  auto E2 = t.constant(random_matrix(3, 4, 5));
  auto p = random_matrix(1, 4, 6);
  auto a1 = aggregate(E2, t.constant(p), false).value();
  auto a3 = aggregate(E2, scale(t.constant(p), 3), false).value();
  for (std::size_t i = 0; i < 4; ++i) CHECK(a3[i] == doctest::Approx(3 * a1[i]));
  // a prompt orthogonal to every row gives zero
  auto Eo = t.constant(Tensor::matrix(2, 3, {1, 0, 0, 2, 0, 0}));
  for (double v : aggregate(Eo, t.constant(Tensor::row({0, 1, 1})), false).value().values()) CHECK(v == 0);
  // normalized weights sum to one: equal scores give the mean
  auto n = aggregate(E, t.constant(Tensor::row({1, 1})), true).value();
  CHECK(n[0] == doctest::Approx(0.5));
}

TEST_CASE("gather_context follows the neighborhood") {
  // e0 has out-edges r0->e1, r0->e2, r1->e3 and in-edge r1 from e4; e5 unseen
  auto kg = KnowledgeGraph(Vocab::numbered("e", 6), Vocab::numbered("r", 2),
                           {{0, 0, 1}, {0, 0, 2}, {0, 1, 3}, {4, 1, 0}, {0, 1, 5}});
  Model m(small_cfg(), 6, 2, {0, 1, 2, 3, 4});
  auto c = gather_context(kg, m, 0, 100, 0);
  CHECK(c.local_ent.size() == 4);  // unseen e5 dropped
  CHECK(c.local_ent.size() == c.local_rel.size());
  // outgoing edges carry the inverse slot R + r, incoming the plain slot
  std::multiset<std::uint32_t> rels(c.local_rel.begin(), c.local_rel.end());
  CHECK(rels == std::multiset<std::uint32_t>{2, 2, 3, 1});
  // global rows: e0 heads r0 and r1, tails r1; deduplicated
  CHECK(c.global == std::vector<std::uint32_t>{0, 1, 3});

  auto capped = gather_context(kg, m, 0, 2, 7);
  CHECK(capped.local_ent.size() == 2);
  auto again = gather_context(kg, m, 0, 2, 7);
  CHECK(again.local_ent == capped.local_ent);
  CHECK(gather_context(kg, m, 5, 4, 0).local_ent.size() == 1);
}

TEST_CASE("GQE projection translates the anchor") {
  auto kg = testing::random_kg(10, 3, 30, 2);
  Model m(small_cfg(), 10, 3, all_ids(10));
  Tape t;
  Forward fw(m, t);
  fw.prepare(kg, all_ids(10), 0);
  auto rep = fw.represent(4, std::nullopt);
  std::vector<Var> reps{rep};
  auto qe = fw.embed_query(instantiate(Structure::P1, std::vector<EntityId>{4}, std::vector<RelationId>{2}), reps);
  REQUIRE(qe.conjuncts.size() == 1);
  const auto& rel = m.param("rel").value;
  for (std::size_t c = 0; c < 8; ++c)
    CHECK(qe.conjuncts[0].center.value()[c] == doctest::Approx(rep.value()[c] + rel.at(2, c)));
  auto d = fw.distances(qe, qe.conjuncts[0].center).value();
  CHECK(d.item() == 0.0);
}

TEST_CASE("intersection ignores operand order") {
  for (auto b : {Backbone::Gqe, Backbone::Q2b}) {
    Model m(small_cfg(b), 10, 3, all_ids(10));
    Tape t;
    Forward fw(m, t);
    auto q = instantiate(Structure::I2, std::vector<EntityId>{1, 2}, std::vector<RelationId>{0, 0});
    auto x = t.constant(random_matrix(1, 8, 1)), y = t.constant(random_matrix(1, 8, 2));
    std::vector<Var> xy{x, y}, yx{y, x};
    auto a = fw.embed_query(q, xy), c = fw.embed_query(q, yx);
    CHECK(max_abs_diff(a.conjuncts[0].center.value(), c.conjuncts[0].center.value()) < 1e-12);
    if (b == Backbone::Q2b)
      CHECK(max_abs_diff(a.conjuncts[0].offset->value(), c.conjuncts[0].offset->value()) < 1e-12);
  }
}

TEST_CASE("union queries give one conjunct per branch; negation is refused") {
  Model m(small_cfg(), 10, 3, all_ids(10));
  Tape t;
  Forward fw(m, t);
  auto x = t.constant(random_matrix(1, 8, 1)), y = t.constant(random_matrix(1, 8, 2));
  std::vector<Var> reps{x, y};
  auto up = instantiate(Structure::UP, std::vector<EntityId>{1, 2}, std::vector<RelationId>{0, 1, 2});
  CHECK(fw.embed_query(up, reps).conjuncts.size() == 2);

  QueryGraph neg;
  auto a = neg.add_anchor(1);
  neg.set_answer(neg.add_negation(neg.add_projection(a, 0)));
  std::vector<Var> one{x};
  CHECK_THROWS_AS(fw.embed_query(neg, one), QueryError);
}

TEST_CASE("Q2B distance is small inside the box and grows outside") {
  auto cfg = small_cfg(Backbone::Q2b);
  Model m(cfg, 10, 3, all_ids(10));
  Tape t;
  Forward fw(m, t);
  auto x = t.constant(random_matrix(1, 8, 3));
  std::vector<Var> reps{x};
  auto qe = fw.embed_query(instantiate(Structure::P1, std::vector<EntityId>{1}, std::vector<RelationId>{1}), reps);
  const auto center = qe.conjuncts[0].center.value();
  const auto offset = qe.conjuncts[0].offset->value();
  Tensor cand({3, 8});
  for (std::size_t c = 0; c < 8; ++c) {
    cand.at(0, c) = center[c];
    cand.at(1, c) = center[c] + 0.5 * offset[c];
    cand.at(2, c) = center[c] + offset[c] + 1.0;
  }
  auto d = fw.distances(qe, t.constant(cand)).value();
  CHECK(d[0] == 0.0);
  double half = 0;
  for (std::size_t c = 0; c < 8; ++c) half += 0.5 * offset[c];
  CHECK(d[1] == doctest::Approx(cfg.inside_weight * half));
  double out_want = 8.0;
  for (std::size_t c = 0; c < 8; ++c) out_want += cfg.inside_weight * offset[c];
  CHECK(d[2] == doctest::Approx(out_want));
}

TEST_CASE("mean encoder averages seen neighbor embeddings") {
  auto kg = KnowledgeGraph(Vocab::numbered("e", 5), Vocab::numbered("r", 1), {{0, 0, 1}, {2, 0, 0}, {0, 0, 4}});
  Model m(small_cfg(Backbone::Gqe, Encoder::Mean), 5, 1, {0, 1, 2, 3});
  Tape t;
  Forward fw(m, t);
  std::vector<EntityId> ids{0, 4};
  fw.prepare(kg, ids, 0);
  auto rep = fw.represent(0, std::nullopt).value();
  const auto& tab = m.param("ent_in").value;
  for (std::size_t c = 0; c < 8; ++c)
    CHECK(rep[c] == doctest::Approx((tab.at(m.row(1), c) + tab.at(m.row(2), c)) / 2));
  // e4's only neighbor is e0
  auto rep4 = fw.represent(4, std::nullopt).value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(rep4[c] == tab.at(m.row(0), c));
}

TEST_CASE("feature_match agrees with a brute-force overlap count") {
  Rng rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    auto full = testing::random_kg(10, 2, 25, 300 + rep);
    std::vector<std::uint8_t> seen(10, 1);
    seen[7] = seen[8] = seen[9] = 0;
    std::vector<Triple> kept;
    for (const auto& tr : full.triples())
      if (seen[tr.head] && seen[tr.tail]) kept.push_back(tr);
    KnowledgeGraph train(Vocab::numbered("e", 10), Vocab::numbered("r", 2), kept);
    using Feat = std::tuple<RelationId, EntityId, bool>;  // (r, other end, e is head)
    auto feats = [](const KnowledgeGraph& g, EntityId e) {
      std::set<Feat> f;
      for (const auto& tr : g.triples()) {
        if (tr.head == e) f.insert({tr.relation, tr.tail, true});
        if (tr.tail == e) f.insert({tr.relation, tr.head, false});
      }
      return f;
    };
    for (EntityId e = 7; e < 10; ++e) {
      const auto fe = feats(full, e);
      std::optional<EntityId> best;
      std::size_t best_n = 0;
      for (EntityId s = 0; s < 10; ++s) {
        if (!seen[s]) continue;
        std::size_t n = 0;
        for (const auto& f : feats(train, s)) n += fe.count(f);
        if (n > best_n) {
          best = s;
          best_n = n;
        }
      }
      CHECK(feature_match(train, full, seen, e) == best);
    }
  }
}

TEST_CASE("encode_prompt shape, determinism and sensitivity to relations") {
  Model m(small_cfg(), 10, 3, all_ids(10));
  auto seq = serialize(instantiate(Structure::P2, std::vector<EntityId>{1}, std::vector<RelationId>{0, 1}));
  auto seq2 = serialize(instantiate(Structure::P2, std::vector<EntityId>{1}, std::vector<RelationId>{0, 2}));
  Tape t;
  Forward fw(m, t);
  auto a = fw.encode_prompt(seq).value();
  CHECK(a.shape() == Shape{seq.tokens.size(), 8});
  CHECK(a.all_finite());
  CHECK(fw.encode_prompt(seq).value().values() == a.values());
  CHECK(max_abs_diff(fw.encode_prompt(seq2).value(), a) > 1e-9);
  // causal: the prefix before the changed relation is unaffected
  auto b = fw.encode_prompt(seq2).value();
  for (std::size_t c = 0; c < 8; ++c) CHECK(b.at(0, c) == a.at(0, c));

  Model tiny([] {
    auto c = small_cfg();
    c.max_len = 4;
    return c;
  }(), 10, 3, all_ids(10));
  Tape t2;
  Forward fw2(tiny, t2);
  CHECK_THROWS_AS(fw2.encode_prompt(seq), InvalidArgument);
}

TEST_CASE("context cache matches the taped representation") {
  auto kg = testing::random_kg(12, 3, 40, 4);
  for (auto enc : {Encoder::ProQE, Encoder::Mean}) {
    Model m(small_cfg(Backbone::Gqe, enc), 12, 3, {0, 1, 2, 3, 4, 5, 6, 7, 8});
    ContextCache cache(m, kg, 5);
    Tape t;
    Forward fw(m, t);
    fw.prepare(kg, all_ids(12), 5);
    auto p = random_matrix(1, 8, 11);
    for (EntityId e = 0; e < 12; ++e) {
      auto want = fw.represent(e, t.constant(p)).value();
      CHECK(max_abs_diff(cache.represent(e, p.data()), want) < 1e-10);
      CHECK(want.all_finite());
    }
  }
}

TEST_CASE("save and load round trip") {
  testing::TempDir dir;
  auto cfg = small_cfg(Backbone::Q2b);
  cfg.seed = 3;
  Model m(cfg, 10, 3, {0, 2, 4, 6});
  m.save(dir / "m.ckpt", {{"note", "x"}});
  auto back = Model::load(dir / "m.ckpt");
  CHECK(back.extra["note"] == "x");
  CHECK(back.model.config().backbone == Backbone::Q2b);
  CHECK(std::vector<EntityId>(back.model.seen().begin(), back.model.seen().end()) ==
        std::vector<EntityId>{0, 2, 4, 6});
  REQUIRE(back.model.params().size() == m.params().size());
  for (std::size_t i = 0; i < m.params().size(); ++i)
    CHECK(back.model.params()[i].value.values() == m.params()[i].value.values());
  CHECK_THROWS_AS(m.param("nope"), InvalidArgument);
}
