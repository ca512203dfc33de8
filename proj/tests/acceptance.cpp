// Acceptance gate: runs criteria 1-8 and prints one PASS/FAIL line each.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "oracles/brute_force.hpp"
#include "proqe/bench.hpp"
#include "proqe/evaluator.hpp"
#include "proqe/gradcheck.hpp"
#include "proqe/prompt.hpp"
#include "proqe/symbolic.hpp"
#include "proqe/synth.hpp"
#include "proqe/trainer.hpp"

using namespace proqe;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

void log(const std::string& s) { std::fprintf(stderr, "  %s\n", s.c_str()); }

QueryGraph random_query(Structure s, Rng& rng, std::size_t n, std::size_t r, std::vector<EntityId>& a,
                        std::vector<RelationId>& rel) {
  const auto ar = arity(s);
  a.clear();
  rel.clear();
  for (std::size_t i = 0; i < ar.anchors; ++i) a.push_back(static_cast<EntityId>(uniform_index(rng, n)));
  for (std::size_t i = 0; i < ar.relations; ++i) rel.push_back(static_cast<RelationId>(uniform_index(rng, r)));
  return instantiate(s, a, rel);
}

// ---- 1 ------------------------------------------------------------------------

Outcome symbolic_oracle() {
  Rng rng(20240601);
  std::size_t checked = 0, mismatched = 0, nonempty = 0;
  std::vector<EntityId> a;
  std::vector<RelationId> rel;
  for (int g = 0; g < 1000; ++g) {
    const std::size_t n = 2 + uniform_index(rng, 29);  // 2..30
    const std::size_t r = 1 + uniform_index(rng, 6);
    const std::size_t t = 1 + uniform_index(rng, 120);
    auto kg = testing::random_kg(n, r, t, 7000 + g);
    oracle::TripleSet ts(kg.triples());
    for (auto s : kAllStructures) {
      // bias anchors towards heads so that many answer sets are nonempty
      auto q = random_query(s, rng, n, r, a, rel);
      if (uniform01(rng) < 0.7 && kg.num_triples()) {
        for (std::size_t i = 0; i < a.size(); ++i) {
          const auto& tr = kg.triples()[uniform_index(rng, kg.num_triples())];
          a[i] = tr.head;
          if (i < rel.size()) rel[i] = tr.relation;
        }
        q = instantiate(s, a, rel);
      }
      auto got = answer_set(kg, q);
      auto want = oracle::answers(ts, n, s, a, rel);
      ++checked;
      nonempty += !want.empty();
      if (std::vector<EntityId>(got.begin(), got.end()) != want) ++mismatched;
    }
  }
  return {mismatched == 0, fmt("%zu queries, %zu with nonempty answers, %zu mismatches", checked, nonempty,
                               mismatched)};
}

// ---- 2 ------------------------------------------------------------------------

bool sequence_invariants(const TokenSequence& seq, std::size_t anchors) {
  const auto& t = seq.tokens;
  if (t.empty() || !(t.back() == Token::ent())) return false;
  if (seq.answer_position != t.size() - 1) return false;
  if (seq.anchor_positions.size() != anchors || seq.anchors.size() != anchors) return false;
  for (auto p : seq.anchor_positions)
    if (p >= t.size() || !(t[p] == Token::ent())) return false;
  std::vector<std::uint32_t> stack;
  std::size_t ents = 0;
  for (const auto& tok : t) {
    if (tok.kind == TokenKind::Ent) ++ents;
    if (tok.kind == TokenKind::BckL) stack.push_back(tok.value);
    if (tok.kind == TokenKind::BckR) {
      if (stack.empty() || stack.back() != tok.value) return false;
      stack.pop_back();
    }
  }
  return stack.empty() && ents == anchors + 1;
}

Outcome serializer_round_trip() {
  Rng rng(77);
  std::size_t ok = 0, total = 0;
  std::vector<EntityId> a;
  std::vector<RelationId> rel;
  for (int i = 0; i < 500; ++i) {
    const auto s = kAllStructures[i % kAllStructures.size()];
    auto q = random_query(s, rng, 15000, 237, a, rel);
    auto seq = serialize(q);
    ++total;
    bool good = structurally_equal(parse(seq), q) && sequence_invariants(seq, a.size());
    good = good && parse_tokens(render(seq)) == seq.tokens;
    ok += good;
  }
  return {ok == total, fmt("%zu/%zu round trips with all invariants", ok, total)};
}

// ---- 3 ------------------------------------------------------------------------

Outcome gradient_checks() {
  auto results = check_primitives(3);
  results.push_back(check_composite(3, Backbone::Gqe));
  results.push_back(check_composite(3, Backbone::Q2b));
  std::size_t failed = 0;
  double worst = 0.0;
  for (const auto& r : results) {
    if (!r.passed) {
      ++failed;
      log("gradcheck failed: " + r.name + fmt(" rel_err=%.3e", r.rel_error));
    }
    worst = std::max(worst, r.rel_error);
  }
  const auto& gqe = results[results.size() - 2];
  const auto& q2b = results.back();
  return {failed == 0, fmt("%zu checks, worst rel_err %.2e (composite gqe %.2e over %zu scalars, q2b %.2e)",
                           results.size(), worst, gqe.rel_error, gqe.scalars, q2b.rel_error)};
}

// ---- 4 ------------------------------------------------------------------------

Outcome benchmark_builder() {
  SynthOptions so;
  so.entities = 15000;
  so.relations = 237;
  so.clusters = 50;
  so.triples = 310000;
  so.seed = 11;
  auto kg = synthesize_kg(so);
  testing::TempDir dir;
  BenchOptions bo;
  bo.fraction = 0.2;
  bo.seed = 5;
  bo.train_queries = 90000;
  bo.eval_queries = 4500;
  auto t0 = Clock::now();
  auto sum = build_benchmark(kg, bo, dir.path());
  const double build_s = seconds_since(t0);
  auto data = load_bench(dir.path());

  std::vector<std::string> problems;
  const std::size_t want_test = static_cast<std::size_t>(std::lround(0.2 * kg.num_entities()));
  if (data.split.v_test.size() != want_test)
    problems.push_back(fmt("|v_test| = %zu, expected %zu", data.split.v_test.size(), want_test));
  std::size_t touching = 0;
  for (const auto& t : data.split.t_train)
    touching += data.split.is_emerging(t.head) || data.split.is_emerging(t.tail);
  if (touching) problems.push_back(fmt("%zu t_train triples touch v_test", touching));

  std::size_t bad_train = 0;
  auto train = read_dataset(dir / "train.jsonl");
  for (const auto& r : train) {
    bool em = std::any_of(r.anchors.begin(), r.anchors.end(), [&](EntityId e) { return data.split.is_emerging(e); });
    em = em || std::any_of(r.answers.begin(), r.answers.end(), [&](EntityId e) { return data.split.is_emerging(e); });
    bad_train += em;
  }
  if (bad_train) problems.push_back(fmt("%zu train records mention v_test", bad_train));

  std::size_t eval_records = 0, bad_class = 0;
  for (const char* f : {"valid.jsonl", "test.jsonl"})
    for (const auto& r : read_dataset(dir / f)) {
      ++eval_records;
      auto q = r.graph();
      const auto answers = answer_set(data.full, q);
      if (!(answers == r.answers) || classify(q, answers, data.split.emerging) != r.cls) ++bad_class;
    }
  if (bad_class) problems.push_back(fmt("%zu eval records with a wrong class or answer set", bad_class));
  if (train.empty() || eval_records == 0) problems.push_back("empty datasets");

  std::string detail = fmt("%zu entities, %zu triples; |v_test| %zu; train %zu, eval %zu records; build %.1fs",
                           kg.num_entities(), kg.num_triples(), data.split.v_test.size(), train.size(),
                           eval_records, build_s);
  for (const auto& p : problems) detail += "; " + p;
  for (const auto& w : sum.warnings) log("bench warning: " + w);
  return {problems.empty(), detail};
}

// ---- 5, 6, 8: desk-scale training ---------------------------------------------

// Shared fixture: the synthetic benchmark and the trained runs, built once.
struct Desk {
  testing::TempDir dir;
  std::vector<QueryRecord> test;
  double random_mrr = 0.0;
  bool built = false;

  // Fixed hyperparameters of the desk run. The learning rate is raised from
  // the library default because 2,000 steps is a short budget. Prompt weights
  // are softmax-normalized; this only touches prompt-weighted runs.
  static constexpr const char* kConfig =
      "dim = 64\nsteps = 2000\nlr = 0.003\nbatch_size = 32\nnegatives = 32\nmargin = 24\n"
      "normalize_weights = true\n";

  void build() {
    if (built) return;
    SynthOptions so;  // 300 entities, 12 relations, seed 0
    auto kg = synthesize_kg(so);
    BenchOptions bo;
    bo.seed = 0;
    bo.train_queries = 5000;
    bo.eval_queries = 450;
    auto sum = build_benchmark(kg, bo, dir / "bench");
    log(fmt("bench: train %zu, valid %zu, test %zu records", sum.train, sum.valid, sum.test));
    auto data = load_bench(dir / "bench");
    test = read_dataset(dir / "bench" / "test.jsonl");
    random_mrr = *random_baseline(test, data.full.num_entities(), data.split, EvalProtocol{}).overall();
    built = true;
  }

  struct Run {
    double mrr = 0.0;
    std::vector<StepStats> history;
    double seconds = 0.0;
  };

  Run train_eval(const std::string& label, const std::string& extra) {
    build();
    auto t0 = Clock::now();
    auto kv = KeyValueConfig::parse(std::string(kConfig) + extra);
    auto run = train_from_bench(dir / "bench", kv, dir / label);
    auto data = load_bench(dir / "bench");
    auto loaded = Model::load(run.checkpoint);
    auto ev = evaluate_model(loaded.model, data, test, EvalProtocol{});
    Run r{*ev.report.overall(), run.history, seconds_since(t0)};
    log(fmt("%-16s class-average MRR %.4f (%.0fs)", label.c_str(), r.mrr, r.seconds));
    return r;
  }

  std::optional<Run> proqe_seed0;
  const Run& full_seed0() {
    if (!proqe_seed0) proqe_seed0 = train_eval("proqe_s0", "encoder = proqe\nseed = 0\n");
    return *proqe_seed0;
  }
};

Desk& desk() {
  static Desk d;
  return d;
}

Outcome learning_signal() {
  auto& d = desk();
  const auto& pro = d.full_seed0();
  const auto mean = d.train_eval("mean_s0", "encoder = mean\nseed = 0\n");
  const double ratio = pro.mrr / d.random_mrr;
  const bool pass = ratio >= 3.0 && pro.mrr > mean.mrr;
  return {pass, fmt("Pro-QE %.4f, Mean %.4f, random %.4f (%.2fx random); train %.0fs", pro.mrr, mean.mrr,
                    d.random_mrr, ratio, pro.seconds)};
}

Outcome prompt_ablation() {
  auto& d = desk();
  double with = d.full_seed0().mrr, without = 0.0;
  std::string per;
  for (int seed = 0; seed < 3; ++seed) {
    const std::string s = std::to_string(seed);
    if (seed > 0) {
      const auto r = d.train_eval("proqe_s" + s, "encoder = proqe\nseed = " + s + "\n");
      with += r.mrr;
      per += fmt(" s%d %.4f/", seed, r.mrr);
    } else {
      per += fmt(" s0 %.4f/", d.full_seed0().mrr);
    }
    const auto np = d.train_eval("noprompt_s" + s, "encoder = proqe\nuse_prompt = false\nseed = " + s + "\n");
    without += np.mrr;
    per += fmt("%.4f", np.mrr);
  }
  with /= 3;
  without /= 3;
  const double gap = (with - without) * 100.0;
  return {gap >= -1.0, fmt("3-seed mean prompt %.4f vs no-prompt %.4f (%+.2f points; per seed prompt/no-prompt:%s)",
                           with, without, gap, per.c_str())};
}

// ---- 7 ------------------------------------------------------------------------

Outcome evaluator_arithmetic() {
  std::vector<EntityId> ranking(10);
  for (EntityId i = 0; i < 10; ++i) ranking[i] = i;
  struct Case {
    EntitySet answers;
    bool filtered;
    double want;
  };
  const std::vector<Case> cases = {
      {EntitySet{0}, true, 1.0},        {EntitySet{0}, false, 1.0},     {EntitySet{0, 1}, true, 1.0},
      {EntitySet{0, 1}, false, 0.75},   {EntitySet{9}, true, 0.1},      {EntitySet{9}, false, 0.1},
      {EntitySet{1, 4}, true, 0.375},   {EntitySet{1, 4}, false, 0.35},
  };
  std::size_t exact = 0;
  for (const auto& c : cases) exact += std::abs(mrr(ranking, c.answers, c.filtered) - c.want) <= 1e-12;

  // random scores over 500 queries against the analytic expectation
  const std::size_t n = 300;
  InductiveSplit split;
  split.emerging.assign(n, 0);
  split.emerging[299] = 1;
  Rng rng(9);
  std::vector<QueryRecord> recs;
  for (int i = 0; i < 500; ++i) {
    std::vector<EntityId> a;
    const auto k = 1 + uniform_index(rng, 8);
    for (std::size_t j = 0; j < k; ++j) a.push_back(static_cast<EntityId>(uniform_index(rng, n)));
    recs.push_back({Structure::P1, {299}, {0}, EntitySet::from_unsorted(a), QueryClass::ES});
  }
  std::string detail = fmt("%zu/%zu exact cases", exact, cases.size());
  bool within = true;
  for (bool filtered : {true, false}) {
    EvalProtocol prot{filtered, SeRule::Emerging};
    auto scorer = [&](const QueryRecord&, std::size_t i) {
      Rng r(derive_seed({1234, i}));
      std::vector<double> s(n);
      for (auto& x : s) x = uniform01(r);
      return s;
    };
    const double got = *evaluate(recs, n, split, prot, scorer).cells[0][1];
    const double want = *random_baseline(recs, n, split, prot).cells[0][1];
    // standard error from the per-query reciprocal ranks of the same scores
    std::vector<EntityId> cand(n);
    for (EntityId e = 0; e < n; ++e) cand[e] = e;
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const double v = mrr(rank(scorer(recs[i], i), cand), recs[i].answers, filtered);
      sum += v;
      sq += v * v;
    }
    const double N = static_cast<double>(recs.size());
    const double sigma = std::sqrt((sq / N - (sum / N) * (sum / N)) / N);
    within = within && std::abs(sum / N - got) <= 1e-12;
    within = within && std::abs(got - want) <= 3 * sigma;
    detail += fmt("; %s random %.5f vs analytic %.5f (3 sigma %.5f)", filtered ? "filtered" : "raw", got, want,
                  3 * sigma);
  }
  return {exact == cases.size() && within, detail};
}

// ---- 8 ------------------------------------------------------------------------

Outcome loss_sanity() {
  ad::Tape t;
  const double gamma = 24.0;
  auto pos = t.constant(ad::Tensor({1, 1}, gamma));
  auto neg = t.constant(ad::Tensor({32, 1}, gamma));
  const double at_margin = query_loss(pos, neg, gamma).value().item();
  const bool exact = std::abs(at_margin - 2 * std::log(2.0)) <= 1e-12;

  const auto& h = desk().full_seed0().history;
  if (h.size() < 200) return {false, "training history shorter than 200 steps"};
  double first = 0, late = 0;
  for (std::size_t i = 0; i < 10; ++i) first += h[i].loss / 10;
  for (std::size_t i = 190; i < 200; ++i) late += h[i].loss / 10;
  const double drop = 1.0 - late / first;
  return {exact && drop >= 0.5,
          fmt("loss at margin %.15f (2 ln 2 = %.15f); mean loss steps 0-9 %.3f -> 190-199 %.3f (%.0f%% drop)",
              at_margin, 2 * std::log(2.0), first, late, drop * 100)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "symbolic oracle equivalence", 60, symbolic_oracle},
      {2, "serializer round trip", 5, serializer_round_trip},
      {3, "gradient checks", 120, gradient_checks},
      {4, "benchmark builder correctness", 120, benchmark_builder},
      {5, "desk-scale learning signal", 15 * 60, learning_signal},
      {6, "prompt ablation direction", 0, prompt_ablation},
      {7, "evaluator arithmetic", 0, evaluator_arithmetic},
      {8, "loss sanity", 0, loss_sanity},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  std::vector<std::string> lines;
  bool all_pass = true;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    std::fprintf(stderr, "[%d] %s ...\n", c.id, c.name);
    auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = seconds_since(t0);
    const bool in_time = c.budget_s == 0 || s < c.budget_s;
    if (!in_time) o.detail += fmt("; over the %.0fs budget", c.budget_s);
    o.pass = o.pass && in_time;
    all_pass = all_pass && o.pass;
    lines.push_back(fmt("criterion %d %-32s %s  %.1fs  ", c.id, c.name, o.pass ? "PASS" : "FAIL", s) + o.detail);
    std::fprintf(stderr, "%s\n", lines.back().c_str());
  }
  std::printf("\n==== acceptance ====\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  return all_pass ? 0 : 1;
}
