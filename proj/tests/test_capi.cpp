#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "proqe/proqe.h"

namespace fs = std::filesystem;

namespace {
struct Scratch {
  fs::path path;
  explicit Scratch(const char* tag) {
    path = fs::temp_directory_path() / ("proqe_capi_" + std::to_string(::getpid()) + "_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const char* name) const { return (path / name).string(); }
};

std::string take(char* s) {
  std::string out = s ? s : "";
  proqe_free(s);
  return out;
}

proqe_graph* tiny_graph() {
  proqe_synth_options o;
  proqe_synth_options_default(&o);
  o.entities = 60;
  o.relations = 4;
  o.clusters = 4;
  o.seed = 5;
  proqe_graph* g = nullptr;
  REQUIRE(proqe_graph_synthesize(&o, &g) == PROQE_OK);
  return g;
}
}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(proqe_status_name(PROQE_ERR_PARSE)) == "parse error");
  CHECK(std::string(proqe_version()).size() > 0);
}

TEST_CASE("graph loading and lookups") {
  Scratch dir("graph");
  {
    std::ofstream(dir / "g.tsv") << "a\tr\tb\nb\ts\tc\n";
    std::ofstream(dir / "bad.tsv") << "a\tr\n";
  }
  proqe_graph* g = nullptr;
  REQUIRE(proqe_graph_load((dir / "g.tsv").c_str(), &g) == PROQE_OK);
  size_t n = 0, r = 0, t = 0;
  CHECK(proqe_graph_stats(g, &n, &r, &t) == PROQE_OK);
  CHECK(n == 3);
  CHECK(r == 2);
  CHECK(t == 2);

  uint32_t id = 99;
  CHECK(proqe_graph_entity_id(g, "b", &id) == PROQE_OK);
  CHECK(id == 1);
  const char* name = nullptr;
  CHECK(proqe_graph_entity_name(g, 2, &name) == PROQE_OK);
  CHECK(std::string(name) == "c");
  CHECK(proqe_graph_entity_id(g, "zzz", &id) == PROQE_ERR_INVALID);
  CHECK(std::string(proqe_last_error()).find("zzz") != std::string::npos);
  CHECK(proqe_graph_relation_id(g, "s", &id) == PROQE_OK);
  CHECK(id == 1);

  size_t count = 0;
  CHECK(proqe_graph_neighbors(g, 1, nullptr, 0, &count) == PROQE_OK);
  CHECK(count == 2);
  std::vector<proqe_neighbor> buf(count);
  CHECK(proqe_graph_neighbors(g, 1, buf.data(), buf.size(), &count) == PROQE_OK);
  int incoming = 0;
  for (const auto& nb : buf) incoming += nb.incoming;
  CHECK(incoming == 1);

  uint32_t anchors[] = {0}, rels[] = {0, 1}, out[4];
  CHECK(proqe_query_answers(g, "2p", anchors, 1, rels, 2, out, 4, &count) == PROQE_OK);
  CHECK(count == 1);
  CHECK(out[0] == 2);
  CHECK(proqe_query_answers(g, "2p", anchors, 1, rels, 1, out, 4, &count) == PROQE_ERR_INVALID);
  CHECK(proqe_query_answers(g, "9z", anchors, 1, rels, 2, out, 4, &count) == PROQE_ERR_INVALID);

  CHECK(proqe_graph_write_tsv(g, (dir / "copy.tsv").c_str()) == PROQE_OK);
  proqe_graph_free(g);

  proqe_graph* h = nullptr;
  CHECK(proqe_graph_load((dir / "bad.tsv").c_str(), &h) == PROQE_ERR_PARSE);
  CHECK(h == nullptr);
  CHECK(proqe_graph_load((dir / "missing.tsv").c_str(), &h) == PROQE_ERR_IO);
  CHECK(proqe_graph_load(nullptr, &h) == PROQE_ERR_INVALID);
  proqe_graph_free(nullptr);
}

TEST_CASE("serialize through the C API") {
  uint32_t anchors[] = {3, 4}, rels[] = {1, 2};
  char* tokens = nullptr;
  REQUIRE(proqe_query_serialize("2i", anchors, 2, rels, 2, &tokens) == PROQE_OK);
  CHECK(take(tokens) ==
        "[BCK_L1] [BCK_L0] [ENT] [r_1] [MASK] [BCK_R0] [BCK_L0] [ENT] [r_2] [MASK] [BCK_R0] [INT] [MASK] "
        "[BCK_R1] [ENT]");
}

TEST_CASE("bench, train and evaluate end to end") {
  Scratch dir("e2e");
  proqe_graph* g = tiny_graph();
  proqe_bench_options bo;
  proqe_bench_options_default(&bo);
  bo.train_queries = 45;
  bo.eval_queries = 18;
  char* summary = nullptr;
  REQUIRE(proqe_bench_build(g, &bo, (dir / "bench").c_str(), &summary) == PROQE_OK);
  CHECK(take(summary).find("\"train\"") != std::string::npos);
  proqe_graph_free(g);

  struct Count {
    size_t calls = 0;
    double last_loss = 0;
  } cnt;
  auto cb = [](void* u, size_t, double, double loss, double) {
    auto* c = static_cast<Count*>(u);
    ++c->calls;
    c->last_loss = loss;
  };
  const char* cfg = "dim = 8\nheads = 2\nlayers = 1\nmax_len = 24\nneighbor_cap = 4\nbatch_size = 4\nnegatives = 4\n";
  char* tsum = nullptr;
  REQUIRE(proqe_train((dir / "bench").c_str(), cfg, "steps = 3\nlr = 0.001\n", (dir / "run").c_str(), cb, &cnt,
                      &tsum) == PROQE_OK);
  CHECK(cnt.calls == 3);
  CHECK(cnt.last_loss > 0);
  proqe_free(tsum);
  CHECK(proqe_train((dir / "bench").c_str(), "nonsense = 1\n", nullptr, (dir / "bad").c_str(), nullptr, nullptr,
                    nullptr) == PROQE_ERR_INVALID);

  proqe_model* m = nullptr;
  REQUIRE(proqe_model_load((dir / "run/model.ckpt").c_str(), &m) == PROQE_OK);
  char* info = nullptr;
  CHECK(proqe_model_info(m, &info) == PROQE_OK);
  CHECK(take(info).find("\"dim\"") != std::string::npos);

  proqe_eval_options eo;
  proqe_eval_options_default(&eo);
  CHECK(eo.filtered == 1);
  proqe_report* rep = nullptr;
  REQUIRE(proqe_evaluate(m, (dir / "bench").c_str(), (dir / "bench/test.jsonl").c_str(), &eo, &rep) == PROQE_OK);
  double mrr = 0;
  int present = 0;
  CHECK(proqe_report_overall(rep, &mrr, &present) == PROQE_OK);
  CHECK(present == 1);
  CHECK(mrr > 0);
  CHECK(mrr <= 1);
  CHECK(proqe_report_cell(rep, 9, 0, &mrr, &present) == PROQE_OK);
  CHECK(proqe_report_cell(rep, 10, 0, &mrr, &present) == PROQE_ERR_INVALID);
  char* csv = nullptr;
  CHECK(proqe_report_csv(rep, &csv) == PROQE_OK);
  CHECK(take(csv).rfind("structure,EE,ES,SE", 0) == 0);
  char* text = nullptr;
  CHECK(proqe_report_text(rep, &text) == PROQE_OK);
  CHECK(take(text).find("avg") != std::string::npos);
  size_t skipped = 99;
  CHECK(proqe_report_skipped(rep, &skipped) == PROQE_OK);
  proqe_report_free(rep);

  proqe_report* rnd = nullptr;
  REQUIRE(proqe_random_baseline((dir / "bench").c_str(), (dir / "bench/test.jsonl").c_str(), &eo, &rnd) ==
          PROQE_OK);
  CHECK(proqe_report_overall(rnd, &mrr, &present) == PROQE_OK);
  CHECK(mrr < 0.5);
  proqe_report_free(rnd);

  CHECK(proqe_evaluate(m, (dir / "bench").c_str(), (dir / "nope.jsonl").c_str(), &eo, &rep) == PROQE_ERR_IO);
  proqe_model_free(m);
}

TEST_CASE("config defaults and gradcheck") {
  char* defaults = nullptr;
  REQUIRE(proqe_config_defaults(&defaults) == PROQE_OK);
  const auto d = take(defaults);
  CHECK(d.find("lr = ") != std::string::npos);
  CHECK(d.find("dim = 64") != std::string::npos);

  char* report = nullptr;
  int ok = 0;
  REQUIRE(proqe_gradcheck(1, &report, &ok) == PROQE_OK);
  CHECK(ok == 1);
  CHECK(take(report).find("composite") != std::string::npos);
}
