// Command-line front end. Talks to the library only through proqe.h.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "proqe/proqe.h"

namespace {

// Failure inside the library or the file system: exit code 1.
struct RuntimeFailure {
  std::string message;
};

void check(proqe_status s, const std::string& what) {
  if (s != PROQE_OK)
    throw RuntimeFailure{what + ": " + proqe_status_name(s) + ": " + proqe_last_error()};
}

// Owns a malloc'ed string from the library.
struct OwnedString {
  char* p = nullptr;
  ~OwnedString() { proqe_free(p); }
  std::string str() const { return p ? p : ""; }
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure{"cannot read " + path};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw RuntimeFailure{"cannot write " + path.string()};
}

struct GraphHandle {
  proqe_graph* g = nullptr;
  ~GraphHandle() { proqe_graph_free(g); }
};

// ---- subcommands ------------------------------------------------------------

struct SynthArgs {
  proqe_synth_options o{};
  std::string out;
};

int run_synth(const SynthArgs& a) {
  GraphHandle g;
  check(proqe_graph_synthesize(&a.o, &g.g), "synth-kg");
  check(proqe_graph_write_tsv(g.g, a.out.c_str()), "synth-kg");
  size_t n = 0, r = 0, t = 0;
  check(proqe_graph_stats(g.g, &n, &r, &t), "synth-kg");
  std::fprintf(stderr, "wrote %s: %zu entities, %zu relations, %zu triples\n", a.out.c_str(), n, r, t);
  return 0;
}

struct BenchArgs {
  proqe_bench_options o{};
  std::string triples, out;
};

int run_bench(const BenchArgs& a) {
  GraphHandle g;
  check(proqe_graph_load(a.triples.c_str(), &g.g), "build-bench");
  OwnedString summary;
  check(proqe_bench_build(g.g, &a.o, a.out.c_str(), &summary.p), "build-bench");
  std::fprintf(stderr, "%s\n", summary.str().c_str());
  return 0;
}

struct QueryArgs {
  std::string triples, tag;
  std::vector<uint32_t> anchors, relations;
};

int run_ground(const QueryArgs& a) {
  GraphHandle g;
  check(proqe_graph_load(a.triples.c_str(), &g.g), "ground");
  size_t count = 0;
  check(proqe_query_answers(g.g, a.tag.c_str(), a.anchors.data(), a.anchors.size(),
                            a.relations.data(), a.relations.size(), nullptr, 0, &count),
        "ground");
  std::vector<uint32_t> ans(count);
  check(proqe_query_answers(g.g, a.tag.c_str(), a.anchors.data(), a.anchors.size(),
                            a.relations.data(), a.relations.size(), ans.data(), ans.size(), &count),
        "ground");
  for (auto e : ans) {
    const char* name = nullptr;
    check(proqe_graph_entity_name(g.g, e, &name), "ground");
    std::printf("%u\t%s\n", e, name);
  }
  std::fprintf(stderr, "%zu answer(s)\n", count);
  return 0;
}

int run_serialize(const QueryArgs& a) {
  OwnedString tokens;
  check(proqe_query_serialize(a.tag.c_str(), a.anchors.data(), a.anchors.size(),
                              a.relations.data(), a.relations.size(), &tokens.p),
        "serialize");
  std::printf("%s\n", tokens.str().c_str());
  return 0;
}

struct TrainArgs {
  std::string data, config, out, resume;
  std::vector<std::string> set;
  double lr = 0;
  std::size_t steps = 0, batch_size = 0, negatives = 0, dim = 0, neighbor_cap = 0, threads = 1;
  double margin = 0;
  std::string backbone, encoder;
  uint64_t seed = 0;
  std::size_t log_every = 100;
};

void step_logger(void* user, size_t step, double lr, double loss, double sample_loss) {
  const auto every = *static_cast<std::size_t*>(user);
  if (every && step % every == 0)
    std::fprintf(stderr, "step %zu lr %.3g loss %.6f sample_loss %.6f\n", step, lr, loss, sample_loss);
}

int run_train(const TrainArgs& a, const CLI::App& sub) {
  const std::string config = a.config.empty() ? std::string() : read_file(a.config);
  std::ostringstream ov;
  auto given = [&](const char* flag) { return sub.count(flag) > 0; };
  if (given("--lr")) ov << "lr = " << CLI::detail::to_string(a.lr) << "\n";
  if (given("--steps")) ov << "steps = " << a.steps << "\n";
  if (given("--batch-size")) ov << "batch_size = " << a.batch_size << "\n";
  if (given("--negatives")) ov << "negatives = " << a.negatives << "\n";
  if (given("--margin")) ov << "margin = " << CLI::detail::to_string(a.margin) << "\n";
  if (given("--dim")) ov << "dim = " << a.dim << "\n";
  if (given("--neighbor-cap")) ov << "neighbor_cap = " << a.neighbor_cap << "\n";
  if (given("--backbone")) ov << "backbone = " << a.backbone << "\n";
  if (given("--encoder")) ov << "encoder = " << a.encoder << "\n";
  if (given("--seed")) ov << "seed = " << a.seed << "\n";
  if (given("--resume")) ov << "resume = " << a.resume << "\n";
  if (given("--threads")) ov << "threads = " << a.threads << "\n";
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + kv + "'");
    ov << kv.substr(0, eq) << " = " << kv.substr(eq + 1) << "\n";
  }
  std::filesystem::create_directories(a.out);
  std::size_t every = a.log_every;
  OwnedString summary;
  check(proqe_train(a.data.c_str(), config.c_str(), ov.str().c_str(), a.out.c_str(), step_logger,
                    &every, &summary.p),
        "train");
  std::fprintf(stderr, "%s\n", summary.str().c_str());
  return 0;
}

struct EvalArgs {
  std::string checkpoint, test, data, out = ".", se_rule = "emerging";
  bool unfiltered = false, random = false;
  std::size_t threads = 1;
};

int run_eval(const EvalArgs& a) {
  if (a.checkpoint.empty() && !a.random)
    throw CLI::ValidationError("--checkpoint", "required unless --random-baseline is given");
  const std::string data =
      a.data.empty() ? std::filesystem::path(a.test).parent_path().string() : a.data;
  proqe_eval_options o;
  proqe_eval_options_default(&o);
  o.filtered = a.unfiltered ? 0 : 1;
  o.se_rule = a.se_rule == "seen" ? PROQE_SE_SEEN : PROQE_SE_EMERGING;
  o.threads = a.threads;

  proqe_report* rep = nullptr;
  if (a.random) {
    check(proqe_random_baseline(data.empty() ? "." : data.c_str(), a.test.c_str(), &o, &rep), "eval");
  } else {
    proqe_model* m = nullptr;
    check(proqe_model_load(a.checkpoint.c_str(), &m), "eval");
    const auto s = proqe_evaluate(m, data.empty() ? "." : data.c_str(), a.test.c_str(), &o, &rep);
    proqe_model_free(m);
    check(s, "eval");
  }
  OwnedString csv, text;
  size_t skipped = 0;
  const auto s1 = proqe_report_csv(rep, &csv.p);
  const auto s2 = proqe_report_text(rep, &text.p);
  proqe_report_skipped(rep, &skipped);
  proqe_report_free(rep);
  check(s1, "eval");
  check(s2, "eval");
  std::filesystem::create_directories(a.out);
  write_file(std::filesystem::path(a.out) / "report.csv", csv.str());
  write_file(std::filesystem::path(a.out) / "report.txt", text.str());
  std::printf("%s", text.str().c_str());
  if (skipped) std::fprintf(stderr, "%zu quer%s skipped (empty answer set under the protocol)\n",
                            skipped, skipped == 1 ? "y" : "ies");
  return 0;
}

int run_gradcheck(uint64_t seed) {
  OwnedString report;
  int ok = 0;
  check(proqe_gradcheck(seed, &report.p, &ok), "gradcheck");
  std::printf("%s", report.str().c_str());
  if (!ok) {
    std::fprintf(stderr, "gradient check failed\n");
    return 1;
  }
  return 0;
}

const std::vector<std::string> kTags = {"1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up"};

void add_query_flags(CLI::App* sub, QueryArgs& q) {
  sub->add_option("--tag", q.tag, "Query structure")->required()->check(CLI::IsMember(kTags));
  sub->add_option("--anchors", q.anchors, "Anchor entity ids in flat order")->required();
  sub->add_option("--relations", q.relations, "Relation ids in flat order")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inductive logical query answering over knowledge graphs", "proqe"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(proqe_version()));

  SynthArgs synth;
  proqe_synth_options_default(&synth.o);
  auto* s_synth = app.add_subcommand("synth-kg", "Write the deterministic clustered synthetic graph");
  s_synth->add_option("--entities", synth.o.entities, "Number of entities");
  s_synth->add_option("--relations", synth.o.relations, "Number of relations");
  s_synth->add_option("--clusters", synth.o.clusters, "Number of entity clusters");
  s_synth->add_option("--sources-per-relation", synth.o.sources_per_relation,
                      "Source clusters per relation");
  s_synth->add_option("--triples", synth.o.triples, "Triple count (0: 8 per entity)");
  s_synth->add_option("--seed", synth.o.seed, "Random seed");
  s_synth->add_option("--out", synth.out, "Output TSV path")->required();

  BenchArgs bench;
  proqe_bench_options_default(&bench.o);
  auto* s_bench = app.add_subcommand("build-bench", "Split a triple file and ground query datasets");
  s_bench->add_option("--triples", bench.triples, "Input TSV (head, relation, tail)")->required();
  s_bench->add_option("--fraction", bench.o.fraction, "Fraction of entities held out as emerging")
      ->check(CLI::Range(0.0, 1.0));
  s_bench->add_option("--seed", bench.o.seed, "Random seed");
  s_bench->add_option("--train-queries", bench.o.train_queries, "Training queries over all structures");
  s_bench->add_option("--eval-queries", bench.o.eval_queries,
                      "Queries per class for each of valid and test");
  s_bench->add_option("--threads", bench.o.threads, "Worker threads")->check(CLI::PositiveNumber);
  s_bench->add_option("--out", bench.out, "Output directory")->required();

  QueryArgs ground;
  auto* s_ground = app.add_subcommand("ground", "Answer one query symbolically");
  s_ground->add_option("--triples", ground.triples, "Input TSV or benchmark directory")->required();
  add_query_flags(s_ground, ground);

  QueryArgs ser;
  auto* s_ser = app.add_subcommand("serialize", "Print the token sequence of a query");
  add_query_flags(s_ser, ser);

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Train a model on a benchmark directory");
  s_train->add_option("--data", train.data, "Benchmark directory from build-bench")->required();
  s_train->add_option("--config", train.config, "Config file of key = value lines");
  s_train->add_option("--out", train.out, "Output directory for model.ckpt and train_log.csv")
      ->required();
  s_train->add_option("--lr", train.lr, "Learning rate (overrides config)")->default_str("1e-4");
  s_train->add_option("--steps", train.steps, "Optimizer steps (overrides config)")->default_str("1000");
  s_train->add_option("--batch-size", train.batch_size, "Queries per step (overrides config)")
      ->default_str("32");
  s_train->add_option("--negatives", train.negatives, "Negatives per query (overrides config)")
      ->default_str("32");
  s_train->add_option("--margin", train.margin, "Margin gamma (overrides config)")->default_str("24");
  s_train->add_option("--dim", train.dim, "Embedding width (overrides config)")->default_str("64");
  s_train->add_option("--neighbor-cap", train.neighbor_cap, "Context neighbor cap (overrides config)")
      ->default_str("32");
  s_train->add_option("--backbone", train.backbone, "gqe or q2b (overrides config)")
      ->check(CLI::IsMember({"gqe", "q2b"}))
      ->default_str("gqe");
  s_train->add_option("--encoder", train.encoder, "proqe, mean or feature (overrides config)")
      ->check(CLI::IsMember({"proqe", "mean", "feature"}))
      ->default_str("proqe");
  s_train->add_option("--seed", train.seed, "Random seed (overrides config)");
  s_train->add_option("--resume", train.resume, "Checkpoint to resume from")->default_str("");
  s_train->add_option("--set", train.set, "Extra key=value config entries")->default_str("");
  s_train->add_option("--threads", train.threads, "Worker threads")->check(CLI::PositiveNumber);
  s_train->add_option("--log-every", train.log_every, "Progress line interval (0: quiet)");

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a query file");
  s_eval->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->default_str("");
  s_eval->add_option("--test", ev.test, "Query file (JSONL)")->required();
  s_eval->add_option("--data", ev.data, "Benchmark directory (default: directory of --test)")
      ->default_str("");
  s_eval->add_option("--out", ev.out, "Directory for report.csv and report.txt");
  s_eval->add_option("--se-rule", ev.se_rule, "Answer set for SE queries")
      ->check(CLI::IsMember({"emerging", "seen"}));
  s_eval->add_flag("--unfiltered", ev.unfiltered, "Count other answers ranked above an answer");
  s_eval->add_flag("--random-baseline", ev.random, "Report the analytic random-ranking MRR instead");
  s_eval->add_option("--threads", ev.threads, "Worker threads")->check(CLI::PositiveNumber);

  uint64_t gc_seed = 0;
  auto* s_gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  s_gc->add_option("--seed", gc_seed, "Random seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*s_synth) return run_synth(synth);
    if (*s_bench) return run_bench(bench);
    if (*s_ground) return run_ground(ground);
    if (*s_ser) return run_serialize(ser);
    if (*s_train) return run_train(train, *s_train);
    if (*s_eval) return run_eval(ev);
    if (*s_gc) return run_gradcheck(gc_seed);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const RuntimeFailure& e) {
    std::fprintf(stderr, "error: %s\n", e.message.c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
