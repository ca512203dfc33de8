#include "proqe/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "parallel.hpp"
#include "proqe/error.hpp"
#include "proqe/evaluator.hpp"

namespace proqe {

using ad::Tensor;
using ad::Var;

namespace {
constexpr std::array<std::string_view, 11> kTrainKeys = {
    "lr",   "steps",   "batch_size", "negatives",        "margin",      "seed",
    "threads", "checkpoint_every", "valid_every", "batch_weight", "resume"};

std::size_t positive(const KeyValueConfig& kv, std::string_view key, std::size_t fallback) {
  const auto v = kv.get_int(key, static_cast<long long>(fallback));
  if (v <= 0) throw InvalidArgument("config key '" + std::string(key) + "' must be positive");
  return static_cast<std::size_t>(v);
}
}  // namespace

std::span<const std::string_view> train_config_keys() { return kTrainKeys; }

TrainConfig TrainConfig::from(const KeyValueConfig& kv) {
  TrainConfig c;
  c.lr = kv.get_double("lr", c.lr);
  c.steps = positive(kv, "steps", c.steps);
  c.batch_size = positive(kv, "batch_size", c.batch_size);
  c.negatives = positive(kv, "negatives", c.negatives);
  c.margin = kv.get_double("margin", c.margin);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  c.threads = positive(kv, "threads", c.threads);
  const auto every = kv.get_int("checkpoint_every", 0);
  if (every < 0) throw InvalidArgument("checkpoint_every must be non-negative");
  c.checkpoint_every = static_cast<std::size_t>(every);
  const auto vevery = kv.get_int("valid_every", 0);
  if (vevery < 0) throw InvalidArgument("valid_every must be non-negative");
  c.valid_every = static_cast<std::size_t>(vevery);
  const auto w = kv.get_string("batch_weight", "sqrt");
  if (w == "sqrt") c.weight = BatchWeight::Sqrt;
  else if (w == "inv_sqrt") c.weight = BatchWeight::InvSqrt;
  else throw InvalidArgument("batch_weight must be sqrt or inv_sqrt, got '" + w + "'");
  c.validate();
  return c;
}

void TrainConfig::write(KeyValueConfig& kv) const {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", lr);
  kv.set("lr", buf);
  kv.set("steps", std::to_string(steps));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("negatives", std::to_string(negatives));
  std::snprintf(buf, sizeof(buf), "%.17g", margin);
  kv.set("margin", buf);
  kv.set("seed", std::to_string(seed));
  kv.set("threads", std::to_string(threads));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("valid_every", std::to_string(valid_every));
  kv.set("batch_weight", weight == BatchWeight::Sqrt ? "sqrt" : "inv_sqrt");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw InvalidArgument("lr must be positive");
  if (!(margin > 0)) throw InvalidArgument("margin must be positive");
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
  return step >= cfg.steps / 2 ? cfg.lr / 2 : cfg.lr;
}

std::vector<EntityId> sample_negatives(std::span<const EntityId> pool, const EntitySet& answers,
                                       std::size_t k, Rng& rng) {
  std::vector<EntityId> cand;
  cand.reserve(pool.size());
  for (auto e : pool)
    if (!answers.contains(e)) cand.push_back(e);
  if (cand.size() < k)
    throw InvalidArgument("cannot draw " + std::to_string(k) + " negatives from " +
                          std::to_string(cand.size()) + " candidates");
  for (std::size_t i = 0; i < k; ++i) std::swap(cand[i], cand[i + uniform_index(rng, cand.size() - i)]);
  cand.resize(k);
  return cand;
}

std::vector<EntityId> sample_negatives(const KnowledgeGraph& kg, const EntitySet& answers,
                                       std::size_t k, std::uint64_t seed) {
  std::vector<EntityId> pool(kg.num_entities());
  for (EntityId e = 0; e < pool.size(); ++e) pool[e] = e;
  Rng rng(derive_seed({seed, 0x4e47}));
  return sample_negatives(pool, answers, k, rng);
}

Var query_loss(Var d_pos, Var d_neg, double gamma) {
  Var pos = ad::neg(ad::log_sigmoid(ad::add_scalar(ad::neg(d_pos), gamma)));
  Var neg = ad::neg(ad::reduce_mean(ad::log_sigmoid(ad::add_scalar(d_neg, -gamma))));
  return ad::add(ad::reduce_sum(pos), neg);
}

Var batch_loss(std::span<const Var> losses, std::span<const std::size_t> answer_sizes,
               BatchWeight weight) {
  if (losses.empty()) throw InvalidArgument("batch_loss: empty batch");
  if (losses.size() != answer_sizes.size())
    throw InvalidArgument("batch_loss: " + std::to_string(losses.size()) + " losses but " +
                          std::to_string(answer_sizes.size()) + " answer sizes");
  std::optional<Var> total;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (answer_sizes[i] == 0) throw InvalidArgument("batch_loss: empty answer set");
    const double root = std::sqrt(static_cast<double>(answer_sizes[i]));
    Var term = ad::scale(losses[i], weight == BatchWeight::Sqrt ? root : 1.0 / root);
    total = total ? ad::add(*total, term) : term;
  }
  return *total;
}

// ---- trainer ----------------------------------------------------------------

Trainer::Trainer(Model& model, const KnowledgeGraph& graph, std::vector<QueryRecord> data,
                 TrainConfig cfg)
    : model_(model), graph_(graph), data_(std::move(data)), cfg_(cfg) {
  cfg_.validate();
  if (data_.empty()) throw InvalidArgument("training set is empty");
  if (model_.seen().size() < cfg_.negatives + 1)
    throw InvalidArgument("not enough seen entities for " + std::to_string(cfg_.negatives) +
                          " negatives");
  graphs_.reserve(data_.size());
  for (const auto& r : data_) graphs_.push_back(r.graph());
}

const std::vector<std::size_t>& Trainer::epoch_order(std::size_t epoch) {
  if (epoch != cached_epoch_) {
    order_.resize(data_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(derive_seed({cfg_.seed, 0xe70c, epoch}));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng, i)]);
    cached_epoch_ = epoch;
  }
  return order_;
}

std::vector<Trainer::Sample> Trainer::batch_for(std::size_t step) {
  std::vector<Sample> out;
  const std::size_t n = data_.size();
  for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
    const std::size_t pos = step * cfg_.batch_size + i;
    const std::size_t rec = epoch_order(pos / n)[pos % n];
    Rng rng(derive_seed({cfg_.seed, 0x5a4d, step, i}));
    const auto& ans = data_[rec].answers.members();
    Sample s{rec, ans[uniform_index(rng, ans.size())], {}};
    s.negatives = sample_negatives(model_.seen(), data_[rec].answers, cfg_.negatives, rng);
    out.push_back(std::move(s));
  }
  return out;
}

StepStats Trainer::step() {
  const auto batch = batch_for(step_);
  const std::size_t shards = std::max<std::size_t>(1, std::min(cfg_.threads, batch.size()));
  auto& params = model_.params();
  const std::uint64_t ctx_seed = derive_seed({cfg_.seed, 0xc0, step_});

  struct ShardOut {
    std::vector<Tensor> grads;
    double loss = 0.0;
    std::vector<double> sample_losses;
  };
  std::vector<ShardOut> outs(shards);
  detail::parallel_for(shards, cfg_.threads, [&](std::size_t s) {
    const std::size_t b = batch.size() * s / shards, e = batch.size() * (s + 1) / shards;
    ad::Tape tape;
    Forward fw(model_, tape);
    std::vector<EntityId> ents;
    for (std::size_t i = b; i < e; ++i) {
      const auto& smp = batch[i];
      const auto& rec = data_[smp.record];
      ents.insert(ents.end(), rec.anchors.begin(), rec.anchors.end());
      ents.push_back(smp.positive);
      ents.insert(ents.end(), smp.negatives.begin(), smp.negatives.end());
    }
    fw.prepare(graph_, ents, ctx_seed);
    std::vector<Var> losses;
    std::vector<std::size_t> sizes;
    for (std::size_t i = b; i < e; ++i) {
      const auto& smp = batch[i];
      auto pass = fw.run_query(graphs_[smp.record]);
      std::vector<Var> rows{fw.represent(smp.positive, pass.answer_prompt)};
      for (auto n : smp.negatives) rows.push_back(fw.represent(n, pass.answer_prompt));
      Var D = fw.distances(pass.embedding, ad::concat(rows, 0));
      const std::size_t k = smp.negatives.size();
      losses.push_back(query_loss(ad::slice(D, 0, 0, 1), ad::slice(D, 0, 1, k + 1), cfg_.margin));
      sizes.push_back(data_[smp.record].answers.size());
    }
    Var loss = batch_loss(losses, sizes, cfg_.weight);
    tape.backward(loss);
    auto& out = outs[s];
    out.loss = loss.value().item();
    for (auto& l : losses) out.sample_losses.push_back(l.value().item());
    out.grads.reserve(params.size());
    for (const auto& p : params) {
      const Tensor* g = tape.grad_of(p);
      out.grads.push_back(g ? *g : Tensor());
    }
  });

  StepStats st;
  st.step = step_;
  st.lr = lr_at(cfg_, step_);
  std::vector<Tensor> grads(params.size());
  std::vector<double> sample_losses;
  for (auto& o : outs) {
    st.loss += o.loss;
    sample_losses.insert(sample_losses.end(), o.sample_losses.begin(), o.sample_losses.end());
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& g = o.grads[i];
      if (g.numel() == 0) continue;
      if (grads[i].numel() == 0) {
        grads[i] = std::move(g);
      } else {
        for (std::size_t j = 0; j < g.numel(); ++j) grads[i][j] += g[j];
      }
    }
  }
  for (double l : sample_losses) st.sample_loss += l;
  st.sample_loss /= static_cast<double>(sample_losses.size());

  bool finite = std::isfinite(st.loss);
  std::string bad;
  for (std::size_t i = 0; i < params.size() && finite; ++i)
    if (grads[i].numel() && !grads[i].all_finite()) {
      finite = false;
      bad = params[i].name;
    }
  if (!finite) {
    std::string where;
    if (dump_dir_) {
      nlohmann::json j;
      j["step"] = step_;
      j["loss"] = std::isfinite(st.loss) ? nlohmann::json(st.loss) : nlohmann::json("non-finite");
      j["bad_gradient"] = bad;
      j["sample_losses"] = nlohmann::json::array();
      for (double l : sample_losses)
        j["sample_losses"].push_back(std::isfinite(l) ? nlohmann::json(l) : nlohmann::json("non-finite"));
      j["queries"] = nlohmann::json::array();
      for (const auto& s : batch) j["queries"].push_back(data_[s.record].key());
      const auto path = *dump_dir_ / ("nan_dump_step" + std::to_string(step_) + ".json");
      std::ofstream(path) << j.dump(2) << "\n";
      where = " (diagnostics in " + path.string() + ")";
    }
    throw NumericError("non-finite " + (bad.empty() ? std::string("loss") : "gradient for " + bad) +
                       " at step " + std::to_string(step_) + where);
  }

  ad::adam_step(params, grads, adam_, st.lr);
  ++step_;
  return st;
}

void Trainer::save(const std::filesystem::path& path) const {
  nlohmann::json extra;
  KeyValueConfig kv;
  cfg_.write(kv);
  extra["train"] = {{"step", step_}, {"adam_step", adam_.step}, {"config", kv.text()}};
  std::vector<ad::NamedTensor> moments;
  if (!adam_.m.empty()) {
    const auto& params = model_.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      moments.push_back({"adam.m." + params[i].name, adam_.m[i]});
      moments.push_back({"adam.v." + params[i].name, adam_.v[i]});
    }
  }
  model_.save(path, extra, std::move(moments));
}

void Trainer::resume(const std::filesystem::path& path) {
  auto loaded = Model::load(path);
  if (loaded.model.params().size() != model_.params().size())
    throw InvalidArgument(path.string() + ": checkpoint does not match the model layout");
  for (std::size_t i = 0; i < model_.params().size(); ++i) {
    auto& dst = model_.params()[i];
    const auto& src = loaded.model.params()[i];
    if (src.name != dst.name || src.value.shape() != dst.value.shape())
      throw InvalidArgument(path.string() + ": parameter '" + src.name + "' does not match");
    dst.value = src.value;
  }
  const auto train = loaded.extra.value("train", nlohmann::json::object());
  step_ = train.value("step", std::size_t{0});
  adam_ = ad::AdamState{};
  adam_.step = train.value("adam_step", std::int64_t{0});
  if (adam_.step > 0) {
    for (const auto& p : model_.params()) {
      const Tensor* m = loaded.raw.find("adam.m." + p.name);
      const Tensor* v = loaded.raw.find("adam.v." + p.name);
      if (!m || !v) throw ParseError(path.string() + ": missing optimizer state for " + p.name);
      adam_.m.push_back(*m);
      adam_.v.push_back(*v);
    }
  }
}

TrainRun train_from_bench(const std::filesystem::path& data_dir, const KeyValueConfig& config,
                          const std::filesystem::path& out_dir,
                          const std::function<void(const StepStats&)>& on_step) {
  {
    std::vector<std::string_view> known(model_config_keys().begin(), model_config_keys().end());
    known.insert(known.end(), train_config_keys().begin(), train_config_keys().end());
    for (const auto& [k, v] : config.entries())
      if (std::find(known.begin(), known.end(), std::string_view(k)) == known.end())
        throw InvalidArgument("unknown config key '" + k + "'");
  }
  const ModelConfig mcfg = ModelConfig::from(config);
  const TrainConfig tcfg = TrainConfig::from(config);
  BenchData data = load_bench(data_dir);
  auto records = read_dataset(data_dir / "train.jsonl");
  std::filesystem::create_directories(out_dir);

  Model model(mcfg, data.full.num_entities(), data.full.num_relations(), data.split.v_train);
  Trainer trainer(model, data.train_graph, std::move(records), tcfg);
  trainer.set_dump_dir(out_dir);
  if (auto r = config.get("resume"); r && !r->empty()) trainer.resume(*r);

  TrainRun run;
  run.checkpoint = out_dir / "model.ckpt";

  // Best-on-validation snapshot, kept next to the final checkpoint.
  std::vector<QueryRecord> valid;
  if (tcfg.valid_every && std::filesystem::exists(data_dir / "valid.jsonl"))
    valid = read_dataset(data_dir / "valid.jsonl");
  auto select_best = [&](std::size_t step) {
    const auto ev = evaluate_model(model, data, valid, EvalProtocol{}, tcfg.threads);
    const auto mrr = ev.report.overall();
    if (!mrr || (run.best_valid_mrr && *mrr <= *run.best_valid_mrr)) return;
    run.best_valid_mrr = *mrr;
    run.best_checkpoint = out_dir / "model_best.ckpt";
    model.save(*run.best_checkpoint, {{"valid_mrr", *mrr}, {"step", step}});
  };
  run.log = out_dir / "train_log.csv";
  const bool append = trainer.current_step() > 0 && std::filesystem::exists(run.log);
  std::ofstream log(run.log, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + run.log.string());
  if (!append) log << "step,lr,loss,sample_loss\n";
  while (!trainer.done()) {
    const auto st = trainer.step();
    char line[128];
    std::snprintf(line, sizeof(line), "%zu,%.6g,%.10g,%.10g\n", st.step, st.lr, st.loss, st.sample_loss);
    log << line;
    run.history.push_back(st);
    if (on_step) on_step(st);
    if (tcfg.checkpoint_every && trainer.current_step() % tcfg.checkpoint_every == 0)
      trainer.save(run.checkpoint);
    if (!valid.empty() && (trainer.current_step() % tcfg.valid_every == 0 || trainer.done()))
      select_best(trainer.current_step());
  }
  log.flush();
  trainer.save(run.checkpoint);
  return run;
}

}  // namespace proqe
