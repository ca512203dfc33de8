#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "proqe/bench.hpp"
#include "proqe/config.hpp"
#include "proqe/model.hpp"
#include "proqe/rng.hpp"
#include "proqe/tensor.hpp"

namespace proqe {

// How a sample's loss is weighted inside a batch: sqrt|V_q| (default) or its
// inverse.
enum class BatchWeight : std::uint8_t { Sqrt, InvSqrt };

struct TrainConfig {
  double lr = 1e-4;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  std::size_t negatives = 32;
  double margin = 24.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::size_t checkpoint_every = 0;  // 0: only at the end
  std::size_t valid_every = 0;       // 0: no validation; else keep model_best.ckpt
  BatchWeight weight = BatchWeight::Sqrt;

  static TrainConfig from(const KeyValueConfig& kv);
  void write(KeyValueConfig& kv) const;
  void validate() const;
};

std::span<const std::string_view> train_config_keys();

// lr for the given 0-based step: halved from steps/2 onwards.
double lr_at(const TrainConfig& cfg, std::size_t step);

// k distinct entities from `pool`, none in `answers`. Throws when fewer than k
// candidates exist.
std::vector<EntityId> sample_negatives(std::span<const EntityId> pool, const EntitySet& answers,
                                       std::size_t k, Rng& rng);
std::vector<EntityId> sample_negatives(const KnowledgeGraph& kg, const EntitySet& answers,
                                       std::size_t k, std::uint64_t seed);

// -log sigmoid(gamma - d_pos) - mean_i log sigmoid(d_neg_i - gamma).
// d_pos is 1 x 1, d_neg is k x 1.
ad::Var query_loss(ad::Var d_pos, ad::Var d_neg, double gamma);
// sum_i w_i L_i with w_i = sqrt|V_q_i| (or 1/sqrt). Throws on an empty batch.
ad::Var batch_loss(std::span<const ad::Var> losses, std::span<const std::size_t> answer_sizes,
                   BatchWeight weight);

struct StepStats {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;         // weighted batch loss
  double sample_loss = 0.0;  // unweighted mean per-sample loss
};

class Trainer {
 public:
  // `graph` is the training graph used for contexts; negatives come from the
  // model's seen entities.
  Trainer(Model& model, const KnowledgeGraph& graph, std::vector<QueryRecord> data, TrainConfig cfg);

  // Runs one optimizer step and returns its statistics.
  StepStats step();
  std::size_t current_step() const { return step_; }
  bool done() const { return step_ >= cfg_.steps; }
  const TrainConfig& config() const { return cfg_; }

  // Model, optimizer moments and step counter.
  void save(const std::filesystem::path& path) const;
  void resume(const std::filesystem::path& path);

  // Where a diagnostic dump goes when a loss or gradient turns non-finite.
  void set_dump_dir(std::filesystem::path dir) { dump_dir_ = std::move(dir); }

 private:
  struct Sample {
    std::size_t record;
    EntityId positive;
    std::vector<EntityId> negatives;
  };
  std::vector<Sample> batch_for(std::size_t step);
  const std::vector<std::size_t>& epoch_order(std::size_t epoch);

  Model& model_;
  const KnowledgeGraph& graph_;
  std::vector<QueryRecord> data_;
  std::vector<QueryGraph> graphs_;
  TrainConfig cfg_;
  ad::AdamState adam_;
  std::size_t step_ = 0;
  std::size_t cached_epoch_ = static_cast<std::size_t>(-1);
  std::vector<std::size_t> order_;
  std::optional<std::filesystem::path> dump_dir_;
};

struct TrainRun {
  std::filesystem::path checkpoint;
  std::filesystem::path log;
  std::vector<StepStats> history;
  std::optional<std::filesystem::path> best_checkpoint;
  std::optional<double> best_valid_mrr;
};

// Loads a benchmark directory, trains on train.jsonl and writes model.ckpt and
// train_log.csv into `out_dir`. With valid_every set, the snapshot with the best
// validation MRR is also kept as model_best.ckpt. `config` carries both model
// and training keys.
TrainRun train_from_bench(const std::filesystem::path& data_dir, const KeyValueConfig& config,
                          const std::filesystem::path& out_dir,
                          const std::function<void(const StepStats&)>& on_step = {});

}  // namespace proqe
