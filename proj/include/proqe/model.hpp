#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "proqe/config.hpp"
#include "proqe/kg.hpp"
#include "proqe/prompt.hpp"
#include "proqe/query.hpp"
#include "proqe/tensor.hpp"

namespace proqe {

enum class Backbone : std::uint8_t { Gqe, Q2b };
// proqe: context + exchange + prompt-weighted aggregation.
// mean: average of neighbor input embeddings.
// feature: transductive lookup; emerging entities borrow the embedding of the
// seen entity with the largest (relation, neighbor, direction) overlap.
enum class Encoder : std::uint8_t { ProQE, Mean, Feature };

std::string_view to_string(Backbone b);
std::string_view to_string(Encoder e);

struct ModelConfig {
  std::size_t dim = 64;
  Backbone backbone = Backbone::Gqe;
  Encoder encoder = Encoder::ProQE;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ff_mult = 4;
  std::size_t max_len = 64;
  std::uint32_t max_depth = 4;
  std::size_t neighbor_cap = 32;
  bool use_prompt = true;
  bool use_global = true;
  bool use_exchange = true;
  bool normalize_weights = false;
  bool attn_residual = false;
  bool causal = true;
  double inside_weight = 0.02;  // Q2B inside-distance weight
  double init_range = 0.0;      // 0 selects (24 + 2) / dim
  std::uint64_t seed = 0;

  // Reads the model keys of a flat config; unknown keys are left to the caller.
  static ModelConfig from(const KeyValueConfig& kv);
  void write(KeyValueConfig& kv) const;
  void validate() const;
};

// Keys understood by ModelConfig::from.
std::span<const std::string_view> model_config_keys();

// Per-entity context recipe: which parameter rows make up E^L and E^G.
struct ContextRows {
  std::vector<std::uint32_t> local_ent;  // rows of the input-embedding table
  std::vector<std::uint32_t> local_rel;  // r (incoming edge) or R + r (outgoing, inverse parameter)
  std::vector<std::uint32_t> global;     // r for dom(r), R + r for rng(r)
};

class Model {
 public:
  // `seen` lists the entities that own a trainable input embedding.
  Model(ModelConfig cfg, std::size_t num_entities, std::size_t num_relations,
        std::vector<EntityId> seen);

  const ModelConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.dim; }
  std::size_t num_entities() const { return num_entities_; }
  std::size_t num_relations() const { return num_relations_; }
  std::span<const EntityId> seen() const { return seen_; }
  bool is_seen(EntityId e) const { return e < row_of_.size() && row_of_[e] >= 0; }
  std::uint32_t row(EntityId e) const;
  const Vocabulary& vocab() const { return vocab_; }

  std::vector<ad::Parameter>& params() { return params_; }
  const std::vector<ad::Parameter>& params() const { return params_; }
  const ad::Parameter& param(std::string_view name) const;
  ad::Parameter& param(std::string_view name);
  std::size_t num_scalars() const;

  // Emerging entities use this map under the feature encoder; seen entities
  // always map to themselves. Entries of kNoMatch yield a zero vector.
  static constexpr EntityId kNoMatch = 0xffffffffu;
  void set_feature_map(std::vector<EntityId> map) { feature_map_ = std::move(map); }
  EntityId feature_source(EntityId e) const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {},
            std::vector<ad::NamedTensor> extra_tensors = {}) const;
  struct Loaded;
  static Loaded load(const std::filesystem::path& path);

 private:
  void add_param(std::string name, ad::Shape shape, double range, std::uint64_t& rng_state);

  ModelConfig cfg_;
  std::size_t num_entities_;
  std::size_t num_relations_;
  std::vector<EntityId> seen_;
  std::vector<std::int64_t> row_of_;
  Vocabulary vocab_;
  std::vector<ad::Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<EntityId> feature_map_;
};

struct Model::Loaded {
  Model model;
  nlohmann::json extra;
  ad::Checkpoint raw;
};

// One-hop context of `e` on `kg`. Local rows come from seen neighbors only, one
// per (relation, neighbor, direction), sampled down to `cap` with `seed`.
// Global rows: dom(r) for every relation where e is a head, rng(r) where e is a
// tail.
ContextRows gather_context(const KnowledgeGraph& kg, const Model& m, EntityId e, std::size_t cap,
                           std::uint64_t seed);

// Per-entity representation inputs on a tape. `local` and `global` are the
// (optionally exchanged) row matrices; counts may be zero.
struct ContextBundle {
  ad::Var local;
  ad::Var global;
  std::size_t n_local = 0;
  std::size_t n_global = 0;
  // Mean/feature encoders carry a finished representation instead.
  std::optional<ad::Var> fixed;
};

// softmax((E Wq)(E Wk)^T / sqrt(d)) (E Wv), plus E when `residual`.
ad::Var exchange(ad::Var E, ad::Var Wq, ad::Var Wk, ad::Var Wv, bool residual);

// sum_j alpha_j E'_j with alpha = E' p^T (softmax-normalized when asked).
// Without a prompt the weights are uniform 1/n.
ad::Var aggregate(ad::Var E, std::optional<ad::Var> prompt, bool normalize);

// Point or box. Offsets are absent for GQE.
struct Box {
  ad::Var center;
  std::optional<ad::Var> offset;
};

// One entry per DNF conjunct.
struct QueryEmbedding {
  std::vector<Box> conjuncts;
};

// Builds every differentiable quantity of one forward pass on a tape.
class Forward {
 public:
  Forward(const Model& m, ad::Tape& tape);

  // Gathers and exchanges the contexts of `entities` on `kg`, batching the
  // projections into single matrix products.
  void prepare(const KnowledgeGraph& kg, std::span<const EntityId> entities, std::uint64_t seed);
  void set_context(EntityId e, ContextBundle ctx);
  bool has_context(EntityId e) const { return contexts_.count(e) != 0; }
  const ContextBundle& context(EntityId e) const;

  ad::Var encode_prompt(const TokenSequence& seq);  // L x d
  // 1 x d entity representation; `prompt` is a 1 x d decoder output row.
  ad::Var represent(EntityId e, std::optional<ad::Var> prompt);
  QueryEmbedding embed_query(const QueryGraph& q, std::span<const ad::Var> anchor_reps);
  // Candidate rows (m x d) -> distances (m x 1); DNF takes the minimum.
  ad::Var distances(const QueryEmbedding& qe, ad::Var candidates);

  // Anchor reps, query embedding and the final-[ENT] prompt row in one go.
  struct QueryPass {
    TokenSequence seq;
    std::optional<ad::Var> answer_prompt;
    QueryEmbedding embedding;
  };
  QueryPass run_query(const QueryGraph& q);

  std::size_t warnings() const { return warnings_; }
  ad::Tape& tape() { return tape_; }

 private:
  ad::Var p(std::string_view name);
  ad::Var zeros_row();
  std::vector<Box> embed_node(const QueryGraph& q, NodeId n, std::span<const ad::Var> anchor_reps,
                              const std::vector<std::size_t>& anchor_index);

  const Model& m_;
  ad::Tape& tape_;
  std::unordered_map<EntityId, ContextBundle> contexts_;
  std::size_t warnings_ = 0;
};

// Candidate-side fast path for ranking: exchanged contexts of every entity
// held as plain tensors, so scoring all entities needs no tape.
class ContextCache {
 public:
  ContextCache(const Model& m, const KnowledgeGraph& kg, std::uint64_t seed);

  // Constant-copy of `e`'s context onto `fw`'s tape.
  void install(Forward& fw, EntityId e) const;
  // Representation of `e` under prompt row `p` (nullptr for none).
  ad::Tensor represent(EntityId e, const double* p) const;
  std::size_t warnings() const { return warnings_; }

 private:
  const Model& m_;
  std::vector<ad::Tensor> local_;
  std::vector<ad::Tensor> global_;
  std::vector<ad::Tensor> fixed_;
  std::size_t warnings_ = 0;
};

// Distance of a point to a query embedding in plain arithmetic.
double distance_value(const Model& m, const std::vector<ad::Tensor>& centers,
                      const std::vector<ad::Tensor>& offsets, const double* point);

// The seen entity whose train-graph features overlap most with `e`'s
// full-graph features; ties go to the smaller id. nullopt without overlap.
std::optional<EntityId> feature_match(const KnowledgeGraph& train_kg, const KnowledgeGraph& full_kg,
                                      std::span<const std::uint8_t> seen_mask, EntityId e);
std::vector<EntityId> build_feature_map(const KnowledgeGraph& train_kg,
                                        const KnowledgeGraph& full_kg, const Model& m);

}  // namespace proqe
