#include "proqe/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "proqe/error.hpp"
#include "proqe/rng.hpp"

namespace proqe {

using ad::Shape;
using ad::Tensor;
using ad::Var;

std::string_view to_string(Backbone b) { return b == Backbone::Gqe ? "gqe" : "q2b"; }

std::string_view to_string(Encoder e) {
  switch (e) {
    case Encoder::ProQE: return "proqe";
    case Encoder::Mean: return "mean";
    case Encoder::Feature: return "feature";
  }
  return "?";
}

namespace {

constexpr std::array<std::string_view, 18> kModelKeys = {
    "dim",        "backbone",      "encoder",    "layers",         "heads",
    "ff_mult",    "max_len",       "max_depth",  "neighbor_cap",   "use_prompt",
    "use_global", "use_exchange",  "normalize_weights",            "attn_residual",
    "causal",     "inside_weight", "init_range", "seed"};

Backbone parse_backbone(const std::string& s) {
  if (s == "gqe") return Backbone::Gqe;
  if (s == "q2b") return Backbone::Q2b;
  throw InvalidArgument("unknown backbone '" + s + "' (expected gqe or q2b)");
}

Encoder parse_encoder(const std::string& s) {
  if (s == "proqe") return Encoder::ProQE;
  if (s == "mean") return Encoder::Mean;
  if (s == "feature") return Encoder::Feature;
  throw InvalidArgument("unknown encoder '" + s + "' (expected proqe, mean or feature)");
}

std::size_t positive(const KeyValueConfig& kv, std::string_view key, std::size_t fallback) {
  const auto v = kv.get_int(key, static_cast<long long>(fallback));
  if (v <= 0) throw InvalidArgument("config key '" + std::string(key) + "' must be positive");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::span<const std::string_view> model_config_keys() { return kModelKeys; }

ModelConfig ModelConfig::from(const KeyValueConfig& kv) {
  ModelConfig c;
  c.dim = positive(kv, "dim", c.dim);
  c.backbone = parse_backbone(kv.get_string("backbone", "gqe"));
  c.encoder = parse_encoder(kv.get_string("encoder", "proqe"));
  c.layers = positive(kv, "layers", c.layers);
  c.heads = positive(kv, "heads", c.heads);
  c.ff_mult = positive(kv, "ff_mult", c.ff_mult);
  c.max_len = positive(kv, "max_len", c.max_len);
  c.max_depth = static_cast<std::uint32_t>(positive(kv, "max_depth", c.max_depth));
  c.neighbor_cap = positive(kv, "neighbor_cap", c.neighbor_cap);
  c.use_prompt = kv.get_bool("use_prompt", c.use_prompt);
  c.use_global = kv.get_bool("use_global", c.use_global);
  c.use_exchange = kv.get_bool("use_exchange", c.use_exchange);
  c.normalize_weights = kv.get_bool("normalize_weights", c.normalize_weights);
  c.attn_residual = kv.get_bool("attn_residual", c.attn_residual);
  c.causal = kv.get_bool("causal", c.causal);
  c.inside_weight = kv.get_double("inside_weight", c.inside_weight);
  c.init_range = kv.get_double("init_range", c.init_range);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  c.validate();
  return c;
}

void ModelConfig::write(KeyValueConfig& kv) const {
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  auto num = [](double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return std::string(buf);
  };
  kv.set("dim", std::to_string(dim));
  kv.set("backbone", std::string(to_string(backbone)));
  kv.set("encoder", std::string(to_string(encoder)));
  kv.set("layers", std::to_string(layers));
  kv.set("heads", std::to_string(heads));
  kv.set("ff_mult", std::to_string(ff_mult));
  kv.set("max_len", std::to_string(max_len));
  kv.set("max_depth", std::to_string(max_depth));
  kv.set("neighbor_cap", std::to_string(neighbor_cap));
  kv.set("use_prompt", b(use_prompt));
  kv.set("use_global", b(use_global));
  kv.set("use_exchange", b(use_exchange));
  kv.set("normalize_weights", b(normalize_weights));
  kv.set("attn_residual", b(attn_residual));
  kv.set("causal", b(causal));
  kv.set("inside_weight", num(inside_weight));
  kv.set("init_range", num(init_range));
  kv.set("seed", std::to_string(seed));
}

void ModelConfig::validate() const {
  if (dim % heads != 0)
    throw InvalidArgument("dim " + std::to_string(dim) + " is not divisible by heads " +
                          std::to_string(heads));
  if (inside_weight < 0) throw InvalidArgument("inside_weight must be non-negative");
  if (init_range < 0) throw InvalidArgument("init_range must be non-negative");
}

// ---- parameters -------------------------------------------------------------

Model::Model(ModelConfig cfg, std::size_t num_entities, std::size_t num_relations,
             std::vector<EntityId> seen)
    : cfg_(cfg),
      num_entities_(num_entities),
      num_relations_(num_relations),
      seen_(std::move(seen)),
      row_of_(num_entities, -1),
      vocab_(num_relations, cfg.max_depth) {
  cfg_.validate();
  std::sort(seen_.begin(), seen_.end());
  seen_.erase(std::unique(seen_.begin(), seen_.end()), seen_.end());
  for (std::size_t i = 0; i < seen_.size(); ++i) {
    if (seen_[i] >= num_entities) throw InvalidArgument("seen entity id out of range");
    row_of_[seen_[i]] = static_cast<std::int64_t>(i);
  }

  const std::size_t d = cfg_.dim, R = num_relations, F = d * cfg_.ff_mult;
  const double emb = cfg_.init_range > 0 ? cfg_.init_range : 26.0 / static_cast<double>(d);
  auto xavier = [](std::size_t in, std::size_t out) {
    return std::sqrt(6.0 / static_cast<double>(in + out));
  };
  std::uint64_t state = derive_seed({cfg_.seed, 0x5eed});

  add_param("ent_in", {seen_.size(), d}, emb, state);
  add_param("rel", {R, d}, emb, state);
  add_param("rel_inv", {R, d}, emb, state);
  add_param("dom", {R, d}, emb, state);
  add_param("rng", {R, d}, emb, state);
  for (const char* side : {"local", "global"})
    for (const char* w : {"wq", "wk", "wv"})
      add_param(std::string(side) + "." + w, {d, d}, xavier(d, d), state);

  add_param("dec.tok", {vocab_.size(), d}, xavier(d, d), state);
  add_param("dec.pos", {cfg_.max_len, d}, xavier(d, d), state);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string pre = "dec.l" + std::to_string(l) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo"}) add_param(pre + w, {d, d}, xavier(d, d), state);
    add_param(pre + "w1", {d, F}, xavier(d, F), state);
    add_param(pre + "b1", {1, F}, 0.0, state);
    add_param(pre + "w2", {F, d}, xavier(F, d), state);
    add_param(pre + "b2", {1, d}, 0.0, state);
    for (const char* ln : {"ln1", "ln2"}) {
      add_param(pre + ln + ".g", {1, d}, 0.0, state);
      param(pre + ln + ".g").value.fill(1.0);
      add_param(pre + ln + ".b", {1, d}, 0.0, state);
    }
  }

  if (cfg_.backbone == Backbone::Gqe) {
    add_param("int.w1", {d, d}, xavier(d, d), state);
    add_param("int.b1", {1, d}, 0.0, state);
    add_param("int.w2", {d, d}, xavier(d, d), state);
    add_param("int.b2", {1, d}, 0.0, state);
  } else {
    add_param("rel_off", {R, d}, emb, state);
    for (const char* pre : {"int.c", "int.o"}) {
      add_param(std::string(pre) + "w1", {d, d}, xavier(d, d), state);
      add_param(std::string(pre) + "b1", {1, d}, 0.0, state);
      add_param(std::string(pre) + "w2", {d, d}, xavier(d, d), state);
      add_param(std::string(pre) + "b2", {1, d}, 0.0, state);
    }
  }
}

void Model::add_param(std::string name, Shape shape, double range, std::uint64_t& state) {
  Tensor t(std::move(shape), 0.0);
  if (range > 0) {
    Rng rng(derive_seed({state, params_.size()}));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (2.0 * uniform01(rng) - 1.0) * range;
  }
  index_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(t)});
}

const ad::Parameter& Model::param(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw InvalidArgument("model has no parameter '" + std::string(name) + "'");
  return params_[it->second];
}

ad::Parameter& Model::param(std::string_view name) {
  return const_cast<ad::Parameter&>(std::as_const(*this).param(name));
}

std::size_t Model::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::uint32_t Model::row(EntityId e) const {
  if (!is_seen(e)) throw InvalidArgument("entity " + std::to_string(e) + " has no input embedding");
  return static_cast<std::uint32_t>(row_of_[e]);
}

EntityId Model::feature_source(EntityId e) const {
  if (is_seen(e)) return e;
  if (e < feature_map_.size()) return feature_map_[e];
  return kNoMatch;
}

// ---- persistence ------------------------------------------------------------

void Model::save(const std::filesystem::path& path, const nlohmann::json& extra,
                 std::vector<ad::NamedTensor> extra_tensors) const {
  KeyValueConfig kv;
  cfg_.write(kv);
  nlohmann::json meta;
  meta["format"] = "proqe-model";
  meta["config"] = kv.text();
  meta["num_entities"] = num_entities_;
  meta["num_relations"] = num_relations_;
  meta["seen"] = seen_;
  meta["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
  ad::Checkpoint ck;
  ck.metadata = meta.dump();
  for (const auto& p : params_) ck.tensors.push_back({p.name, p.value});
  for (auto& t : extra_tensors) ck.tensors.push_back(std::move(t));
  write_checkpoint(path, ck);
}

Model::Loaded Model::load(const std::filesystem::path& path) {
  ad::Checkpoint ck = ad::read_checkpoint(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.metadata);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": bad checkpoint metadata: " + e.what());
  }
  if (meta.value("format", "") != "proqe-model")
    throw ParseError(path.string() + ": not a model checkpoint");
  const auto cfg = ModelConfig::from(KeyValueConfig::parse(meta.at("config").get<std::string>()));
  Model m(cfg, meta.at("num_entities").get<std::size_t>(), meta.at("num_relations").get<std::size_t>(),
          meta.at("seen").get<std::vector<EntityId>>());
  for (auto& p : m.params_) {
    const Tensor* t = ck.find(p.name);
    if (!t) throw ParseError(path.string() + ": missing tensor '" + p.name + "'");
    if (t->shape() != p.value.shape())
      throw ParseError(path.string() + ": tensor '" + p.name + "' has shape " +
                       ad::shape_str(t->shape()) + ", expected " + ad::shape_str(p.value.shape()));
    p.value = *t;
  }
  auto extra = meta.value("extra", nlohmann::json::object());
  return Loaded{std::move(m), std::move(extra), std::move(ck)};
}

// ---- context ----------------------------------------------------------------

ContextRows gather_context(const KnowledgeGraph& kg, const Model& m, EntityId e, std::size_t cap,
                           std::uint64_t seed) {
  ContextRows rows;
  const auto R = static_cast<std::uint32_t>(m.num_relations());
  const auto nbrs = kg.neighbors(e);
  std::vector<std::size_t> local;
  for (std::size_t i = 0; i < nbrs.size(); ++i)
    if (m.is_seen(nbrs[i].entity)) local.push_back(i);
  if (local.size() > cap) {
    Rng rng(derive_seed({seed, e}));
    for (std::size_t i = 0; i < cap; ++i) {
      const auto j = i + uniform_index(rng, local.size() - i);
      std::swap(local[i], local[j]);
    }
    local.resize(cap);
    std::sort(local.begin(), local.end());
  }
  for (auto i : local) {
    const auto& n = nbrs[i];
    rows.local_ent.push_back(m.row(n.entity));
    // Neighbor is the head of an incoming edge: e = e_j + r. Outgoing edges use
    // the inverse-relation parameter.
    rows.local_rel.push_back(n.direction == Direction::In ? n.relation : R + n.relation);
  }
  for (std::size_t i = 0; i < nbrs.size(); ++i) {
    const auto& n = nbrs[i];
    const std::uint32_t slot = n.direction == Direction::Out ? n.relation : R + n.relation;
    rows.global.push_back(slot);
  }
  std::sort(rows.global.begin(), rows.global.end());
  rows.global.erase(std::unique(rows.global.begin(), rows.global.end()), rows.global.end());
  return rows;
}

Var exchange(Var E, Var Wq, Var Wk, Var Wv, bool residual) {
  const auto& shape = E.value().shape();
  if (shape.size() != 2 || shape[0] == 0) return E;
  const double inv = 1.0 / std::sqrt(static_cast<double>(shape[1]));
  Var q = ad::matmul(E, Wq), k = ad::matmul(E, Wk), v = ad::matmul(E, Wv);
  Var a = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv), 1);
  Var out = ad::matmul(a, v);
  return residual ? ad::add(out, E) : out;
}

Var aggregate(Var E, std::optional<Var> prompt, bool normalize) {
  if (!prompt) return ad::reduce_mean(E, 0);
  Var alpha = ad::matmul(E, ad::transpose(*prompt));  // n x 1
  if (normalize) alpha = ad::softmax(alpha, 0);
  return ad::matmul(ad::transpose(alpha), E);
}

// ---- forward ----------------------------------------------------------------

Forward::Forward(const Model& m, ad::Tape& tape) : m_(m), tape_(tape) {}

Var Forward::p(std::string_view name) { return tape_.parameter(m_.param(name)); }

Var Forward::zeros_row() { return tape_.constant(Tensor({1, m_.dim()}, 0.0)); }

void Forward::set_context(EntityId e, ContextBundle ctx) { contexts_[e] = std::move(ctx); }

const ContextBundle& Forward::context(EntityId e) const {
  auto it = contexts_.find(e);
  if (it == contexts_.end())
    throw InvalidArgument("no context prepared for entity " + std::to_string(e));
  return it->second;
}

void Forward::prepare(const KnowledgeGraph& kg, std::span<const EntityId> entities,
                      std::uint64_t seed) {
  const auto& cfg = m_.config();
  std::vector<EntityId> todo;
  for (auto e : entities)
    if (!contexts_.count(e)) todo.push_back(e);
  std::sort(todo.begin(), todo.end());
  todo.erase(std::unique(todo.begin(), todo.end()), todo.end());
  if (todo.empty()) return;

  if (cfg.encoder == Encoder::Feature) {
    for (auto e : todo) {
      ContextBundle b;
      const EntityId src = m_.feature_source(e);
      if (src == Model::kNoMatch) {
        ++warnings_;
        b.fixed = zeros_row();
      } else {
        const std::uint32_t row = m_.row(src);
        b.fixed = ad::gather_rows(p("ent_in"), std::span<const std::uint32_t>(&row, 1));
      }
      contexts_[e] = b;
    }
    return;
  }

  std::vector<ContextRows> rows;
  rows.reserve(todo.size());
  std::vector<std::uint32_t> all_ent, all_rel, all_glob;
  for (auto e : todo) {
    rows.push_back(gather_context(kg, m_, e, cfg.neighbor_cap, seed));
    const auto& r = rows.back();
    all_ent.insert(all_ent.end(), r.local_ent.begin(), r.local_ent.end());
    all_rel.insert(all_rel.end(), r.local_rel.begin(), r.local_rel.end());
    all_glob.insert(all_glob.end(), r.global.begin(), r.global.end());
  }

  if (cfg.encoder == Encoder::Mean) {
    Var ents = all_ent.empty() ? Var{} : ad::gather_rows(p("ent_in"), all_ent);
    std::size_t off = 0;
    for (std::size_t i = 0; i < todo.size(); ++i) {
      ContextBundle b;
      const auto n = rows[i].local_ent.size();
      if (n == 0) {
        ++warnings_;
        b.fixed = zeros_row();
      } else {
        b.fixed = ad::reduce_mean(ad::slice(ents, 0, off, off + n), 0);
      }
      off += n;
      contexts_[todo[i]] = b;
    }
    return;
  }

  // Pro-QE. Rows are sums of table rows, so the attention projections are
  // applied to the (small) tables and gathered afterwards.
  struct Side {
    Var rows, q, k, v;
  };
  auto build = [&](const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>* b,
                   const char* table_a, const char* table_b, const char* attn) {
    Side s;
    if (a.empty()) return s;
    std::array<Var, 2> tables = {p(table_a), p(table_b)};
    Var cat = ad::concat(tables, 0);
    auto rows_of = [&](Var ent_table, Var rel_table) {
      return b ? ad::add(ad::gather_rows(ent_table, a), ad::gather_rows(rel_table, *b))
               : ad::gather_rows(rel_table, a);
    };
    if (!cfg.use_exchange || cfg.attn_residual) s.rows = rows_of(p("ent_in"), cat);
    if (cfg.use_exchange) {
      const std::string pre(attn);
      Var ent = b ? p("ent_in") : Var{};
      auto project = [&](const std::string& w) {
        Var W = p(pre + w);
        return rows_of(b ? ad::matmul(ent, W) : Var{}, ad::matmul(cat, W));
      };
      s.q = project(".wq");
      s.k = project(".wk");
      s.v = project(".wv");
    }
    return s;
  };
  Side local = build(all_ent, &all_rel, "rel", "rel_inv", "local");
  Side global;
  if (cfg.use_global) global = build(all_glob, nullptr, "dom", "rng", "global");

  const double inv = 1.0 / std::sqrt(static_cast<double>(m_.dim()));
  auto block = [&](const Side& s, std::size_t off, std::size_t n) {
    if (!cfg.use_exchange) return ad::slice(s.rows, 0, off, off + n);
    Var q = ad::slice(s.q, 0, off, off + n), k = ad::slice(s.k, 0, off, off + n),
        v = ad::slice(s.v, 0, off, off + n);
    Var a = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), inv), 1);
    Var out = ad::matmul(a, v);
    return cfg.attn_residual ? ad::add(out, ad::slice(s.rows, 0, off, off + n)) : out;
  };
  std::size_t loff = 0, goff = 0;
  for (std::size_t i = 0; i < todo.size(); ++i) {
    ContextBundle b;
    b.n_local = rows[i].local_ent.size();
    b.n_global = cfg.use_global ? rows[i].global.size() : 0;
    if (b.n_local) b.local = block(local, loff, b.n_local);
    if (b.n_global) b.global = block(global, goff, b.n_global);
    loff += rows[i].local_ent.size();
    goff += rows[i].global.size();
    contexts_[todo[i]] = b;
  }
}

Var Forward::represent(EntityId e, std::optional<Var> prompt) {
  const auto& cfg = m_.config();
  const ContextBundle ctx = context(e);
  if (ctx.fixed) return *ctx.fixed;
  if (!cfg.use_prompt) prompt.reset();
  const bool has_l = ctx.n_local > 0, has_g = ctx.n_global > 0;
  if (has_l && has_g)
    return ad::scale(ad::add(aggregate(ctx.local, prompt, cfg.normalize_weights),
                             aggregate(ctx.global, prompt, cfg.normalize_weights)),
                     0.5);
  if (has_l) return aggregate(ctx.local, prompt, cfg.normalize_weights);
  if (has_g) return aggregate(ctx.global, prompt, cfg.normalize_weights);
  ++warnings_;
  return zeros_row();
}

Var Forward::encode_prompt(const TokenSequence& seq) {
  const auto& cfg = m_.config();
  const auto ids = m_.vocab().ids(seq);
  const std::size_t L = ids.size(), d = m_.dim(), H = cfg.heads, dh = d / H;
  if (L == 0) throw InvalidArgument("empty token sequence");
  if (L > cfg.max_len)
    throw InvalidArgument("token sequence of length " + std::to_string(L) + " exceeds max_len " +
                          std::to_string(cfg.max_len));
  std::vector<std::uint32_t> pos(L);
  std::iota(pos.begin(), pos.end(), 0u);
  Var x = ad::add(ad::gather_rows(p("dec.tok"), ids), ad::gather_rows(p("dec.pos"), pos));

  std::optional<Var> mask;
  if (cfg.causal && L > 1) {
    Tensor mk({L, L}, 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = i + 1; j < L; ++j) mk.at(i, j) = -1e9;
    mask = tape_.constant(std::move(mk));
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  auto norm = [&](Var v, const std::string& pre) {
    return ad::add_row(ad::mul_row(ad::layer_norm(v), p(pre + ".g")), p(pre + ".b"));
  };
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "dec.l" + std::to_string(l) + ".";
    Var q = ad::matmul(x, p(pre + "wq")), k = ad::matmul(x, p(pre + "wk")),
        v = ad::matmul(x, p(pre + "wv"));
    std::vector<Var> heads;
    for (std::size_t h = 0; h < H; ++h) {
      Var qh = ad::slice(q, 1, h * dh, (h + 1) * dh), kh = ad::slice(k, 1, h * dh, (h + 1) * dh),
          vh = ad::slice(v, 1, h * dh, (h + 1) * dh);
      Var s = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv);
      if (mask) s = ad::add(s, *mask);
      heads.push_back(ad::matmul(ad::softmax(s, 1), vh));
    }
    Var att = ad::matmul(H == 1 ? heads[0] : ad::concat(heads, 1), p(pre + "wo"));
    Var h1 = norm(ad::add(x, att), pre + "ln1");
    Var ff = ad::add_row(
        ad::matmul(ad::relu(ad::add_row(ad::matmul(h1, p(pre + "w1")), p(pre + "b1"))), p(pre + "w2")),
        p(pre + "b2"));
    x = norm(ad::add(h1, ff), pre + "ln2");
  }
  return x;
}

std::vector<Box> Forward::embed_node(const QueryGraph& q, NodeId n, std::span<const Var> anchor_reps,
                                     const std::vector<std::size_t>& anchor_index) {
  const auto& node = q.node(n);
  const bool box = m_.config().backbone == Backbone::Q2b;
  if (node.kind == NodeKind::Anchor) {
    Box b{anchor_reps[anchor_index[n]], std::nullopt};
    if (box) b.offset = zeros_row();
    return {b};
  }
  switch (node.op) {
    case Op::Projection: {
      auto in = embed_node(q, node.inputs.at(0), anchor_reps, anchor_index);
      const std::uint32_t r = node.relation;
      Var rv = ad::gather_rows(p("rel"), std::span<const std::uint32_t>(&r, 1));
      std::optional<Var> off;
      if (box) off = ad::softplus(ad::gather_rows(p("rel_off"), std::span<const std::uint32_t>(&r, 1)));
      for (auto& b : in) {
        b.center = ad::add(b.center, rv);
        if (box) b.offset = ad::add(*b.offset, *off);
      }
      return in;
    }
    case Op::Union: {
      std::vector<Box> out;
      for (auto c : node.inputs) {
        auto alt = embed_node(q, c, anchor_reps, anchor_index);
        out.insert(out.end(), alt.begin(), alt.end());
      }
      return out;
    }
    case Op::Intersection: {
      std::vector<std::vector<Box>> kids;
      for (auto c : node.inputs) kids.push_back(embed_node(q, c, anchor_reps, anchor_index));
      std::vector<std::vector<Box>> combos{{}};
      for (const auto& alts : kids) {
        std::vector<std::vector<Box>> next;
        for (const auto& partial : combos)
          for (const auto& a : alts) {
            next.push_back(partial);
            next.back().push_back(a);
          }
        combos = std::move(next);
      }
      std::vector<Box> out;
      for (const auto& combo : combos) {
        std::vector<Var> centers;
        for (const auto& b : combo) centers.push_back(b.center);
        Var C = ad::concat(centers, 0);
        if (!box) {
          Var h = ad::relu(ad::add_row(ad::matmul(C, p("int.w1")), p("int.b1")));
          out.push_back({ad::add_row(ad::matmul(ad::reduce_min(h, 0), p("int.w2")), p("int.b2")),
                         std::nullopt});
        } else {
          std::vector<Var> offs;
          for (const auto& b : combo) offs.push_back(*b.offset);
          Var O = ad::concat(offs, 0);
          Var logits = ad::add_row(
              ad::matmul(ad::relu(ad::add_row(ad::matmul(C, p("int.cw1")), p("int.cb1"))), p("int.cw2")),
              p("int.cb2"));
          Var center = ad::reduce_sum(ad::mul(ad::softmax(logits, 0), C), 0);
          Var ds = ad::reduce_mean(ad::relu(ad::add_row(ad::matmul(O, p("int.ow1")), p("int.ob1"))), 0);
          Var gate = ad::sigmoid(ad::add_row(ad::matmul(ds, p("int.ow2")), p("int.ob2")));
          out.push_back({center, ad::mul(ad::reduce_min(O, 0), gate)});
        }
      }
      return out;
    }
    case Op::Negation:
      throw QueryError("negation is not supported by the learned model");
    case Op::None:
      break;
  }
  throw QueryError("node " + std::to_string(n) + ": no operation");
}

QueryEmbedding Forward::embed_query(const QueryGraph& q, std::span<const Var> anchor_reps) {
  const auto anchors = q.anchor_nodes();
  if (anchors.size() != anchor_reps.size())
    throw InvalidArgument("query has " + std::to_string(anchors.size()) + " anchors but " +
                          std::to_string(anchor_reps.size()) + " representations were given");
  std::vector<std::size_t> index(q.nodes().size(), 0);
  for (std::size_t i = 0; i < anchors.size(); ++i) index[anchors[i]] = i;
  return {embed_node(q, q.answer(), anchor_reps, index)};
}

Var Forward::distances(const QueryEmbedding& qe, Var candidates) {
  const std::size_t m = candidates.value().rows();
  std::vector<Var> per;
  for (const auto& b : qe.conjuncts) {
    Var delta = ad::abs(ad::add_row(candidates, ad::neg(b.center)));
    if (!b.offset) {
      per.push_back(ad::reduce_sum(delta, 1));
    } else {
      Var O = ad::add_row(tape_.constant(Tensor({m, m_.dim()}, 0.0)), *b.offset);
      Var outside = ad::reduce_sum(ad::relu(ad::sub(delta, O)), 1);
      Var inside = ad::reduce_sum(ad::minimum(delta, O), 1);
      per.push_back(ad::add(outside, ad::scale(inside, m_.config().inside_weight)));
    }
  }
  if (per.empty()) throw InvalidArgument("query embedding has no conjuncts");
  return per.size() == 1 ? per[0] : ad::reduce_min(ad::concat(per, 1), 1);
}

Forward::QueryPass Forward::run_query(const QueryGraph& q) {
  QueryPass out;
  out.seq = serialize(q);
  std::optional<Var> O;
  if (m_.config().use_prompt && m_.config().encoder == Encoder::ProQE) O = encode_prompt(out.seq);
  std::vector<Var> reps;
  for (std::size_t k = 0; k < out.seq.anchors.size(); ++k) {
    std::optional<Var> pr;
    const auto pos = out.seq.anchor_positions[k];
    if (O) pr = ad::slice(*O, 0, pos, pos + 1);
    reps.push_back(represent(out.seq.anchors[k], pr));
  }
  out.embedding = embed_query(q, reps);
  if (O) out.answer_prompt = ad::slice(*O, 0, out.seq.answer_position, out.seq.answer_position + 1);
  return out;
}

// ---- ranking fast path ------------------------------------------------------

ContextCache::ContextCache(const Model& m, const KnowledgeGraph& kg, std::uint64_t seed) : m_(m) {
  const std::size_t n = m.num_entities();
  if (kg.num_entities() != n)
    throw InvalidArgument("graph has " + std::to_string(kg.num_entities()) +
                          " entities, model expects " + std::to_string(n));
  local_.resize(n);
  global_.resize(n);
  fixed_.resize(n);
  constexpr std::size_t kChunk = 512;
  for (std::size_t b = 0; b < n; b += kChunk) {
    ad::Tape tape(false);
    Forward fw(m, tape);
    std::vector<EntityId> ids(std::min(kChunk, n - b));
    std::iota(ids.begin(), ids.end(), static_cast<EntityId>(b));
    fw.prepare(kg, ids, seed);
    for (auto e : ids) {
      const auto& c = fw.context(e);
      if (c.fixed) {
        fixed_[e] = c.fixed->value();
        continue;
      }
      local_[e] = c.n_local ? c.local.value() : Tensor({0, m.dim()});
      global_[e] = c.n_global ? c.global.value() : Tensor({0, m.dim()});
    }
    warnings_ += fw.warnings();
  }
}

void ContextCache::install(Forward& fw, EntityId e) const {
  ContextBundle b;
  auto& t = fw.tape();
  if (fixed_[e].numel()) {
    b.fixed = t.constant(fixed_[e]);
  } else {
    b.n_local = local_[e].rows();
    b.n_global = global_[e].rows();
    if (b.n_local) b.local = t.constant(local_[e]);
    if (b.n_global) b.global = t.constant(global_[e]);
  }
  fw.set_context(e, b);
}

namespace {
// Mirrors aggregate() on plain tensors, accumulating into `out`.
void aggregate_value(const Tensor& E, const double* p, bool normalize, double weight, double* out) {
  const std::size_t n = E.rows(), d = E.cols();
  std::vector<double> alpha(n, 1.0 / static_cast<double>(n));
  if (p) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += E[j * d + c] * p[c];
      alpha[j] = s;
    }
    if (normalize) {
      const double mx = *std::max_element(alpha.begin(), alpha.end());
      double z = 0.0;
      for (auto& a : alpha) z += (a = std::exp(a - mx));
      for (auto& a : alpha) a /= z;
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < d; ++c) out[c] += weight * alpha[j] * E[j * d + c];
}
}  // namespace

Tensor ContextCache::represent(EntityId e, const double* p) const {
  const auto& cfg = m_.config();
  if (fixed_[e].numel()) return fixed_[e];
  Tensor out({1, m_.dim()}, 0.0);
  if (!cfg.use_prompt) p = nullptr;
  const bool has_l = local_[e].rows() > 0, has_g = global_[e].rows() > 0;
  const double w = has_l && has_g ? 0.5 : 1.0;
  if (has_l) aggregate_value(local_[e], p, cfg.normalize_weights, w, out.data());
  if (has_g) aggregate_value(global_[e], p, cfg.normalize_weights, w, out.data());
  return out;
}

double distance_value(const Model& m, const std::vector<Tensor>& centers,
                      const std::vector<Tensor>& offsets, const double* point) {
  const std::size_t d = m.dim();
  const double w = m.config().inside_weight;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.size(); ++k) {
    const double* c = centers[k].data();
    double dist = 0.0;
    if (offsets.empty()) {
      for (std::size_t i = 0; i < d; ++i) dist += std::abs(point[i] - c[i]);
    } else {
      const double* o = offsets[k].data();
      double out = 0.0, in = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double delta = std::abs(point[i] - c[i]);
        out += std::max(delta - o[i], 0.0);
        in += std::min(delta, o[i]);
      }
      dist = out + w * in;
    }
    best = std::min(best, dist);
  }
  return best;
}

// ---- feature baseline -------------------------------------------------------

std::optional<EntityId> feature_match(const KnowledgeGraph& train_kg, const KnowledgeGraph& full_kg,
                                      std::span<const std::uint8_t> seen_mask, EntityId e) {
  std::unordered_map<EntityId, std::size_t> overlap;
  for (const auto& f : full_kg.neighbors(e)) {
    if (f.entity >= train_kg.num_entities()) continue;
    // A seen entity s shares (r, j, dir) with e when j sees s via r in the
    // opposite direction on the training graph.
    const Direction want = f.direction == Direction::Out ? Direction::In : Direction::Out;
    for (const auto& g : train_kg.neighbors(f.entity)) {
      if (g.relation != f.relation || g.direction != want) continue;
      if (g.entity == e || g.entity >= seen_mask.size() || !seen_mask[g.entity]) continue;
      ++overlap[g.entity];
    }
  }
  std::optional<EntityId> best;
  std::size_t best_n = 0;
  for (const auto& [s, n] : overlap) {
    if (n > best_n || (n == best_n && best && s < *best)) {
      best = s;
      best_n = n;
    }
  }
  return best;
}

std::vector<EntityId> build_feature_map(const KnowledgeGraph& train_kg, const KnowledgeGraph& full_kg,
                                        const Model& m) {
  std::vector<std::uint8_t> mask(m.num_entities(), 0);
  for (auto s : m.seen()) mask[s] = 1;
  std::vector<EntityId> map(m.num_entities(), Model::kNoMatch);
  for (EntityId e = 0; e < m.num_entities(); ++e) {
    if (mask[e]) {
      map[e] = e;
      continue;
    }
    if (auto s = feature_match(train_kg, full_kg, mask, e)) map[e] = *s;
  }
  return map;
}

}  // namespace proqe
