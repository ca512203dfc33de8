#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace proqe {

using EntityId = std::uint32_t;
using RelationId = std::uint32_t;

// Direction of an edge relative to the entity whose neighbor list holds it.
// For the triple (a, r, b): a sees (r, b, Out), b sees (r, a, In).
enum class Direction : std::uint8_t { Out = 0, In = 1 };

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  auto operator<=>(const Triple&) const = default;
};

struct Neighbor {
  RelationId relation = 0;
  EntityId entity = 0;
  Direction direction = Direction::Out;
  auto operator<=>(const Neighbor&) const = default;
};

// Bijective name <-> dense id mapping, ids assigned by first interning.
class Vocab {
 public:
  std::uint32_t intern(std::string_view name);
  std::optional<std::uint32_t> find(std::string_view name) const;
  const std::string& name(std::uint32_t id) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  // Synthesizes names `prefix0 .. prefix{n-1}`.
  static Vocab numbered(std::string_view prefix, std::size_t n);
  // Reads an `id<TAB>name` dump; ids must be 0..n-1 in order.
  static Vocab read_dict(const std::filesystem::path& path);

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

struct RelationSignature {
  std::span<const EntityId> domain;  // sorted heads of the relation
  std::span<const EntityId> range;   // sorted tails of the relation
};

// Immutable triple store G = (V, R, T) with forward, neighbor, domain and range
// indices. All indices are derived from the sorted, de-duplicated triple list.
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;
  KnowledgeGraph(Vocab entities, Vocab relations, std::vector<Triple> triples);

  // Reads `head<TAB>relation<TAB>tail` lines; ids by first appearance.
  // Pre-seeded vocabularies fix the ids of known names; new names are
  // appended.
  static KnowledgeGraph load_tsv(const std::filesystem::path& path, Vocab entities = {},
                                 Vocab relations = {});
  static KnowledgeGraph parse_tsv(std::string_view text, Vocab entities = {},
                                  Vocab relations = {});
  // Loads `graph.tsv` with ids pinned by `entities.dict` / `relations.dict`.
  static KnowledgeGraph load_with_dicts(const std::filesystem::path& dir);

  // Same id spaces, different triple set. Used for the training graph and for
  // re-adding auxiliary triples.
  KnowledgeGraph with_triples(std::vector<Triple> triples) const;

  std::size_t num_entities() const { return entities_.size(); }
  std::size_t num_relations() const { return relations_.size(); }
  std::size_t num_triples() const { return triples_.size(); }

  const Vocab& entities() const { return entities_; }
  const Vocab& relations() const { return relations_; }
  std::span<const Triple> triples() const { return triples_; }

  bool contains(const Triple& t) const;

  // Sorted tails t with (head, relation, t) in T.
  std::span<const EntityId> tails(EntityId head, RelationId relation) const;

  // Every incident edge, ordered by (relation, neighbor, direction).
  std::span<const Neighbor> neighbors(EntityId e) const;

  RelationSignature relation_signature(RelationId r) const;

  // Rebuilds every index from the triple list and compares with the current
  // ones. Always true for a correctly constructed graph.
  bool indices_consistent() const;

  void write_tsv(const std::filesystem::path& path) const;
  // entities.dict / relations.dict as `id<TAB>name`.
  void write_dicts(const std::filesystem::path& dir) const;

 private:
  struct Indices {
    std::vector<std::size_t> out_offsets;  // per head, into out_rel/out_tail
    std::vector<RelationId> out_rel;
    std::vector<EntityId> out_tail;
    std::vector<std::size_t> nbr_offsets;
    std::vector<Neighbor> nbr;
    std::vector<std::size_t> dom_offsets;
    std::vector<EntityId> dom;
    std::vector<std::size_t> rng_offsets;
    std::vector<EntityId> rng;
    bool operator==(const Indices&) const = default;
  };

  static Indices build(std::size_t num_entities, std::size_t num_relations,
                       std::span<const Triple> triples);
  void check_entity(EntityId e) const;
  void check_relation(RelationId r) const;

  Vocab entities_;
  Vocab relations_;
  std::vector<Triple> triples_;
  Indices idx_;
};

}  // namespace proqe
