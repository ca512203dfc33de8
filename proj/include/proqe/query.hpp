#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "proqe/kg.hpp"

namespace proqe {

// The nine query shapes used for grounding. p = projection, i = intersection,
// u = union.
enum class Structure : std::uint8_t { P1, P2, P3, I2, I3, PI, IP, U2, UP };

inline constexpr std::array<Structure, 9> kAllStructures = {
    Structure::P1, Structure::P2, Structure::P3, Structure::I2, Structure::I3,
    Structure::PI, Structure::IP, Structure::U2, Structure::UP};

std::string_view to_string(Structure s);
Structure parse_structure(std::string_view tag);

struct Arity {
  std::size_t anchors;
  std::size_t relations;
};
Arity arity(Structure s);

enum class NodeKind : std::uint8_t { Anchor, Variable, Answer };
enum class Op : std::uint8_t { None, Projection, Intersection, Union, Negation };

using NodeId = std::uint32_t;

// A node together with the operation that produces it. Anchors carry an
// entity and no inputs; every other node is the output of exactly one
// operation over `inputs`.
struct QueryNode {
  NodeKind kind = NodeKind::Variable;
  Op op = Op::None;
  EntityId entity = 0;      // Anchor only
  RelationId relation = 0;  // Projection only
  std::vector<NodeId> inputs;
  bool operator==(const QueryNode&) const = default;
};

class QueryGraph {
 public:
  NodeId add_anchor(EntityId e);
  NodeId add_projection(NodeId input, RelationId r);
  NodeId add_negation(NodeId input);
  NodeId add_combine(Op op, std::vector<NodeId> inputs);  // Intersection | Union
  // Marks `n` as the single answer node.
  void set_answer(NodeId n);
  // Raw insertion, used to build malformed graphs in tests and by parsers.
  NodeId add_node(QueryNode node);

  const std::vector<QueryNode>& nodes() const { return nodes_; }
  const QueryNode& node(NodeId id) const { return nodes_.at(id); }
  NodeId answer() const;

  // Anchor node ids / anchor entities / projection relations in post-order
  // from the answer. This is the flat layout used by instantiate() and the
  // JSON encoding, and the order in which the serializer emits anchors.
  std::vector<NodeId> anchor_nodes() const;
  std::vector<EntityId> anchors() const;
  std::vector<RelationId> relations() const;

  std::optional<Structure> tag;

  bool operator==(const QueryGraph&) const = default;

 private:
  std::vector<QueryNode> nodes_;
};

// Union-free conjunctive queries whose answer sets union to the original.
struct DnfQuery {
  std::vector<QueryGraph> conjuncts;
};

// Builds the canonical graph for a structure. Branches of an intersection or
// union are sorted (see canonicalize()).
QueryGraph instantiate(Structure s, std::span<const EntityId> anchors,
                       std::span<const RelationId> relations);

// Throws QueryError naming the offending node on: cycles, zero or multiple
// answers, anchors with inputs, operator arity violations, dangling inputs.
void validate(const QueryGraph& q);

// Rebuilds the graph as a tree with sibling branches ordered by
// (larger subtree first, shape, anchor ids, relation ids). For same-shape
// siblings this is ordering by (anchor id list, relation id list).
QueryGraph canonicalize(const QueryGraph& q);

// Order-insensitive structural rendering, e.g. "(i (p 3 (a 5)) (p 7 (a 2)))".
// Two graphs are structurally equal iff their canonical forms match.
std::string canonical_form(const QueryGraph& q);
bool structurally_equal(const QueryGraph& a, const QueryGraph& b);

// Recognizes the nine structures on a canonical tree.
std::optional<Structure> detect_structure(const QueryGraph& q);

DnfQuery to_dnf(const QueryGraph& q);
DnfQuery to_dnf(const DnfQuery& q);

}  // namespace proqe
