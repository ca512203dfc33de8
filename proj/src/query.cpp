#include "proqe/query.hpp"

#include <algorithm>
#include <functional>
#include <map>
#include <memory>

#include "proqe/error.hpp"

namespace proqe {

namespace {

constexpr std::array<std::string_view, 9> kTags = {"1p", "2p", "3p", "2i", "3i",
                                                   "pi", "ip", "2u", "up"};

// Shape signatures of the canonical trees, indexed like kTags.
constexpr std::array<std::string_view, 9> kShapes = {
    "p(a)",         "p(p(a))",      "p(p(p(a)))",       "i(p(a),p(a))",  "i(p(a),p(a),p(a))",
    "i(p(p(a)),p(a))", "p(i(p(a),p(a)))", "u(p(a),p(a))", "p(u(p(a),p(a)))"};

struct SubtreeKey {
  std::size_t size = 0;
  std::string shape;
  std::vector<EntityId> anchors;
  std::vector<RelationId> relations;
  std::vector<NodeId> child_order;  // inputs in canonical order

  bool operator<(const SubtreeKey& o) const {
    if (size != o.size) return size > o.size;
    if (shape != o.shape) return shape < o.shape;
    if (anchors != o.anchors) return anchors < o.anchors;
    return relations < o.relations;
  }
};

SubtreeKey subtree_key(const QueryGraph& q, NodeId id, std::map<NodeId, SubtreeKey>& memo,
                       std::size_t depth = 0) {
  if (depth > q.nodes().size()) throw QueryError("cycle through node " + std::to_string(id));
  if (auto it = memo.find(id); it != memo.end()) return it->second;
  const auto& n = q.node(id);
  SubtreeKey key;
  key.size = 1;
  std::vector<std::pair<SubtreeKey, NodeId>> kids;
  for (NodeId in : n.inputs) kids.emplace_back(subtree_key(q, in, memo, depth + 1), in);
  if (n.op == Op::Intersection || n.op == Op::Union) {
    std::stable_sort(kids.begin(), kids.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
  }
  std::string inner;
  for (std::size_t i = 0; i < kids.size(); ++i) {
    const auto& k = kids[i].first;
    key.size += k.size;
    if (i) inner += ',';
    inner += k.shape;
    key.anchors.insert(key.anchors.end(), k.anchors.begin(), k.anchors.end());
    key.relations.insert(key.relations.end(), k.relations.begin(), k.relations.end());
    key.child_order.push_back(kids[i].second);
  }
  switch (n.op) {
    case Op::None:
      key.shape = "a";
      key.anchors.push_back(n.entity);
      break;
    case Op::Projection:
      key.shape = "p(" + inner + ")";
      key.relations.push_back(n.relation);
      break;
    case Op::Negation:
      key.shape = "n(" + inner + ")";
      break;
    case Op::Intersection:
      key.shape = "i(" + inner + ")";
      break;
    case Op::Union:
      key.shape = "u(" + inner + ")";
      break;
  }
  memo.emplace(id, key);
  return key;
}

void post_order(const QueryGraph& q, NodeId id, const std::function<void(NodeId)>& visit) {
  for (NodeId in : q.node(id).inputs) post_order(q, in, visit);
  visit(id);
}

// Expression tree used while distributing unions.
struct Expr {
  Op op = Op::None;
  EntityId entity = 0;
  RelationId relation = 0;
  std::vector<std::shared_ptr<const Expr>> kids;
};
using ExprPtr = std::shared_ptr<const Expr>;

ExprPtr make_expr(Op op, std::vector<ExprPtr> kids, EntityId e = 0, RelationId r = 0) {
  auto x = std::make_shared<Expr>();
  x->op = op;
  x->entity = e;
  x->relation = r;
  x->kids = std::move(kids);
  return x;
}

std::vector<ExprPtr> alternatives(const QueryGraph& q, NodeId id) {
  const auto& n = q.node(id);
  switch (n.op) {
    case Op::None:
      return {make_expr(Op::None, {}, n.entity)};
    case Op::Projection: {
      std::vector<ExprPtr> out;
      for (auto& a : alternatives(q, n.inputs[0]))
        out.push_back(make_expr(Op::Projection, {a}, 0, n.relation));
      return out;
    }
    case Op::Negation: {
      auto alts = alternatives(q, n.inputs[0]);
      // not(A or B) = not A and not B
      std::vector<ExprPtr> negs;
      for (auto& a : alts) negs.push_back(make_expr(Op::Negation, {a}));
      if (negs.size() == 1) return negs;
      return {make_expr(Op::Intersection, std::move(negs))};
    }
    case Op::Union: {
      std::vector<ExprPtr> out;
      for (NodeId in : n.inputs) {
        auto alts = alternatives(q, in);
        out.insert(out.end(), alts.begin(), alts.end());
      }
      return out;
    }
    case Op::Intersection: {
      std::vector<std::vector<ExprPtr>> combos{{}};
      for (NodeId in : n.inputs) {
        auto alts = alternatives(q, in);
        std::vector<std::vector<ExprPtr>> next;
        for (const auto& c : combos) {
          for (const auto& a : alts) {
            auto extended = c;
            extended.push_back(a);
            next.push_back(std::move(extended));
          }
        }
        combos = std::move(next);
      }
      std::vector<ExprPtr> out;
      for (auto& c : combos) out.push_back(make_expr(Op::Intersection, std::move(c)));
      return out;
    }
  }
  return {};
}

NodeId build_expr(QueryGraph& g, const Expr& x) {
  switch (x.op) {
    case Op::None:
      return g.add_anchor(x.entity);
    case Op::Projection:
      return g.add_projection(build_expr(g, *x.kids[0]), x.relation);
    case Op::Negation:
      return g.add_negation(build_expr(g, *x.kids[0]));
    default: {
      std::vector<NodeId> ins;
      for (const auto& k : x.kids) ins.push_back(build_expr(g, *k));
      return g.add_combine(x.op, std::move(ins));
    }
  }
}

}  // namespace

std::string_view to_string(Structure s) { return kTags[static_cast<std::size_t>(s)]; }

Structure parse_structure(std::string_view tag) {
  for (std::size_t i = 0; i < kTags.size(); ++i)
    if (kTags[i] == tag) return static_cast<Structure>(i);
  throw InvalidArgument("unknown query structure '" + std::string(tag) +
                        "' (expected one of 1p 2p 3p 2i 3i pi ip 2u up)");
}

Arity arity(Structure s) {
  switch (s) {
    case Structure::P1: return {1, 1};
    case Structure::P2: return {1, 2};
    case Structure::P3: return {1, 3};
    case Structure::I2: return {2, 2};
    case Structure::I3: return {3, 3};
    case Structure::PI: return {2, 3};
    case Structure::IP: return {2, 3};
    case Structure::U2: return {2, 2};
    case Structure::UP: return {2, 3};
  }
  return {0, 0};
}

NodeId QueryGraph::add_node(QueryNode node) {
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId QueryGraph::add_anchor(EntityId e) {
  QueryNode n;
  n.kind = NodeKind::Anchor;
  n.entity = e;
  return add_node(std::move(n));
}

NodeId QueryGraph::add_projection(NodeId input, RelationId r) {
  QueryNode n;
  n.op = Op::Projection;
  n.relation = r;
  n.inputs = {input};
  return add_node(std::move(n));
}

NodeId QueryGraph::add_negation(NodeId input) {
  QueryNode n;
  n.op = Op::Negation;
  n.inputs = {input};
  return add_node(std::move(n));
}

NodeId QueryGraph::add_combine(Op op, std::vector<NodeId> inputs) {
  if (op != Op::Intersection && op != Op::Union)
    throw InvalidArgument("add_combine expects intersection or union");
  QueryNode n;
  n.op = op;
  n.inputs = std::move(inputs);
  return add_node(std::move(n));
}

void QueryGraph::set_answer(NodeId id) {
  for (auto& n : nodes_)
    if (n.kind == NodeKind::Answer) n.kind = NodeKind::Variable;
  nodes_.at(id).kind = NodeKind::Answer;
}

NodeId QueryGraph::answer() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].kind == NodeKind::Answer) return static_cast<NodeId>(i);
  throw QueryError("query has no answer node");
}

std::vector<NodeId> QueryGraph::anchor_nodes() const {
  std::vector<NodeId> out;
  post_order(*this, answer(), [&](NodeId id) {
    if (nodes_[id].kind == NodeKind::Anchor) out.push_back(id);
  });
  return out;
}

std::vector<EntityId> QueryGraph::anchors() const {
  std::vector<EntityId> out;
  for (NodeId id : anchor_nodes()) out.push_back(nodes_[id].entity);
  return out;
}

std::vector<RelationId> QueryGraph::relations() const {
  std::vector<RelationId> out;
  post_order(*this, answer(), [&](NodeId id) {
    if (nodes_[id].op == Op::Projection) out.push_back(nodes_[id].relation);
  });
  return out;
}

QueryGraph instantiate(Structure s, std::span<const EntityId> a, std::span<const RelationId> r) {
  auto ar = arity(s);
  if (a.size() != ar.anchors || r.size() != ar.relations) {
    throw InvalidArgument("structure " + std::string(to_string(s)) + " needs " +
                          std::to_string(ar.anchors) + " anchor(s) and " +
                          std::to_string(ar.relations) + " relation(s), got " +
                          std::to_string(a.size()) + " and " + std::to_string(r.size()));
  }
  QueryGraph g;
  auto p = [&](NodeId n, std::size_t k) { return g.add_projection(n, r[k]); };
  auto anchor = [&](std::size_t k) { return g.add_anchor(a[k]); };
  NodeId root = 0;
  switch (s) {
    case Structure::P1: root = p(anchor(0), 0); break;
    case Structure::P2: root = p(p(anchor(0), 0), 1); break;
    case Structure::P3: root = p(p(p(anchor(0), 0), 1), 2); break;
    case Structure::I2: {
      auto b0 = p(anchor(0), 0);
      auto b1 = p(anchor(1), 1);
      root = g.add_combine(Op::Intersection, {b0, b1});
      break;
    }
    case Structure::I3: {
      auto b0 = p(anchor(0), 0);
      auto b1 = p(anchor(1), 1);
      auto b2 = p(anchor(2), 2);
      root = g.add_combine(Op::Intersection, {b0, b1, b2});
      break;
    }
    case Structure::PI: {
      auto b0 = p(p(anchor(0), 0), 1);
      auto b1 = p(anchor(1), 2);
      root = g.add_combine(Op::Intersection, {b0, b1});
      break;
    }
    case Structure::IP: {
      auto b0 = p(anchor(0), 0);
      auto b1 = p(anchor(1), 1);
      root = p(g.add_combine(Op::Intersection, {b0, b1}), 2);
      break;
    }
    case Structure::U2: {
      auto b0 = p(anchor(0), 0);
      auto b1 = p(anchor(1), 1);
      root = g.add_combine(Op::Union, {b0, b1});
      break;
    }
    case Structure::UP: {
      auto b0 = p(anchor(0), 0);
      auto b1 = p(anchor(1), 1);
      root = p(g.add_combine(Op::Union, {b0, b1}), 2);
      break;
    }
  }
  g.set_answer(root);
  auto c = canonicalize(g);
  c.tag = s;
  return c;
}

void validate(const QueryGraph& q) {
  const auto& nodes = q.nodes();
  const auto n = nodes.size();
  std::vector<NodeId> answers;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& node = nodes[i];
    auto where = "node " + std::to_string(i);
    if (node.kind == NodeKind::Answer) answers.push_back(static_cast<NodeId>(i));
    for (NodeId in : node.inputs)
      if (in >= n) throw QueryError(where + ": dangling input " + std::to_string(in));
    if (node.kind == NodeKind::Anchor) {
      if (node.op != Op::None || !node.inputs.empty())
        throw QueryError(where + ": anchor has incoming edges");
      continue;
    }
    switch (node.op) {
      case Op::None:
        throw QueryError(where + ": non-anchor node without an operation");
      case Op::Projection:
      case Op::Negation:
        if (node.inputs.size() != 1)
          throw QueryError(where + ": projection/negation needs exactly 1 input");
        break;
      case Op::Intersection:
      case Op::Union:
        if (node.inputs.size() < 2)
          throw QueryError(where + ": intersection/union needs at least 2 inputs");
        break;
    }
  }
  if (answers.empty()) throw QueryError("no answer node");
  if (answers.size() > 1) {
    throw QueryError("multiple answers (nodes " + std::to_string(answers[0]) + " and " +
                     std::to_string(answers[1]) + ")");
  }
  for (std::size_t i = 0; i < n; ++i)
    for (NodeId in : nodes[i].inputs)
      if (in == answers[0])
        throw QueryError("node " + std::to_string(i) + ": answer node used as an input");

  // 0 = unvisited, 1 = on stack, 2 = done
  std::vector<std::uint8_t> color(n, 0);
  std::function<void(NodeId)> dfs = [&](NodeId id) {
    color[id] = 1;
    for (NodeId in : nodes[id].inputs) {
      if (color[in] == 1) throw QueryError("cycle through node " + std::to_string(in));
      if (color[in] == 0) dfs(in);
    }
    color[id] = 2;
  };
  for (std::size_t i = 0; i < n; ++i)
    if (color[i] == 0) dfs(static_cast<NodeId>(i));
}

QueryGraph canonicalize(const QueryGraph& q) {
  validate(q);
  std::map<NodeId, SubtreeKey> memo;
  QueryGraph out;
  std::function<NodeId(NodeId)> copy = [&](NodeId id) -> NodeId {
    const auto& n = q.node(id);
    const auto key = subtree_key(q, id, memo);
    std::vector<NodeId> ins;
    for (NodeId child : key.child_order) ins.push_back(copy(child));
    QueryNode c;
    c.kind = n.kind == NodeKind::Anchor ? NodeKind::Anchor : NodeKind::Variable;
    c.op = n.op;
    c.entity = n.op == Op::None ? n.entity : 0;
    c.relation = n.op == Op::Projection ? n.relation : 0;
    c.inputs = std::move(ins);
    return out.add_node(std::move(c));
  };
  out.set_answer(copy(q.answer()));
  out.tag = detect_structure(out);
  return out;
}

std::string canonical_form(const QueryGraph& q) {
  validate(q);
  std::map<NodeId, SubtreeKey> memo;
  std::function<std::string(NodeId)> render = [&](NodeId id) {
    const auto& n = q.node(id);
    const auto key = subtree_key(q, id, memo);
    std::string kids;
    for (NodeId c : key.child_order) kids += " " + render(c);
    switch (n.op) {
      case Op::None: return "(a " + std::to_string(n.entity) + ")";
      case Op::Projection: return "(p " + std::to_string(n.relation) + kids + ")";
      case Op::Negation: return "(n" + kids + ")";
      case Op::Intersection: return "(i" + kids + ")";
      case Op::Union: return "(u" + kids + ")";
    }
    return std::string();
  };
  return render(q.answer());
}

bool structurally_equal(const QueryGraph& a, const QueryGraph& b) {
  return canonical_form(a) == canonical_form(b);
}

std::optional<Structure> detect_structure(const QueryGraph& q) {
  std::map<NodeId, SubtreeKey> memo;
  const auto shape = subtree_key(q, q.answer(), memo).shape;
  for (std::size_t i = 0; i < kShapes.size(); ++i)
    if (kShapes[i] == shape) return static_cast<Structure>(i);
  return std::nullopt;
}

DnfQuery to_dnf(const QueryGraph& q) {
  validate(q);
  DnfQuery out;
  for (const auto& alt : alternatives(q, q.answer())) {
    QueryGraph g;
    g.set_answer(build_expr(g, *alt));
    out.conjuncts.push_back(canonicalize(g));
  }
  return out;
}

DnfQuery to_dnf(const DnfQuery& q) {
  DnfQuery out;
  for (const auto& c : q.conjuncts) {
    auto sub = to_dnf(c);
    for (auto& g : sub.conjuncts) out.conjuncts.push_back(std::move(g));
  }
  return out;
}

}  // namespace proqe
