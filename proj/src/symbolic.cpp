#include "proqe/symbolic.hpp"

#include <algorithm>
#include <iterator>
#include <optional>

#include "proqe/error.hpp"

namespace proqe {

EntitySet::EntitySet(std::initializer_list<EntityId> ids)
    : EntitySet(from_unsorted(std::vector<EntityId>(ids))) {}

EntitySet EntitySet::from_unsorted(std::vector<EntityId> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  EntitySet s;
  s.members_ = std::move(ids);
  return s;
}

bool EntitySet::contains(EntityId e) const {
  return std::binary_search(members_.begin(), members_.end(), e);
}

EntitySet project(const KnowledgeGraph& kg, const EntitySet& s, RelationId r) {
  std::vector<EntityId> out;
  for (EntityId e : s) {
    auto t = kg.tails(e, r);
    out.insert(out.end(), t.begin(), t.end());
  }
  return EntitySet::from_unsorted(std::move(out));
}

EntitySet combine(SetOp op, std::span<const EntitySet> sets) {
  if (sets.size() < 2) throw InvalidArgument("combine needs at least two sets");
  std::vector<EntityId> acc(sets[0].begin(), sets[0].end());
  for (std::size_t i = 1; i < sets.size(); ++i) {
    std::vector<EntityId> next;
    if (op == SetOp::Union) {
      std::set_union(acc.begin(), acc.end(), sets[i].begin(), sets[i].end(),
                     std::back_inserter(next));
    } else {
      std::set_intersection(acc.begin(), acc.end(), sets[i].begin(), sets[i].end(),
                            std::back_inserter(next));
    }
    acc = std::move(next);
  }
  return EntitySet::from_unsorted(std::move(acc));
}

EntitySet complement(const KnowledgeGraph& kg, const EntitySet& s) {
  std::vector<EntityId> out;
  out.reserve(kg.num_entities() - std::min(kg.num_entities(), s.size()));
  auto it = s.begin();
  for (EntityId e = 0; e < kg.num_entities(); ++e) {
    while (it != s.end() && *it < e) ++it;
    if (it == s.end() || *it != e) out.push_back(e);
  }
  return EntitySet::from_unsorted(std::move(out));
}

EntitySet answer_set(const KnowledgeGraph& kg, const QueryGraph& q) {
  validate(q);
  const auto& nodes = q.nodes();
  std::vector<std::optional<EntitySet>> memo(nodes.size());
  auto eval = [&](auto&& self, NodeId id) -> const EntitySet& {
    if (memo[id]) return *memo[id];
    const auto& n = nodes[id];
    EntitySet result;
    switch (n.op) {
      case Op::None:
        if (n.entity >= kg.num_entities())
          throw InvalidArgument("anchor entity " + std::to_string(n.entity) +
                                " does not exist in the graph");
        result = EntitySet{n.entity};
        break;
      case Op::Projection:
        if (n.relation >= kg.num_relations())
          throw InvalidArgument("relation " + std::to_string(n.relation) +
                                " does not exist in the graph");
        result = project(kg, self(self, n.inputs[0]), n.relation);
        break;
      case Op::Negation:
        result = complement(kg, self(self, n.inputs[0]));
        break;
      case Op::Intersection:
      case Op::Union: {
        std::vector<EntitySet> parts;
        for (NodeId in : n.inputs) parts.push_back(self(self, in));
        result = combine(n.op == Op::Union ? SetOp::Union : SetOp::Intersection, parts);
        break;
      }
    }
    memo[id] = std::move(result);
    return *memo[id];
  };
  return eval(eval, q.answer());
}

EntitySet answer_set(const KnowledgeGraph& kg, const DnfQuery& q) {
  if (q.conjuncts.empty()) return {};
  if (q.conjuncts.size() == 1) return answer_set(kg, q.conjuncts[0]);
  std::vector<EntitySet> parts;
  for (const auto& c : q.conjuncts) parts.push_back(answer_set(kg, c));
  return combine(SetOp::Union, parts);
}

}  // namespace proqe
