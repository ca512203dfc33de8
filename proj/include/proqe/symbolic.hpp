#pragma once

#include <initializer_list>
#include <span>
#include <vector>

#include "proqe/kg.hpp"
#include "proqe/query.hpp"

namespace proqe {

// Sorted, duplicate-free set of entity ids.
class EntitySet {
 public:
  EntitySet() = default;
  EntitySet(std::initializer_list<EntityId> ids);
  static EntitySet from_unsorted(std::vector<EntityId> ids);

  std::span<const EntityId> members() const { return members_; }
  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty(); }
  bool contains(EntityId e) const;
  auto begin() const { return members_.begin(); }
  auto end() const { return members_.end(); }

  bool operator==(const EntitySet&) const = default;

 private:
  std::vector<EntityId> members_;
};

enum class SetOp { Union, Intersection };

// { e' | exists e in s with (e, r, e') in T }
EntitySet project(const KnowledgeGraph& kg, const EntitySet& s, RelationId r);
// Throws InvalidArgument for fewer than two sets.
EntitySet combine(SetOp op, std::span<const EntitySet> sets);
// V - s
EntitySet complement(const KnowledgeGraph& kg, const EntitySet& s);

// Post-order evaluation of the query DAG. Throws InvalidArgument when an anchor
// or relation id does not exist in `kg`.
EntitySet answer_set(const KnowledgeGraph& kg, const QueryGraph& q);
// Union of the conjunct answer sets.
EntitySet answer_set(const KnowledgeGraph& kg, const DnfQuery& q);

}  // namespace proqe
