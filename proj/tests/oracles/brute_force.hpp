#pragma once

// Reference answers by exhaustive variable assignment. Knows only the logical
// formula of each structure over the flat (anchors, relations) layout and the
// raw triple set; shares no code with the set-based evaluator.

#include <algorithm>
#include <set>
#include <span>
#include <vector>

#include "proqe/kg.hpp"
#include "proqe/query.hpp"

namespace oracle {

using proqe::EntityId;
using proqe::RelationId;
using proqe::Structure;

struct TripleSet {
  std::set<proqe::Triple> t;
  explicit TripleSet(std::span<const proqe::Triple> triples) : t(triples.begin(), triples.end()) {}
  bool has(EntityId h, RelationId r, EntityId x) const { return t.count({h, r, x}) != 0; }
};

inline std::vector<EntityId> answers(const TripleSet& g, std::size_t n, Structure s,
                                     const std::vector<EntityId>& a, const std::vector<RelationId>& r) {
  std::vector<EntityId> out;
  auto exists = [&](auto pred) {
    for (EntityId v = 0; v < n; ++v)
      if (pred(v)) return true;
    return false;
  };
  for (EntityId V = 0; V < n; ++V) {
    bool ok = false;
    switch (s) {
      case Structure::P1: ok = g.has(a[0], r[0], V); break;
      case Structure::P2:
        ok = exists([&](EntityId v1) { return g.has(a[0], r[0], v1) && g.has(v1, r[1], V); });
        break;
      case Structure::P3:
        ok = exists([&](EntityId v1) {
          return g.has(a[0], r[0], v1) &&
                 exists([&](EntityId v2) { return g.has(v1, r[1], v2) && g.has(v2, r[2], V); });
        });
        break;
      case Structure::I2: ok = g.has(a[0], r[0], V) && g.has(a[1], r[1], V); break;
      case Structure::I3:
        ok = g.has(a[0], r[0], V) && g.has(a[1], r[1], V) && g.has(a[2], r[2], V);
        break;
      case Structure::PI:
        ok = g.has(a[1], r[2], V) &&
             exists([&](EntityId v) { return g.has(a[0], r[0], v) && g.has(v, r[1], V); });
        break;
      case Structure::IP:
        ok = exists([&](EntityId v) {
          return g.has(a[0], r[0], v) && g.has(a[1], r[1], v) && g.has(v, r[2], V);
        });
        break;
      case Structure::U2: ok = g.has(a[0], r[0], V) || g.has(a[1], r[1], V); break;
      case Structure::UP:
        ok = exists([&](EntityId v) {
          return (g.has(a[0], r[0], v) || g.has(a[1], r[1], v)) && g.has(v, r[2], V);
        });
        break;
    }
    if (ok) out.push_back(V);
  }
  return out;
}

}  // namespace oracle
