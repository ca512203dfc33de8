#pragma once

#include <cstdint>

#include "proqe/kg.hpp"

namespace proqe {

// Clustered synthetic graph. Entity i belongs to cluster i % clusters. Every
// relation has a few source clusters, each with its own target cluster, so
// the cluster of an entity is predictable from its relation-typed
// neighborhood but not from neighbor identity alone.
struct SynthOptions {
  std::size_t entities = 300;
  std::size_t relations = 12;
  std::size_t clusters = 10;
  std::size_t sources_per_relation = 4;
  std::size_t triples = 0;  // 0 selects 8 * entities
  std::uint64_t seed = 0;
};

KnowledgeGraph synthesize_kg(const SynthOptions& opts);

}  // namespace proqe
