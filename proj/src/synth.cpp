#include "proqe/synth.hpp"

#include <algorithm>

#include "proqe/error.hpp"
#include "proqe/rng.hpp"

namespace proqe {

KnowledgeGraph synthesize_kg(const SynthOptions& o) {
  if (o.entities < 2 || o.relations == 0 || o.clusters == 0 || o.sources_per_relation == 0)
    throw InvalidArgument("synthetic graph needs >= 2 entities and positive relation/cluster counts");
  const std::size_t C = std::min(o.clusters, o.entities);
  const std::size_t S = std::min(o.sources_per_relation, C);
  const std::size_t target_triples = o.triples ? o.triples : 8 * o.entities;
  Rng rng(derive_seed({o.seed, 0x5e17}));

  std::vector<std::vector<EntityId>> members(C);
  for (EntityId e = 0; e < o.entities; ++e) members[e % C].push_back(e);

  // sources[r][k] -> target cluster map[r][k]
  std::vector<std::vector<std::size_t>> sources(o.relations), targets(o.relations);
  std::size_t next = 0;
  for (std::size_t r = 0; r < o.relations; ++r) {
    for (std::size_t k = 0; k < S; ++k) {
      sources[r].push_back(next % C);
      targets[r].push_back(uniform_index(rng, C));
      ++next;
    }
  }

  std::vector<Triple> triples;
  triples.reserve(target_triples + o.entities);
  auto pick = [&](const std::vector<EntityId>& v) { return v[uniform_index(rng, v.size())]; };
  for (std::size_t i = 0; i < target_triples; ++i) {
    const auto r = static_cast<RelationId>(uniform_index(rng, o.relations));
    const auto k = uniform_index(rng, S);
    triples.push_back({pick(members[sources[r][k]]), r, pick(members[targets[r][k]])});
  }

  // Coverage: every entity takes part in at least one triple.
  std::vector<std::uint8_t> used(o.entities, 0);
  for (const auto& t : triples) used[t.head] = used[t.tail] = 1;
  for (EntityId e = 0; e < o.entities; ++e) {
    if (used[e]) continue;
    const std::size_t c = e % C;
    bool done = false;
    for (std::size_t r = 0; r < o.relations && !done; ++r)
      for (std::size_t k = 0; k < S && !done; ++k)
        if (sources[r][k] == c) {
          triples.push_back({e, static_cast<RelationId>(r), pick(members[targets[r][k]])});
          done = true;
        }
    for (std::size_t r = 0; r < o.relations && !done; ++r)
      for (std::size_t k = 0; k < S && !done; ++k)
        if (targets[r][k] == c) {
          triples.push_back({pick(members[sources[r][k]]), static_cast<RelationId>(r), e});
          done = true;
        }
    if (!done) {
      const auto other = static_cast<EntityId>((e + 1) % o.entities);
      triples.push_back({e, 0, other});
    }
  }
  return KnowledgeGraph(Vocab::numbered("e", o.entities), Vocab::numbered("r", o.relations),
                        std::move(triples));
}

}  // namespace proqe
