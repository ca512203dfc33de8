#include "proqe/kg.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "proqe/error.hpp"

namespace proqe {

std::uint32_t Vocab::intern(std::string_view name) {
  auto it = ids_.find(std::string(name));
  if (it != ids_.end()) return it->second;
  auto id = static_cast<std::uint32_t>(names_.size());
  names_.emplace_back(name);
  ids_.emplace(names_.back(), id);
  return id;
}

std::optional<std::uint32_t> Vocab::find(std::string_view name) const {
  auto it = ids_.find(std::string(name));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::name(std::uint32_t id) const {
  if (id >= names_.size())
    throw InvalidArgument("vocabulary id " + std::to_string(id) + " out of range");
  return names_[id];
}

Vocab Vocab::numbered(std::string_view prefix, std::size_t n) {
  Vocab v;
  for (std::size_t i = 0; i < n; ++i) v.intern(std::string(prefix) + std::to_string(i));
  return v;
}

Vocab Vocab::read_dict(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  Vocab v;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": expected id<TAB>name",
                       line_no);
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(0, tab));
    } catch (const std::exception&) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": bad id", line_no);
    }
    if (id != v.size() || v.intern(line.substr(tab + 1)) != id)
      throw ParseError(path.string() + ": line " + std::to_string(line_no) +
                           ": ids must be dense, ordered and unique",
                       line_no);
  }
  return v;
}

KnowledgeGraph::KnowledgeGraph(Vocab entities, Vocab relations, std::vector<Triple> triples)
    : entities_(std::move(entities)), relations_(std::move(relations)), triples_(std::move(triples)) {
  for (const auto& t : triples_) {
    if (t.head >= entities_.size() || t.tail >= entities_.size() ||
        t.relation >= relations_.size())
      throw InvalidArgument("triple id out of range");
  }
  std::sort(triples_.begin(), triples_.end());
  triples_.erase(std::unique(triples_.begin(), triples_.end()), triples_.end());
  idx_ = build(entities_.size(), relations_.size(), triples_);
}

KnowledgeGraph KnowledgeGraph::parse_tsv(std::string_view text, Vocab ents, Vocab rels) {
  std::vector<Triple> triples;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    std::string_view cols[3];
    std::size_t ncol = 0, start = 0;
    bool too_many = false;
    while (true) {
      auto tab = line.find('\t', start);
      auto field = line.substr(start, tab == std::string_view::npos ? line.npos : tab - start);
      if (ncol == 3) {
        too_many = true;
        break;
      }
      cols[ncol++] = field;
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (too_many || ncol != 3 || cols[0].empty() || cols[1].empty() || cols[2].empty()) {
      throw ParseError("line " + std::to_string(line_no) +
                           ": expected head<TAB>relation<TAB>tail",
                       line_no);
    }
    EntityId h = ents.intern(cols[0]);
    RelationId r = rels.intern(cols[1]);
    EntityId t = ents.intern(cols[2]);
    triples.push_back({h, r, t});
  }
  if (triples.empty()) throw ParseError("triple file is empty", 0);
  return KnowledgeGraph(std::move(ents), std::move(rels), std::move(triples));
}

KnowledgeGraph KnowledgeGraph::load_tsv(const std::filesystem::path& path, Vocab ents,
                                        Vocab rels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_tsv(ss.str(), std::move(ents), std::move(rels));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.location());
  }
}

KnowledgeGraph KnowledgeGraph::load_with_dicts(const std::filesystem::path& dir) {
  return load_tsv(dir / "graph.tsv", Vocab::read_dict(dir / "entities.dict"),
                  Vocab::read_dict(dir / "relations.dict"));
}

KnowledgeGraph KnowledgeGraph::with_triples(std::vector<Triple> triples) const {
  return KnowledgeGraph(entities_, relations_, std::move(triples));
}

KnowledgeGraph::Indices KnowledgeGraph::build(std::size_t ne, std::size_t nr,
                                              std::span<const Triple> triples) {
  Indices idx;
  // Triples arrive sorted by (head, relation, tail), so the forward index is a
  // straight CSR over heads.
  idx.out_offsets.assign(ne + 1, 0);
  for (const auto& t : triples) ++idx.out_offsets[t.head + 1];
  for (std::size_t i = 0; i < ne; ++i) idx.out_offsets[i + 1] += idx.out_offsets[i];
  idx.out_rel.reserve(triples.size());
  idx.out_tail.reserve(triples.size());
  for (const auto& t : triples) {
    idx.out_rel.push_back(t.relation);
    idx.out_tail.push_back(t.tail);
  }

  std::vector<std::vector<Neighbor>> nbr(ne);
  std::vector<std::vector<EntityId>> dom(nr), rng(nr);
  for (const auto& t : triples) {
    nbr[t.head].push_back({t.relation, t.tail, Direction::Out});
    nbr[t.tail].push_back({t.relation, t.head, Direction::In});
    dom[t.relation].push_back(t.head);
    rng[t.relation].push_back(t.tail);
  }
  auto flatten = [](auto& lists, auto& offsets, auto& flat) {
    offsets.assign(lists.size() + 1, 0);
    for (std::size_t i = 0; i < lists.size(); ++i) {
      auto& l = lists[i];
      std::sort(l.begin(), l.end());
      l.erase(std::unique(l.begin(), l.end()), l.end());
      offsets[i + 1] = offsets[i] + l.size();
      flat.insert(flat.end(), l.begin(), l.end());
    }
  };
  flatten(nbr, idx.nbr_offsets, idx.nbr);
  flatten(dom, idx.dom_offsets, idx.dom);
  flatten(rng, idx.rng_offsets, idx.rng);
  return idx;
}

void KnowledgeGraph::check_entity(EntityId e) const {
  if (e >= entities_.size())
    throw InvalidArgument("entity id " + std::to_string(e) + " out of range (|V|=" +
                          std::to_string(entities_.size()) + ")");
}

void KnowledgeGraph::check_relation(RelationId r) const {
  if (r >= relations_.size())
    throw InvalidArgument("relation id " + std::to_string(r) + " out of range (|R|=" +
                          std::to_string(relations_.size()) + ")");
}

bool KnowledgeGraph::contains(const Triple& t) const {
  return std::binary_search(triples_.begin(), triples_.end(), t);
}

std::span<const EntityId> KnowledgeGraph::tails(EntityId head, RelationId relation) const {
  check_entity(head);
  check_relation(relation);
  auto b = idx_.out_offsets[head], e = idx_.out_offsets[head + 1];
  auto first = std::lower_bound(idx_.out_rel.begin() + b, idx_.out_rel.begin() + e, relation);
  auto last = std::upper_bound(first, idx_.out_rel.begin() + e, relation);
  auto off = static_cast<std::size_t>(first - idx_.out_rel.begin());
  auto len = static_cast<std::size_t>(last - first);
  return {idx_.out_tail.data() + off, len};
}

std::span<const Neighbor> KnowledgeGraph::neighbors(EntityId e) const {
  check_entity(e);
  auto b = idx_.nbr_offsets[e], end = idx_.nbr_offsets[e + 1];
  return {idx_.nbr.data() + b, end - b};
}

RelationSignature KnowledgeGraph::relation_signature(RelationId r) const {
  check_relation(r);
  RelationSignature sig;
  sig.domain = {idx_.dom.data() + idx_.dom_offsets[r], idx_.dom_offsets[r + 1] - idx_.dom_offsets[r]};
  sig.range = {idx_.rng.data() + idx_.rng_offsets[r], idx_.rng_offsets[r + 1] - idx_.rng_offsets[r]};
  return sig;
}

bool KnowledgeGraph::indices_consistent() const {
  return build(entities_.size(), relations_.size(), triples_) == idx_;
}

void KnowledgeGraph::write_tsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& t : triples_) {
    out << entities_.name(t.head) << '\t' << relations_.name(t.relation) << '\t'
        << entities_.name(t.tail) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void KnowledgeGraph::write_dicts(const std::filesystem::path& dir) const {
  auto dump = [&](const Vocab& v, const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    for (std::size_t i = 0; i < v.size(); ++i) out << i << '\t' << v.names()[i] << '\n';
  };
  dump(entities_, dir / "entities.dict");
  dump(relations_, dir / "relations.dict");
}

}  // namespace proqe
