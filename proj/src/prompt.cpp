#include "proqe/prompt.hpp"

#include <algorithm>
#include <charconv>
#include <functional>

#include "proqe/error.hpp"

namespace proqe {

Token Token::op(Op o) {
  switch (o) {
    case Op::Intersection: return {TokenKind::Int, 0};
    case Op::Union: return {TokenKind::Uni, 0};
    case Op::Negation: return {TokenKind::Neg, 0};
    default: throw InvalidArgument("no operator token for this operation");
  }
}

namespace {

// Walks projection/negation steps down to the chain base (an anchor or an
// intersection/union node). Steps are returned innermost first.
NodeId chain_base(const QueryGraph& q, NodeId id, std::vector<NodeId>& steps) {
  while (true) {
    const auto& n = q.node(id);
    if (n.op != Op::Projection && n.op != Op::Negation) break;
    steps.push_back(id);
    id = n.inputs[0];
  }
  std::reverse(steps.begin(), steps.end());
  return id;
}

std::uint32_t branch_depth(const QueryGraph& q, NodeId id) {
  std::vector<NodeId> steps;
  NodeId base = chain_base(q, id, steps);
  const auto& n = q.node(base);
  if (n.op == Op::None) return 0;
  std::uint32_t d = 0;
  for (NodeId in : n.inputs) d = std::max(d, branch_depth(q, in));
  return d + 1;
}

class Parser {
 public:
  Parser(std::span<const Token> t, std::span<const EntityId> anchors) : t_(t), anchors_(anchors) {}

  QueryGraph run() {
    if (t_.empty()) fail("empty sequence");
    NodeId root = branch().first;
    if (pos_ >= t_.size() || t_[pos_].kind != TokenKind::Ent) fail("missing final [ENT]");
    ++pos_;
    if (pos_ != t_.size()) fail("trailing tokens after final [ENT]");
    if (!anchors_.empty() && next_anchor_ != anchors_.size())
      fail("fewer anchor [ENT] tokens than bound anchors");
    g_.set_answer(root);
    g_.tag = detect_structure(g_);
    return std::move(g_);
  }

 private:
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("token " + std::to_string(pos_) + ": " + msg, pos_);
  }
  const Token& peek() const {
    if (pos_ >= t_.size()) fail("unexpected end of sequence");
    return t_[pos_];
  }
  void expect(TokenKind k, const char* what) {
    if (peek().kind != k) fail(std::string("expected ") + what);
    ++pos_;
  }

  // Returns (node, depth).
  std::pair<NodeId, std::uint32_t> branch() {
    if (peek().kind != TokenKind::BckL) fail("expected [BCK_L]");
    const std::uint32_t depth = t_[pos_++].value;
    NodeId cur = 0;
    if (peek().kind == TokenKind::Ent) {
      if (depth != 0) fail("anchor chain must sit at bracket depth 0");
      ++pos_;
      if (!anchors_.empty() && next_anchor_ >= anchors_.size())
        fail("more anchor [ENT] tokens than bound anchors");
      cur = g_.add_anchor(anchors_.empty() ? 0 : anchors_[next_anchor_]);
      ++next_anchor_;
      if (!step(cur)) fail("anchor chain needs at least one projection or negation");
      while (step(cur)) {
      }
    } else {
      std::vector<NodeId> kids;
      std::uint32_t deepest = 0;
      while (peek().kind == TokenKind::BckL) {
        auto [node, d] = branch();
        kids.push_back(node);
        deepest = std::max(deepest, d);
      }
      if (kids.size() < 2) fail("intersection/union needs at least two branches");
      Op op;
      if (peek().kind == TokenKind::Int) {
        op = Op::Intersection;
      } else if (peek().kind == TokenKind::Uni) {
        op = Op::Union;
      } else {
        fail("expected [INT] or [UNI]");
      }
      ++pos_;
      expect(TokenKind::Mask, "[MASK] after operator");
      if (depth != deepest + 1) fail("bracket depth does not match nesting");
      cur = g_.add_combine(op, std::move(kids));
      while (step(cur)) {
      }
    }
    if (peek().kind != TokenKind::BckR) fail("expected [BCK_R]");
    if (t_[pos_].value != depth) fail("unbalanced brackets");
    ++pos_;
    return {cur, depth};
  }

  bool step(NodeId& cur) {
    const auto& t = peek();
    if (t.kind == TokenKind::Rel) {
      ++pos_;
      expect(TokenKind::Mask, "[MASK] after relation");
      cur = g_.add_projection(cur, t.value);
      return true;
    }
    if (t.kind == TokenKind::Neg) {
      ++pos_;
      expect(TokenKind::Mask, "[MASK] after [NEG]");
      cur = g_.add_negation(cur);
      return true;
    }
    return false;
  }

  std::span<const Token> t_;
  std::size_t pos_ = 0;
  std::span<const EntityId> anchors_;
  std::size_t next_anchor_ = 0;
  QueryGraph g_;
};

}  // namespace

TokenSequence serialize(const QueryGraph& q) {
  validate(q);
  TokenSequence seq;
  auto& out = seq.tokens;
  std::function<void(NodeId)> emit = [&](NodeId id) {
    std::vector<NodeId> steps;
    NodeId base = chain_base(q, id, steps);
    const auto& b = q.node(base);
    const std::uint32_t depth = branch_depth(q, id);
    out.push_back(Token::open(depth));
    if (b.op == Op::None) {
      if (steps.empty())
        throw QueryError("node " + std::to_string(base) +
                         ": bare anchor branch cannot be serialized");
      seq.anchor_positions.push_back(out.size());
      seq.anchors.push_back(b.entity);
      out.push_back(Token::ent());
    } else {
      for (NodeId in : b.inputs) emit(in);
      out.push_back(Token::op(b.op));
      out.push_back(Token::mask());
    }
    for (NodeId s : steps) {
      const auto& n = q.node(s);
      out.push_back(n.op == Op::Projection ? Token::rel(n.relation) : Token::neg());
      out.push_back(Token::mask());
    }
    out.push_back(Token::close(depth));
  };
  emit(q.answer());
  seq.answer_position = out.size();
  out.push_back(Token::ent());
  return seq;
}

QueryGraph parse(std::span<const Token> tokens, std::span<const EntityId> anchors) {
  return Parser(tokens, anchors).run();
}

QueryGraph parse(const TokenSequence& seq) { return parse(seq.tokens, seq.anchors); }

std::string render(const Token& t) {
  switch (t.kind) {
    case TokenKind::Ent: return "[ENT]";
    case TokenKind::Mask: return "[MASK]";
    case TokenKind::Rel: return "[r_" + std::to_string(t.value) + "]";
    case TokenKind::Int: return "[INT]";
    case TokenKind::Uni: return "[UNI]";
    case TokenKind::Neg: return "[NEG]";
    case TokenKind::BckL: return "[BCK_L" + std::to_string(t.value) + "]";
    case TokenKind::BckR: return "[BCK_R" + std::to_string(t.value) + "]";
  }
  return {};
}

std::string render(const TokenSequence& seq) {
  std::string s;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) {
    if (i) s += ' ';
    s += render(seq.tokens[i]);
  }
  return s;
}

std::vector<Token> parse_tokens(std::string_view text) {
  std::vector<Token> out;
  std::size_t pos = 0;
  auto number = [&](std::string_view s, std::size_t at) {
    std::uint32_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw ParseError("token " + std::to_string(at) + ": bad number", at);
    return v;
  };
  while (pos < text.size()) {
    if (text[pos] == ' ') {
      ++pos;
      continue;
    }
    auto end = text.find(' ', pos);
    if (end == std::string_view::npos) end = text.size();
    auto w = text.substr(pos, end - pos);
    pos = end;
    const auto at = out.size();
    if (w.size() < 3 || w.front() != '[' || w.back() != ']')
      throw ParseError("token " + std::to_string(at) + ": expected [..]", at);
    auto body = w.substr(1, w.size() - 2);
    if (body == "ENT") out.push_back(Token::ent());
    else if (body == "MASK") out.push_back(Token::mask());
    else if (body == "INT") out.push_back({TokenKind::Int, 0});
    else if (body == "UNI") out.push_back({TokenKind::Uni, 0});
    else if (body == "NEG") out.push_back(Token::neg());
    else if (body.starts_with("r_")) out.push_back(Token::rel(number(body.substr(2), at)));
    else if (body.starts_with("BCK_L")) out.push_back(Token::open(number(body.substr(5), at)));
    else if (body.starts_with("BCK_R")) out.push_back(Token::close(number(body.substr(5), at)));
    else throw ParseError("token " + std::to_string(at) + ": unknown token " + std::string(w), at);
  }
  return out;
}

Vocabulary::Vocabulary(std::size_t num_relations, std::uint32_t max_depth)
    : num_relations_(num_relations), max_depth_(max_depth) {}

std::size_t Vocabulary::size() const { return 5 + 2 * (max_depth_ + 1) + num_relations_; }

std::uint32_t Vocabulary::id(const Token& t) const {
  switch (t.kind) {
    case TokenKind::Ent: return 0;
    case TokenKind::Mask: return 1;
    case TokenKind::Int: return 2;
    case TokenKind::Uni: return 3;
    case TokenKind::Neg: return 4;
    case TokenKind::BckL:
    case TokenKind::BckR:
      if (t.value > max_depth_)
        throw InvalidArgument("bracket depth " + std::to_string(t.value) +
                              " exceeds vocabulary max depth " + std::to_string(max_depth_));
      return 5 + 2 * t.value + (t.kind == TokenKind::BckR ? 1 : 0);
    case TokenKind::Rel:
      if (t.value >= num_relations_)
        throw InvalidArgument("relation " + std::to_string(t.value) + " not in vocabulary");
      return static_cast<std::uint32_t>(5 + 2 * (max_depth_ + 1) + t.value);
  }
  return 0;
}

std::vector<std::uint32_t> Vocabulary::ids(const TokenSequence& seq) const {
  std::vector<std::uint32_t> out;
  out.reserve(seq.tokens.size());
  for (const auto& t : seq.tokens) out.push_back(id(t));
  return out;
}

}  // namespace proqe
