#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "proqe/query.hpp"

namespace proqe {

enum class TokenKind : std::uint8_t { Ent, Mask, Rel, Int, Uni, Neg, BckL, BckR };

// `value` is the relation id for Rel and the bracket depth for BckL/BckR.
struct Token {
  TokenKind kind = TokenKind::Ent;
  std::uint32_t value = 0;
  bool operator==(const Token&) const = default;

  static Token ent() { return {TokenKind::Ent, 0}; }
  static Token mask() { return {TokenKind::Mask, 0}; }
  static Token rel(RelationId r) { return {TokenKind::Rel, r}; }
  static Token op(Op o);
  static Token neg() { return {TokenKind::Neg, 0}; }
  static Token open(std::uint32_t depth) { return {TokenKind::BckL, depth}; }
  static Token close(std::uint32_t depth) { return {TokenKind::BckR, depth}; }
};

struct TokenSequence {
  std::vector<Token> tokens;
  std::vector<std::size_t> anchor_positions;  // in QueryGraph::anchor_nodes() order
  std::vector<EntityId> anchors;              // entity bound to each anchor [ENT]
  std::size_t answer_position = 0;            // always tokens.size() - 1
};

// Canonical grammar:
//   seq    := branch ENT
//   branch := BCK_L(0) ENT step+ BCK_R(0)
//           | BCK_L(d) branch branch+ (INT|UNI) MASK step* BCK_R(d)
//   step   := REL(r) MASK | NEG MASK
// where d is one more than the deepest child branch.
TokenSequence serialize(const QueryGraph& q);

// Inverse of serialize(). Throws ParseError carrying the token position.
// Anchor entities come from `seq.anchors`; the bare-token overload binds every
// anchor to `anchors[i]` when given, else to entity 0.
QueryGraph parse(const TokenSequence& seq);
QueryGraph parse(std::span<const Token> tokens, std::span<const EntityId> anchors = {});

// "[BCK_L0] [ENT] [r_12] [MASK] [BCK_R0] [ENT]"
std::string render(const TokenSequence& seq);
std::string render(const Token& t);
// Reads the render() format back.
std::vector<Token> parse_tokens(std::string_view text);

// Token -> embedding slot. Layout: ENT, MASK, INT, UNI, NEG, then BCK_L/BCK_R
// for depths 0..max_depth, then one slot per relation.
class Vocabulary {
 public:
  explicit Vocabulary(std::size_t num_relations, std::uint32_t max_depth = 4);

  std::uint32_t id(const Token& t) const;
  std::vector<std::uint32_t> ids(const TokenSequence& seq) const;
  std::size_t size() const;
  std::size_t num_relations() const { return num_relations_; }
  std::uint32_t max_depth() const { return max_depth_; }

 private:
  std::size_t num_relations_;
  std::uint32_t max_depth_;
};

}  // namespace proqe
