#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sgram/corpus.hpp"

namespace sg {

// Leaf derivation route for synchronous grammars. Identical word pairs can be
// produced by either the pair or the copy route; derivation-level code keeps
// them distinct while the serialized form does not.
enum class LeafKind { kNone = -1, kPair = 0, kDelete = 1, kInsert = 2, kCopy = 3 };

// A binary derivation tree. The root is the child of the start symbol.
// Leaves are preterminals carrying an emission: a word id for PCFG trees, a
// word-id pair for SCFG trees where either side may be the epsilon id.
struct ParseTree {
  int symbol = 0;
  std::unique_ptr<ParseTree> left;
  std::unique_ptr<ParseTree> right;
  int word_a = -1;
  int word_b = -1;
  LeafKind leaf_kind = LeafKind::kNone;
  // Spans over the input stream(s): [i, j) in the source and, for SCFG,
  // [k, l) in the target.
  int i = 0, j = 0, k = 0, l = 0;

  bool is_leaf() const { return left == nullptr; }

  std::unique_ptr<ParseTree> clone() const;
  int leaf_count() const;
  int depth() const;  // a lone leaf has depth 1
  void collect_leaves(std::vector<const ParseTree*>& out) const;
};

std::unique_ptr<ParseTree> make_leaf(int symbol, int word_a, int word_b,
                                     LeafKind kind);
std::unique_ptr<ParseTree> make_internal(int symbol,
                                         std::unique_ptr<ParseTree> left,
                                         std::unique_ptr<ParseTree> right);

// Parenthesized form: "(sym child child)" internal, "(sym w)" PCFG leaf,
// "(sym wa/wb)" SCFG leaf with epsilon rendered "<eps>". The characters
// / ( ) space and backslash are backslash-escaped inside tokens.
std::string serialize_tree(const ParseTree& tree, const Vocabulary& vocab,
                           DatasetKind kind);
std::unique_ptr<ParseTree> parse_tree_string(const std::string& text,
                                             const Vocabulary& vocab,
                                             DatasetKind kind);

// Source/target yields as token ids (epsilon skipped).
std::vector<int> tree_yield_a(const ParseTree& tree, int eps_id);
std::vector<int> tree_yield_b(const ParseTree& tree, int eps_id);

// Recomputes span fields from the leaf sequence.
void annotate_spans(ParseTree& tree, int eps_id);

// Escapes a single token for the tree format.
std::string escape_token(const std::string& token);

// Human-readable yield: source words joined by spaces; for pair trees the two
// sides are joined by '/', an empty side rendered "<eps>".
std::string render_yield(const ParseTree& tree, const Vocabulary& vocab,
                         DatasetKind kind);

}  // namespace sg
