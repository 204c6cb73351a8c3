#include "sgram/tree.hpp"

#include <algorithm>
#include <cctype>

namespace sg {

std::unique_ptr<ParseTree> ParseTree::clone() const {
  auto copy = std::make_unique<ParseTree>();
  copy->symbol = symbol;
  copy->word_a = word_a;
  copy->word_b = word_b;
  copy->leaf_kind = leaf_kind;
  copy->i = i;
  copy->j = j;
  copy->k = k;
  copy->l = l;
  if (left) copy->left = left->clone();
  if (right) copy->right = right->clone();
  return copy;
}

int ParseTree::leaf_count() const {
  if (is_leaf()) return 1;
  return left->leaf_count() + right->leaf_count();
}

int ParseTree::depth() const {
  if (is_leaf()) return 1;
  return 1 + std::max(left->depth(), right->depth());
}

void ParseTree::collect_leaves(std::vector<const ParseTree*>& out) const {
  if (is_leaf()) {
    out.push_back(this);
    return;
  }
  left->collect_leaves(out);
  right->collect_leaves(out);
}

std::unique_ptr<ParseTree> make_leaf(int symbol, int word_a, int word_b,
                                     LeafKind kind) {
  auto node = std::make_unique<ParseTree>();
  node->symbol = symbol;
  node->word_a = word_a;
  node->word_b = word_b;
  node->leaf_kind = kind;
  return node;
}

std::unique_ptr<ParseTree> make_internal(int symbol,
                                         std::unique_ptr<ParseTree> left,
                                         std::unique_ptr<ParseTree> right) {
  auto node = std::make_unique<ParseTree>();
  node->symbol = symbol;
  node->left = std::move(left);
  node->right = std::move(right);
  return node;
}

std::string escape_token(const std::string& token) {
  std::string out;
  out.reserve(token.size());
  for (char c : token) {
    if (c == '/' || c == '(' || c == ')' || c == ' ' || c == '\\')
      out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

namespace {

std::string render_side(int word, const Vocabulary& vocab) {
  if (vocab.eps_id && word == *vocab.eps_id) return kEpsToken;
  return escape_token(vocab.word(word));
}

void serialize_into(const ParseTree& tree, const Vocabulary& vocab,
                    DatasetKind kind, std::string& out) {
  out.push_back('(');
  out += std::to_string(tree.symbol);
  out.push_back(' ');
  if (tree.is_leaf()) {
    if (kind == DatasetKind::kSingle) {
      out += escape_token(vocab.word(tree.word_a));
    } else {
      out += render_side(tree.word_a, vocab);
      out.push_back('/');
      out += render_side(tree.word_b, vocab);
    }
  } else {
    serialize_into(*tree.left, vocab, kind, out);
    out.push_back(' ');
    serialize_into(*tree.right, vocab, kind, out);
  }
  out.push_back(')');
}

struct TreeParser {
  const std::string& text;
  const Vocabulary& vocab;
  DatasetKind kind;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& why) const {
    throw Error(ErrorCode::kSchema, "malformed tree at offset " +
                                        std::to_string(pos) + ": " + why);
  }

  void skip_spaces() {
    while (pos < text.size() && text[pos] == ' ') ++pos;
  }

  char peek() const { return pos < text.size() ? text[pos] : '\0'; }

  int parse_symbol() {
    std::size_t start = pos;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos])))
      ++pos;
    if (pos == start) fail("expected symbol id");
    return std::stoi(text.substr(start, pos - start));
  }

  // Reads one emission side, stopping at an unescaped '/', ' ' or ')'.
  std::string parse_side() {
    std::string raw;
    while (pos < text.size()) {
      char c = text[pos];
      if (c == '\\') {
        if (pos + 1 >= text.size()) fail("dangling escape");
        raw.push_back(text[pos + 1]);
        pos += 2;
        continue;
      }
      if (c == '/' || c == ' ' || c == ')') break;
      raw.push_back(c);
      ++pos;
    }
    return raw;
  }

  int side_to_id(const std::string& side) {
    if (kind == DatasetKind::kPair && side == kEpsToken) {
      if (!vocab.eps_id) fail("epsilon in a vocabulary without one");
      return *vocab.eps_id;
    }
    auto it = vocab.index.find(side);
    if (it == vocab.index.end()) fail("unknown token \"" + side + "\"");
    return it->second;
  }

  std::unique_ptr<ParseTree> parse_node() {
    skip_spaces();
    if (peek() != '(') fail("expected '('");
    ++pos;
    int symbol = parse_symbol();
    skip_spaces();
    if (peek() == '(') {
      auto left = parse_node();
      skip_spaces();
      auto right = parse_node();
      skip_spaces();
      if (peek() != ')') fail("expected ')'");
      ++pos;
      auto node = make_internal(symbol, std::move(left), std::move(right));
      return node;
    }
    std::string side_a = parse_side();
    int wa, wb = -1;
    if (kind == DatasetKind::kPair) {
      if (peek() != '/') fail("expected '/' in pair emission");
      ++pos;
      std::string side_b = parse_side();
      wa = side_to_id(side_a);
      wb = side_to_id(side_b);
    } else {
      wa = side_to_id(side_a);
    }
    skip_spaces();
    if (peek() != ')') fail("expected ')' after emission");
    ++pos;
    return make_leaf(symbol, wa, wb, LeafKind::kNone);
  }
};

}  // namespace

std::string serialize_tree(const ParseTree& tree, const Vocabulary& vocab,
                           DatasetKind kind) {
  std::string out;
  serialize_into(tree, vocab, kind, out);
  return out;
}

std::unique_ptr<ParseTree> parse_tree_string(const std::string& text,
                                             const Vocabulary& vocab,
                                             DatasetKind kind) {
  TreeParser parser{text, vocab, kind};
  auto tree = parser.parse_node();
  parser.skip_spaces();
  if (parser.pos != text.size())
    throw Error(ErrorCode::kSchema, "trailing characters after tree");
  return tree;
}

std::vector<int> tree_yield_a(const ParseTree& tree, int eps_id) {
  std::vector<const ParseTree*> leaves;
  tree.collect_leaves(leaves);
  std::vector<int> out;
  for (const ParseTree* leaf : leaves) {
    if (leaf->word_a != eps_id) out.push_back(leaf->word_a);
  }
  return out;
}

std::vector<int> tree_yield_b(const ParseTree& tree, int eps_id) {
  std::vector<const ParseTree*> leaves;
  tree.collect_leaves(leaves);
  std::vector<int> out;
  for (const ParseTree* leaf : leaves) {
    if (leaf->word_b >= 0 && leaf->word_b != eps_id) out.push_back(leaf->word_b);
  }
  return out;
}

namespace {

void annotate_rec(ParseTree& node, int eps_id, int& pos_a, int& pos_b) {
  node.i = pos_a;
  node.k = pos_b;
  if (node.is_leaf()) {
    if (node.word_a >= 0 && node.word_a != eps_id) ++pos_a;
    if (node.word_b >= 0 && node.word_b != eps_id) ++pos_b;
  } else {
    annotate_rec(*node.left, eps_id, pos_a, pos_b);
    annotate_rec(*node.right, eps_id, pos_a, pos_b);
  }
  node.j = pos_a;
  node.l = pos_b;
}

}  // namespace

void annotate_spans(ParseTree& tree, int eps_id) {
  int pos_a = 0, pos_b = 0;
  annotate_rec(tree, eps_id, pos_a, pos_b);
}

}  // namespace sg
