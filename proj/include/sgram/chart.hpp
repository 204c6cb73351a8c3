#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "sgram/grammar.hpp"
#include "sgram/tree.hpp"

namespace sg {

// Log-space inside chart over spans (PCFG) or span pairs (SCFG).
struct InsideChart {
  // PCFG: value(i, j, sym) at flat index (span_index(i,j) * NT + sym).
  // SCFG: value(i, j, k, l, sym); spans may be empty in one stream.
  std::vector<double> values;
  int n_a = 0, n_b = 0, nt = 0;
  double root_lp = kNegInf;

  std::size_t pcfg_index(int i, int j, int sym) const;
  std::size_t scfg_index(int i, int j, int k, int l, int sym) const;
};

struct ParseResult {
  bool parsed = false;
  double log_prob = kNegInf;
  std::unique_ptr<ParseTree> tree;
};

// log p(x) by the inside algorithm; -inf when no derivation exists.
std::pair<double, InsideChart> inside_pcfg(const RuleTable& table,
                                           const std::vector<int>& sentence);

// Bitext inside over monotone synchronous derivations.
std::pair<double, InsideChart> inside_scfg(const RuleTable& table,
                                           const std::vector<int>& side_a,
                                           const std::vector<int>& side_b);

// Maximum-probability derivation. Ties break on the lowest split point, then
// the lowest child symbols, then the lowest emission route id.
ParseResult viterbi_pcfg(const RuleTable& table, const std::vector<int>& sentence);
ParseResult viterbi_scfg(const RuleTable& table, const std::vector<int>& side_a,
                         const std::vector<int>& side_b);

// Posterior expected rule counts; equals the gradient of log p(x) with
// respect to the rule log-probabilities. Throws kNoParse on -inf inputs.
GradTable expected_counts_pcfg(const RuleTable& table,
                               const std::vector<int>& sentence);
GradTable expected_counts_scfg(const RuleTable& table,
                               const std::vector<int>& side_a,
                               const std::vector<int>& side_b);

// Exact log-probability of one derivation: the start rule plus every binary
// rule and leaf route. SCFG leaves must carry their leaf_kind.
double score_tree(const RuleTable& table, const ParseTree& tree);

// Brute-force oracle: every derivation with its exact log-probability.
// Identical-word SCFG pairs enumerate the pair and copy routes separately.
// Throws when more than `limit` derivations exist.
std::vector<std::pair<std::unique_ptr<ParseTree>, double>> enumerate_pcfg(
    const RuleTable& table, const std::vector<int>& sentence, std::size_t limit);
std::vector<std::pair<std::unique_ptr<ParseTree>, double>> enumerate_scfg(
    const RuleTable& table, const std::vector<int>& side_a,
    const std::vector<int>& side_b, std::size_t limit);

}  // namespace sg
