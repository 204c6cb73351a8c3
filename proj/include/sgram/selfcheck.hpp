#pragma once

#include <string>
#include <vector>

#include "sgram/chart.hpp"
#include "sgram/grammar.hpp"

namespace sg {

struct CheckReport {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Random tabular grammars for oracle suites. Logits are uniform in [-1, 1].
GrammarParams random_tabular_pcfg(int n_internal, int n_preterminal,
                                  int vocab_size, std::uint64_t seed);
GrammarParams random_tabular_scfg(int n_internal, int n_preterminal,
                                  int vocab_size, int eps_id, std::uint64_t seed);

// Rule usage counts of one derivation, in GradTable layout.
GradTable count_tree_rules(const GrammarTopology& topo, const ParseTree& tree);

// Inside == logsumexp(enumeration), Viterbi == enumeration argmax, expected
// counts == enumeration posterior average, all at `tol`.
bool check_oracle_equivalence(const RuleTable& table,
                              const std::vector<int>& side_a,
                              const std::vector<int>& side_b,  // empty => PCFG
                              double tol, std::string* why);

// Central finite differences of the corpus mean NLL against the analytic
// gradient, every coordinate, relative tolerance rtol with floor afloor.
bool check_gradient_fd(const GrammarParams& params,
                       const std::vector<std::vector<int>>& sides_a,
                       const std::vector<std::vector<int>>& sides_b,
                       double h, double rtol, double afloor, std::string* why);

// Expected emission counts sum to the input lengths.
bool check_conservation(const RuleTable& table, const std::vector<int>& side_a,
                        const std::vector<int>& side_b, double tol,
                        std::string* why);

// Mean NLL of raw id sequences and its parameter gradient; shared by the
// finite-difference suites and tests.
double corpus_mean_nll(const GrammarParams& params,
                       const std::vector<std::vector<int>>& sides_a,
                       const std::vector<std::vector<int>>& sides_b);
GrammarParams corpus_nll_gradient(const GrammarParams& params,
                                  const std::vector<std::vector<int>>& sides_a,
                                  const std::vector<std::vector<int>>& sides_b);

struct SelfcheckOptions {
  int pcfg_oracle_grammars = 40;
  int scfg_oracle_grammars = 20;
  int gradient_grammars = 6;
  std::uint64_t seed = 20240901;
  double oracle_tol = 1e-9;
  double grad_rtol = 1e-4;
};

// The built-in tiny-grammar suites behind the `selfcheck` subcommand.
std::vector<CheckReport> run_selfcheck(const SelfcheckOptions& options);

}  // namespace sg
