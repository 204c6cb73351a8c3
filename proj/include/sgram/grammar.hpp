#pragma once

#include <initializer_list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgram/util.hpp"

namespace sg {

enum class GrammarKind { kPcfg, kScfg };
enum class ParamMode { kNeural, kTabular };

// Terminal emission kinds of the synchronous grammar.
enum class EmitKind { kPairKind = 0, kDeleteKind = 1, kInsertKind = 2, kCopyKind = 3 };
constexpr int kNumEmitKinds = 4;

// Symbol ids: internals occupy [0, n_internal), preterminals
// [n_internal, n_internal + n_preterminal). The start symbol is implicit.
struct GrammarTopology {
  int n_internal = 1;
  int n_preterminal = 1;
  int vocab_size = 1;
  int dim = 1;
  GrammarKind kind = GrammarKind::kPcfg;
  std::optional<int> eps_id;  // SCFG only: vocab column excluded from emission support

  int n_nonterminal() const { return n_internal + n_preterminal; }
  bool is_preterminal(int sym) const {
    return sym >= n_internal && sym < n_nonterminal();
  }
  int pre_index(int sym) const { return sym - n_internal; }
  void validate() const;
};

struct Tensor {
  std::vector<long long> shape;
  std::vector<double> data;  // row-major

  Tensor() = default;
  Tensor(std::vector<long long> s, double fill = 0.0);
  long long numel() const;
  double& at(std::initializer_list<long long> idx);
};

// Named parameter tensors. Neural mode follows the two-hidden-layer residual
// perceptron parameterization; tabular mode keeps one free logit per rule.
struct GrammarParams {
  GrammarTopology topology;
  ParamMode mode = ParamMode::kTabular;
  std::map<std::string, Tensor> tensors;

  Tensor& tensor(const std::string& name);
  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }

  // Flat views over all tensors, in name order; used by the optimizer.
  std::size_t total_size() const;
  void add_scaled(const GrammarParams& grads, double scale);

  std::string to_checkpoint_json() const;
  static GrammarParams from_checkpoint_json(const std::string& text);
};

GrammarParams init_params(const GrammarTopology& topology, ParamMode mode,
                          std::uint64_t seed);

// Zero-filled parameter structure with the same tensor names and shapes;
// receptacle for gradients.
GrammarParams zeros_like(const GrammarParams& params);

// Materialized per-context log-probability tables. SCFG target-word rows are
// normalized lazily per (preterminal, source-word) context; the normalizer
// cache makes lookups safe for concurrent readers.
class RuleTable {
 public:
  GrammarTopology topo;
  ParamMode mode = ParamMode::kTabular;
  std::vector<double> start_lp;   // [NT]
  std::vector<double> binary_lp;  // [NI * NT * NT]
  std::vector<double> term_lp;    // PCFG: [P * V]
  std::vector<double> kind_lp;    // SCFG: [P * 4]
  std::vector<double> src_lp;     // SCFG: [P * V], eps column = -inf

  double start(int sym) const { return start_lp[sym]; }
  double binary(int parent, int left, int right) const {
    int nt = topo.n_nonterminal();
    return binary_lp[(static_cast<std::size_t>(parent) * nt + left) * nt + right];
  }
  double term(int pre_sym, int word) const {
    return term_lp[static_cast<std::size_t>(topo.pre_index(pre_sym)) *
                       topo.vocab_size + word];
  }
  double kind(int pre_sym, EmitKind k) const {
    return kind_lp[static_cast<std::size_t>(topo.pre_index(pre_sym)) *
                       kNumEmitKinds + static_cast<int>(k)];
  }
  double src(int pre_sym, int word) const {
    return src_lp[static_cast<std::size_t>(topo.pre_index(pre_sym)) *
                      topo.vocab_size + word];
  }

  // log p(w_b | alpha, w_a); w_a may be the epsilon id (insert route).
  double tgt(int pre_sym, int word_a, int word_b) const;
  void tgt_batch(int pre_sym, int word_a, const std::vector<int>& words_b,
                 double* out) const;

  // Route-resolved leaf scores. Epsilon sides are passed as the epsilon id.
  double route_lp(int pre_sym, EmitKind k, int word_a, int word_b) const;
  // Marginal over generating routes (pair and copy both produce w/w).
  double emission_lp(int pre_sym, int word_a, int word_b) const;

  // Unnormalized target-row scores and the cached row normalizer; exposed for
  // the gradient path, which needs full rows for touched contexts. `pre` is a
  // preterminal index (symbol minus n_internal).
  double tgt_logz(int pre, int word_a) const;
  void tgt_scores(int pre, int word_a, std::vector<double>& out) const;

 private:
  friend RuleTable materialize_rules(const GrammarParams& params);
  struct TgtCache {
    std::mutex mutex;
    std::unordered_map<long long, double> logz;
  };
  std::shared_ptr<const GrammarParams> params_;  // neural tgt scoring backend
  std::vector<double> tgt_dense_;                // tabular: [P * V * V] normalized
  bool tgt_dense_ready_ = false;
  std::shared_ptr<TgtCache> tgt_cache_;
};

RuleTable materialize_rules(const GrammarParams& params);

// Gradients of some scalar with respect to the materialized log-probability
// entries. Dense for the fixed-size families, sparse over touched
// (preterminal, w_a, w_b) triples for the SCFG target factor.
struct GradTable {
  std::vector<double> start;   // [NT]
  std::vector<double> binary;  // [NI * NT * NT]
  std::vector<double> term;    // PCFG [P * V]
  std::vector<double> kind;    // SCFG [P * 4]
  std::vector<double> src;     // SCFG [P * V]
  std::map<std::pair<int, int>, std::map<int, double>> tgt;  // (pre, wa) -> wb -> g

  static GradTable zeros(const GrammarTopology& topo);
  void accumulate(const GradTable& other, double scale);
  double binary_at(const GrammarTopology& t, int a, int b, int c) const {
    int nt = t.n_nonterminal();
    return binary[(static_cast<std::size_t>(a) * nt + b) * nt + c];
  }
};

// Chain rule from RuleTable log-probability gradients back to raw parameters.
GrammarParams backprop_params(const GrammarParams& params,
                              const GradTable& grad_table);
// Variant that reuses an already-materialized table for the same params.
GrammarParams backprop_params(const GrammarParams& params, const RuleTable& table,
                              const GradTable& grad_table);

}  // namespace sg
