#include "sgram/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace sg {

namespace {

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (double& x : t.data) x = rng.next_double(lo, hi);
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return std::string(buf);
}

}  // namespace

GrammarParams random_tabular_pcfg(int n_internal, int n_preterminal,
                                  int vocab_size, std::uint64_t seed) {
  GrammarTopology topo;
  topo.n_internal = n_internal;
  topo.n_preterminal = n_preterminal;
  topo.vocab_size = vocab_size;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, seed);
  Rng rng(seed ^ 0xABCDULL);
  for (auto& [name, t] : params.tensors) fill_uniform(t, rng, -1.0, 1.0);
  return params;
}

GrammarParams random_tabular_scfg(int n_internal, int n_preterminal,
                                  int vocab_size, int eps_id,
                                  std::uint64_t seed) {
  GrammarTopology topo;
  topo.n_internal = n_internal;
  topo.n_preterminal = n_preterminal;
  topo.vocab_size = vocab_size;
  topo.dim = 1;
  topo.kind = GrammarKind::kScfg;
  topo.eps_id = eps_id;
  GrammarParams params = init_params(topo, ParamMode::kTabular, seed);
  Rng rng(seed ^ 0xDCBAULL);
  for (auto& [name, t] : params.tensors) fill_uniform(t, rng, -1.0, 1.0);
  return params;
}

GradTable count_tree_rules(const GrammarTopology& topo, const ParseTree& tree) {
  GradTable counts = GradTable::zeros(topo);
  counts.start[tree.symbol] += 1.0;
  int nt = topo.n_nonterminal();
  std::function<void(const ParseTree&)> walk = [&](const ParseTree& node) {
    if (node.is_leaf()) {
      int pre = topo.pre_index(node.symbol);
      if (topo.kind == GrammarKind::kPcfg) {
        counts.term[static_cast<std::size_t>(pre) * topo.vocab_size +
                    node.word_a] += 1.0;
        return;
      }
      int eps = topo.eps_id.value();
      EmitKind k = static_cast<EmitKind>(node.leaf_kind);
      counts.kind[static_cast<std::size_t>(pre) * kNumEmitKinds +
                  static_cast<int>(k)] += 1.0;
      switch (k) {
        case EmitKind::kPairKind:
          counts.src[static_cast<std::size_t>(pre) * topo.vocab_size +
                     node.word_a] += 1.0;
          counts.tgt[{pre, node.word_a}][node.word_b] += 1.0;
          break;
        case EmitKind::kDeleteKind:
        case EmitKind::kCopyKind:
          counts.src[static_cast<std::size_t>(pre) * topo.vocab_size +
                     node.word_a] += 1.0;
          break;
        case EmitKind::kInsertKind:
          counts.tgt[{pre, eps}][node.word_b] += 1.0;
          break;
      }
      return;
    }
    counts.binary[(static_cast<std::size_t>(node.symbol) * nt +
                   node.left->symbol) * nt + node.right->symbol] += 1.0;
    walk(*node.left);
    walk(*node.right);
  };
  walk(tree);
  return counts;
}

namespace {

bool close(double a, double b, double tol) {
  if (a == kNegInf && b == kNegInf) return true;
  return std::abs(a - b) <= tol;
}

bool compare_dense(const std::vector<double>& got, const std::vector<double>& want,
                   double tol, const char* family, std::string* why) {
  for (std::size_t i = 0; i < got.size(); ++i) {
    if (std::abs(got[i] - want[i]) > tol) {
      if (why)
        *why = std::string(family) + "[" + std::to_string(i) + "] got " +
               fmt(got[i]) + " want " + fmt(want[i]);
      return false;
    }
  }
  return true;
}

}  // namespace

bool check_oracle_equivalence(const RuleTable& table,
                              const std::vector<int>& side_a,
                              const std::vector<int>& side_b, double tol,
                              std::string* why) {
  bool pcfg = side_b.empty();
  constexpr std::size_t kLimit = 2000000;
  std::vector<std::pair<std::unique_ptr<ParseTree>, double>> all =
      pcfg ? enumerate_pcfg(table, side_a, kLimit)
           : enumerate_scfg(table, side_a, side_b, kLimit);

  double enum_lse = kNegInf;
  double enum_best = kNegInf;
  for (const auto& [tree, lp] : all) {
    log_add_to(enum_lse, lp);
    enum_best = std::max(enum_best, lp);
    double rescored = score_tree(table, *tree);
    if (!close(rescored, lp, tol)) {
      if (why) *why = "enumerated derivation rescoring mismatch";
      return false;
    }
  }

  double inside_lp =
      pcfg ? inside_pcfg(table, side_a).first
           : inside_scfg(table, side_a, side_b).first;
  if (!close(inside_lp, enum_lse, tol)) {
    if (why)
      *why = "inside " + fmt(inside_lp) + " != enum logsumexp " + fmt(enum_lse);
    return false;
  }

  ParseResult vit = pcfg ? viterbi_pcfg(table, side_a)
                         : viterbi_scfg(table, side_a, side_b);
  if (all.empty()) {
    if (vit.parsed) {
      if (why) *why = "viterbi parsed an underivable input";
      return false;
    }
    return true;
  }
  if (!vit.parsed) {
    if (why) *why = "viterbi found no parse but derivations exist";
    return false;
  }
  if (!close(vit.log_prob, enum_best, tol)) {
    if (why)
      *why = "viterbi " + fmt(vit.log_prob) + " != enum max " + fmt(enum_best);
    return false;
  }
  if (!close(score_tree(table, *vit.tree), vit.log_prob, tol)) {
    if (why) *why = "viterbi tree rescoring mismatch";
    return false;
  }
  if (vit.log_prob > inside_lp + tol) {
    if (why) *why = "viterbi exceeds the inside marginal";
    return false;
  }

  // Posterior expected counts against the enumeration average.
  GradTable want = GradTable::zeros(table.topo);
  for (const auto& [tree, lp] : all) {
    GradTable one = count_tree_rules(table.topo, *tree);
    want.accumulate(one, std::exp(lp - enum_lse));
  }
  GradTable got = pcfg ? expected_counts_pcfg(table, side_a)
                       : expected_counts_scfg(table, side_a, side_b);
  if (!compare_dense(got.start, want.start, tol, "start", why)) return false;
  if (!compare_dense(got.binary, want.binary, tol, "binary", why)) return false;
  if (pcfg) {
    if (!compare_dense(got.term, want.term, tol, "term", why)) return false;
  } else {
    if (!compare_dense(got.kind, want.kind, tol, "kind", why)) return false;
    if (!compare_dense(got.src, want.src, tol, "src", why)) return false;
    auto flat = [](const GradTable& g) {
      std::map<std::tuple<int, int, int>, double> m;
      for (const auto& [ctx, row] : g.tgt) {
        for (const auto& [wb, val] : row) m[{ctx.first, ctx.second, wb}] = val;
      }
      return m;
    };
    auto fg = flat(got), fw = flat(want);
    for (const auto& [key, val] : fw) {
      auto it = fg.find(key);
      double gv = it == fg.end() ? 0.0 : it->second;
      if (std::abs(gv - val) > tol) {
        if (why) *why = "tgt count mismatch";
        return false;
      }
    }
    for (const auto& [key, val] : fg) {
      if (fw.find(key) == fw.end() && std::abs(val) > tol) {
        if (why) *why = "spurious tgt count";
        return false;
      }
    }
  }
  return true;
}

double corpus_mean_nll(const GrammarParams& params,
                       const std::vector<std::vector<int>>& sides_a,
                       const std::vector<std::vector<int>>& sides_b) {
  RuleTable table = materialize_rules(params);
  double total = 0.0;
  for (std::size_t i = 0; i < sides_a.size(); ++i) {
    double lp = params.topology.kind == GrammarKind::kPcfg
                    ? inside_pcfg(table, sides_a[i]).first
                    : inside_scfg(table, sides_a[i], sides_b[i]).first;
    total += -lp;
  }
  return total / static_cast<double>(sides_a.size());
}

GrammarParams corpus_nll_gradient(const GrammarParams& params,
                                  const std::vector<std::vector<int>>& sides_a,
                                  const std::vector<std::vector<int>>& sides_b) {
  RuleTable table = materialize_rules(params);
  GradTable grad_lp = GradTable::zeros(params.topology);
  double inv = -1.0 / static_cast<double>(sides_a.size());
  for (std::size_t i = 0; i < sides_a.size(); ++i) {
    GradTable counts = params.topology.kind == GrammarKind::kPcfg
                           ? expected_counts_pcfg(table, sides_a[i])
                           : expected_counts_scfg(table, sides_a[i], sides_b[i]);
    grad_lp.accumulate(counts, inv);
  }
  return backprop_params(params, table, grad_lp);
}

bool check_gradient_fd(const GrammarParams& params,
                       const std::vector<std::vector<int>>& sides_a,
                       const std::vector<std::vector<int>>& sides_b, double h,
                       double rtol, double afloor, std::string* why) {
  GrammarParams analytic = corpus_nll_gradient(params, sides_a, sides_b);
  GrammarParams probe = params;
  for (auto& [name, tensor] : probe.tensors) {
    const Tensor& g = analytic.tensor(name);
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      double saved = tensor.data[i];
      tensor.data[i] = saved + h;
      double up = corpus_mean_nll(probe, sides_a, sides_b);
      tensor.data[i] = saved - h;
      double down = corpus_mean_nll(probe, sides_a, sides_b);
      tensor.data[i] = saved;
      double fd = (up - down) / (2.0 * h);
      double bp = g.data[i];
      double err = std::abs(fd - bp) / (std::abs(fd) + std::abs(bp) + afloor);
      if (err > rtol) {
        if (why)
          *why = name + "[" + std::to_string(i) + "]: fd " + fmt(fd) + " bp " +
                 fmt(bp) + " rel " + fmt(err);
        return false;
      }
    }
  }
  return true;
}

bool check_conservation(const RuleTable& table, const std::vector<int>& side_a,
                        const std::vector<int>& side_b, double tol,
                        std::string* why) {
  const GrammarTopology& topo = table.topo;
  if (topo.kind == GrammarKind::kPcfg) {
    GradTable counts = expected_counts_pcfg(table, side_a);
    double total = 0.0;
    for (double c : counts.term) total += c;
    if (std::abs(total - static_cast<double>(side_a.size())) > tol) {
      if (why)
        *why = "terminal counts sum " + fmt(total) + " != length " +
               std::to_string(side_a.size());
      return false;
    }
    return true;
  }
  GradTable counts = expected_counts_scfg(table, side_a, side_b);
  double src_total = 0.0, tgt_total = 0.0;
  for (int p = 0; p < topo.n_preterminal; ++p) {
    for (int k = 0; k < kNumEmitKinds; ++k) {
      double c = counts.kind[static_cast<std::size_t>(p) * kNumEmitKinds + k];
      EmitKind kk = static_cast<EmitKind>(k);
      if (kk != EmitKind::kInsertKind) src_total += c;  // pair, delete, copy
      if (kk != EmitKind::kDeleteKind) tgt_total += c;  // pair, insert, copy
    }
  }
  if (std::abs(src_total - static_cast<double>(side_a.size())) > tol) {
    if (why) *why = "source stream count " + fmt(src_total);
    return false;
  }
  if (std::abs(tgt_total - static_cast<double>(side_b.size())) > tol) {
    if (why) *why = "target stream count " + fmt(tgt_total);
    return false;
  }
  return true;
}

namespace {

std::vector<int> random_sentence(Rng& rng, int min_len, int max_len, int vocab,
                                 int eps_id) {
  int len = min_len + static_cast<int>(rng.next_below(
                          static_cast<std::uint64_t>(max_len - min_len + 1)));
  std::vector<int> out;
  for (int i = 0; i < len; ++i) {
    int w;
    do {
      w = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(vocab)));
    } while (w == eps_id);
    out.push_back(w);
  }
  return out;
}

}  // namespace

std::vector<CheckReport> run_selfcheck(const SelfcheckOptions& options) {
  std::vector<CheckReport> reports;
  Rng rng(options.seed);

  {
    CheckReport rep;
    rep.name = "pcfg-oracle-equivalence";
    rep.passed = true;
    for (int g = 0; g < options.pcfg_oracle_grammars && rep.passed; ++g) {
      int ni = 1 + static_cast<int>(rng.next_below(2));
      int np = 1 + static_cast<int>(rng.next_below(2));
      int v = 2 + static_cast<int>(rng.next_below(3));
      GrammarParams params = random_tabular_pcfg(ni, np, v, rng.next_u64());
      RuleTable table = materialize_rules(params);
      for (int s = 0; s < 3 && rep.passed; ++s) {
        std::vector<int> x = random_sentence(rng, 1, 5, v, -1);
        std::string why;
        if (!check_oracle_equivalence(table, x, {}, options.oracle_tol, &why)) {
          rep.passed = false;
          rep.detail = why;
        }
      }
    }
    reports.push_back(rep);
  }
  {
    CheckReport rep;
    rep.name = "scfg-oracle-equivalence";
    rep.passed = true;
    for (int g = 0; g < options.scfg_oracle_grammars && rep.passed; ++g) {
      int ni = 1 + static_cast<int>(rng.next_below(2));
      int np = 1 + static_cast<int>(rng.next_below(2));
      int v = 3 + static_cast<int>(rng.next_below(2));
      GrammarParams params = random_tabular_scfg(ni, np, v, 1, rng.next_u64());
      RuleTable table = materialize_rules(params);
      for (int s = 0; s < 2 && rep.passed; ++s) {
        std::vector<int> a = random_sentence(rng, 1, 3, v, 1);
        std::vector<int> b = random_sentence(rng, 1, 3, v, 1);
        std::string why;
        if (!check_oracle_equivalence(table, a, b, options.oracle_tol, &why)) {
          rep.passed = false;
          rep.detail = why;
        }
      }
    }
    reports.push_back(rep);
  }
  {
    CheckReport rep;
    rep.name = "conservation-invariants";
    rep.passed = true;
    for (int g = 0; g < 10 && rep.passed; ++g) {
      GrammarParams pp = random_tabular_pcfg(2, 2, 4, rng.next_u64());
      RuleTable pt = materialize_rules(pp);
      std::vector<int> x = random_sentence(rng, 1, 6, 4, -1);
      std::string why;
      if (!check_conservation(pt, x, {}, 1e-8, &why)) {
        rep.passed = false;
        rep.detail = "pcfg: " + why;
        break;
      }
      GrammarParams sp = random_tabular_scfg(2, 2, 4, 1, rng.next_u64());
      RuleTable st = materialize_rules(sp);
      std::vector<int> a = random_sentence(rng, 1, 3, 4, 1);
      std::vector<int> b = random_sentence(rng, 1, 3, 4, 1);
      if (!check_conservation(st, a, b, 1e-8, &why)) {
        rep.passed = false;
        rep.detail = "scfg: " + why;
      }
    }
    reports.push_back(rep);
  }
  {
    CheckReport rep;
    rep.name = "gradient-finite-differences";
    rep.passed = true;
    for (int g = 0; g < options.gradient_grammars && rep.passed; ++g) {
      bool scfg = g % 2 == 1;
      std::string why;
      if (!scfg) {
        GrammarTopology topo;
        topo.n_internal = 2;
        topo.n_preterminal = 2;
        topo.vocab_size = 4;
        topo.dim = 6;
        topo.kind = GrammarKind::kPcfg;
        GrammarParams params =
            init_params(topo, ParamMode::kNeural, rng.next_u64());
        std::vector<std::vector<int>> xs{random_sentence(rng, 2, 4, 4, -1),
                                         random_sentence(rng, 1, 3, 4, -1)};
        if (!check_gradient_fd(params, xs, {}, 1e-4, options.grad_rtol, 1e-7,
                               &why)) {
          rep.passed = false;
          rep.detail = "pcfg: " + why;
        }
      } else {
        GrammarTopology topo;
        topo.n_internal = 1;
        topo.n_preterminal = 2;
        topo.vocab_size = 4;
        topo.dim = 5;
        topo.kind = GrammarKind::kScfg;
        topo.eps_id = 1;
        GrammarParams params =
            init_params(topo, ParamMode::kNeural, rng.next_u64());
        std::vector<std::vector<int>> as{random_sentence(rng, 1, 2, 4, 1)};
        std::vector<std::vector<int>> bs{random_sentence(rng, 1, 2, 4, 1)};
        if (!check_gradient_fd(params, as, bs, 1e-4, options.grad_rtol, 1e-7,
                               &why)) {
          rep.passed = false;
          rep.detail = "scfg: " + why;
        }
      }
    }
    reports.push_back(rep);
  }
  return reports;
}

}  // namespace sg
