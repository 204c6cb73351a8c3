#include "sgram/chart.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace sg {

namespace {

// binary_lp transposed to [beta][gamma][alpha] so the innermost parent loop
// walks contiguous memory.
std::vector<double> transpose_binary(const RuleTable& table) {
  int nt = table.topo.n_nonterminal();
  int ni = table.topo.n_internal;
  std::vector<double> t(static_cast<std::size_t>(nt) * nt * ni);
  for (int a = 0; a < ni; ++a) {
    for (int b = 0; b < nt; ++b) {
      for (int c = 0; c < nt; ++c) {
        t[(static_cast<std::size_t>(b) * nt + c) * ni + a] = table.binary(a, b, c);
      }
    }
  }
  return t;
}

void require_kind(const RuleTable& table, GrammarKind kind, const char* op) {
  if (table.topo.kind != kind)
    throw Error(ErrorCode::kInvalidArgument,
                std::string(op) + ": rule table has the wrong grammar kind");
}

void require_words(const RuleTable& table, const std::vector<int>& xs,
                   const char* side) {
  if (xs.empty())
    throw Error(ErrorCode::kInvalidArgument,
                std::string("empty ") + side + " input");
  for (int w : xs) {
    if (w < 0 || w >= table.topo.vocab_size)
      throw Error(ErrorCode::kInvalidArgument,
                  "word id out of vocabulary range: " + std::to_string(w));
    if (table.topo.eps_id && w == *table.topo.eps_id)
      throw Error(ErrorCode::kInvalidArgument,
                  "epsilon id cannot appear in an input sentence");
  }
}

// Per-input SCFG leaf scores.
struct ScfgEmissions {
  int na = 0, nb = 0, np = 0;
  std::vector<double> del;         // [P][na]  kind+src
  std::vector<double> ins;         // [P][nb]  kind+tgt(eps, b)
  std::vector<double> pair_route;  // [P][na][nb]
  std::vector<double> copy_route;  // [P][na][nb], -inf unless a[i]==b[k]
  std::vector<double> pair_marg;   // [P][na][nb]  log(pair + copy)

  double d(int p, int i) const { return del[static_cast<std::size_t>(p) * na + i]; }
  double s(int p, int k) const { return ins[static_cast<std::size_t>(p) * nb + k]; }
  std::size_t pk(int p, int i, int k) const {
    return (static_cast<std::size_t>(p) * na + i) * nb + k;
  }
};

ScfgEmissions build_scfg_emissions(const RuleTable& table,
                                   const std::vector<int>& a,
                                   const std::vector<int>& b) {
  const GrammarTopology& topo = table.topo;
  ScfgEmissions e;
  e.na = static_cast<int>(a.size());
  e.nb = static_cast<int>(b.size());
  e.np = topo.n_preterminal;
  e.del.resize(static_cast<std::size_t>(e.np) * e.na);
  e.ins.resize(static_cast<std::size_t>(e.np) * e.nb);
  e.pair_route.assign(static_cast<std::size_t>(e.np) * e.na * e.nb, kNegInf);
  e.copy_route.assign(static_cast<std::size_t>(e.np) * e.na * e.nb, kNegInf);
  e.pair_marg.assign(static_cast<std::size_t>(e.np) * e.na * e.nb, kNegInf);
  int eps = topo.eps_id.value();
  std::vector<double> row(b.size());
  for (int p = 0; p < e.np; ++p) {
    int pre_sym = topo.n_internal + p;
    double k_pair = table.kind(pre_sym, EmitKind::kPairKind);
    double k_del = table.kind(pre_sym, EmitKind::kDeleteKind);
    double k_ins = table.kind(pre_sym, EmitKind::kInsertKind);
    double k_copy = table.kind(pre_sym, EmitKind::kCopyKind);
    table.tgt_batch(pre_sym, eps, b, row.data());
    for (int k = 0; k < e.nb; ++k)
      e.ins[static_cast<std::size_t>(p) * e.nb + k] = k_ins + row[k];
    for (int i = 0; i < e.na; ++i) {
      double src_lp = table.src(pre_sym, a[i]);
      e.del[static_cast<std::size_t>(p) * e.na + i] = k_del + src_lp;
      table.tgt_batch(pre_sym, a[i], b, row.data());
      for (int k = 0; k < e.nb; ++k) {
        double pr = k_pair + src_lp + row[k];
        e.pair_route[e.pk(p, i, k)] = pr;
        if (a[i] == b[k]) {
          double cr = k_copy + src_lp;
          e.copy_route[e.pk(p, i, k)] = cr;
          e.pair_marg[e.pk(p, i, k)] = log_add(pr, cr);
        } else {
          e.pair_marg[e.pk(p, i, k)] = pr;
        }
      }
    }
  }
  return e;
}

}  // namespace

std::size_t InsideChart::pcfg_index(int i, int j, int sym) const {
  return (static_cast<std::size_t>(i) * (n_a + 1) + j) * nt + sym;
}

std::size_t InsideChart::scfg_index(int i, int j, int k, int l, int sym) const {
  return (((static_cast<std::size_t>(i) * (n_a + 1) + j) * (n_b + 1) + k) *
              (n_b + 1) +
          l) * nt + sym;
}

std::pair<double, InsideChart> inside_pcfg(const RuleTable& table,
                                           const std::vector<int>& sentence) {
  require_kind(table, GrammarKind::kPcfg, "inside_pcfg");
  require_words(table, sentence, "sentence");
  const GrammarTopology& topo = table.topo;
  int n = static_cast<int>(sentence.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;

  InsideChart chart;
  chart.n_a = n;
  chart.nt = nt;
  chart.values.assign(static_cast<std::size_t>(n + 1) * (n + 1) * nt, kNegInf);

  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < topo.n_preterminal; ++p) {
      int sym = ni + p;
      chart.values[chart.pcfg_index(i, i + 1, sym)] =
          table.term(sym, sentence[i]);
    }
  }

  std::vector<double> bin_t = transpose_binary(table);
  std::vector<double> acc(static_cast<std::size_t>(ni));
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width <= n; ++i) {
      int j = i + width;
      std::fill(acc.begin(), acc.end(), kNegInf);
      for (int m = i + 1; m < j; ++m) {
        const double* left = &chart.values[chart.pcfg_index(i, m, 0)];
        const double* right = &chart.values[chart.pcfg_index(m, j, 0)];
        for (int b = 0; b < nt; ++b) {
          double lv = left[b];
          if (lv == kNegInf) continue;
          for (int c = 0; c < nt; ++c) {
            double rv = right[c];
            if (rv == kNegInf) continue;
            double lr = lv + rv;
            const double* rules = &bin_t[(static_cast<std::size_t>(b) * nt + c) * ni];
            for (int a = 0; a < ni; ++a) {
              log_add_to(acc[a], rules[a] + lr);
            }
          }
        }
      }
      double* cell = &chart.values[chart.pcfg_index(i, j, 0)];
      for (int a = 0; a < ni; ++a) cell[a] = acc[a];
    }
  }

  double root = kNegInf;
  for (int a = 0; a < nt; ++a) {
    double v = chart.values[chart.pcfg_index(0, n, a)];
    if (v != kNegInf) log_add_to(root, table.start(a) + v);
  }
  chart.root_lp = root;
  return {root, std::move(chart)};
}

std::pair<double, InsideChart> inside_scfg(const RuleTable& table,
                                           const std::vector<int>& side_a,
                                           const std::vector<int>& side_b) {
  require_kind(table, GrammarKind::kScfg, "inside_scfg");
  require_words(table, side_a, "source");
  require_words(table, side_b, "target");
  const GrammarTopology& topo = table.topo;
  int na = static_cast<int>(side_a.size());
  int nb = static_cast<int>(side_b.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;

  InsideChart chart;
  chart.n_a = na;
  chart.n_b = nb;
  chart.nt = nt;
  chart.values.assign(static_cast<std::size_t>(na + 1) * (na + 1) * (nb + 1) *
                          (nb + 1) * nt,
                      kNegInf);
  ScfgEmissions em = build_scfg_emissions(table, side_a, side_b);
  std::vector<double> bin_t = transpose_binary(table);
  std::vector<double> acc(static_cast<std::size_t>(ni));

  for (int w = 1; w <= na + nb; ++w) {
    for (int da = std::max(0, w - nb); da <= std::min(w, na); ++da) {
      int db = w - da;
      for (int i = 0; i + da <= na; ++i) {
        int j = i + da;
        for (int k = 0; k + db <= nb; ++k) {
          int l = k + db;
          double* cell = &chart.values[chart.scfg_index(i, j, k, l, 0)];
          // Leaf shapes feed the preterminal entries.
          if (da == 1 && db == 0) {
            for (int p = 0; p < topo.n_preterminal; ++p)
              cell[ni + p] = em.d(p, i);
          } else if (da == 0 && db == 1) {
            for (int p = 0; p < topo.n_preterminal; ++p)
              cell[ni + p] = em.s(p, k);
          } else if (da == 1 && db == 1) {
            for (int p = 0; p < topo.n_preterminal; ++p)
              cell[ni + p] = em.pair_marg[em.pk(p, i, k)];
          }
          if (w < 2) continue;
          std::fill(acc.begin(), acc.end(), kNegInf);
          for (int m = i; m <= j; ++m) {
            for (int nn = k; nn <= l; ++nn) {
              if (m == i && nn == k) continue;  // empty left child
              if (m == j && nn == l) continue;  // empty right child
              const double* left = &chart.values[chart.scfg_index(i, m, k, nn, 0)];
              const double* right = &chart.values[chart.scfg_index(m, j, nn, l, 0)];
              for (int b = 0; b < nt; ++b) {
                double lv = left[b];
                if (lv == kNegInf) continue;
                for (int c = 0; c < nt; ++c) {
                  double rv = right[c];
                  if (rv == kNegInf) continue;
                  double lr = lv + rv;
                  const double* rules =
                      &bin_t[(static_cast<std::size_t>(b) * nt + c) * ni];
                  for (int a = 0; a < ni; ++a) {
                    log_add_to(acc[a], rules[a] + lr);
                  }
                }
              }
            }
          }
          for (int a = 0; a < ni; ++a) {
            if (acc[a] != kNegInf) cell[a] = acc[a];
          }
        }
      }
    }
  }

  double root = kNegInf;
  for (int a = 0; a < nt; ++a) {
    double v = chart.values[chart.scfg_index(0, na, 0, nb, a)];
    if (v != kNegInf) log_add_to(root, table.start(a) + v);
  }
  chart.root_lp = root;
  return {root, std::move(chart)};
}

// ---------------------------------------------------------------------------
// Viterbi

namespace {

struct PcfgBack {
  std::vector<int> m, b, c;  // per (span, sym); m < 0 marks a leaf
};

std::unique_ptr<ParseTree> build_pcfg_tree(const InsideChart& chart,
                                           const PcfgBack& back,
                                           const std::vector<int>& sentence,
                                           int sym, int i, int j) {
  std::size_t idx = chart.pcfg_index(i, j, sym);
  if (j - i == 1 && back.m[idx] < 0) {
    auto leaf = make_leaf(sym, sentence[i], -1, LeafKind::kNone);
    leaf->i = i;
    leaf->j = j;
    return leaf;
  }
  int m = back.m[idx];
  auto node = make_internal(
      sym, build_pcfg_tree(chart, back, sentence, back.b[idx], i, m),
      build_pcfg_tree(chart, back, sentence, back.c[idx], m, j));
  node->i = i;
  node->j = j;
  return node;
}

}  // namespace

ParseResult viterbi_pcfg(const RuleTable& table, const std::vector<int>& sentence) {
  require_kind(table, GrammarKind::kPcfg, "viterbi_pcfg");
  require_words(table, sentence, "sentence");
  const GrammarTopology& topo = table.topo;
  int n = static_cast<int>(sentence.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;

  InsideChart best;
  best.n_a = n;
  best.nt = nt;
  best.values.assign(static_cast<std::size_t>(n + 1) * (n + 1) * nt, kNegInf);
  PcfgBack back;
  back.m.assign(best.values.size(), -1);
  back.b.assign(best.values.size(), -1);
  back.c.assign(best.values.size(), -1);

  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < topo.n_preterminal; ++p) {
      int sym = ni + p;
      best.values[best.pcfg_index(i, i + 1, sym)] = table.term(sym, sentence[i]);
    }
  }
  for (int width = 2; width <= n; ++width) {
    for (int i = 0; i + width <= n; ++i) {
      int j = i + width;
      for (int m = i + 1; m < j; ++m) {
        const double* left = &best.values[best.pcfg_index(i, m, 0)];
        const double* right = &best.values[best.pcfg_index(m, j, 0)];
        for (int b = 0; b < nt; ++b) {
          double lv = left[b];
          if (lv == kNegInf) continue;
          for (int c = 0; c < nt; ++c) {
            double rv = right[c];
            if (rv == kNegInf) continue;
            double lr = lv + rv;
            for (int a = 0; a < ni; ++a) {
              double cand = table.binary(a, b, c) + lr;
              std::size_t idx = best.pcfg_index(i, j, a);
              if (cand > best.values[idx]) {
                best.values[idx] = cand;
                back.m[idx] = m;
                back.b[idx] = b;
                back.c[idx] = c;
              }
            }
          }
        }
      }
    }
  }

  ParseResult result;
  int best_sym = -1;
  for (int a = 0; a < nt; ++a) {
    double v = best.values[best.pcfg_index(0, n, a)];
    if (v == kNegInf) continue;
    double cand = table.start(a) + v;
    if (cand > result.log_prob) {
      result.log_prob = cand;
      best_sym = a;
    }
  }
  if (best_sym < 0) {
    result.log_prob = kNegInf;
    return result;
  }
  result.parsed = true;
  result.tree = build_pcfg_tree(best, back, sentence, best_sym, 0, n);
  return result;
}

namespace {

struct ScfgBack {
  // per (item, sym): split (m, nn) and child syms, or route for leaves
  std::vector<int> m, nn, b, c, route;
};

std::unique_ptr<ParseTree> build_scfg_tree(const InsideChart& chart,
                                           const ScfgBack& back,
                                           const std::vector<int>& a,
                                           const std::vector<int>& b, int eps,
                                           int sym, int i, int j, int k, int l) {
  std::size_t idx = chart.scfg_index(i, j, k, l, sym);
  if (back.route[idx] >= 0) {
    int wa = j > i ? a[i] : eps;
    int wb = l > k ? b[k] : eps;
    auto leaf =
        make_leaf(sym, wa, wb, static_cast<LeafKind>(back.route[idx]));
    leaf->i = i;
    leaf->j = j;
    leaf->k = k;
    leaf->l = l;
    return leaf;
  }
  int m = back.m[idx], nn = back.nn[idx];
  auto node = make_internal(
      sym, build_scfg_tree(chart, back, a, b, eps, back.b[idx], i, m, k, nn),
      build_scfg_tree(chart, back, a, b, eps, back.c[idx], m, j, nn, l));
  node->i = i;
  node->j = j;
  node->k = k;
  node->l = l;
  return node;
}

}  // namespace

ParseResult viterbi_scfg(const RuleTable& table, const std::vector<int>& side_a,
                         const std::vector<int>& side_b) {
  require_kind(table, GrammarKind::kScfg, "viterbi_scfg");
  require_words(table, side_a, "source");
  require_words(table, side_b, "target");
  const GrammarTopology& topo = table.topo;
  int na = static_cast<int>(side_a.size());
  int nb = static_cast<int>(side_b.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;
  int eps = topo.eps_id.value();

  InsideChart best;
  best.n_a = na;
  best.n_b = nb;
  best.nt = nt;
  best.values.assign(static_cast<std::size_t>(na + 1) * (na + 1) * (nb + 1) *
                         (nb + 1) * nt,
                     kNegInf);
  ScfgBack back;
  back.m.assign(best.values.size(), -1);
  back.nn.assign(best.values.size(), -1);
  back.b.assign(best.values.size(), -1);
  back.c.assign(best.values.size(), -1);
  back.route.assign(best.values.size(), -1);
  ScfgEmissions em = build_scfg_emissions(table, side_a, side_b);

  for (int w = 1; w <= na + nb; ++w) {
    for (int da = std::max(0, w - nb); da <= std::min(w, na); ++da) {
      int db = w - da;
      for (int i = 0; i + da <= na; ++i) {
        int j = i + da;
        for (int k = 0; k + db <= nb; ++k) {
          int l = k + db;
          if (da == 1 && db == 0) {
            for (int p = 0; p < topo.n_preterminal; ++p) {
              std::size_t idx = best.scfg_index(i, j, k, l, ni + p);
              best.values[idx] = em.d(p, i);
              back.route[idx] = static_cast<int>(EmitKind::kDeleteKind);
            }
          } else if (da == 0 && db == 1) {
            for (int p = 0; p < topo.n_preterminal; ++p) {
              std::size_t idx = best.scfg_index(i, j, k, l, ni + p);
              best.values[idx] = em.s(p, k);
              back.route[idx] = static_cast<int>(EmitKind::kInsertKind);
            }
          } else if (da == 1 && db == 1) {
            for (int p = 0; p < topo.n_preterminal; ++p) {
              std::size_t idx = best.scfg_index(i, j, k, l, ni + p);
              double pr = em.pair_route[em.pk(p, i, k)];
              double cr = em.copy_route[em.pk(p, i, k)];
              if (pr >= cr) {
                best.values[idx] = pr;
                back.route[idx] = static_cast<int>(EmitKind::kPairKind);
              } else {
                best.values[idx] = cr;
                back.route[idx] = static_cast<int>(EmitKind::kCopyKind);
              }
            }
          }
          if (w < 2) continue;
          for (int m = i; m <= j; ++m) {
            for (int nn = k; nn <= l; ++nn) {
              if (m == i && nn == k) continue;
              if (m == j && nn == l) continue;
              const double* left = &best.values[best.scfg_index(i, m, k, nn, 0)];
              const double* right = &best.values[best.scfg_index(m, j, nn, l, 0)];
              for (int b = 0; b < nt; ++b) {
                double lv = left[b];
                if (lv == kNegInf) continue;
                for (int c = 0; c < nt; ++c) {
                  double rv = right[c];
                  if (rv == kNegInf) continue;
                  double lr = lv + rv;
                  for (int a = 0; a < ni; ++a) {
                    double cand = table.binary(a, b, c) + lr;
                    std::size_t idx = best.scfg_index(i, j, k, l, a);
                    if (cand > best.values[idx]) {
                      best.values[idx] = cand;
                      back.m[idx] = m;
                      back.nn[idx] = nn;
                      back.b[idx] = b;
                      back.c[idx] = c;
                    }
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  ParseResult result;
  int best_sym = -1;
  for (int a = 0; a < nt; ++a) {
    double v = best.values[best.scfg_index(0, na, 0, nb, a)];
    if (v == kNegInf) continue;
    double cand = table.start(a) + v;
    if (cand > result.log_prob) {
      result.log_prob = cand;
      best_sym = a;
    }
  }
  if (best_sym < 0) {
    result.log_prob = kNegInf;
    return result;
  }
  result.parsed = true;
  result.tree = build_scfg_tree(best, back, side_a, side_b, eps, best_sym, 0, na,
                                0, nb);
  return result;
}

// ---------------------------------------------------------------------------
// Expected rule counts (inside-outside)

GradTable expected_counts_pcfg(const RuleTable& table,
                               const std::vector<int>& sentence) {
  auto [logz, inside] = inside_pcfg(table, sentence);
  if (logz == kNegInf)
    throw Error(ErrorCode::kNoParse, "expected counts on an unparseable sentence");
  const GrammarTopology& topo = table.topo;
  int n = static_cast<int>(sentence.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;
  GradTable counts = GradTable::zeros(topo);

  std::vector<double> outside(inside.values.size(), kNegInf);
  for (int a = 0; a < nt; ++a) {
    outside[inside.pcfg_index(0, n, a)] = table.start(a);
    double in_v = inside.values[inside.pcfg_index(0, n, a)];
    if (in_v != kNegInf)
      counts.start[a] += std::exp(table.start(a) + in_v - logz);
  }
  for (int width = n; width >= 2; --width) {
    for (int i = 0; i + width <= n; ++i) {
      int j = i + width;
      for (int a = 0; a < ni; ++a) {
        double out_v = outside[inside.pcfg_index(i, j, a)];
        if (out_v == kNegInf) continue;
        for (int m = i + 1; m < j; ++m) {
          const double* left = &inside.values[inside.pcfg_index(i, m, 0)];
          const double* right = &inside.values[inside.pcfg_index(m, j, 0)];
          for (int b = 0; b < nt; ++b) {
            double lv = left[b];
            if (lv == kNegInf) continue;
            for (int c = 0; c < nt; ++c) {
              double rv = right[c];
              if (rv == kNegInf) continue;
              double w = table.binary(a, b, c);
              if (w == kNegInf) continue;
              counts.binary[(static_cast<std::size_t>(a) * nt + b) * nt + c] +=
                  std::exp(out_v + w + lv + rv - logz);
              log_add_to(outside[inside.pcfg_index(i, m, b)], out_v + w + rv);
              log_add_to(outside[inside.pcfg_index(m, j, c)], out_v + w + lv);
            }
          }
        }
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < topo.n_preterminal; ++p) {
      int sym = ni + p;
      double out_v = outside[inside.pcfg_index(i, i + 1, sym)];
      if (out_v == kNegInf) continue;
      counts.term[static_cast<std::size_t>(p) * topo.vocab_size + sentence[i]] +=
          std::exp(out_v + table.term(sym, sentence[i]) - logz);
    }
  }
  return counts;
}

GradTable expected_counts_scfg(const RuleTable& table,
                               const std::vector<int>& side_a,
                               const std::vector<int>& side_b) {
  auto [logz, inside] = inside_scfg(table, side_a, side_b);
  if (logz == kNegInf)
    throw Error(ErrorCode::kNoParse, "expected counts on an unparseable pair");
  const GrammarTopology& topo = table.topo;
  int na = static_cast<int>(side_a.size());
  int nb = static_cast<int>(side_b.size());
  int nt = topo.n_nonterminal();
  int ni = topo.n_internal;
  int eps = topo.eps_id.value();
  GradTable counts = GradTable::zeros(topo);
  ScfgEmissions em = build_scfg_emissions(table, side_a, side_b);

  std::vector<double> outside(inside.values.size(), kNegInf);
  for (int a = 0; a < nt; ++a) {
    outside[inside.scfg_index(0, na, 0, nb, a)] = table.start(a);
    double in_v = inside.values[inside.scfg_index(0, na, 0, nb, a)];
    if (in_v != kNegInf)
      counts.start[a] += std::exp(table.start(a) + in_v - logz);
  }
  for (int w = na + nb; w >= 2; --w) {
    for (int da = std::max(0, w - nb); da <= std::min(w, na); ++da) {
      int db = w - da;
      for (int i = 0; i + da <= na; ++i) {
        int j = i + da;
        for (int k = 0; k + db <= nb; ++k) {
          int l = k + db;
          for (int a = 0; a < ni; ++a) {
            double out_v = outside[inside.scfg_index(i, j, k, l, a)];
            if (out_v == kNegInf) continue;
            for (int m = i; m <= j; ++m) {
              for (int nn = k; nn <= l; ++nn) {
                if (m == i && nn == k) continue;
                if (m == j && nn == l) continue;
                const double* left =
                    &inside.values[inside.scfg_index(i, m, k, nn, 0)];
                const double* right =
                    &inside.values[inside.scfg_index(m, j, nn, l, 0)];
                for (int b = 0; b < nt; ++b) {
                  double lv = left[b];
                  if (lv == kNegInf) continue;
                  for (int c = 0; c < nt; ++c) {
                    double rv = right[c];
                    if (rv == kNegInf) continue;
                    double wlp = table.binary(a, b, c);
                    if (wlp == kNegInf) continue;
                    counts.binary[(static_cast<std::size_t>(a) * nt + b) * nt + c] +=
                        std::exp(out_v + wlp + lv + rv - logz);
                    log_add_to(outside[inside.scfg_index(i, m, k, nn, b)],
                               out_v + wlp + rv);
                    log_add_to(outside[inside.scfg_index(m, j, nn, l, c)],
                               out_v + wlp + lv);
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  // Leaf posteriors, split across generating routes.
  auto kind_slot = [&](int p, EmitKind k) -> double& {
    return counts.kind[static_cast<std::size_t>(p) * kNumEmitKinds +
                       static_cast<int>(k)];
  };
  auto src_slot = [&](int p, int word) -> double& {
    return counts.src[static_cast<std::size_t>(p) * topo.vocab_size + word];
  };
  for (int p = 0; p < topo.n_preterminal; ++p) {
    for (int i = 0; i < na; ++i) {
      for (int k = 0; k <= nb; ++k) {
        // delete leaves (i, i+1, k, k)
        double out_v = outside[inside.scfg_index(i, i + 1, k, k, ni + p)];
        if (out_v == kNegInf) continue;
        double post = std::exp(out_v + em.d(p, i) - logz);
        kind_slot(p, EmitKind::kDeleteKind) += post;
        src_slot(p, side_a[i]) += post;
      }
    }
    for (int i = 0; i <= na; ++i) {
      for (int k = 0; k < nb; ++k) {
        // insert leaves (i, i, k, k+1)
        double out_v = outside[inside.scfg_index(i, i, k, k + 1, ni + p)];
        if (out_v == kNegInf) continue;
        double post = std::exp(out_v + em.s(p, k) - logz);
        kind_slot(p, EmitKind::kInsertKind) += post;
        counts.tgt[{p, eps}][side_b[k]] += post;
      }
    }
    for (int i = 0; i < na; ++i) {
      for (int k = 0; k < nb; ++k) {
        // pair/copy leaves (i, i+1, k, k+1)
        double out_v = outside[inside.scfg_index(i, i + 1, k, k + 1, ni + p)];
        if (out_v == kNegInf) continue;
        double marg = em.pair_marg[em.pk(p, i, k)];
        double post = std::exp(out_v + marg - logz);
        double pair_share = post;
        if (side_a[i] == side_b[k]) {
          pair_share = post * std::exp(em.pair_route[em.pk(p, i, k)] - marg);
          double copy_share = post - pair_share;
          kind_slot(p, EmitKind::kCopyKind) += copy_share;
          src_slot(p, side_a[i]) += copy_share;
        }
        kind_slot(p, EmitKind::kPairKind) += pair_share;
        src_slot(p, side_a[i]) += pair_share;
        counts.tgt[{p, side_a[i]}][side_b[k]] += pair_share;
      }
    }
  }
  return counts;
}

// ---------------------------------------------------------------------------
// Derivation scoring and the brute-force enumeration oracle

namespace {

double score_node(const RuleTable& table, const ParseTree& node) {
  if (node.is_leaf()) {
    if (table.topo.kind == GrammarKind::kPcfg)
      return table.term(node.symbol, node.word_a);
    if (node.leaf_kind == LeafKind::kNone)
      throw Error(ErrorCode::kInvalidArgument,
                  "synchronous leaf without a route annotation");
    return table.route_lp(node.symbol, static_cast<EmitKind>(node.leaf_kind),
                          node.word_a, node.word_b);
  }
  return table.binary(node.symbol, node.left->symbol, node.right->symbol) +
         score_node(table, *node.left) + score_node(table, *node.right);
}

}  // namespace

double score_tree(const RuleTable& table, const ParseTree& tree) {
  return table.start(tree.symbol) + score_node(table, tree);
}

namespace {

struct Derivation {
  std::unique_ptr<ParseTree> tree;
  double lp;
};

struct PcfgEnum {
  const RuleTable& table;
  const std::vector<int>& x;
  std::size_t limit;
  std::map<std::tuple<int, int, int>, std::vector<Derivation>> memo;

  const std::vector<Derivation>& enum_span(int sym, int i, int j) {
    auto key = std::make_tuple(sym, i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    std::vector<Derivation> out;
    const GrammarTopology& topo = table.topo;
    if (topo.is_preterminal(sym)) {
      if (j - i == 1) {
        double lp = table.term(sym, x[i]);
        if (lp != kNegInf) {
          auto leaf = make_leaf(sym, x[i], -1, LeafKind::kNone);
          leaf->i = i;
          leaf->j = j;
          out.push_back({std::move(leaf), lp});
        }
      }
    } else if (j - i >= 2) {
      for (int m = i + 1; m < j; ++m) {
        for (int b = 0; b < topo.n_nonterminal(); ++b) {
          const auto& lefts = enum_span(b, i, m);
          if (lefts.empty()) continue;
          for (int c = 0; c < topo.n_nonterminal(); ++c) {
            double w = table.binary(sym, b, c);
            if (w == kNegInf) continue;
            const auto& rights = enum_span(c, m, j);
            for (const auto& lt : lefts) {
              for (const auto& rt : rights) {
                auto node = make_internal(sym, lt.tree->clone(), rt.tree->clone());
                node->i = i;
                node->j = j;
                out.push_back({std::move(node), w + lt.lp + rt.lp});
                if (out.size() > limit)
                  throw Error(ErrorCode::kInvalidArgument,
                              "enumeration limit exceeded");
              }
            }
          }
        }
      }
    }
    auto [pos, ok] = memo.emplace(key, std::move(out));
    (void)ok;
    return pos->second;
  }
};

struct ScfgEnum {
  const RuleTable& table;
  const std::vector<int>& xa;
  const std::vector<int>& xb;
  std::size_t limit;
  std::map<std::tuple<int, int, int, int, int>, std::vector<Derivation>> memo;

  const std::vector<Derivation>& enum_quad(int sym, int i, int j, int k, int l) {
    auto key = std::make_tuple(sym, i, j, k, l);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    std::vector<Derivation> out;
    const GrammarTopology& topo = table.topo;
    int eps = topo.eps_id.value();
    int da = j - i, db = l - k;
    if (topo.is_preterminal(sym)) {
      if (da == 1 && db == 0) {
        double lp = table.route_lp(sym, EmitKind::kDeleteKind, xa[i], eps);
        if (lp != kNegInf) {
          auto leaf = make_leaf(sym, xa[i], eps, LeafKind::kDelete);
          set_span(*leaf, i, j, k, l);
          out.push_back({std::move(leaf), lp});
        }
      } else if (da == 0 && db == 1) {
        double lp = table.route_lp(sym, EmitKind::kInsertKind, eps, xb[k]);
        if (lp != kNegInf) {
          auto leaf = make_leaf(sym, eps, xb[k], LeafKind::kInsert);
          set_span(*leaf, i, j, k, l);
          out.push_back({std::move(leaf), lp});
        }
      } else if (da == 1 && db == 1) {
        double lp = table.route_lp(sym, EmitKind::kPairKind, xa[i], xb[k]);
        if (lp != kNegInf) {
          auto leaf = make_leaf(sym, xa[i], xb[k], LeafKind::kPair);
          set_span(*leaf, i, j, k, l);
          out.push_back({std::move(leaf), lp});
        }
        if (xa[i] == xb[k]) {
          double clp = table.route_lp(sym, EmitKind::kCopyKind, xa[i], xb[k]);
          if (clp != kNegInf) {
            auto leaf = make_leaf(sym, xa[i], xb[k], LeafKind::kCopy);
            set_span(*leaf, i, j, k, l);
            out.push_back({std::move(leaf), clp});
          }
        }
      }
    } else if (da + db >= 2) {
      for (int m = i; m <= j; ++m) {
        for (int nn = k; nn <= l; ++nn) {
          if (m == i && nn == k) continue;
          if (m == j && nn == l) continue;
          for (int b = 0; b < topo.n_nonterminal(); ++b) {
            const auto& lefts = enum_quad(b, i, m, k, nn);
            if (lefts.empty()) continue;
            for (int c = 0; c < topo.n_nonterminal(); ++c) {
              double w = table.binary(sym, b, c);
              if (w == kNegInf) continue;
              const auto& rights = enum_quad(c, m, j, nn, l);
              for (const auto& lt : lefts) {
                for (const auto& rt : rights) {
                  auto node =
                      make_internal(sym, lt.tree->clone(), rt.tree->clone());
                  set_span(*node, i, j, k, l);
                  out.push_back({std::move(node), w + lt.lp + rt.lp});
                  if (out.size() > limit)
                    throw Error(ErrorCode::kInvalidArgument,
                                "enumeration limit exceeded");
                }
              }
            }
          }
        }
      }
    }
    auto [pos, ok] = memo.emplace(key, std::move(out));
    (void)ok;
    return pos->second;
  }

  static void set_span(ParseTree& t, int i, int j, int k, int l) {
    t.i = i;
    t.j = j;
    t.k = k;
    t.l = l;
  }
};

}  // namespace

std::vector<std::pair<std::unique_ptr<ParseTree>, double>> enumerate_pcfg(
    const RuleTable& table, const std::vector<int>& sentence, std::size_t limit) {
  require_kind(table, GrammarKind::kPcfg, "enumerate_pcfg");
  require_words(table, sentence, "sentence");
  PcfgEnum ctx{table, sentence, limit, {}};
  int n = static_cast<int>(sentence.size());
  std::vector<std::pair<std::unique_ptr<ParseTree>, double>> out;
  for (int a = 0; a < table.topo.n_nonterminal(); ++a) {
    double s = table.start(a);
    if (s == kNegInf) continue;
    for (const auto& d : ctx.enum_span(a, 0, n)) {
      out.emplace_back(d.tree->clone(), s + d.lp);
      if (out.size() > limit)
        throw Error(ErrorCode::kInvalidArgument, "enumeration limit exceeded");
    }
  }
  return out;
}

std::vector<std::pair<std::unique_ptr<ParseTree>, double>> enumerate_scfg(
    const RuleTable& table, const std::vector<int>& side_a,
    const std::vector<int>& side_b, std::size_t limit) {
  require_kind(table, GrammarKind::kScfg, "enumerate_scfg");
  require_words(table, side_a, "source");
  require_words(table, side_b, "target");
  ScfgEnum ctx{table, side_a, side_b, limit, {}};
  int na = static_cast<int>(side_a.size());
  int nb = static_cast<int>(side_b.size());
  std::vector<std::pair<std::unique_ptr<ParseTree>, double>> out;
  for (int a = 0; a < table.topo.n_nonterminal(); ++a) {
    double s = table.start(a);
    if (s == kNegInf) continue;
    for (const auto& d : ctx.enum_quad(a, 0, na, 0, nb)) {
      out.emplace_back(d.tree->clone(), s + d.lp);
      if (out.size() > limit)
        throw Error(ErrorCode::kInvalidArgument, "enumeration limit exceeded");
    }
  }
  return out;
}

}  // namespace sg
