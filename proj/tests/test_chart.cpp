#include <cmath>

#include "doctest.h"
#include "sgram/chart.hpp"
#include "sgram/selfcheck.hpp"

using namespace sg;

namespace {

// S -> P certain; P emits "a" certain. Symbols: 0=B internal, 1=P preterminal.
GrammarParams certain_pcfg() {
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 2;  // {unk, a}
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 0);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = kNegInf;  // S -> B never
  start.at({1}) = 0.0;      // S -> P certain
  Tensor& term = params.tensor("term_logit");
  term.at({0, 0}) = kNegInf;
  term.at({0, 1}) = 0.0;  // P -> a certain
  return params;
}

// S -> B 0.5 | S -> P 0.5; B -> P P certain; P -> "a" certain.
GrammarParams two_level_pcfg() {
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 2;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 0);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = 0.0;
  start.at({1}) = 0.0;  // softmax -> 0.5 / 0.5
  Tensor& bin = params.tensor("binary_logit");
  for (double& x : bin.data) x = kNegInf;
  bin.at({0, 1, 1}) = 0.0;  // B -> P P certain
  Tensor& term = params.tensor("term_logit");
  term.at({0, 0}) = kNegInf;
  term.at({0, 1}) = 0.0;
  return params;
}

}  // namespace

TEST_CASE("certain single-rule grammar parses with probability one") {
  RuleTable table = materialize_rules(certain_pcfg());
  auto [lp, chart] = inside_pcfg(table, {1});
  CHECK(lp == doctest::Approx(0.0));
  ParseResult vit = viterbi_pcfg(table, {1});
  CHECK(vit.parsed);
  CHECK(vit.log_prob == doctest::Approx(0.0));
  CHECK(vit.tree->is_leaf());
  CHECK(vit.tree->symbol == 1);
}

TEST_CASE("two-level grammar: inside of \"a a\" is log 0.5") {
  RuleTable table = materialize_rules(two_level_pcfg());
  auto [lp, chart] = inside_pcfg(table, {1, 1});
  CHECK(lp == doctest::Approx(std::log(0.5)));
  auto all = enumerate_pcfg(table, {1, 1}, 100);
  CHECK(all.size() == 1);
  CHECK(all[0].second == doctest::Approx(std::log(0.5)));
  // single token: S -> P route
  auto [lp1, chart1] = inside_pcfg(table, {1});
  CHECK(lp1 == doctest::Approx(std::log(0.5)));
  // no derivation for unk (P emits only "a")
  auto [lp0, chart0] = inside_pcfg(table, {0});
  CHECK(lp0 == kNegInf);
  ParseResult vit = viterbi_pcfg(table, {0});
  CHECK_FALSE(vit.parsed);
}

TEST_CASE("empty inputs are rejected") {
  RuleTable table = materialize_rules(certain_pcfg());
  CHECK_THROWS_AS(inside_pcfg(table, {}), Error);
  GrammarParams sp = random_tabular_scfg(1, 1, 3, 1, 5);
  RuleTable st = materialize_rules(sp);
  CHECK_THROWS_AS(inside_scfg(st, {}, {2}), Error);
  CHECK_THROWS_AS(inside_scfg(st, {2}, {}), Error);
}

TEST_CASE("ambiguous sentence: viterbi picks the heavier derivation") {
  // 0=A internal, 1=B internal, 2=P preterminal; "a a a" has two bracketings
  GrammarTopology topo;
  topo.n_internal = 2;
  topo.n_preterminal = 1;
  topo.vocab_size = 2;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 0);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = 0.0;
  start.at({1}) = kNegInf;
  start.at({2}) = kNegInf;
  Tensor& bin = params.tensor("binary_logit");
  for (double& x : bin.data) x = kNegInf;
  // A -> B P (prob 0.6) | A -> P B (prob 0.4): left-branch heavier
  bin.at({0, 1, 2}) = std::log(0.6);
  bin.at({0, 2, 1}) = std::log(0.4);
  bin.at({1, 2, 2}) = 0.0;  // B -> P P certain
  Tensor& term = params.tensor("term_logit");
  term.at({0, 0}) = kNegInf;
  term.at({0, 1}) = 0.0;
  RuleTable table = materialize_rules(params);

  auto all = enumerate_pcfg(table, {1, 1, 1}, 100);
  CHECK(all.size() == 2);
  ParseResult vit = viterbi_pcfg(table, {1, 1, 1});
  CHECK(vit.parsed);
  CHECK(vit.log_prob == doctest::Approx(std::log(0.6)));
  CHECK(vit.tree->left->symbol == 1);  // (A (B P P) P)
  auto [ins, chart] = inside_pcfg(table, {1, 1, 1});
  CHECK(ins == doctest::Approx(std::log(1.0)));
  CHECK(vit.log_prob <= ins + 1e-12);
}

TEST_CASE("catalan-style derivation counting") {
  // one internal symbol with B -> B B and B -> P P etc: count bracketings
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 2;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 0);
  // uniform everything: every binary pair allowed
  for (auto& [name, t] : params.tensors)
    std::fill(t.data.begin(), t.data.end(), 0.0);
  RuleTable table = materialize_rules(params);
  // with one internal B and one preterminal P, derivations of "a a a" are the
  // two bracketings (left/right), since internal nodes must be B and leaves P
  auto all = enumerate_pcfg(table, {1, 1, 1}, 1000);
  CHECK(all.size() == 2);
  // length 4: five bracketings (Catalan(3))
  auto all4 = enumerate_pcfg(table, {1, 1, 1, 1}, 1000);
  CHECK(all4.size() == 5);
  // limit enforcement errors out rather than truncating
  CHECK_THROWS_AS(enumerate_pcfg(table, {1, 1, 1, 1}, 3), Error);
}

TEST_CASE("scfg single pair emission with certain rules") {
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 4;  // unk, eps, a, b
  topo.dim = 1;
  topo.kind = GrammarKind::kScfg;
  topo.eps_id = 1;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 0);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = kNegInf;
  start.at({1}) = 0.0;  // S -> P
  Tensor& kind = params.tensor("kind_logit");
  kind.at({0, 0}) = 0.0;  // pair
  kind.at({0, 1}) = kNegInf;
  kind.at({0, 2}) = kNegInf;
  kind.at({0, 3}) = kNegInf;
  Tensor& src = params.tensor("src_logit");
  src.at({0, 0}) = kNegInf;
  src.at({0, 2}) = 0.0;  // a
  src.at({0, 3}) = kNegInf;
  Tensor& tgt = params.tensor("tgt_logit");
  for (double& x : tgt.data) x = kNegInf;
  tgt.at({0, 2, 3}) = 0.0;  // a -> b certain
  RuleTable table = materialize_rules(params);
  auto [lp, chart] = inside_scfg(table, {2}, {3});
  CHECK(lp == doctest::Approx(0.0));
  ParseResult vit = viterbi_scfg(table, {2}, {3});
  CHECK(vit.parsed);
  CHECK(vit.tree->is_leaf());
  CHECK(vit.tree->leaf_kind == LeafKind::kPair);
}

TEST_CASE("identical pair marginalizes copy and pair routes") {
  GrammarParams params = random_tabular_scfg(1, 1, 3, 1, 42);
  RuleTable table = materialize_rules(params);
  int sym = 1;
  double pair_route = table.kind(sym, EmitKind::kPairKind) + table.src(sym, 2) +
                      table.tgt(sym, 2, 2);
  double copy_route = table.kind(sym, EmitKind::kCopyKind) + table.src(sym, 2);
  // the two single-leaf derivations carry exactly the two routes
  auto all = enumerate_scfg(table, {2}, {2}, 100);
  double leaf_mass = kNegInf;
  int leaf_derivs = 0;
  for (auto& [tree, dlp] : all) {
    if (!tree->is_leaf()) continue;
    ++leaf_derivs;
    log_add_to(leaf_mass, dlp);
    double route = tree->leaf_kind == LeafKind::kCopy ? copy_route : pair_route;
    CHECK(dlp == doctest::Approx(table.start(sym) + route));
  }
  CHECK(leaf_derivs == 2);
  CHECK(leaf_mass ==
        doctest::Approx(table.start(sym) + log_add(pair_route, copy_route)));
  // the inside marginal additionally covers split derivations of the span
  auto [lp, chart] = inside_scfg(table, {2}, {2});
  CHECK(lp >= leaf_mass - 1e-12);
  double enum_lse = kNegInf;
  for (auto& [tree, dlp] : all) log_add_to(enum_lse, dlp);
  CHECK(lp == doctest::Approx(enum_lse));
}

TEST_CASE("scfg yields conserve both streams") {
  GrammarParams params = random_tabular_scfg(2, 2, 4, 1, 17);
  RuleTable table = materialize_rules(params);
  std::vector<int> a{2}, b{3, 2};
  auto all = enumerate_scfg(table, a, b, 200000);
  CHECK(!all.empty());
  for (auto& [tree, lp] : all) {
    CHECK(tree_yield_a(*tree, 1) == a);
    CHECK(tree_yield_b(*tree, 1) == b);
  }
}

TEST_CASE("oracle equivalence on random tabular grammars") {
  Rng rng(2024);
  for (int g = 0; g < 12; ++g) {
    GrammarParams params = random_tabular_pcfg(
        1 + static_cast<int>(rng.next_below(2)),
        1 + static_cast<int>(rng.next_below(2)),
        2 + static_cast<int>(rng.next_below(2)), rng.next_u64());
    RuleTable table = materialize_rules(params);
    for (int s = 0; s < 2; ++s) {
      int len = 1 + static_cast<int>(rng.next_below(5));
      std::vector<int> x;
      for (int i = 0; i < len; ++i)
        x.push_back(static_cast<int>(
            rng.next_below(static_cast<std::uint64_t>(params.topology.vocab_size))));
      std::string why;
      CHECK_MESSAGE(check_oracle_equivalence(table, x, {}, 1e-9, &why), why);
    }
  }
  for (int g = 0; g < 6; ++g) {
    GrammarParams params = random_tabular_scfg(
        1 + static_cast<int>(rng.next_below(2)),
        1 + static_cast<int>(rng.next_below(2)), 4, 1, rng.next_u64());
    RuleTable table = materialize_rules(params);
    for (int s = 0; s < 2; ++s) {
      auto draw_side = [&](int max_len) {
        int len = 1 + static_cast<int>(rng.next_below(max_len));
        std::vector<int> x;
        for (int i = 0; i < len; ++i) {
          int w;
          do {
            w = static_cast<int>(rng.next_below(4));
          } while (w == 1);
          x.push_back(w);
        }
        return x;
      };
      std::vector<int> a = draw_side(3), b = draw_side(3);
      std::string why;
      CHECK_MESSAGE(check_oracle_equivalence(table, a, b, 1e-9, &why), why);
    }
  }
}

TEST_CASE("expected counts conserve stream lengths") {
  GrammarParams pp = random_tabular_pcfg(2, 2, 4, 99);
  RuleTable pt = materialize_rules(pp);
  std::string why;
  CHECK_MESSAGE(check_conservation(pt, {0, 1, 2, 3, 2, 1}, {}, 1e-8, &why), why);
  GrammarParams sp = random_tabular_scfg(2, 2, 5, 1, 98);
  RuleTable st = materialize_rules(sp);
  CHECK_MESSAGE(check_conservation(st, {0, 2, 3}, {4, 2}, 1e-8, &why), why);
}

TEST_CASE("relabeling equivariance: permuting vocabulary ids") {
  // permute the two non-eps words of a tabular scfg consistently
  GrammarParams params = random_tabular_scfg(1, 2, 4, 1, 7);
  RuleTable table = materialize_rules(params);
  auto [lp1, c1] = inside_scfg(table, {2, 3}, {3});

  GrammarParams permuted = params;
  auto swap_words = [&](const std::string& name, bool rows, bool cols) {
    Tensor& t = permuted.tensor(name);
    long long v = params.topology.vocab_size;
    if (name == "src_logit") {
      for (long long p = 0; p < t.shape[0]; ++p)
        std::swap(t.data[p * v + 2], t.data[p * v + 3]);
    } else if (name == "tgt_logit") {
      long long np = t.shape[0];
      for (long long p = 0; p < np; ++p) {
        for (long long wa = 0; wa < v; ++wa)
          std::swap(t.data[(p * v + wa) * v + 2], t.data[(p * v + wa) * v + 3]);
        for (long long wb = 0; wb < v; ++wb)
          std::swap(t.data[(p * v + 2) * v + wb], t.data[(p * v + 3) * v + wb]);
      }
    }
    (void)rows;
    (void)cols;
  };
  swap_words("src_logit", true, false);
  swap_words("tgt_logit", true, true);
  RuleTable table2 = materialize_rules(permuted);
  auto [lp2, c2] = inside_scfg(table2, {3, 2}, {2});
  CHECK(lp1 == doctest::Approx(lp2).epsilon(1e-12));
}
