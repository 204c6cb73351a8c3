#include <cmath>

#include "doctest.h"
#include "sgram/selfcheck.hpp"
#include "sgram/trainer.hpp"

using namespace sg;

namespace {

Vocabulary tiny_vocab() {
  Vocabulary v;
  v.tokens = {kUnkToken, "a", "b", "c"};
  for (int i = 0; i < v.size(); ++i) v.index[v.tokens[i]] = i;
  return v;
}

Dataset dataset_from(const std::vector<std::vector<std::string>>& sents,
                     const Vocabulary& vocab) {
  Dataset ds;
  ds.kind = DatasetKind::kSingle;
  ds.labels = {"x"};
  int n = 0;
  for (const auto& toks : sents) {
    Example ex;
    ex.id = std::to_string(n++);
    ex.label = "x";
    ex.label_index = 0;
    ex.tokens_a = toks;
    ds.examples.push_back(ex);
  }
  ds.encode_with(vocab);
  return ds;
}

// A tabular grammar that puts all mass on B -> P P chains over word "a"/"b".
GrammarParams generating_grammar() {
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 4;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 1);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = std::log(0.5);
  start.at({1}) = std::log(0.5);
  Tensor& bin = params.tensor("binary_logit");
  for (double& x : bin.data) x = kNegInf;
  bin.at({0, 1, 1}) = 0.0;
  Tensor& term = params.tensor("term_logit");
  term.at({0, 0}) = kNegInf;
  term.at({0, 1}) = std::log(0.7);
  term.at({0, 2}) = std::log(0.3);
  term.at({0, 3}) = kNegInf;
  return params;
}

}  // namespace

TEST_CASE("eval_nll on a deterministic grammar is zero") {
  Vocabulary vocab = tiny_vocab();
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 4;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 1);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = kNegInf;
  start.at({1}) = 0.0;
  Tensor& term = params.tensor("term_logit");
  term.at({0, 0}) = kNegInf;
  term.at({0, 1}) = 0.0;
  term.at({0, 2}) = kNegInf;
  term.at({0, 3}) = kNegInf;
  Dataset ds = dataset_from({{"a"}, {"a"}}, vocab);
  CHECK(eval_nll(params, ds, 1) == doctest::Approx(0.0));

  // an unparseable example drives the mean to +inf and is reported
  Dataset bad = dataset_from({{"a"}, {"b"}}, vocab);
  std::vector<std::string> ids;
  double nll = eval_nll(params, bad, 1, &ids);
  CHECK(std::isinf(nll));
  CHECK(ids == std::vector<std::string>{"1"});
}

TEST_CASE("eval_nll matches hand-computed inside values") {
  Vocabulary vocab = tiny_vocab();
  GrammarParams gen = generating_grammar();
  Dataset ds = dataset_from({{"a"}, {"a", "b"}, {"b"}}, vocab);
  // p("a") = 0.5*0.7; p("a b") = 0.5*0.7*0.3; p("b") = 0.5*0.3
  double want = -(std::log(0.35) + std::log(0.105) + std::log(0.15)) / 3.0;
  CHECK(eval_nll(gen, ds, 1) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("one adam step on a single example does not decrease likelihood") {
  Vocabulary vocab = tiny_vocab();
  Dataset ds = dataset_from({{"a", "b", "a"}}, vocab);
  GrammarParams params = random_tabular_pcfg(1, 1, 4, 3);
  params.topology.vocab_size = 4;
  RuleTable before = materialize_rules(params);
  double lp_before = inside_pcfg(before, ds.examples[0].ids_a).first;

  TrainConfig config;
  config.learning_rate = 1e-4;
  config.max_epochs = 1;
  config.batch_size = 1;
  config.eval_every_steps = 1;
  config.patience_checkpoints = 100;
  config.seed = 5;
  auto [trained, history] = train_mle(params, ds, ds, config);
  // history's first checkpoint comes after exactly one update
  RuleTable after = materialize_rules(trained);
  double lp_after = inside_pcfg(after, ds.examples[0].ids_a).first;
  CHECK(lp_after >= lp_before - 1e-12);
}

TEST_CASE("strictly worsening validation stops after patience+1 evaluations") {
  // The start rule is pinned to S -> P, so validation NLL is -log p(b|P),
  // which every update on "a" strictly worsens from the first checkpoint.
  Vocabulary vocab = tiny_vocab();
  Dataset train = dataset_from({{"a"}, {"a"}, {"a"}, {"a"}}, vocab);
  Dataset valid = dataset_from({{"b"}}, vocab);
  GrammarTopology topo;
  topo.n_internal = 1;
  topo.n_preterminal = 1;
  topo.vocab_size = 4;
  topo.dim = 1;
  topo.kind = GrammarKind::kPcfg;
  GrammarParams params = init_params(topo, ParamMode::kTabular, 7);
  Tensor& start = params.tensor("start_logit");
  start.at({0}) = -40.0;
  start.at({1}) = 0.0;
  Tensor& term = params.tensor("term_logit");
  std::fill(term.data.begin(), term.data.end(), 0.0);
  TrainConfig config;
  config.learning_rate = 0.05;
  config.max_epochs = 1000;
  config.batch_size = 1;
  config.eval_every_steps = 1;
  config.patience_checkpoints = 5;
  config.seed = 2;
  auto [trained, history] = train_mle(params, train, valid, config);
  CHECK(history.checkpoints.size() == 6);  // checkpoint 1 best, then 5 worse
  CHECK(history.best_index == 0);
}

TEST_CASE("same seed reproduces identical history and parameters") {
  Vocabulary vocab = tiny_vocab();
  Dataset train = dataset_from(
      {{"a"}, {"b"}, {"a", "b"}, {"b", "a"}, {"a", "a"}}, vocab);
  Dataset valid = dataset_from({{"a"}, {"a", "b"}}, vocab);
  GrammarParams params = random_tabular_pcfg(1, 2, 4, 11);
  TrainConfig config;
  config.learning_rate = 1e-2;
  config.max_epochs = 3;
  config.batch_size = 2;
  config.eval_every_steps = 4;
  config.patience_checkpoints = 5;
  config.seed = 13;
  auto [p1, h1] = train_mle(params, train, valid, config);
  auto [p2, h2] = train_mle(params, train, valid, config);
  CHECK(h1.checkpoints.size() == h2.checkpoints.size());
  for (std::size_t i = 0; i < h1.checkpoints.size(); ++i) {
    CHECK(h1.checkpoints[i].step == h2.checkpoints[i].step);
    CHECK(h1.checkpoints[i].train_nll == h2.checkpoints[i].train_nll);
    CHECK(h1.checkpoints[i].valid_nll == h2.checkpoints[i].valid_nll);
  }
  for (const auto& [name, t] : p1.tensors)
    CHECK(t.data == p2.tensor(name).data);
  CHECK(h1.best_index == h2.best_index);
  // returned params achieve the minimum validation NLL in history
  double min_nll = std::numeric_limits<double>::infinity();
  for (const auto& rec : h1.checkpoints) min_nll = std::min(min_nll, rec.valid_nll);
  CHECK(h1.checkpoints[h1.best_index].valid_nll == doctest::Approx(min_nll));
}

TEST_CASE("training a toy grammar approaches the generating NLL") {
  Vocabulary vocab = tiny_vocab();
  GrammarParams gen = generating_grammar();
  RuleTable gen_table = materialize_rules(gen);
  // sample sentences from the generating grammar by hand: lengths follow the
  // start choice, words iid (0.7 a, 0.3 b)
  Rng rng(17);
  auto sample_sentence = [&]() {
    std::vector<std::string> toks;
    int len = rng.next_double() < 0.5 ? 1 : 2;
    for (int i = 0; i < len; ++i)
      toks.push_back(rng.next_double() < 0.7 ? "a" : "b");
    return toks;
  };
  std::vector<std::vector<std::string>> train_sents, valid_sents;
  for (int i = 0; i < 200; ++i) train_sents.push_back(sample_sentence());
  for (int i = 0; i < 50; ++i) valid_sents.push_back(sample_sentence());
  Dataset train = dataset_from(train_sents, vocab);
  Dataset valid = dataset_from(valid_sents, vocab);

  // 2 internal + 4 preterminal symbols, tabular, as a mild over-parameterization
  GrammarParams init = random_tabular_pcfg(2, 4, 4, 23);
  TrainConfig config;
  config.learning_rate = 0.05;
  config.max_epochs = 40;
  config.batch_size = 8;
  config.eval_every_steps = 200;
  config.patience_checkpoints = 5;
  config.seed = 29;
  auto [trained, history] = train_mle(init, train, valid, config);
  double trained_nll = eval_nll(trained, valid, 1);
  double gen_nll = eval_nll(gen, valid, 1);
  CHECK(trained_nll <= gen_nll * 1.05);
}

TEST_CASE("parse_corpus emits one deterministic record per example") {
  Vocabulary vocab = tiny_vocab();
  Dataset ds = dataset_from({{"a", "b"}, {"b"}, {"a"}}, vocab);
  GrammarParams params = random_tabular_pcfg(1, 2, 4, 31);
  auto recs1 = parse_corpus(params, ds, vocab, 2);
  auto recs2 = parse_corpus(params, ds, vocab, 1);
  REQUIRE(recs1.size() == 3);
  for (std::size_t i = 0; i < recs1.size(); ++i) {
    CHECK(recs1[i].id == ds.examples[i].id);
    CHECK(recs1[i].tree == recs2[i].tree);
    CHECK(recs1[i].parsed);
    // yields re-encode to the input ids
    auto tree = parse_tree_string(recs1[i].tree, vocab, DatasetKind::kSingle);
    CHECK(tree_yield_a(*tree, -1) == ds.examples[i].ids_a);
  }
}
