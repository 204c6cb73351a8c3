#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sgram/chart.hpp"
#include "sgram/corpus.hpp"
#include "sgram/grammar.hpp"

namespace sg {

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int max_epochs = 40;
  long long eval_every_steps = 4096;  // counted in examples processed
  int patience_checkpoints = 5;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct CheckpointRecord {
  long long step = 0;
  double train_nll = 0.0;  // running mean since the previous checkpoint
  double valid_nll = 0.0;
};

struct TrainHistory {
  std::vector<CheckpointRecord> checkpoints;
  int best_index = -1;
  long long skipped_unparseable = 0;
};

// Gradient ascent on the marginal likelihood of the training inputs with
// Adam updates and early stopping on validation NLL. Returns the parameters
// of the best checkpoint.
std::pair<GrammarParams, TrainHistory> train_mle(const GrammarParams& init,
                                                 const Dataset& train,
                                                 const Dataset& valid,
                                                 const TrainConfig& config);

// Mean negative log-likelihood in nats per example. Unparseable examples
// contribute +inf and their ids are appended to `unparseable` when given.
double eval_nll(const RuleTable& table, const Dataset& dataset, int workers,
                std::vector<std::string>* unparseable = nullptr);
double eval_nll(const GrammarParams& params, const Dataset& dataset, int workers,
                std::vector<std::string>* unparseable = nullptr);

struct TreeRecord {
  std::string id;
  bool parsed = false;
  double log_prob = 0.0;
  std::string tree;  // serialized; empty when parsed == false
};

// Viterbi-parses every example in order.
std::vector<TreeRecord> parse_corpus(const GrammarParams& params,
                                     const Dataset& dataset,
                                     const Vocabulary& vocab, int workers);

ParseResult parse_example(const RuleTable& table, const Example& ex,
                          GrammarKind kind);

}  // namespace sg
