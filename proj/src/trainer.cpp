#include "sgram/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>

namespace sg {

namespace {

void check_dataset(const Dataset& dataset, const GrammarTopology& topo,
                   const char* which) {
  bool pair = topo.kind == GrammarKind::kScfg;
  if ((dataset.kind == DatasetKind::kPair) != pair)
    throw Error(ErrorCode::kInvalidArgument,
                std::string(which) + " dataset kind does not match the grammar");
  for (const Example& ex : dataset.examples) {
    if (ex.ids_a.size() != ex.tokens_a.size() ||
        (pair && ex.ids_b.size() != ex.tokens_b.size()))
      throw Error(ErrorCode::kInvalidArgument,
                  std::string(which) + " dataset is not vocabulary-encoded");
  }
}

double example_log_marginal(const RuleTable& table, const Example& ex,
                            GrammarKind kind) {
  if (kind == GrammarKind::kPcfg) return inside_pcfg(table, ex.ids_a).first;
  return inside_scfg(table, ex.ids_a, ex.ids_b).first;
}

// Adam state over the flat parameter vector, tensors in name order.
struct AdamState {
  std::vector<double> m, v;
  long long t = 0;
};

void adam_step(GrammarParams& params, const GrammarParams& grads,
               const TrainConfig& config, AdamState& state) {
  ++state.t;
  double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.t));
  std::size_t offset = 0;
  for (auto& [name, tensor] : params.tensors) {
    const Tensor& g = grads.tensor(name);
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      double grad = g.data[i];
      double& m = state.m[offset + i];
      double& v = state.v[offset + i];
      m = config.adam_beta1 * m + (1.0 - config.adam_beta1) * grad;
      v = config.adam_beta2 * v + (1.0 - config.adam_beta2) * grad * grad;
      double mh = m / bc1;
      double vh = v / bc2;
      tensor.data[i] -= config.learning_rate * mh / (std::sqrt(vh) + config.adam_eps);
    }
    offset += tensor.data.size();
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (learning_rate <= 0.0)
    throw Error(ErrorCode::kInvalidArgument, "learning_rate must be > 0");
  if (max_epochs < 1 || eval_every_steps < 1 || patience_checkpoints < 1 ||
      batch_size < 1)
    throw Error(ErrorCode::kInvalidArgument, "train counts must be >= 1");
}

double eval_nll(const RuleTable& table, const Dataset& dataset, int workers,
                std::vector<std::string>* unparseable) {
  if (dataset.examples.empty())
    throw Error(ErrorCode::kInvalidArgument, "eval_nll on an empty dataset");
  GrammarKind kind = table.topo.kind;
  std::vector<double> nll(dataset.examples.size());
  parallel_for(dataset.examples.size(), workers, [&](std::size_t i) {
    double lp = example_log_marginal(table, dataset.examples[i], kind);
    nll[i] = -lp;
  });
  double total = 0.0;
  bool any_inf = false;
  for (std::size_t i = 0; i < nll.size(); ++i) {
    if (std::isnan(nll[i]))
      throw Error(ErrorCode::kNumeric,
                  "non-finite likelihood for example " + dataset.examples[i].id);
    if (std::isinf(nll[i])) {
      any_inf = true;
      if (unparseable) unparseable->push_back(dataset.examples[i].id);
    }
    total += nll[i];
  }
  return any_inf ? std::numeric_limits<double>::infinity()
                 : total / static_cast<double>(nll.size());
}

double eval_nll(const GrammarParams& params, const Dataset& dataset, int workers,
                std::vector<std::string>* unparseable) {
  RuleTable table = materialize_rules(params);
  check_dataset(dataset, params.topology, "eval");
  return eval_nll(table, dataset, workers, unparseable);
}

std::pair<GrammarParams, TrainHistory> train_mle(const GrammarParams& init,
                                                 const Dataset& train,
                                                 const Dataset& valid,
                                                 const TrainConfig& config) {
  config.validate();
  check_dataset(train, init.topology, "train");
  check_dataset(valid, init.topology, "valid");
  if (train.examples.empty())
    throw Error(ErrorCode::kInvalidArgument, "empty training set");
  GrammarKind kind = init.topology.kind;

  GrammarParams params = init;
  AdamState adam;
  adam.m.assign(params.total_size(), 0.0);
  adam.v.assign(params.total_size(), 0.0);

  TrainHistory history;
  GrammarParams best_params = params;
  double best_nll = std::numeric_limits<double>::infinity();
  int bad_checkpoints = 0;
  long long steps = 0;
  long long next_eval = config.eval_every_steps;
  double nll_accum = 0.0;
  long long nll_count = 0;
  bool stop = false;

  Rng shuffle_rng = Rng(config.seed).fork(0x5175ULL);
  std::vector<std::size_t> order(train.examples.size());
  std::iota(order.begin(), order.end(), 0);

  auto evaluate_checkpoint = [&](GrammarParams& current) {
    double valid_nll = eval_nll(current, valid, config.workers, nullptr);
    CheckpointRecord rec;
    rec.step = steps;
    rec.train_nll = nll_count > 0 ? nll_accum / static_cast<double>(nll_count)
                                  : std::numeric_limits<double>::quiet_NaN();
    rec.valid_nll = valid_nll;
    history.checkpoints.push_back(rec);
    nll_accum = 0.0;
    nll_count = 0;
    if (valid_nll < best_nll) {
      best_nll = valid_nll;
      best_params = current;
      history.best_index = static_cast<int>(history.checkpoints.size()) - 1;
      bad_checkpoints = 0;
    } else {
      ++bad_checkpoints;
      if (bad_checkpoints >= config.patience_checkpoints) stop = true;
    }
  };

  for (int epoch = 0; epoch < config.max_epochs && !stop; ++epoch) {
    shuffle_rng.shuffle(order);
    for (std::size_t pos = 0; pos < order.size() && !stop;
         pos += static_cast<std::size_t>(config.batch_size)) {
      std::size_t end =
          std::min(order.size(), pos + static_cast<std::size_t>(config.batch_size));
      std::size_t batch = end - pos;
      RuleTable table = materialize_rules(params);
      std::vector<std::optional<GradTable>> counts(batch);
      std::vector<double> lps(batch, kNegInf);
      parallel_for(batch, config.workers, [&](std::size_t bi) {
        const Example& ex = train.examples[order[pos + bi]];
        double lp = example_log_marginal(table, ex, kind);
        if (std::isnan(lp))
          throw Error(ErrorCode::kNumeric,
                      "non-finite loss for example " + ex.id);
        lps[bi] = lp;
        if (lp == kNegInf) return;  // unparseable: skipped with a counter
        counts[bi] = kind == GrammarKind::kPcfg
                         ? expected_counts_pcfg(table, ex.ids_a)
                         : expected_counts_scfg(table, ex.ids_a, ex.ids_b);
      });
      long long parseable = 0;
      for (std::size_t bi = 0; bi < batch; ++bi) {
        if (counts[bi]) ++parseable;
      }
      if (parseable > 0) {
        GradTable grad_lp = GradTable::zeros(params.topology);
        double inv = -1.0 / static_cast<double>(parseable);
        for (std::size_t bi = 0; bi < batch; ++bi) {
          if (!counts[bi]) {
            ++history.skipped_unparseable;
            continue;
          }
          grad_lp.accumulate(*counts[bi], inv);
          nll_accum += -lps[bi];
          ++nll_count;
        }
        GrammarParams grads = backprop_params(params, table, grad_lp);
        adam_step(params, grads, config, adam);
      } else {
        history.skipped_unparseable += static_cast<long long>(batch);
      }
      steps += static_cast<long long>(batch);
      if (steps >= next_eval) {
        evaluate_checkpoint(params);
        next_eval += config.eval_every_steps;
      }
    }
  }
  if (!stop && (history.checkpoints.empty() ||
                history.checkpoints.back().step < steps)) {
    evaluate_checkpoint(params);
  }
  if (history.best_index < 0)
    throw Error(ErrorCode::kInternal, "training produced no checkpoint");
  return {std::move(best_params), std::move(history)};
}

ParseResult parse_example(const RuleTable& table, const Example& ex,
                          GrammarKind kind) {
  if (kind == GrammarKind::kPcfg) return viterbi_pcfg(table, ex.ids_a);
  return viterbi_scfg(table, ex.ids_a, ex.ids_b);
}

std::vector<TreeRecord> parse_corpus(const GrammarParams& params,
                                     const Dataset& dataset,
                                     const Vocabulary& vocab, int workers) {
  check_dataset(dataset, params.topology, "parse");
  RuleTable table = materialize_rules(params);
  GrammarKind kind = params.topology.kind;
  std::vector<TreeRecord> records(dataset.examples.size());
  parallel_for(dataset.examples.size(), workers, [&](std::size_t i) {
    const Example& ex = dataset.examples[i];
    ParseResult res = parse_example(table, ex, kind);
    TreeRecord rec;
    rec.id = ex.id;
    rec.parsed = res.parsed;
    if (res.parsed) {
      rec.log_prob = res.log_prob;
      rec.tree = serialize_tree(*res.tree, vocab, dataset.kind);
    }
    records[i] = std::move(rec);
  });
  return records;
}

}  // namespace sg
