#include "sgram/grammar.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace sg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> mat_view(const Tensor& t, long long rows, long long cols) {
  return Eigen::Map<const RowMat>(t.data.data(), rows, cols);
}

Eigen::Map<RowMat> mat_view_mut(Tensor& t, long long rows, long long cols) {
  return Eigen::Map<RowMat>(t.data.data(), rows, cols);
}

Eigen::Map<const Eigen::VectorXd> vec_view(const Tensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data.data(),
                                           static_cast<long long>(t.data.size()));
}

// Residual perceptron with two hidden layers:
//   u = x + relu(W1 x + b1),  f(x) = u + relu(W2 u + b2)
struct MlpCache {
  RowMat a1, u, a2, y;  // rows = contexts
};

struct MlpRef {
  Eigen::Map<const RowMat> w1, w2;
  Eigen::Map<const Eigen::VectorXd> b1, b2;
};

MlpRef mlp_ref(const GrammarParams& p, const std::string& prefix) {
  int d = p.topology.dim;
  return MlpRef{mat_view(p.tensor(prefix + "_w1"), d, d),
                mat_view(p.tensor(prefix + "_w2"), d, d),
                vec_view(p.tensor(prefix + "_b1")),
                vec_view(p.tensor(prefix + "_b2"))};
}

RowMat mlp_forward(const MlpRef& m, const RowMat& x, MlpCache* cache) {
  RowMat a1 = (x * m.w1.transpose()).rowwise() + m.b1.transpose();
  RowMat u = x + a1.cwiseMax(0.0);
  RowMat a2 = (u * m.w2.transpose()).rowwise() + m.b2.transpose();
  RowMat y = u + a2.cwiseMax(0.0);
  if (cache) {
    cache->a1 = a1;
    cache->u = u;
    cache->a2 = a2;
    cache->y = y;
  }
  return y;
}

// Accumulates parameter gradients and returns the gradient w.r.t. x.
RowMat mlp_backward(const MlpRef& m, const RowMat& x, const MlpCache& cache,
                    const RowMat& gy, GrammarParams& grads,
                    const std::string& prefix) {
  int d = static_cast<int>(x.cols());
  RowMat ga2 = gy.cwiseProduct((cache.a2.array() > 0.0).cast<double>().matrix());
  RowMat gu = gy + ga2 * m.w2;
  RowMat ga1 = gu.cwiseProduct((cache.a1.array() > 0.0).cast<double>().matrix());
  RowMat gx = gu + ga1 * m.w1;

  auto gw2 = mat_view_mut(grads.tensor(prefix + "_w2"), d, d);
  gw2 += ga2.transpose() * cache.u;
  auto gw1 = mat_view_mut(grads.tensor(prefix + "_w1"), d, d);
  gw1 += ga1.transpose() * x;
  Eigen::Map<Eigen::VectorXd> gb2(grads.tensor(prefix + "_b2").data.data(), d);
  gb2 += ga2.colwise().sum().transpose();
  Eigen::Map<Eigen::VectorXd> gb1(grads.tensor(prefix + "_b1").data.data(), d);
  gb1 += ga1.colwise().sum().transpose();
  return gx;
}

// In-place log-softmax over v[0..n), skipping an excluded column which ends
// up at -inf. Logits of -inf are legal (zero-probability rules in tabular
// mode); NaN and +inf are not. A row with no mass stays all -inf.
void log_softmax_inplace(double* v, std::size_t n, long long excluded,
                         const char* family) {
  double hi = kNegInf;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<long long>(i) == excluded) continue;
    if (std::isnan(v[i]) || v[i] == std::numeric_limits<double>::infinity())
      throw Error(ErrorCode::kNumeric,
                  std::string("non-finite logit in ") + family);
    if (v[i] > hi) hi = v[i];
  }
  if (hi == kNegInf) {
    for (std::size_t i = 0; i < n; ++i) v[i] = kNegInf;
    return;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (static_cast<long long>(i) == excluded) continue;
    sum += std::exp(v[i] - hi);
  }
  double logz = hi + std::log(sum);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = static_cast<long long>(i) == excluded ? kNegInf : v[i] - logz;
  }
}

// grad w.r.t. logits from grad w.r.t. log-probs: g - p * sum(g).
void logp_grad_to_logit_grad(const double* logp, const double* g_logp,
                             std::size_t n, double* g_logit) {
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += g_logp[i];
  for (std::size_t i = 0; i < n; ++i) {
    double p = logp[i] == kNegInf ? 0.0 : std::exp(logp[i]);
    g_logit[i] = g_logp[i] - p * total;
  }
}

struct TensorSpec {
  std::string name;
  std::vector<long long> shape;
  bool zero_init = false;
};

void add_mlp_specs(std::vector<TensorSpec>& specs, const std::string& prefix,
                   long long d) {
  specs.push_back({prefix + "_w1", {d, d}});
  specs.push_back({prefix + "_b1", {d}, true});
  specs.push_back({prefix + "_w2", {d, d}});
  specs.push_back({prefix + "_b2", {d}, true});
}

std::vector<TensorSpec> tensor_registry(const GrammarTopology& t, ParamMode mode) {
  long long nt = t.n_nonterminal();
  long long ni = t.n_internal;
  long long p = t.n_preterminal;
  long long v = t.vocab_size;
  long long d = t.dim;
  std::vector<TensorSpec> specs;
  if (mode == ParamMode::kTabular) {
    specs.push_back({"start_logit", {nt}});
    specs.push_back({"binary_logit", {ni, nt, nt}});
    if (t.kind == GrammarKind::kPcfg) {
      specs.push_back({"term_logit", {p, v}});
    } else {
      specs.push_back({"kind_logit", {p, kNumEmitKinds}});
      specs.push_back({"src_logit", {p, v}});
      specs.push_back({"tgt_logit", {p, v, v}});
    }
    return specs;
  }
  specs.push_back({"start_emb", {d}});
  specs.push_back({"sym_emb", {nt, d}});
  specs.push_back({"u_start", {nt, d}});
  specs.push_back({"u_binary", {nt * nt, d}});
  add_mlp_specs(specs, "f1", d);
  add_mlp_specs(specs, "f2", d);
  if (t.kind == GrammarKind::kPcfg) {
    specs.push_back({"u_term", {v, d}});
    add_mlp_specs(specs, "f3", d);
  } else {
    specs.push_back({"pre_kind_emb", {p, d}});
    specs.push_back({"pre_src_emb", {p, d}});
    specs.push_back({"pre_tgt_emb", {p, d}});
    specs.push_back({"u_kind", {kNumEmitKinds, d}});
    specs.push_back({"u_src", {v, d}});
    specs.push_back({"u_tgt", {v, d}});
    specs.push_back({"src_word_emb", {v, d}});
    add_mlp_specs(specs, "f3", d);  // emission kind
    add_mlp_specs(specs, "f4", d);  // source word
    add_mlp_specs(specs, "f5", d);  // target word given source
  }
  return specs;
}

}  // namespace

void GrammarTopology::validate() const {
  if (n_internal < 1 || n_preterminal < 1 || vocab_size < 1 || dim < 1)
    throw Error(ErrorCode::kInvalidArgument, "invalid grammar topology");
  if (kind == GrammarKind::kScfg) {
    if (!eps_id || *eps_id < 0 || *eps_id >= vocab_size)
      throw Error(ErrorCode::kInvalidArgument,
                  "synchronous topology requires a valid eps_id");
  } else if (eps_id) {
    throw Error(ErrorCode::kInvalidArgument, "pcfg topology must not set eps_id");
  }
}

Tensor::Tensor(std::vector<long long> s, double fill) : shape(std::move(s)) {
  long long n = 1;
  for (long long dim : shape) n *= dim;
  data.assign(static_cast<std::size_t>(n), fill);
}

long long Tensor::numel() const {
  long long n = 1;
  for (long long dim : shape) n *= dim;
  return n;
}

double& Tensor::at(std::initializer_list<long long> idx) {
  long long flat = 0;
  std::size_t axis = 0;
  for (long long i : idx) {
    flat = flat * shape[axis] + i;
    ++axis;
  }
  return data[static_cast<std::size_t>(flat)];
}

Tensor& GrammarParams::tensor(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw Error(ErrorCode::kInternal, "missing parameter tensor: " + name);
  return it->second;
}

const Tensor& GrammarParams::tensor(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end())
    throw Error(ErrorCode::kInternal, "missing parameter tensor: " + name);
  return it->second;
}

std::size_t GrammarParams::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.data.size();
  return n;
}

void GrammarParams::add_scaled(const GrammarParams& grads, double scale) {
  for (auto& [name, t] : tensors) {
    const Tensor& g = grads.tensor(name);
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += scale * g.data[i];
  }
}

GrammarParams init_params(const GrammarTopology& topology, ParamMode mode,
                          std::uint64_t seed) {
  topology.validate();
  GrammarParams params;
  params.topology = topology;
  params.mode = mode;
  double scale = 1.0 / std::sqrt(static_cast<double>(topology.dim));
  Rng rng(seed);
  for (const TensorSpec& spec : tensor_registry(topology, mode)) {
    Tensor t(spec.shape);
    if (!spec.zero_init) {
      for (double& x : t.data) x = rng.next_double(-scale, scale);
    }
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

GrammarParams zeros_like(const GrammarParams& params) {
  GrammarParams out;
  out.topology = params.topology;
  out.mode = params.mode;
  for (const auto& [name, t] : params.tensors) {
    out.tensors.emplace(name, Tensor(t.shape));
  }
  return out;
}

std::string GrammarParams::to_checkpoint_json() const {
  nlohmann::json topo;
  topo["n_internal"] = topology.n_internal;
  topo["n_preterminal"] = topology.n_preterminal;
  topo["vocab_size"] = topology.vocab_size;
  topo["dim"] = topology.dim;
  topo["kind"] = topology.kind == GrammarKind::kPcfg ? "pcfg" : "scfg";
  if (topology.eps_id) topo["eps_id"] = *topology.eps_id;
  nlohmann::json doc;
  doc["topology"] = topo;
  doc["mode"] = mode == ParamMode::kNeural ? "neural" : "tabular";
  nlohmann::json ps = nlohmann::json::object();
  for (const auto& [name, t] : tensors) {
    nlohmann::json entry;
    entry["shape"] = t.shape;
    entry["data"] = t.data;
    ps[name] = std::move(entry);
  }
  doc["params"] = std::move(ps);
  return doc.dump();
}

GrammarParams from_checkpoint_impl(const nlohmann::json& doc) {
  GrammarParams params;
  const auto& topo = doc.at("topology");
  params.topology.n_internal = topo.at("n_internal").get<int>();
  params.topology.n_preterminal = topo.at("n_preterminal").get<int>();
  params.topology.vocab_size = topo.at("vocab_size").get<int>();
  params.topology.dim = topo.at("dim").get<int>();
  std::string kind = topo.at("kind").get<std::string>();
  if (kind == "pcfg") {
    params.topology.kind = GrammarKind::kPcfg;
  } else if (kind == "scfg") {
    params.topology.kind = GrammarKind::kScfg;
  } else {
    throw Error(ErrorCode::kSchema, "unknown grammar kind: " + kind);
  }
  if (topo.contains("eps_id")) params.topology.eps_id = topo["eps_id"].get<int>();
  params.topology.validate();
  std::string mode = doc.at("mode").get<std::string>();
  if (mode == "neural") {
    params.mode = ParamMode::kNeural;
  } else if (mode == "tabular") {
    params.mode = ParamMode::kTabular;
  } else {
    throw Error(ErrorCode::kSchema, "unknown parameter mode: " + mode);
  }
  const auto& ps = doc.at("params");
  for (const TensorSpec& spec : tensor_registry(params.topology, params.mode)) {
    if (!ps.contains(spec.name))
      throw Error(ErrorCode::kSchema, "checkpoint missing tensor: " + spec.name);
    const auto& entry = ps.at(spec.name);
    Tensor t;
    t.shape = entry.at("shape").get<std::vector<long long>>();
    if (t.shape != spec.shape)
      throw Error(ErrorCode::kSchema, "checkpoint tensor shape mismatch: " + spec.name);
    t.data = entry.at("data").get<std::vector<double>>();
    if (static_cast<long long>(t.data.size()) != t.numel())
      throw Error(ErrorCode::kSchema, "checkpoint tensor size mismatch: " + spec.name);
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

GrammarParams GrammarParams::from_checkpoint_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kSchema, std::string("malformed checkpoint: ") + e.what());
  }
  return from_checkpoint_impl(doc);
}

double RuleTable::tgt_logz(int pre, int word_a) const {
  long long key = static_cast<long long>(pre) * topo.vocab_size + word_a;
  {
    std::lock_guard<std::mutex> lock(tgt_cache_->mutex);
    auto it = tgt_cache_->logz.find(key);
    if (it != tgt_cache_->logz.end()) return it->second;
  }
  std::vector<double> scores;
  tgt_scores(pre, word_a, scores);
  double hi = kNegInf;
  long long eps = topo.eps_id.value();
  for (long long w = 0; w < topo.vocab_size; ++w) {
    if (w == eps) continue;
    hi = std::max(hi, scores[static_cast<std::size_t>(w)]);
  }
  double sum = 0.0;
  for (long long w = 0; w < topo.vocab_size; ++w) {
    if (w == eps) continue;
    sum += std::exp(scores[static_cast<std::size_t>(w)] - hi);
  }
  double logz = hi + std::log(sum);
  std::lock_guard<std::mutex> lock(tgt_cache_->mutex);
  tgt_cache_->logz.emplace(key, logz);
  return logz;
}

void RuleTable::tgt_scores(int pre, int word_a, std::vector<double>& out) const {
  long long v = topo.vocab_size;
  out.resize(static_cast<std::size_t>(v));
  if (mode == ParamMode::kTabular) {
    const Tensor& logits = params_->tensor("tgt_logit");
    const double* row =
        logits.data.data() + (static_cast<long long>(pre) * v + word_a) * v;
    std::copy(row, row + v, out.begin());
    return;
  }
  int d = topo.dim;
  const Tensor& pre_emb = params_->tensor("pre_tgt_emb");
  const Tensor& word_emb = params_->tensor("src_word_emb");
  RowMat x(1, d);
  for (int c = 0; c < d; ++c) {
    x(0, c) = pre_emb.data[static_cast<std::size_t>(pre) * d + c] +
              word_emb.data[static_cast<std::size_t>(word_a) * d + c];
  }
  RowMat h = mlp_forward(mlp_ref(*params_, "f5"), x, nullptr);
  auto u_tgt = mat_view(params_->tensor("u_tgt"), v, d);
  Eigen::VectorXd scores = u_tgt * h.row(0).transpose();
  for (long long w = 0; w < v; ++w) out[static_cast<std::size_t>(w)] = scores(w);
}

double RuleTable::tgt(int pre_sym, int word_a, int word_b) const {
  int pre = topo.pre_index(pre_sym);
  if (word_b == topo.eps_id.value())
    throw Error(ErrorCode::kInvalidArgument, "target factor scored at epsilon");
  if (mode == ParamMode::kTabular && tgt_dense_ready_) {
    long long v = topo.vocab_size;
    return tgt_dense_[(static_cast<long long>(pre) * v + word_a) * v + word_b];
  }
  std::vector<double> scores;
  tgt_scores(pre, word_a, scores);
  return scores[static_cast<std::size_t>(word_b)] - tgt_logz(pre, word_a);
}

void RuleTable::tgt_batch(int pre_sym, int word_a, const std::vector<int>& words_b,
                          double* out) const {
  int pre = topo.pre_index(pre_sym);
  long long v = topo.vocab_size;
  if (mode == ParamMode::kTabular && tgt_dense_ready_) {
    const double* row = tgt_dense_.data() + (static_cast<long long>(pre) * v + word_a) * v;
    for (std::size_t i = 0; i < words_b.size(); ++i) out[i] = row[words_b[i]];
    return;
  }
  std::vector<double> scores;
  tgt_scores(pre, word_a, scores);
  double logz = tgt_logz(pre, word_a);
  for (std::size_t i = 0; i < words_b.size(); ++i) {
    int wb = words_b[i];
    out[i] = wb == topo.eps_id.value()
                 ? kNegInf
                 : scores[static_cast<std::size_t>(wb)] - logz;
  }
}

double RuleTable::route_lp(int pre_sym, EmitKind k, int word_a, int word_b) const {
  int eps = topo.eps_id.value();
  switch (k) {
    case EmitKind::kPairKind:
      return kind(pre_sym, k) + src(pre_sym, word_a) + tgt(pre_sym, word_a, word_b);
    case EmitKind::kDeleteKind:
      return kind(pre_sym, k) + src(pre_sym, word_a);
    case EmitKind::kInsertKind:
      return kind(pre_sym, k) + tgt(pre_sym, eps, word_b);
    case EmitKind::kCopyKind:
      return kind(pre_sym, k) + src(pre_sym, word_a);
  }
  throw Error(ErrorCode::kInternal, "bad emission kind");
}

double RuleTable::emission_lp(int pre_sym, int word_a, int word_b) const {
  if (topo.kind == GrammarKind::kPcfg) {
    if (word_a < 0 || word_a >= topo.vocab_size)
      throw Error(ErrorCode::kInvalidArgument,
                  "word id out of vocabulary range: " + std::to_string(word_a));
    return term(pre_sym, word_a);
  }
  int eps = topo.eps_id.value();
  if (word_a < 0 || word_a >= topo.vocab_size || word_b < 0 ||
      word_b >= topo.vocab_size)
    throw Error(ErrorCode::kInvalidArgument, "word id out of vocabulary range");
  bool a_eps = word_a == eps;
  bool b_eps = word_b == eps;
  if (a_eps && b_eps)
    throw Error(ErrorCode::kInvalidArgument, "invalid emission: <eps>/<eps>");
  if (b_eps) return route_lp(pre_sym, EmitKind::kDeleteKind, word_a, word_b);
  if (a_eps) return route_lp(pre_sym, EmitKind::kInsertKind, word_a, word_b);
  double pair = route_lp(pre_sym, EmitKind::kPairKind, word_a, word_b);
  if (word_a == word_b)
    return log_add(pair, route_lp(pre_sym, EmitKind::kCopyKind, word_a, word_b));
  return pair;
}

RuleTable materialize_rules(const GrammarParams& params) {
  params.topology.validate();
  const GrammarTopology& t = params.topology;
  long long nt = t.n_nonterminal();
  long long ni = t.n_internal;
  long long p = t.n_preterminal;
  long long v = t.vocab_size;

  RuleTable table;
  table.topo = t;
  table.mode = params.mode;
  table.params_ = std::make_shared<GrammarParams>(params);
  table.tgt_cache_ = std::make_shared<RuleTable::TgtCache>();

  if (params.mode == ParamMode::kTabular) {
    table.start_lp = params.tensor("start_logit").data;
    log_softmax_inplace(table.start_lp.data(), table.start_lp.size(), -1, "start");
    table.binary_lp = params.tensor("binary_logit").data;
    for (long long a = 0; a < ni; ++a) {
      log_softmax_inplace(table.binary_lp.data() + a * nt * nt,
                          static_cast<std::size_t>(nt * nt), -1, "binary");
    }
    if (t.kind == GrammarKind::kPcfg) {
      table.term_lp = params.tensor("term_logit").data;
      for (long long a = 0; a < p; ++a) {
        log_softmax_inplace(table.term_lp.data() + a * v,
                            static_cast<std::size_t>(v), -1, "terminal");
      }
    } else {
      long long eps = t.eps_id.value();
      table.kind_lp = params.tensor("kind_logit").data;
      for (long long a = 0; a < p; ++a) {
        log_softmax_inplace(table.kind_lp.data() + a * kNumEmitKinds,
                            kNumEmitKinds, -1, "kind");
      }
      table.src_lp = params.tensor("src_logit").data;
      for (long long a = 0; a < p; ++a) {
        log_softmax_inplace(table.src_lp.data() + a * v,
                            static_cast<std::size_t>(v), eps, "source");
      }
      // Small vocabularies get an eagerly normalized dense target table;
      // otherwise rows are normalized lazily with a cached normalizer.
      if (p * v * v <= (1LL << 22)) {
        table.tgt_dense_ = params.tensor("tgt_logit").data;
        for (long long a = 0; a < p; ++a) {
          for (long long wa = 0; wa < v; ++wa) {
            log_softmax_inplace(table.tgt_dense_.data() + (a * v + wa) * v,
                                static_cast<std::size_t>(v), eps, "target");
          }
        }
        table.tgt_dense_ready_ = true;
      }
    }
    return table;
  }

  // Neural mode: Appendix-style bilinear scores between perceptron outputs
  // and output embeddings, normalized per conditioning context.
  int d = t.dim;
  auto finite_or_throw = [](const std::vector<double>& xs, const char* family) {
    for (double x : xs) {
      if (!std::isfinite(x) && x != kNegInf)
        throw Error(ErrorCode::kNumeric,
                    std::string("non-finite value while materializing ") + family);
    }
  };

  const Tensor& sym_emb = params.tensor("sym_emb");
  {
    RowMat x(1, d);
    const Tensor& start_emb = params.tensor("start_emb");
    for (int c = 0; c < d; ++c) x(0, c) = start_emb.data[c];
    RowMat h = mlp_forward(mlp_ref(params, "f1"), x, nullptr);
    auto u_start = mat_view(params.tensor("u_start"), nt, d);
    Eigen::VectorXd logits = u_start * h.row(0).transpose();
    table.start_lp.assign(logits.data(), logits.data() + nt);
    log_softmax_inplace(table.start_lp.data(), table.start_lp.size(), -1, "start");
    finite_or_throw(table.start_lp, "start");
  }
  {
    RowMat x = mat_view(sym_emb, nt, d).topRows(ni);
    RowMat h = mlp_forward(mlp_ref(params, "f2"), x, nullptr);
    auto u_bin = mat_view(params.tensor("u_binary"), nt * nt, d);
    RowMat logits = h * u_bin.transpose();  // [NI, NT*NT]
    table.binary_lp.resize(static_cast<std::size_t>(ni * nt * nt));
    for (long long a = 0; a < ni; ++a) {
      for (long long rc = 0; rc < nt * nt; ++rc)
        table.binary_lp[static_cast<std::size_t>(a * nt * nt + rc)] = logits(a, rc);
      log_softmax_inplace(table.binary_lp.data() + a * nt * nt,
                          static_cast<std::size_t>(nt * nt), -1, "binary");
    }
    finite_or_throw(table.binary_lp, "binary");
  }
  if (t.kind == GrammarKind::kPcfg) {
    RowMat x = mat_view(sym_emb, nt, d).bottomRows(p);
    RowMat h = mlp_forward(mlp_ref(params, "f3"), x, nullptr);
    auto u_term = mat_view(params.tensor("u_term"), v, d);
    RowMat logits = h * u_term.transpose();  // [P, V]
    table.term_lp.resize(static_cast<std::size_t>(p * v));
    for (long long a = 0; a < p; ++a) {
      for (long long w = 0; w < v; ++w)
        table.term_lp[static_cast<std::size_t>(a * v + w)] = logits(a, w);
      log_softmax_inplace(table.term_lp.data() + a * v, static_cast<std::size_t>(v),
                          -1, "terminal");
    }
    finite_or_throw(table.term_lp, "terminal");
  } else {
    long long eps = t.eps_id.value();
    {
      RowMat x = mat_view(params.tensor("pre_kind_emb"), p, d);
      RowMat h = mlp_forward(mlp_ref(params, "f3"), x, nullptr);
      auto u_kind = mat_view(params.tensor("u_kind"), kNumEmitKinds, d);
      RowMat logits = h * u_kind.transpose();
      table.kind_lp.resize(static_cast<std::size_t>(p * kNumEmitKinds));
      for (long long a = 0; a < p; ++a) {
        for (int k = 0; k < kNumEmitKinds; ++k)
          table.kind_lp[static_cast<std::size_t>(a * kNumEmitKinds + k)] =
              logits(a, k);
        log_softmax_inplace(table.kind_lp.data() + a * kNumEmitKinds,
                            kNumEmitKinds, -1, "kind");
      }
      finite_or_throw(table.kind_lp, "kind");
    }
    {
      RowMat x = mat_view(params.tensor("pre_src_emb"), p, d);
      RowMat h = mlp_forward(mlp_ref(params, "f4"), x, nullptr);
      auto u_src = mat_view(params.tensor("u_src"), v, d);
      RowMat logits = h * u_src.transpose();
      table.src_lp.resize(static_cast<std::size_t>(p * v));
      for (long long a = 0; a < p; ++a) {
        for (long long w = 0; w < v; ++w)
          table.src_lp[static_cast<std::size_t>(a * v + w)] = logits(a, w);
        log_softmax_inplace(table.src_lp.data() + a * v,
                            static_cast<std::size_t>(v), eps, "source");
      }
      finite_or_throw(table.src_lp, "source");
    }
    // Target rows stay lazy in neural mode.
  }
  return table;
}

GradTable GradTable::zeros(const GrammarTopology& topo) {
  GradTable g;
  long long nt = topo.n_nonterminal();
  g.start.assign(static_cast<std::size_t>(nt), 0.0);
  g.binary.assign(static_cast<std::size_t>(topo.n_internal * nt * nt), 0.0);
  if (topo.kind == GrammarKind::kPcfg) {
    g.term.assign(static_cast<std::size_t>(topo.n_preterminal * topo.vocab_size),
                  0.0);
  } else {
    g.kind.assign(static_cast<std::size_t>(topo.n_preterminal * kNumEmitKinds), 0.0);
    g.src.assign(static_cast<std::size_t>(topo.n_preterminal * topo.vocab_size),
                 0.0);
  }
  return g;
}

void GradTable::accumulate(const GradTable& other, double scale) {
  auto add = [scale](std::vector<double>& dst, const std::vector<double>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
  };
  add(start, other.start);
  add(binary, other.binary);
  add(term, other.term);
  add(kind, other.kind);
  add(src, other.src);
  for (const auto& [ctx, row] : other.tgt) {
    auto& dst = tgt[ctx];
    for (const auto& [wb, val] : row) dst[wb] += scale * val;
  }
}

namespace {

// Tabular backprop: the log-softmax jacobian applied blockwise.
GrammarParams backprop_tabular(const GrammarParams& params, const RuleTable& table,
                               const GradTable& g) {
  const GrammarTopology& t = params.topology;
  long long nt = t.n_nonterminal();
  long long ni = t.n_internal;
  long long p = t.n_preterminal;
  long long v = t.vocab_size;
  GrammarParams grads = zeros_like(params);

  logp_grad_to_logit_grad(table.start_lp.data(), g.start.data(),
                          static_cast<std::size_t>(nt),
                          grads.tensor("start_logit").data.data());
  for (long long a = 0; a < ni; ++a) {
    logp_grad_to_logit_grad(table.binary_lp.data() + a * nt * nt,
                            g.binary.data() + a * nt * nt,
                            static_cast<std::size_t>(nt * nt),
                            grads.tensor("binary_logit").data.data() + a * nt * nt);
  }
  if (t.kind == GrammarKind::kPcfg) {
    for (long long a = 0; a < p; ++a) {
      logp_grad_to_logit_grad(table.term_lp.data() + a * v, g.term.data() + a * v,
                              static_cast<std::size_t>(v),
                              grads.tensor("term_logit").data.data() + a * v);
    }
    return grads;
  }
  for (long long a = 0; a < p; ++a) {
    logp_grad_to_logit_grad(table.kind_lp.data() + a * kNumEmitKinds,
                            g.kind.data() + a * kNumEmitKinds, kNumEmitKinds,
                            grads.tensor("kind_logit").data.data() + a * kNumEmitKinds);
    logp_grad_to_logit_grad(table.src_lp.data() + a * v, g.src.data() + a * v,
                            static_cast<std::size_t>(v),
                            grads.tensor("src_logit").data.data() + a * v);
  }
  double* tgt_grad = grads.tensor("tgt_logit").data.data();
  std::vector<double> logp_row, g_row;
  for (const auto& [ctx, row] : g.tgt) {
    auto [pre, wa] = ctx;
    logp_row.resize(static_cast<std::size_t>(v));
    table.tgt_scores(pre, wa, logp_row);
    double logz = table.tgt_logz(pre, wa);
    long long eps = t.eps_id.value();
    for (long long w = 0; w < v; ++w)
      logp_row[static_cast<std::size_t>(w)] =
          w == eps ? kNegInf : logp_row[static_cast<std::size_t>(w)] - logz;
    g_row.assign(static_cast<std::size_t>(v), 0.0);
    for (const auto& [wb, val] : row) g_row[static_cast<std::size_t>(wb)] = val;
    logp_grad_to_logit_grad(logp_row.data(), g_row.data(),
                            static_cast<std::size_t>(v),
                            tgt_grad + (static_cast<long long>(pre) * v + wa) * v);
  }
  return grads;
}

GrammarParams backprop_neural(const GrammarParams& params, const RuleTable& table,
                              const GradTable& g) {
  const GrammarTopology& t = params.topology;
  long long nt = t.n_nonterminal();
  long long ni = t.n_internal;
  long long p = t.n_preterminal;
  long long v = t.vocab_size;
  int d = t.dim;
  GrammarParams grads = zeros_like(params);
  const Tensor& sym_emb = params.tensor("sym_emb");
  auto sym_grad = mat_view_mut(grads.tensor("sym_emb"), nt, d);

  {
    // start rules
    std::vector<double> glogit(static_cast<std::size_t>(nt));
    logp_grad_to_logit_grad(table.start_lp.data(), g.start.data(),
                            static_cast<std::size_t>(nt), glogit.data());
    RowMat x(1, d);
    const Tensor& start_emb = params.tensor("start_emb");
    for (int c = 0; c < d; ++c) x(0, c) = start_emb.data[c];
    MlpCache cache;
    MlpRef f1 = mlp_ref(params, "f1");
    RowMat h = mlp_forward(f1, x, &cache);
    auto u_start = mat_view(params.tensor("u_start"), nt, d);
    Eigen::Map<const Eigen::VectorXd> gl(glogit.data(), nt);
    auto gu_start = mat_view_mut(grads.tensor("u_start"), nt, d);
    gu_start += gl * h.row(0);
    RowMat gh = (u_start.transpose() * gl).transpose();
    RowMat gx = mlp_backward(f1, x, cache, gh, grads, "f1");
    double* gs = grads.tensor("start_emb").data.data();
    for (int c = 0; c < d; ++c) gs[c] += gx(0, c);
  }
  {
    // binary rules
    RowMat glogits(ni, nt * nt);
    for (long long a = 0; a < ni; ++a) {
      std::vector<double> row(static_cast<std::size_t>(nt * nt));
      logp_grad_to_logit_grad(table.binary_lp.data() + a * nt * nt,
                              g.binary.data() + a * nt * nt,
                              static_cast<std::size_t>(nt * nt), row.data());
      for (long long rc = 0; rc < nt * nt; ++rc) glogits(a, rc) = row[rc];
    }
    RowMat x = mat_view(sym_emb, nt, d).topRows(ni);
    MlpCache cache;
    MlpRef f2 = mlp_ref(params, "f2");
    RowMat h = mlp_forward(f2, x, &cache);
    auto u_bin = mat_view(params.tensor("u_binary"), nt * nt, d);
    auto gu_bin = mat_view_mut(grads.tensor("u_binary"), nt * nt, d);
    gu_bin += glogits.transpose() * h;
    RowMat gh = glogits * u_bin;
    RowMat gx = mlp_backward(f2, x, cache, gh, grads, "f2");
    sym_grad.topRows(ni) += gx;
  }
  if (t.kind == GrammarKind::kPcfg) {
    RowMat glogits(p, v);
    for (long long a = 0; a < p; ++a) {
      std::vector<double> row(static_cast<std::size_t>(v));
      logp_grad_to_logit_grad(table.term_lp.data() + a * v, g.term.data() + a * v,
                              static_cast<std::size_t>(v), row.data());
      for (long long w = 0; w < v; ++w) glogits(a, w) = row[w];
    }
    RowMat x = mat_view(sym_emb, nt, d).bottomRows(p);
    MlpCache cache;
    MlpRef f3 = mlp_ref(params, "f3");
    RowMat h = mlp_forward(f3, x, &cache);
    auto u_term = mat_view(params.tensor("u_term"), v, d);
    auto gu_term = mat_view_mut(grads.tensor("u_term"), v, d);
    gu_term += glogits.transpose() * h;
    RowMat gh = glogits * u_term;
    RowMat gx = mlp_backward(f3, x, cache, gh, grads, "f3");
    sym_grad.bottomRows(p) += gx;
    return grads;
  }

  long long eps = t.eps_id.value();
  {
    // emission kinds
    RowMat glogits(p, kNumEmitKinds);
    for (long long a = 0; a < p; ++a) {
      std::vector<double> row(kNumEmitKinds);
      logp_grad_to_logit_grad(table.kind_lp.data() + a * kNumEmitKinds,
                              g.kind.data() + a * kNumEmitKinds, kNumEmitKinds,
                              row.data());
      for (int k = 0; k < kNumEmitKinds; ++k) glogits(a, k) = row[k];
    }
    RowMat x = mat_view(params.tensor("pre_kind_emb"), p, d);
    MlpCache cache;
    MlpRef f3 = mlp_ref(params, "f3");
    RowMat h = mlp_forward(f3, x, &cache);
    auto u_kind = mat_view(params.tensor("u_kind"), kNumEmitKinds, d);
    auto gu_kind = mat_view_mut(grads.tensor("u_kind"), kNumEmitKinds, d);
    gu_kind += glogits.transpose() * h;
    RowMat gh = glogits * u_kind;
    RowMat gx = mlp_backward(f3, x, cache, gh, grads, "f3");
    mat_view_mut(grads.tensor("pre_kind_emb"), p, d) += gx;
  }
  {
    // source words
    RowMat glogits(p, v);
    for (long long a = 0; a < p; ++a) {
      std::vector<double> row(static_cast<std::size_t>(v));
      logp_grad_to_logit_grad(table.src_lp.data() + a * v, g.src.data() + a * v,
                              static_cast<std::size_t>(v), row.data());
      for (long long w = 0; w < v; ++w) glogits(a, w) = row[w];
    }
    RowMat x = mat_view(params.tensor("pre_src_emb"), p, d);
    MlpCache cache;
    MlpRef f4 = mlp_ref(params, "f4");
    RowMat h = mlp_forward(f4, x, &cache);
    auto u_src = mat_view(params.tensor("u_src"), v, d);
    auto gu_src = mat_view_mut(grads.tensor("u_src"), v, d);
    gu_src += glogits.transpose() * h;
    RowMat gh = glogits * u_src;
    RowMat gx = mlp_backward(f4, x, cache, gh, grads, "f4");
    mat_view_mut(grads.tensor("pre_src_emb"), p, d) += gx;
  }
  if (!g.tgt.empty()) {
    // target words, batched over the touched (preterminal, source word) contexts
    long long contexts = static_cast<long long>(g.tgt.size());
    RowMat x(contexts, d);
    RowMat glogits(contexts, v);
    const Tensor& pre_emb = params.tensor("pre_tgt_emb");
    const Tensor& word_emb = params.tensor("src_word_emb");
    std::vector<std::pair<int, int>> ctx_list;
    ctx_list.reserve(static_cast<std::size_t>(contexts));
    long long r = 0;
    std::vector<double> logp_row, g_row, glogit_row;
    for (const auto& [ctx, row] : g.tgt) {
      auto [pre, wa] = ctx;
      ctx_list.push_back(ctx);
      for (int c = 0; c < d; ++c) {
        x(r, c) = pre_emb.data[static_cast<std::size_t>(pre) * d + c] +
                  word_emb.data[static_cast<std::size_t>(wa) * d + c];
      }
      logp_row.resize(static_cast<std::size_t>(v));
      table.tgt_scores(pre, wa, logp_row);
      double logz = table.tgt_logz(pre, wa);
      for (long long w = 0; w < v; ++w)
        logp_row[static_cast<std::size_t>(w)] =
            w == eps ? kNegInf : logp_row[static_cast<std::size_t>(w)] - logz;
      g_row.assign(static_cast<std::size_t>(v), 0.0);
      for (const auto& [wb, val] : row) g_row[static_cast<std::size_t>(wb)] = val;
      glogit_row.resize(static_cast<std::size_t>(v));
      logp_grad_to_logit_grad(logp_row.data(), g_row.data(),
                              static_cast<std::size_t>(v), glogit_row.data());
      for (long long w = 0; w < v; ++w) glogits(r, w) = glogit_row[w];
      ++r;
    }
    MlpCache cache;
    MlpRef f5 = mlp_ref(params, "f5");
    RowMat h = mlp_forward(f5, x, &cache);
    auto u_tgt = mat_view(params.tensor("u_tgt"), v, d);
    auto gu_tgt = mat_view_mut(grads.tensor("u_tgt"), v, d);
    gu_tgt += glogits.transpose() * h;
    RowMat gh = glogits * u_tgt;
    RowMat gx = mlp_backward(f5, x, cache, gh, grads, "f5");
    auto gpre = mat_view_mut(grads.tensor("pre_tgt_emb"), p, d);
    auto gword = mat_view_mut(grads.tensor("src_word_emb"), v, d);
    for (long long row_i = 0; row_i < contexts; ++row_i) {
      auto [pre, wa] = ctx_list[static_cast<std::size_t>(row_i)];
      gpre.row(pre) += gx.row(row_i);
      gword.row(wa) += gx.row(row_i);
    }
  }
  return grads;
}

}  // namespace

GrammarParams backprop_params(const GrammarParams& params, const RuleTable& table,
                              const GradTable& grad_table) {
  if (params.mode == ParamMode::kTabular)
    return backprop_tabular(params, table, grad_table);
  return backprop_neural(params, table, grad_table);
}

GrammarParams backprop_params(const GrammarParams& params,
                              const GradTable& grad_table) {
  RuleTable table = materialize_rules(params);
  return backprop_params(params, table, grad_table);
}

}  // namespace sg
