#include "sgram/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

namespace sg {

namespace {

bool is_separator_char(char c) {
  static const std::string seps = ".,!?;:'\"()[]/-*&#^`";
  return seps.find(c) != std::string::npos;
}

// UTF-8 for the typographic apostrophe U+2019.
const std::string kCurlyApostrophe = "\xE2\x80\x99";

}  // namespace

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size())
    throw Error(ErrorCode::kInvalidArgument,
                "token id out of range: " + std::to_string(id));
  return tokens[static_cast<std::size_t>(id)];
}

int Dataset::label_id(const std::string& label) const {
  auto it = std::lower_bound(labels.begin(), labels.end(), label);
  if (it == labels.end() || *it != label)
    throw Error(ErrorCode::kInvalidArgument, "unknown label: " + label);
  return static_cast<int>(it - labels.begin());
}

void Dataset::encode_with(const Vocabulary& vocab) {
  for (auto& ex : examples) {
    ex.ids_a = vocab.encode(ex.tokens_a);
    ex.ids_b = vocab.encode(ex.tokens_b);
  }
}

std::vector<std::vector<std::string>> Dataset::all_token_sequences() const {
  std::vector<std::vector<std::string>> out;
  out.reserve(examples.size() * (kind == DatasetKind::kPair ? 2 : 1));
  for (const auto& ex : examples) {
    out.push_back(ex.tokens_a);
    if (kind == DatasetKind::kPair) out.push_back(ex.tokens_b);
  }
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&]() {
    if (!current.empty()) {
      out.push_back(current);
      current.clear();
    }
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      flush();
      continue;
    }
    if (c < 0x80 && is_separator_char(static_cast<char>(c))) {
      flush();
      out.push_back(std::string(1, static_cast<char>(std::tolower(c))));
      continue;
    }
    if (text.compare(i, kCurlyApostrophe.size(), kCurlyApostrophe) == 0) {
      flush();
      out.push_back(kCurlyApostrophe);
      i += kCurlyApostrophe.size() - 1;
      continue;
    }
    current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c))
                               : static_cast<char>(c));
  }
  flush();
  return out;
}

std::vector<std::string> split_sentences(const std::string& document) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&]() {
    std::size_t b = current.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
      current.clear();
      return;
    }
    std::size_t e = current.find_last_not_of(" \t\r\n");
    out.push_back(current.substr(b, e - b + 1));
    current.clear();
  };
  for (std::size_t i = 0; i < document.size(); ++i) {
    char c = document[i];
    current.push_back(c);
    if (c == '.' || c == '!' || c == '?') {
      std::size_t j = i + 1;
      while (j < document.size() &&
             (document[j] == '.' || document[j] == '!' || document[j] == '?')) {
        current.push_back(document[j]);
        ++j;
      }
      i = j - 1;
      if (j >= document.size() ||
          std::isspace(static_cast<unsigned char>(document[j]))) {
        flush();
      }
    }
  }
  flush();
  return out;
}

Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus,
                            int max_size, bool with_eps) {
  int reserved = with_eps ? 2 : 1;
  if (max_size < reserved + 1)
    throw Error(ErrorCode::kInvalidArgument,
                "vocabulary max_size too small: " + std::to_string(max_size));
  std::unordered_map<std::string, std::pair<long long, long long>> stats;
  long long order = 0;
  for (const auto& seq : corpus) {
    for (const auto& tok : seq) {
      auto it = stats.find(tok);
      if (it == stats.end()) {
        stats.emplace(tok, std::make_pair(1LL, order++));
      } else {
        ++it->second.first;
      }
    }
  }
  std::vector<std::pair<std::string, std::pair<long long, long long>>> ranked(
      stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.first != b.second.first) return a.second.first > b.second.first;
    return a.second.second < b.second.second;
  });

  Vocabulary vocab;
  vocab.tokens.push_back(kUnkToken);
  vocab.unk_id = 0;
  if (with_eps) {
    vocab.tokens.push_back(kEpsToken);
    vocab.eps_id = 1;
  }
  int budget = max_size - reserved;
  for (const auto& entry : ranked) {
    if (budget == 0) break;
    if (entry.first == kUnkToken || entry.first == kEpsToken) continue;
    vocab.tokens.push_back(entry.first);
    --budget;
  }
  for (int i = 0; i < vocab.size(); ++i) vocab.index[vocab.tokens[i]] = i;
  return vocab;
}

Dataset load_dataset(const std::string& path, DatasetKind kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open dataset: " + path);
  Dataset dataset;
  dataset.kind = kind;
  std::set<std::string> label_set;
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kSchema, path + ":" + std::to_string(line_no) +
                                          ": malformed JSON: " + e.what());
    }
    auto require_string = [&](const char* key) -> std::string {
      if (!record.contains(key) || !record[key].is_string())
        throw Error(ErrorCode::kSchema,
                    path + ":" + std::to_string(line_no) +
                        ": missing or non-string field \"" + key + "\"");
      return record[key].get<std::string>();
    };
    Example ex;
    ex.id = require_string("id");
    ex.label = require_string("label");
    if (kind == DatasetKind::kSingle) {
      ex.tokens_a = tokenize(require_string("text"));
      if (record.contains("parent") && record["parent"].is_string())
        ex.parent = record["parent"].get<std::string>();
    } else {
      ex.tokens_a = tokenize(require_string("text_a"));
      ex.tokens_b = tokenize(require_string("text_b"));
    }
    if (ex.tokens_a.empty())
      throw Error(ErrorCode::kSchema, path + ":" + std::to_string(line_no) +
                                          ": empty text after tokenization");
    if (kind == DatasetKind::kPair && ex.tokens_b.empty())
      throw Error(ErrorCode::kSchema, path + ":" + std::to_string(line_no) +
                                          ": empty text_b after tokenization");
    label_set.insert(ex.label);
    dataset.examples.push_back(std::move(ex));
  }
  dataset.labels.assign(label_set.begin(), label_set.end());
  for (auto& ex : dataset.examples) ex.label_index = dataset.label_id(ex.label);
  return dataset;
}

Dataset prepare_split(const Dataset& dataset, long long max_area,
                      int per_class, std::uint64_t seed) {
  if (per_class < 1)
    throw Error(ErrorCode::kInvalidArgument, "per_class must be >= 1");
  std::vector<std::size_t> survivors;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const Example& ex = dataset.examples[i];
    if (dataset.kind == DatasetKind::kPair && max_area > 0) {
      long long area = static_cast<long long>(ex.tokens_a.size()) *
                       static_cast<long long>(ex.tokens_b.size());
      if (area >= max_area) continue;
    }
    survivors.push_back(i);
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t idx : survivors) {
    by_class[dataset.examples[idx].label_index].push_back(idx);
  }
  for (int c = 0; c < static_cast<int>(dataset.labels.size()); ++c) {
    if (by_class.find(c) == by_class.end())
      throw Error(ErrorCode::kInvalidArgument,
                  "class has no surviving examples: " + dataset.labels[c]);
  }
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  for (auto& [cls, pool] : by_class) {
    Rng sub = rng.fork(static_cast<std::uint64_t>(cls) + 1);
    std::size_t take = std::min<std::size_t>(pool.size(),
                                             static_cast<std::size_t>(per_class));
    sub.shuffle(pool);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + take);
  }
  std::sort(chosen.begin(), chosen.end());
  Dataset out;
  out.kind = dataset.kind;
  out.labels = dataset.labels;
  out.examples.reserve(chosen.size());
  for (std::size_t idx : chosen) out.examples.push_back(dataset.examples[idx]);
  return out;
}

}  // namespace sg
