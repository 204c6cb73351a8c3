#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "sgram/util.hpp"

namespace sg {

// Reserved token strings. "<eps>" is only present for pair datasets.
inline constexpr const char* kUnkToken = "[UNK]";
inline constexpr const char* kEpsToken = "<eps>";

struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;
  int unk_id = 0;
  std::optional<int> eps_id;

  int size() const { return static_cast<int>(tokens.size()); }

  int lookup(const std::string& token) const {
    auto it = index.find(token);
    return it == index.end() ? unk_id : it->second;
  }

  const std::string& word(int id) const;

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(lookup(t));
    return ids;
  }
};

enum class DatasetKind { kSingle, kPair };

struct Example {
  std::string id;
  std::string label;
  int label_index = -1;  // into Dataset::labels
  std::string parent;    // document id for sentence-split corpora; empty otherwise
  std::vector<std::string> tokens_a;
  std::vector<std::string> tokens_b;  // pair datasets only
  std::vector<int> ids_a;             // filled by Dataset::encode_with
  std::vector<int> ids_b;
};

struct Dataset {
  DatasetKind kind = DatasetKind::kSingle;
  std::vector<std::string> labels;  // lexicographically sorted class set
  std::vector<Example> examples;

  int label_id(const std::string& label) const;
  void encode_with(const Vocabulary& vocab);
  std::vector<std::vector<std::string>> all_token_sequences() const;
};

// Lowercases and splits on whitespace; the characters .,!?;:'"()[]/-*&#^`
// and the typographic apostrophe become standalone tokens.
std::vector<std::string> tokenize(const std::string& text);

// Splits on runs of sentence-final punctuation (. ! ?) followed by
// whitespace. Never returns empty sentences.
std::vector<std::string> split_sentences(const std::string& document);

// Keeps the max_size most frequent tokens (ties: earlier first occurrence),
// counting the reserved tokens against max_size. with_eps adds "<eps>".
Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus,
                            int max_size, bool with_eps);

// JSONL loader. single: {"id","label","text"[,"parent"]};
// pair: {"id","label","text_a","text_b"}.
Dataset load_dataset(const std::string& path, DatasetKind kind);

// Area filter (pair kind only, strict |a|*|b| < max_area) followed by
// seeded class-balanced sampling without replacement. max_area <= 0 disables
// the filter. Selected examples keep their original order.
Dataset prepare_split(const Dataset& dataset, long long max_area,
                      int per_class, std::uint64_t seed);

}  // namespace sg
