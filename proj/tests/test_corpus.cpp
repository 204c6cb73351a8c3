#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "sgram/corpus.hpp"

using namespace sg;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  std::string path = std::string("/tmp/sgram_test_") + name;
  std::ofstream out(path, std::ios::trunc);
  out << content;
  return path;
}

}  // namespace

TEST_CASE("tokenize lowercases and splits punctuation") {
  CHECK(tokenize("A girl JUMPS") ==
        std::vector<std::string>{"a", "girl", "jumps"});
  CHECK(tokenize("don't bother") ==
        std::vector<std::string>{"don", "'", "t", "bother"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("10/10!") == std::vector<std::string>{"10", "/", "10", "!"});
  CHECK(tokenize("a,b") == std::vector<std::string>{"a", ",", "b"});
}

TEST_CASE("tokenize is idempotent on joined output") {
  std::string text = "Well... I DIDN'T expect (that)! 10/10";
  auto once = tokenize(text);
  std::string joined;
  for (const auto& t : once) {
    if (!joined.empty()) joined += ' ';
    joined += t;
  }
  CHECK(tokenize(joined) == once);
}

TEST_CASE("split_sentences") {
  CHECK(split_sentences("Great. Loved it!") ==
        std::vector<std::string>{"Great.", "Loved it!"});
  CHECK(split_sentences("no terminator") ==
        std::vector<std::string>{"no terminator"});
  CHECK(split_sentences("a... b? c") ==
        std::vector<std::string>{"a...", "b?", "c"});
  CHECK(split_sentences("").empty());
}

TEST_CASE("build_vocabulary keeps most frequent with stable ties") {
  std::vector<std::vector<std::string>> corpus{{"a", "a", "b"}, {"a", "c"}};
  Vocabulary vocab = build_vocabulary(corpus, 3, false);  // unk + 2 words
  CHECK(vocab.size() == 3);
  CHECK(vocab.tokens[0] == kUnkToken);
  CHECK(vocab.tokens[1] == "a");
  CHECK(vocab.tokens[2] == "b");  // b and c tie at 1; b occurred first
  CHECK(vocab.lookup("c") == vocab.unk_id);
  CHECK_FALSE(vocab.eps_id.has_value());
}

TEST_CASE("build_vocabulary empty corpus keeps only specials") {
  Vocabulary v = build_vocabulary({}, 10, true);
  CHECK(v.size() == 2);
  CHECK(v.tokens[0] == kUnkToken);
  CHECK(v.tokens[1] == kEpsToken);
  CHECK(v.eps_id == 1);
}

TEST_CASE("encode/decode round trip replaces OOV with unk") {
  std::vector<std::vector<std::string>> corpus{{"dog", "runs"}, {"dog"}};
  Vocabulary vocab = build_vocabulary(corpus, 16, false);
  auto ids = vocab.encode({"dog", "jumps", "runs"});
  std::vector<std::string> decoded;
  for (int id : ids) decoded.push_back(vocab.word(id));
  CHECK(decoded == std::vector<std::string>{"dog", kUnkToken, "runs"});
}

TEST_CASE("load_dataset single and pair") {
  std::string single = write_temp(
      "single.jsonl",
      "{\"id\":\"1\",\"label\":\"pos\",\"text\":\"good film\"}\n"
      "{\"id\":\"2\",\"label\":\"neg\",\"text\":\"bad film\",\"parent\":\"d0\"}\n");
  Dataset ds = load_dataset(single, DatasetKind::kSingle);
  CHECK(ds.examples.size() == 2);
  CHECK(ds.labels == std::vector<std::string>{"neg", "pos"});
  CHECK(ds.examples[0].label_index == 1);
  CHECK(ds.examples[0].tokens_a == std::vector<std::string>{"good", "film"});
  CHECK(ds.examples[1].parent == "d0");

  std::string pair = write_temp(
      "pair.jsonl",
      "{\"id\":\"7\",\"label\":\"entailment\",\"text_a\":\"a man walks\","
      "\"text_b\":\"a person walks\"}\n");
  Dataset dp = load_dataset(pair, DatasetKind::kPair);
  CHECK(dp.examples[0].tokens_b ==
        std::vector<std::string>{"a", "person", "walks"});

  std::string bad = write_temp(
      "bad.jsonl", "{\"id\":\"9\",\"label\":\"x\",\"text\":\"just one side\"}\n");
  CHECK_THROWS_AS(load_dataset(bad, DatasetKind::kPair), Error);

  std::string malformed = write_temp("mal.jsonl", "{not json}\n");
  try {
    load_dataset(malformed, DatasetKind::kSingle);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":1:") != std::string::npos);
  }
}

TEST_CASE("prepare_split filters by area and balances classes") {
  Dataset ds;
  ds.kind = DatasetKind::kPair;
  ds.labels = {"no", "yes"};
  auto add = [&](const std::string& id, const std::string& label, int la, int lb) {
    Example ex;
    ex.id = id;
    ex.label = label;
    ex.label_index = label == "no" ? 0 : 1;
    ex.tokens_a.assign(la, "w");
    ex.tokens_b.assign(lb, "w");
    ds.examples.push_back(ex);
  };
  add("a", "yes", 15, 15);  // area 225: excluded (strict <)
  add("b", "yes", 1, 1);
  add("c", "yes", 14, 15);
  add("d", "no", 2, 3);
  add("e", "no", 5, 5);
  Dataset out = prepare_split(ds, 225, 1, 99);
  CHECK(out.examples.size() == 2);
  int yes = 0, no = 0;
  for (const auto& ex : out.examples) {
    CHECK(ex.id != "a");
    if (ex.label == "yes") ++yes;
    if (ex.label == "no") ++no;
  }
  CHECK(yes == 1);
  CHECK(no == 1);

  Dataset again = prepare_split(ds, 225, 1, 99);
  CHECK(again.examples.size() == out.examples.size());
  for (std::size_t i = 0; i < out.examples.size(); ++i)
    CHECK(again.examples[i].id == out.examples[i].id);
}

TEST_CASE("prepare_split errors when a class has no survivors") {
  Dataset ds;
  ds.kind = DatasetKind::kPair;
  ds.labels = {"no", "yes"};
  Example ex;
  ex.id = "x";
  ex.label = "yes";
  ex.label_index = 1;
  ex.tokens_a.assign(20, "w");
  ex.tokens_b.assign(20, "w");
  ds.examples.push_back(ex);
  Example ey = ex;
  ey.id = "y";
  ey.label = "no";
  ey.label_index = 0;
  ey.tokens_a.assign(1, "w");
  ey.tokens_b.assign(1, "w");
  ds.examples.push_back(ey);
  CHECK_THROWS_AS(prepare_split(ds, 100, 1, 1), Error);
}

TEST_CASE("prepare_split draws per-class counts") {
  Dataset ds;
  ds.kind = DatasetKind::kSingle;
  ds.labels = {"a", "b", "c"};
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 100; ++i) {
      Example ex;
      ex.id = std::to_string(c) + "_" + std::to_string(i);
      ex.label = std::string(1, static_cast<char>('a' + c));
      ex.label_index = c;
      ex.tokens_a = {"w"};
      ds.examples.push_back(ex);
    }
  }
  Dataset out = prepare_split(ds, 0, 50, 123);
  CHECK(out.examples.size() == 150);
  int counts[3] = {0, 0, 0};
  for (const auto& ex : out.examples) counts[ex.label_index]++;
  for (int c = 0; c < 3; ++c) CHECK(counts[c] == 50);
}
