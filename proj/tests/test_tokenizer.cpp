#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "barcodemamba/tokenizer.hpp"

using namespace bm;

namespace {

std::string random_acgt(Rng& rng, std::size_t n) {
  std::string s(n, 'A');
  for (auto& c : s) c = "ACGT"[rng.below(4)];
  return s;
}

std::size_t ipow4(int k) {
  std::size_t v = 1;
  for (int i = 0; i < k; ++i) v *= 4;
  return v;
}

}  // namespace

TEST_CASE("vocabulary sizes") {
  CHECK(Tokenizer::character().vocab_size() == 8);
  for (int k : {4, 5, 6}) CHECK(Tokenizer::kmer(k).vocab_size() == ipow4(k) + 3);
  CHECK(Tokenizer::kmer(6).vocab_size() == 4099);
  CHECK_THROWS_AS(Tokenizer::kmer(7), ConfigError);
  CHECK_THROWS_AS(Tokenizer::kmer(3), ConfigError);
  CHECK(Tokenizer::character({"[PAD]", "[UNK]", "[MASK]", "[SEP]"}).vocab_size() == 9);
}

TEST_CASE("specials take the lowest ids in declared order") {
  const auto t = Tokenizer::kmer(4);
  CHECK(t.pad_id() == 0);
  CHECK(t.unk_id() == 1);
  CHECK(t.mask_id() == 2);
  CHECK(t.token(3) == "AAAA");
  CHECK(t.token(static_cast<int>(t.vocab_size()) - 1) == "TTTT");
  const auto c = Tokenizer::character();
  CHECK(c.token(3) == "A");
  CHECK(c.token(7) == "N");
}

TEST_CASE("k-mer vocabulary is lexicographic and bijective") {
  const auto t = Tokenizer::kmer(5);
  std::set<std::string> all;
  for (std::size_t i = 4; i < t.vocab_size(); ++i) {
    CHECK(t.token(static_cast<int>(i - 1)) < t.token(static_cast<int>(i)));
  }
  for (std::size_t i = 3; i < t.vocab_size(); ++i) {
    const auto& tok = t.token(static_cast<int>(i));
    all.insert(tok);
    CHECK(t.id(tok) == static_cast<int>(i));
  }
  CHECK(all.size() == ipow4(5));
}

TEST_CASE("length laws") {
  Rng rng(1);
  const auto x = random_acgt(rng, 660);
  CHECK(Tokenizer::character().encode(x).size() == 660);
  CHECK(Tokenizer::kmer(6).encode(x).size() == 110);
  CHECK(Tokenizer::kmer(4).encode(x).size() == 165);
  CHECK(Tokenizer::kmer(5).encode(x).size() == 132);
  const auto ts = Tokenizer::character().encode("ACGTN");
  CHECK(ts.size() == 5);
  CHECK(ts.real_count() == 5);
}

TEST_CASE("windows containing N map to UNK and the remainder is dropped") {
  const auto t = Tokenizer::kmer(4);
  const auto ts = t.encode("ACGTNAAA");
  REQUIRE(ts.size() == 2);
  CHECK(ts.ids[0] == t.id("ACGT"));
  CHECK(ts.ids[1] == t.unk_id());
  CHECK(t.encode("ACGTAC").size() == 1);
  CHECK(t.decode(ts) == "ACGTNNNN");
}

TEST_CASE("round trip on N-free inputs") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto x = random_acgt(rng, 660);
    CHECK(Tokenizer::kmer(6).decode(Tokenizer::kmer(6).encode(x)) == x);
    CHECK(Tokenizer::character().decode(Tokenizer::character().encode(x)) == x);
  }
  const auto c = Tokenizer::character();
  CHECK(c.decode(c.encode("ACGTN")) == "ACGTN");
}

TEST_CASE("encoded windows reproduce the source substrings") {
  Rng rng(3);
  const auto t = Tokenizer::kmer(6);
  const auto x = random_acgt(rng, 60);
  const auto ts = t.encode(x);
  for (std::size_t i = 0; i < ts.size(); ++i) CHECK(t.token(ts.ids[i]) == x.substr(6 * i, 6));
}

TEST_CASE("decode of padding is empty") {
  const auto t = Tokenizer::kmer(4);
  CHECK(t.decode(std::vector<int>{0, 0, 0}).empty());
  CHECK_THROWS(t.decode(std::vector<int>{99999}));
}

TEST_CASE("unnormalized input is rejected") {
  CHECK_THROWS_AS(Tokenizer::character().encode("ACGR"), DataError);
  CHECK_THROWS_AS(Tokenizer::kmer(4).encode("acgt"), DataError);
}

TEST_CASE("json round trip and hash agreement") {
  for (const auto& t : {Tokenizer::character(), Tokenizer::kmer(4), Tokenizer::kmer(6)}) {
    const auto back = Tokenizer::from_json(t.to_json());
    CHECK(back == t);
    CHECK(back.vocab_hash() == t.vocab_hash());
  }
  CHECK(Tokenizer::kmer(4).vocab_hash() != Tokenizer::kmer(5).vocab_hash());
  auto j = Tokenizer::kmer(4).to_json();
  j["vocab_hash"] = "0000000000000000";
  CHECK_THROWS(Tokenizer::from_json(j));
  CHECK(Tokenizer::character().name() == "char");
  CHECK(Tokenizer::kmer(6).name() == "kmer6");
}
