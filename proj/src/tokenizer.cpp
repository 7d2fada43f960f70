#include "barcodemamba/tokenizer.hpp"

#include <algorithm>
#include <set>

namespace bm {

namespace {

constexpr char kBases[] = {'A', 'C', 'G', 'T'};

int base_index(char c) {
  switch (c) {
    case 'A':
      return 0;
    case 'C':
      return 1;
    case 'G':
      return 2;
    case 'T':
      return 3;
    case 'N':
      return 4;
    default:
      return -1;
  }
}

}  // namespace

std::size_t TokenSeq::real_count() const {
  return static_cast<std::size_t>(std::count(pad_mask.begin(), pad_mask.end(), std::uint8_t{1}));
}

Tokenizer::Tokenizer(TokenizerKind kind, int k, std::vector<std::string> specials)
    : kind_(kind), k_(k), specials_(std::move(specials)) {
  {
    std::set<std::string> uniq(specials_.begin(), specials_.end());
    if (uniq.size() != specials_.size()) throw ConfigError("duplicate special tokens");
  }
  vocab_ = specials_;
  if (kind == TokenizerKind::character) {
    for (const char* s : {"A", "C", "G", "T", "N"}) vocab_.emplace_back(s);
  } else {
    std::size_t count = 1;
    for (int i = 0; i < k; ++i) count *= 4;
    for (std::size_t code = 0; code < count; ++code) {
      std::string w(static_cast<std::size_t>(k), 'A');
      auto c = code;
      for (int i = k - 1; i >= 0; --i) {
        w[static_cast<std::size_t>(i)] = kBases[c % 4];
        c /= 4;
      }
      vocab_.push_back(std::move(w));
    }
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<int>(i)).second)
      throw ConfigError("special token collides with vocabulary entry: " + vocab_[i]);
  }
}

Tokenizer Tokenizer::character(std::vector<std::string> specials) {
  return Tokenizer(TokenizerKind::character, 1, std::move(specials));
}

Tokenizer Tokenizer::kmer(int k, std::vector<std::string> specials) {
  if (k < 4 || k > 6) throw ConfigError("unsupported k-mer length " + std::to_string(k) + " (supported: 4, 5, 6)");
  return Tokenizer(TokenizerKind::kmer, k, std::move(specials));
}

Tokenizer Tokenizer::build(std::string_view kind, int k, std::vector<std::string> specials) {
  if (kind == "char") return character(std::move(specials));
  if (kind == "kmer") return kmer(k, std::move(specials));
  throw ConfigError("unknown tokenizer kind: " + std::string(kind));
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
    throw DataError("token id out of vocabulary: " + std::to_string(id));
  return vocab_[static_cast<std::size_t>(id)];
}

int Tokenizer::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw DataError("unknown token: " + std::string(token));
  return it->second;
}

bool Tokenizer::has_special(std::string_view name) const {
  return std::find(specials_.begin(), specials_.end(), name) != specials_.end();
}

int Tokenizer::special_id(std::string_view name) const {
  auto it = std::find(specials_.begin(), specials_.end(), name);
  if (it == specials_.end()) throw ConfigError("tokenizer has no " + std::string(name) + " token");
  return static_cast<int>(it - specials_.begin());
}

TokenSeq Tokenizer::encode(std::string_view seq) const {
  for (char c : seq)
    if (base_index(c) < 0)
      throw DataError(std::string("unnormalized character '") + c + "' in sequence");
  TokenSeq ts;
  ts.source_len = seq.size();
  const auto base = static_cast<int>(specials_.size());
  if (kind_ == TokenizerKind::character) {
    ts.ids.reserve(seq.size());
    for (char c : seq) ts.ids.push_back(base + base_index(c));
  } else {
    const auto k = static_cast<std::size_t>(k_);
    const int unk = unk_id();
    for (std::size_t pos = 0; pos + k <= seq.size(); pos += k) {
      int code = 0;
      bool has_n = false;
      for (std::size_t i = 0; i < k; ++i) {
        const int b = base_index(seq[pos + i]);
        if (b == 4) has_n = true;
        code = code * 4 + (b & 3);
      }
      ts.ids.push_back(has_n ? unk : base + code);
    }
  }
  ts.pad_mask.assign(ts.ids.size(), 1);
  return ts;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  const int n_special = static_cast<int>(specials_.size());
  const std::string unknown(static_cast<std::size_t>(k_), 'N');
  for (int id : ids) {
    const auto& t = token(id);
    if (id >= n_special)
      out += t;
    else if (t != "[PAD]")
      out += unknown;
  }
  return out;
}

std::string Tokenizer::decode(const TokenSeq& ts) const { return decode(ts.ids); }

std::uint64_t Tokenizer::vocab_hash() const {
  std::uint64_t h = fnv1a("vocab", 5);
  for (const auto& t : vocab_) {
    h = fnv1a(t.data(), t.size(), h);
    h = fnv1a("\n", 1, h);
  }
  return h;
}

std::string Tokenizer::name() const {
  return kind_ == TokenizerKind::character ? "char" : "kmer" + std::to_string(k_);
}

nlohmann::json Tokenizer::to_json() const {
  return {{"kind", kind_ == TokenizerKind::character ? "char" : "kmer"},
          {"k", k_},
          {"special_tokens", specials_},
          {"vocab_size", vocab_.size()},
          {"vocab_hash", hex64(vocab_hash())}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  auto t = build(j.at("kind").get<std::string>(), j.at("k").get<int>(),
                 j.at("special_tokens").get<std::vector<std::string>>());
  if (j.contains("vocab_hash") && j.at("vocab_hash").get<std::string>() != hex64(t.vocab_hash()))
    throw ConfigError("tokenizer vocabulary hash mismatch");
  return t;
}

}  // namespace bm
