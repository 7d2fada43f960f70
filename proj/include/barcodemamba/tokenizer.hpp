#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "barcodemamba/common.hpp"

namespace bm {

enum class TokenizerKind { character, kmer };

struct TokenSeq {
  std::vector<int> ids;
  std::vector<std::uint8_t> pad_mask;  // 1 = real token
  std::size_t source_len = 0;

  std::size_t size() const { return ids.size(); }
  std::size_t real_count() const;
};

// Vocabulary layout: special tokens first (declared order), then the five
// nucleotides A,C,G,T,N (character) or all 4^k k-mers in lexicographic order.
class Tokenizer {
 public:
  static inline const std::vector<std::string> kDefaultSpecials = {"[PAD]", "[UNK]", "[MASK]"};

  static Tokenizer character(std::vector<std::string> specials = kDefaultSpecials);
  static Tokenizer kmer(int k, std::vector<std::string> specials = kDefaultSpecials);
  // kind "char" or "kmer"; k ignored for char.
  static Tokenizer build(std::string_view kind, int k,
                         std::vector<std::string> specials = kDefaultSpecials);

  TokenizerKind kind() const { return kind_; }
  // Window length; 1 for the character tokenizer.
  int k() const { return k_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const std::vector<std::string>& specials() const { return specials_; }
  const std::string& token(int id) const;
  int id(std::string_view token) const;

  int pad_id() const { return special_id("[PAD]"); }
  int unk_id() const { return special_id("[UNK]"); }
  int mask_id() const { return special_id("[MASK]"); }
  bool has_special(std::string_view name) const;

  // Tokens produced for a sequence of the given length.
  std::size_t encoded_length(std::size_t seq_len) const { return seq_len / static_cast<std::size_t>(k_); }

  TokenSeq encode(std::string_view seq) const;
  std::string decode(const TokenSeq& ts) const;
  std::string decode(const std::vector<int>& ids) const;

  std::uint64_t vocab_hash() const;
  std::string name() const;  // "char" or "kmer6" etc.
  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

  bool operator==(const Tokenizer& o) const {
    return kind_ == o.kind_ && k_ == o.k_ && vocab_ == o.vocab_;
  }

 private:
  Tokenizer(TokenizerKind kind, int k, std::vector<std::string> specials);
  int special_id(std::string_view name) const;

  TokenizerKind kind_;
  int k_;
  std::vector<std::string> specials_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace bm
