#pragma once

// Word-level tokenization and a closed vocabulary. One tokenizer is shared by
// the corpus grammar, the text metrics, and the language model so that a
// token means the same thing everywhere.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rtflow/common.hpp"

namespace rtflow {

// Lowercases and splits into word tokens. A token is a maximal run of
// alphanumerics; a '.' is kept inside a token only when flanked by digits on
// both sides, so "40.05" survives as one token while sentence-final periods
// separate. Everything else is a separator.
std::vector<std::string> tokenize_words(std::string_view text);

// Token ids are assigned in insertion order with the special tokens first,
// so a vocabulary is fully described by its token list.
class Vocab {
 public:
  static constexpr std::string_view kPad = "<pad>";
  static constexpr std::string_view kUnk = "<unk>";
  static constexpr std::string_view kBos = "<bos>";
  static constexpr std::string_view kInp = "<inp>";
  static constexpr std::string_view kTgt = "<tgt>";
  static constexpr std::string_view kEos = "<eos>";

  // Builds from word tokens (deduplicated, order-preserving); the six special
  // tokens always occupy ids 0..5.
  static Vocab build(const std::vector<std::string>& words);
  // Rebuilds from a previously serialized full token list (specials included).
  static Vocab from_token_list(const std::vector<std::string>& tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Id lookup; unknown words map to <unk>.
  int id(std::string_view tok) const;
  bool contains(std::string_view tok) const;

  int pad_id() const { return 0; }
  int unk_id() const { return 1; }
  int bos_id() const { return 2; }
  int inp_id() const { return 3; }
  int tgt_id() const { return 4; }
  int eos_id() const { return 5; }
  bool is_special(int id) const { return id >= 0 && id < 6; }

  // tokenize_words + id lookup.
  std::vector<int> encode(std::string_view text) const;
  // Joins tokens with single spaces; special tokens are skipped.
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  // Flat map is plenty at this vocabulary size; kept sorted for binary search.
  std::vector<std::pair<std::string, int>> index_;
  void build_index();
};

}  // namespace rtflow
