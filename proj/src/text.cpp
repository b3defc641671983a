#include "rtflow/text.hpp"

#include <algorithm>
#include <cctype>

namespace rtflow {

std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  };
  const std::size_t n = text.size();
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (c == '.' && i > 0 && i + 1 < n &&
               std::isdigit(static_cast<unsigned char>(text[i - 1])) &&
               std::isdigit(static_cast<unsigned char>(text[i + 1]))) {
      // Decimal point inside a number ("40.05"), not sentence punctuation.
      cur.push_back('.');
    } else {
      flush();
    }
  }
  flush();
  return out;
}

Vocab Vocab::build(const std::vector<std::string>& words) {
  std::vector<std::string> toks{std::string(kPad), std::string(kUnk),
                                std::string(kBos), std::string(kInp),
                                std::string(kTgt), std::string(kEos)};
  for (const auto& w : words) {
    if (w.empty()) throw InvalidInput("Vocab::build: empty token");
    if (std::find(toks.begin(), toks.end(), w) == toks.end()) toks.push_back(w);
  }
  return from_token_list(toks);
}

Vocab Vocab::from_token_list(const std::vector<std::string>& tokens) {
  if (tokens.size() < 6 || tokens[0] != kPad || tokens[1] != kUnk ||
      tokens[2] != kBos || tokens[3] != kInp || tokens[4] != kTgt ||
      tokens[5] != kEos)
    throw ValidationError("Vocab: token list must begin with the special tokens");
  Vocab v;
  v.tokens_ = tokens;
  v.build_index();
  return v;
}

void Vocab::build_index() {
  index_.clear();
  index_.reserve(tokens_.size());
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i)
    index_.emplace_back(tokens_[i], i);
  std::sort(index_.begin(), index_.end());
  for (std::size_t i = 1; i < index_.size(); ++i)
    if (index_[i].first == index_[i - 1].first)
      throw ValidationError("Vocab: duplicate token '" + index_[i].first + "'");
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) throw InvalidInput("Vocab::token: id out of range");
  return tokens_[id];
}

int Vocab::id(std::string_view tok) const {
  auto it = std::lower_bound(
      index_.begin(), index_.end(), tok,
      [](const auto& p, std::string_view t) { return p.first < t; });
  if (it != index_.end() && it->first == tok) return it->second;
  return unk_id();
}

bool Vocab::contains(std::string_view tok) const {
  auto it = std::lower_bound(
      index_.begin(), index_.end(), tok,
      [](const auto& p, std::string_view t) { return p.first < t; });
  return it != index_.end() && it->first == tok;
}

std::vector<int> Vocab::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : tokenize_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

}  // namespace rtflow
