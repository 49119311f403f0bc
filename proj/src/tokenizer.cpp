#include "rilke/tokenizer.hpp"

#include <sstream>

namespace rilke {

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

Tokenizer::Tokenizer(const std::vector<std::string>& words) {
  words_ = {std::string(kUnkToken), std::string(kEosToken)};
  for (const auto& w : words_) index_.emplace(w, static_cast<int>(index_.size()));
  for (const auto& w : words) {
    if (index_.contains(w)) continue;
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(w);
  }
}

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split(text)) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (!out.empty()) out += ' ';
    out += word(i);
  }
  return out;
}

int Tokenizer::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::word(int id) const {
  if (id < 0 || id >= size()) return words_[kUnk];
  return words_[static_cast<std::size_t>(id)];
}

}  // namespace rilke
