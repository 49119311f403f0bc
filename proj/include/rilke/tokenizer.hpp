#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rilke {

// Whitespace tokenizer over a closed vocabulary. Ids 0 and 1 are reserved for
// the unknown and end-of-sequence tokens.
class Tokenizer {
 public:
  static constexpr int kUnk = 0;
  static constexpr int kEos = 1;
  static constexpr std::string_view kUnkToken = "<unk>";
  static constexpr std::string_view kEosToken = "<eos>";

  Tokenizer();
  // Builds from words in first-seen order; reserved tokens are prepended.
  explicit Tokenizer(const std::vector<std::string>& words);

  static std::vector<std::string> split(std::string_view text);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(const std::vector<int>& ids) const;
  int id(std::string_view word) const;  // kUnk when absent
  const std::string& word(int id) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace rilke
