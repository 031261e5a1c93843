#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pkmlab {

enum class TokenizerMode { kWord, kChar };

const char* to_string(TokenizerMode mode);
TokenizerMode tokenizer_mode_from_string(const std::string& s);

// Whitespace-separated words, or UTF-8 code points (whitespace included as
// its own token, newlines dropped).
std::vector<std::string> tokenize(std::string_view line, TokenizerMode mode);

// Token <-> id map. Ids 0..3 are [PAD], [MASK], [UNK], [CLS].
class Vocab {
 public:
  Vocab();

  // Frequency-ranked, ties broken lexicographically. `max_size` caps the total
  // size including the reserved tokens. Throws on a corpus without tokens.
  static Vocab build(const std::vector<std::string>& lines, TokenizerMode mode,
                     std::size_t max_size);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::int32_t id(std::string_view token) const;  // [UNK] when absent
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::string_view line) const;

 private:
  void add(std::string token);

  TokenizerMode mode_ = TokenizerMode::kWord;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

// Lines of a UTF-8 text file, trailing '\r' stripped, empty lines skipped.
std::vector<std::string> read_lines(const std::filesystem::path& path);

struct LabeledText {
  int label = 0;
  std::string text;
};
// label<TAB>text per line.
std::vector<LabeledText> read_labeled_tsv(const std::filesystem::path& path);

}  // namespace pkmlab
