#include "pkmlab/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

#include "pkmlab/encoder.hpp"

namespace pkmlab {

namespace {
constexpr const char* kVocabHeader = "#pkmlab-vocab";
const char* const kReserved[] = {"[PAD]", "[MASK]", "[UNK]", "[CLS]"};

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}
}  // namespace

const char* to_string(TokenizerMode mode) { return mode == TokenizerMode::kChar ? "char" : "word"; }

TokenizerMode tokenizer_mode_from_string(const std::string& s) {
  if (s == "word") return TokenizerMode::kWord;
  if (s == "char") return TokenizerMode::kChar;
  throw std::invalid_argument("unknown tokenizer '" + s + "' (expected word|char)");
}

std::vector<std::string> tokenize(std::string_view line, TokenizerMode mode) {
  std::vector<std::string> out;
  if (mode == TokenizerMode::kWord) {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      if (j > i) out.emplace_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  for (std::size_t i = 0; i < line.size();) {
    const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(line[i])), line.size() - i);
    if (line[i] != '\n' && line[i] != '\r') out.emplace_back(line.substr(i, n));
    i += n;
  }
  return out;
}

Vocab::Vocab() {
  for (const char* r : kReserved) add(r);
}

void Vocab::add(std::string token) {
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(const std::vector<std::string>& lines, TokenizerMode mode, std::size_t max_size) {
  std::map<std::string, std::uint64_t> freq;
  for (const auto& line : lines) {
    for (auto& t : tokenize(line, mode)) ++freq[t];
  }
  for (const char* r : kReserved) freq.erase(r);
  if (freq.empty()) throw std::invalid_argument("build_vocab: corpus has no tokens");
  std::vector<std::pair<std::string, std::uint64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  v.mode_ = mode;
  for (auto& [tok, count] : ranked) {
    if (v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open vocab file " + path.string());
  std::string header;
  std::getline(in, header);
  const std::string prefix = std::string(kVocabHeader) + " mode=";
  if (header.rfind(prefix, 0) != 0) throw std::runtime_error("vocab file: bad header in " + path.string());
  Vocab v;
  v.mode_ = tokenizer_mode_from_string(header.substr(prefix.size()));
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (row < std::size(kReserved)) {
      if (line != kReserved[row]) throw std::runtime_error("vocab file: reserved ids out of order");
    } else {
      if (v.ids_.count(line) != 0) throw std::runtime_error("vocab file: duplicate token '" + line + "'");
      v.add(line);
    }
    ++row;
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocab file " + path.string());
  out << kVocabHeader << " mode=" << to_string(mode_) << '\n';
  for (const auto& t : tokens_) out << t << '\n';
}

std::int32_t Vocab::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

std::vector<std::int32_t> Vocab::encode(std::string_view line) const {
  std::vector<std::int32_t> out;
  for (const auto& t : tokenize(line, mode_)) out.push_back(id(t));
  return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<LabeledText> read_labeled_tsv(const std::filesystem::path& path) {
  std::vector<LabeledText> out;
  std::size_t lineno = 0;
  for (const auto& line : read_lines(path)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected label<TAB>text");
    }
    LabeledText ex;
    try {
      ex.label = std::stoi(line.substr(0, tab));
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": bad label");
    }
    ex.text = line.substr(tab + 1);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace pkmlab
