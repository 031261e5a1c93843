#include "pkmlab/synth.hpp"

#include <array>
#include <set>
#include <stdexcept>

#include "pkmlab/rng.hpp"

namespace pkmlab {
namespace {

constexpr std::array<const char*, 16> kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                 "p", "r", "s", "t", "v", "z", "sh", "ch"};
constexpr std::array<const char*, 6> kVowels = {"a", "e", "i", "o", "u", "ai"};
constexpr std::array<const char*, 5> kCodas = {"", "", "n", "r", "l"};

struct Lexicon {
  std::vector<std::string> names;
  std::array<std::vector<std::string>, 4> values;  // city, job, color, pet
  std::vector<std::string> filler;
  std::vector<std::array<int, 4>> facts;           // entity -> value index per attribute
};

std::string pseudo_word(Rng& rng, int syllables) {
  std::string w;
  for (int s = 0; s < syllables; ++s) {
    w += kOnsets[rng.below(kOnsets.size())];
    w += kVowels[rng.below(kVowels.size())];
    if (s + 1 == syllables) w += kCodas[rng.below(kCodas.size())];
  }
  return w;
}

std::vector<std::string> unique_words(Rng& rng, std::set<std::string>& taken, int count,
                                      int syllables) {
  std::vector<std::string> out;
  while (static_cast<int>(out.size()) < count) {
    std::string w = pseudo_word(rng, syllables);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

Lexicon make_lexicon(const SynthCorpusConfig& cfg) {
  if (cfg.entities < 2 || cfg.values_per_attribute < 2 || cfg.filler_words < 4) {
    throw std::invalid_argument("synth: lexicon sizes too small");
  }
  Rng rng(cfg.seed);
  std::set<std::string> taken = {"lives", "in", "works", "as", "a", "the", "favorite", "color",
                                 "of", "is", "owns", "pet", "named", "and", "met", "near",
                                 "."};
  Lexicon lex;
  lex.names = unique_words(rng, taken, cfg.entities, 3);
  for (auto& v : lex.values) v = unique_words(rng, taken, cfg.values_per_attribute, 2);
  lex.filler = unique_words(rng, taken, cfg.filler_words, 2);
  lex.facts.resize(lex.names.size());
  for (auto& f : lex.facts) {
    for (std::size_t a = 0; a < f.size(); ++a) {
      f[a] = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.values_per_attribute)));
    }
  }
  return lex;
}

std::string fact_sentence(const Lexicon& lex, std::size_t e, int attribute) {
  const std::string& name = lex.names[e];
  const std::string& v = lex.values[attribute][lex.facts[e][attribute]];
  switch (attribute) {
    case 0: return name + " lives in " + v + " .";
    case 1: return name + " works as a " + v + " .";
    case 2: return "the favorite color of " + name + " is " + v + " .";
    default: return name + " owns a pet " + v + " .";
  }
}

std::string filler_sentence(const Lexicon& lex, Rng& rng) {
  const auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[rng.below(v.size())];
  };
  return pick(lex.names) + " met " + pick(lex.names) + " near the " + pick(lex.filler) + " " +
         pick(lex.filler) + " .";
}

}  // namespace

std::vector<std::string> synth_corpus(const SynthCorpusConfig& cfg) {
  const Lexicon lex = make_lexicon(cfg);
  Rng rng(cfg.seed ^ 0xC0FFEEULL);
  std::vector<std::string> lines;
  std::size_t bytes = 0;
  while (bytes < cfg.target_bytes) {
    const std::size_t e = rng.below(lex.names.size());
    std::array<int, 4> order = {0, 1, 2, 3};
    for (int i = 3; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    const int facts = 1 + static_cast<int>(rng.below(3));
    std::string line;
    for (int i = 0; i < facts; ++i) {
      if (!line.empty()) line += ' ';
      line += fact_sentence(lex, e, order[i]);
    }
    if (rng.bernoulli(0.5)) line += " " + filler_sentence(lex, rng);
    bytes += line.size() + 1;
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<LabeledText> synth_labeled(const SynthCorpusConfig& cfg, std::size_t examples,
                                       std::uint64_t seed) {
  const Lexicon lex = make_lexicon(cfg);
  Rng rng(seed);
  const std::size_t half = lex.values[0].size() / 2;
  std::vector<LabeledText> out;
  out.reserve(examples);
  for (std::size_t i = 0; i < examples; ++i) {
    const int label = static_cast<int>(i % 2);
    const std::size_t city = label == 1 ? rng.below(half) : half + rng.below(lex.values[0].size() - half);
    const std::string& name = lex.names[rng.below(lex.names.size())];
    std::string text = name + " lives in " + lex.values[0][city] + " .";
    if (rng.bernoulli(0.5)) text += " " + filler_sentence(lex, rng);
    out.push_back({label, std::move(text)});
  }
  return out;
}

}  // namespace pkmlab
