#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pkmlab/vocab.hpp"

namespace pkmlab {

// Synthetic fact corpus: a fixed population of named entities, each with one
// value per attribute (city, job, color, pet), written out as short
// multi-sentence documents. Predicting a masked attribute value requires
// recalling the entity's fact, which rewards memory capacity.
struct SynthCorpusConfig {
  std::uint64_t seed = 1;
  std::size_t target_bytes = 1 << 20;
  int entities = 1500;
  int values_per_attribute = 48;
  int filler_words = 160;
};

std::vector<std::string> synth_corpus(const SynthCorpusConfig& cfg);

// Two-class task over the same lexicon: the label is determined by which half
// of the city list the sentence mentions.
std::vector<LabeledText> synth_labeled(const SynthCorpusConfig& cfg, std::size_t examples,
                                       std::uint64_t seed);

}  // namespace pkmlab
