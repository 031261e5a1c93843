#pragma once

#include <cstdint>
#include <vector>

#include "pkmlab/encoder.hpp"
#include "pkmlab/rng.hpp"

namespace pkmlab {

// Each eligible position is selected with `mask_prob`; a selected position is
// replaced by [MASK] with probability `to_mask`, by a random non-reserved token
// with probability `to_random`, and left unchanged otherwise.
struct MaskingRecipe {
  double mask_prob = 0.15;
  double to_mask = 0.8;
  double to_random = 0.1;
};

struct MaskedBatch {
  TokenBatch input;
  std::vector<std::size_t> positions;  // flat b*T + t, ascending
  std::vector<std::int32_t> targets;   // original ids at `positions`
};

// [PAD] and [CLS] positions are never selected.
MaskedBatch mlm_mask(const TokenBatch& tokens, const MaskingRecipe& recipe, int vocab_size, Rng& rng);

template <typename T>
struct MlmResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t count = 0;
  EncoderOutput<T> output;
};

// Cross-entropy over the masked positions. With `backward` set, gradients are
// accumulated into the model (the caller zeroes them).
template <typename T>
MlmResult<T> mlm_loss(Encoder<T>& model, const MaskedBatch& batch, bool train, Rng* dropout_rng,
                      bool backward);

}  // namespace pkmlab
