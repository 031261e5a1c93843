#include "pkmlab/mlm.hpp"

#include <cmath>
#include <stdexcept>

namespace pkmlab {

MaskedBatch mlm_mask(const TokenBatch& tokens, const MaskingRecipe& recipe, int vocab_size,
                     Rng& rng) {
  if (recipe.mask_prob < 0.0 || recipe.mask_prob > 1.0) {
    throw std::invalid_argument("mlm_mask: mask_prob must be in [0,1]");
  }
  if (recipe.to_mask < 0.0 || recipe.to_random < 0.0 || recipe.to_mask + recipe.to_random > 1.0) {
    throw std::invalid_argument("mlm_mask: replacement probabilities must sum to <= 1");
  }
  if (vocab_size <= kMaskId) throw std::invalid_argument("mlm_mask: vocabulary has no [MASK] id");
  MaskedBatch out;
  out.input = tokens;
  const int random_span = vocab_size - kNumReserved;
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
    const std::int32_t id = tokens.ids[i];
    if (id == kPadId || id == kClsId) continue;
    if (!rng.bernoulli(recipe.mask_prob)) continue;
    out.positions.push_back(i);
    out.targets.push_back(id);
    const double u = rng.uniform();
    if (u < recipe.to_mask) {
      out.input.ids[i] = kMaskId;
    } else if (u < recipe.to_mask + recipe.to_random && random_span > 0) {
      out.input.ids[i] = kNumReserved + static_cast<std::int32_t>(rng.below(random_span));
    }
  }
  return out;
}

template <typename T>
MlmResult<T> mlm_loss(Encoder<T>& model, const MaskedBatch& batch, bool train, Rng* dropout_rng,
                      bool backward) {
  if (batch.positions.empty()) throw std::invalid_argument("mlm_loss: batch has no masked positions");
  MlmResult<T> out;
  out.output = model.forward(batch.input, train, dropout_rng);
  const Tensor<T> logits = model.mlm_logits(out.output.hidden, batch.positions);
  const auto ce = softmax_cross_entropy(logits, batch.targets);
  out.loss = ce.loss;
  out.count = ce.count;
  out.perplexity = std::exp(ce.loss);
  if (backward) model.backward(model.mlm_backward(ce.dlogits));
  return out;
}

template MlmResult<float> mlm_loss(Encoder<float>&, const MaskedBatch&, bool, Rng*, bool);
template MlmResult<double> mlm_loss(Encoder<double>&, const MaskedBatch&, bool, Rng*, bool);

}  // namespace pkmlab
