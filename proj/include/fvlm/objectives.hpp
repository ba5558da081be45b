#pragma once

#include <cstddef>
#include <vector>

#include "fvlm/tensor.hpp"

namespace fvlm {

/// Row-stochastic [n x n] contrastive target matrix: identity with
/// `smoothing` mass spread evenly over the off-diagonal of each row.
std::vector<double> make_soft_labels(std::size_t n, double smoothing = 0.0);

/// Symmetric InfoNCE over cosine similarities. Both embedding matrices must
/// be [n x d] with unit L2 rows; similarities are scaled by exp(logit_scale).
/// `labels` is row-stochastic [n x n]; image->text uses it as-is, text->image
/// uses its transpose. Returns the scalar mean of the two directions.
Tensor clip_loss(const Tensor& image_embeds, const Tensor& text_embeds,
                 const Tensor& logit_scale, const std::vector<double>& labels);

/// One-hot diagonal labels.
Tensor clip_loss(const Tensor& image_embeds, const Tensor& text_embeds,
                 const Tensor& logit_scale);

/// Multi-label sign loss: per-category BCE averaged over the batch, summed
/// over the six categories. Targets must be exactly 0 or 1.
Tensor cls_loss(const Tensor& logits, const std::vector<double>& targets);

/// Mean over samples of their summed target-token negative log-likelihoods.
Tensor llm_loss(const std::vector<Tensor>& sample_nlls);

struct LossWeights {
    double clip = 1.0;
    double cls = 1.0;
    double llm = 1.0;
};

/// weights.clip * clip + weights.cls * cls + weights.llm * llm. Weights must
/// be non-negative and not all zero; a term whose weight is zero may be left
/// default-constructed and is skipped entirely.
Tensor combined_loss(const Tensor& clip, const Tensor& cls, const Tensor& llm,
                     const LossWeights& weights);

}  // namespace fvlm
