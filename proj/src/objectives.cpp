#include "fvlm/objectives.hpp"

#include <cmath>
#include <string>

#include "fvlm/errors.hpp"

namespace fvlm {

std::vector<double> make_soft_labels(std::size_t n, double smoothing) {
    if (n == 0) throw ContractError("make_soft_labels: empty batch");
    if (smoothing < 0.0 || smoothing >= 1.0)
        throw ContractError("make_soft_labels: smoothing must be in [0,1)");
    if (n == 1 && smoothing != 0.0)
        throw ContractError("make_soft_labels: nowhere to smooth with one sample");
    std::vector<double> labels(n * n, n > 1 ? smoothing / double(n - 1) : 0.0);
    for (std::size_t i = 0; i < n; ++i) labels[i * n + i] = 1.0 - smoothing;
    return labels;
}

namespace {

void require_unit_rows(const Tensor& x, const char* which) {
    const std::size_t n = x.rows(), d = x.cols();
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = x.value()[i * d + j];
            s += v * v;
        }
        if (std::fabs(std::sqrt(s) - 1.0) > 1e-6)
            throw ContractError(std::string(which) + " row " + std::to_string(i) +
                                " is not unit length");
    }
}

}  // namespace

Tensor clip_loss(const Tensor& image_embeds, const Tensor& text_embeds,
                 const Tensor& logit_scale, const std::vector<double>& labels) {
    if (image_embeds.shape() != text_embeds.shape())
        throw DimensionError("clip_loss: embedding shapes differ");
    if (image_embeds.shape().size() != 2)
        throw DimensionError("clip_loss: embeddings must be 2-D");
    if (logit_scale.size() != 1)
        throw DimensionError("clip_loss: logit_scale must be a single value");
    const std::size_t n = image_embeds.rows();
    if (n == 0) throw ContractError("clip_loss: empty batch");
    if (labels.size() != n * n)
        throw DimensionError("clip_loss: labels must be n x n");
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double l = labels[i * n + j];
            if (l < 0.0) throw ContractError("clip_loss: negative label");
            s += l;
        }
        if (std::fabs(s - 1.0) > 1e-9)
            throw ContractError("clip_loss: label row " + std::to_string(i) +
                                " does not sum to 1");
    }
    require_unit_rows(image_embeds, "clip_loss: image embedding");
    require_unit_rows(text_embeds, "clip_loss: text embedding");

    Tape& tape = *image_embeds.tape();
    Tensor temp = exp_elem(logit_scale);
    Tensor sims = scale_by(matmul(image_embeds, transpose(text_embeds)), temp);

    std::vector<double> labels_t(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) labels_t[j * n + i] = labels[i * n + j];
    Tensor l_i2t = tape.constant({n, n}, labels);
    Tensor l_t2i = tape.constant({n, n}, std::move(labels_t));

    Tensor i2t = sum_all(mul(l_i2t, log_softmax_rows(sims)));
    Tensor t2i = sum_all(mul(l_t2i, log_softmax_rows(transpose(sims))));
    return scale(add(i2t, t2i), -0.5 / double(n));
}

Tensor clip_loss(const Tensor& image_embeds, const Tensor& text_embeds,
                 const Tensor& logit_scale) {
    return clip_loss(image_embeds, text_embeds, logit_scale,
                     make_soft_labels(image_embeds.rows()));
}

Tensor cls_loss(const Tensor& logits, const std::vector<double>& targets) {
    if (logits.shape().size() != 2)
        throw DimensionError("cls_loss: logits must be 2-D");
    if (targets.size() != logits.size())
        throw DimensionError("cls_loss: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(logits.size()) +
                             " logits");
    for (double t : targets)
        if (t != 0.0 && t != 1.0)
            throw ContractError("cls_loss: targets must be exactly 0 or 1");
    Tensor t = logits.tape()->constant(logits.shape(), targets);
    return multilabel_bce_with_logits(logits, t);
}

Tensor llm_loss(const std::vector<Tensor>& sample_nlls) {
    if (sample_nlls.empty()) throw ContractError("llm_loss: no samples");
    for (const Tensor& t : sample_nlls)
        if (!t.defined() || t.size() != 1)
            throw DimensionError("llm_loss: each sample loss must be scalar");
    Tensor total = sample_nlls[0];
    for (std::size_t i = 1; i < sample_nlls.size(); ++i)
        total = add(total, sample_nlls[i]);
    return scale(total, 1.0 / double(sample_nlls.size()));
}

Tensor combined_loss(const Tensor& clip, const Tensor& cls, const Tensor& llm,
                     const LossWeights& weights) {
    if (weights.clip < 0.0 || weights.cls < 0.0 || weights.llm < 0.0)
        throw ContractError("combined_loss: negative weight");
    if (weights.clip == 0.0 && weights.cls == 0.0 && weights.llm == 0.0)
        throw ContractError("combined_loss: all weights are zero");
    Tensor total;
    auto accumulate = [&total](const Tensor& term, double w, const char* name) {
        if (w == 0.0) return;
        if (!term.defined())
            throw ContractError(std::string("combined_loss: ") + name +
                                " term required by a nonzero weight is missing");
        if (term.size() != 1)
            throw DimensionError(std::string("combined_loss: ") + name +
                                 " term must be scalar");
        Tensor scaled = scale(term, w);
        total = total.defined() ? add(total, scaled) : scaled;
    };
    accumulate(clip, weights.clip, "clip");
    accumulate(cls, weights.cls, "cls");
    accumulate(llm, weights.llm, "llm");
    return total;
}

}  // namespace fvlm
