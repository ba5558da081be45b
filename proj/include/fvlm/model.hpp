#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fvlm/assets.hpp"
#include "fvlm/image.hpp"
#include "fvlm/tensor.hpp"
#include "fvlm/tokenizer.hpp"

namespace fvlm {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 2;
    std::size_t heads = 4;
    std::size_t vocab_size = kVocabSize;
    std::size_t max_tokens = 512;
    std::size_t sign_count = kSignCount;
    std::size_t ffn_hidden = 128;
    double sign_threshold = 0.5;
    bool pooled_projector_input = false;  // feed pooled row instead of patch tokens

    void validate() const;
    std::size_t num_patches() const;
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }
};

struct Param {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

/// Owns every learnable array, in a fixed canonical order.
class ModelParams {
public:
    ModelParams() = default;
    /// Seeded Gaussian init (Box-Muller over mt19937_64, so it is stable
    /// across platforms); norm scales 1, biases 0, temperature ln(1/0.07).
    ModelParams(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t total_elements() const;

    /// Reduce every value to f32 precision (mirrors a checkpoint round trip).
    void quantize_to_f32();

private:
    friend ModelParams make_params_shell(const ModelConfig& cfg);
    void add(std::string name, Shape shape, std::vector<double> value);
    ModelConfig cfg_;
    std::vector<Param> params_;
    std::map<std::string, std::size_t> index_;
};

/// Same layout as ModelParams(cfg, seed) but zero-filled; loader scaffold.
ModelParams make_params_shell(const ModelConfig& cfg);

/// Tape-bound leaves for every parameter, by name.
struct Binding {
    const ModelConfig* cfg = nullptr;
    std::map<std::string, Tensor> leaves;
    const Tensor& at(const std::string& name) const;
};

Binding bind_params(Tape& tape, const ModelParams& params, bool with_grad = true);

/// Copy d(loss)/d(param) out of a bound tape, keyed like params.
std::map<std::string, std::vector<double>> collect_grads(const Binding& binding);

struct VisualEmbedding {
    Tensor patch_tokens;  // [num_patches x embed_dim]
    Tensor pooled;        // [1 x embed_dim], unit L2 row
};

VisualEmbedding encode_image(Tape& tape, const Binding& b, const Image& image);

/// Mean-pooled unit embedding of a token sequence for the contrastive branch.
Tensor encode_text_contrastive(Tape& tape, const Binding& b,
                               const std::vector<int>& tokens);

/// [1 x 6] adapter logits from the pooled visual embedding.
Tensor predict_sign_logits(Tape& tape, const Binding& b, const VisualEmbedding& v);

/// Detached sigmoid probabilities of sign logits.
std::vector<double> sign_probabilities(const Tensor& logits);

struct AssembledInput {
    Tensor sequence;           // [(prefix+signs+tokens) x embed_dim]
    std::size_t prefix_len = 0;
    std::vector<std::size_t> sign_slots;  // chosen sign ids, canonical order
    std::vector<int> tokens;   // dialogue tokens actually kept
    bool truncated = false;
    std::size_t dropped = 0;   // tokens dropped from the left on overflow
};

/// [projected patch tokens] ++ [CLS rows of signs with prob >= threshold,
/// or Other if none clears] ++ [embedded dialogue tokens]. Overflow truncates
/// dialogue tokens from the left and records it.
AssembledInput assemble_llm_input(Tape& tape, const Binding& b,
                                  const VisualEmbedding& v,
                                  const std::vector<double>& sign_probs,
                                  const std::vector<int>& dialogue_tokens,
                                  double threshold);

/// Positional embeddings, causal decoder blocks, final norm, output head.
Tensor lm_forward(Tape& tape, const Binding& b, const Tensor& sequence);

/// Scalar: sum over masked target positions of -log p(token); the mask rides
/// on the dialogue-token tail of the assembled sequence.
Tensor sequence_nll(Tape& tape, const Binding& b, const AssembledInput& input,
                    const std::vector<std::uint8_t>& is_target);

/// Greedy argmax decoding (ties -> lowest id); stops at EOS, max_new tokens,
/// or when the assembled sequence reaches max_tokens.
std::vector<int> generate(const ModelParams& params, const Image& image,
                          const std::vector<int>& prompt_tokens,
                          std::size_t max_new);

}  // namespace fvlm
