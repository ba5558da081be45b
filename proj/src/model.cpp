#include "fvlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fvlm/errors.hpp"

namespace fvlm {

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0)
            throw ContractError(std::string("ModelConfig: ") + name +
                                " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(embed_dim, "embed_dim");
    positive(encoder_layers, "encoder_layers");
    positive(decoder_layers, "decoder_layers");
    positive(heads, "heads");
    positive(ffn_hidden, "ffn_hidden");
    positive(max_tokens, "max_tokens");
    if (vocab_size < 2) throw ContractError("ModelConfig: vocab_size must be >= 2");
    if (image_size % patch_size != 0)
        throw ContractError("ModelConfig: image_size " + std::to_string(image_size) +
                            " not divisible by patch_size " +
                            std::to_string(patch_size));
    if (embed_dim % heads != 0)
        throw ContractError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                            " not divisible by heads " + std::to_string(heads));
    if (sign_count != kSignCount)
        throw ContractError("ModelConfig: sign_count must be " +
                            std::to_string(kSignCount) +
                            " to match the bundled sign categories");
    if (sign_threshold < 0.0 || sign_threshold > 1.0)
        throw ContractError("ModelConfig: sign_threshold outside [0,1]");
}

std::size_t ModelConfig::num_patches() const {
    const std::size_t side = image_size / patch_size;
    return side * side;
}

namespace {

// Deterministic Gaussian stream; std::normal_distribution is not pinned
// across standard library implementations.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : rng_(seed) {}

    double next(double stddev) {
        if (have_) {
            have_ = false;
            return cached_ * stddev;
        }
        const double u1 =
            (static_cast<double>(rng_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
        const double u2 =
            (static_cast<double>(rng_() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.141592653589793238462643383279502884 * u2;
        cached_ = r * std::sin(a);
        have_ = true;
        return r * std::cos(a) * stddev;
    }

private:
    std::mt19937_64 rng_;
    double cached_ = 0.0;
    bool have_ = false;
};

std::vector<double> gaussian_fill(Gaussian& g, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (double& x : v) x = g.next(stddev);
    return v;
}

}  // namespace

void ModelParams::add(std::string name, Shape shape, std::vector<double> value) {
    index_.emplace(name, params_.size());
    params_.push_back({std::move(name), std::move(shape), std::move(value)});
}

ModelParams::ModelParams(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Gaussian g(seed ^ 0x5bf03635d3c7b9ull);
    const std::size_t d = cfg.embed_dim, h = cfg.ffn_hidden, v = cfg.vocab_size;
    const double w_std = 0.02, pos_std = 0.01;

    auto block = [&](const std::string& pfx) {
        add(pfx + ".ln1.g", {d}, std::vector<double>(d, 1.0));
        add(pfx + ".ln1.b", {d}, std::vector<double>(d, 0.0));
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            add(pfx + w, {d, d}, gaussian_fill(g, d * d, w_std));
        add(pfx + ".ln2.g", {d}, std::vector<double>(d, 1.0));
        add(pfx + ".ln2.b", {d}, std::vector<double>(d, 0.0));
        add(pfx + ".ffn.wg", {d, h}, gaussian_fill(g, d * h, w_std));
        add(pfx + ".ffn.wu", {d, h}, gaussian_fill(g, d * h, w_std));
        add(pfx + ".ffn.wd", {h, d}, gaussian_fill(g, h * d, w_std));
    };

    const std::size_t pd = cfg.patch_dim(), np = cfg.num_patches();
    add("enc.patch_proj.w", {pd, d}, gaussian_fill(g, pd * d, w_std));
    add("enc.patch_proj.b", {d}, std::vector<double>(d, 0.0));
    add("enc.pos", {np, d}, gaussian_fill(g, np * d, pos_std));
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
        block("enc." + std::to_string(i));
    add("enc.ln.g", {d}, std::vector<double>(d, 1.0));
    add("enc.ln.b", {d}, std::vector<double>(d, 0.0));

    add("txt.embed", {v, d}, gaussian_fill(g, v * d, w_std));
    add("txt.pos", {cfg.max_tokens, d}, gaussian_fill(g, cfg.max_tokens * d, pos_std));
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
        block("txt." + std::to_string(i));
    add("txt.ln.g", {d}, std::vector<double>(d, 1.0));
    add("txt.ln.b", {d}, std::vector<double>(d, 0.0));

    add("adapter.w", {d, kSignCount}, gaussian_fill(g, d * kSignCount, w_std));
    add("adapter.b", {kSignCount}, std::vector<double>(kSignCount, 0.0));
    add("proj.w", {d, d}, gaussian_fill(g, d * d, w_std));
    add("sign.cls", {kSignCount, d}, gaussian_fill(g, kSignCount * d, w_std));

    add("dec.embed", {v, d}, gaussian_fill(g, v * d, w_std));
    add("dec.pos", {cfg.max_tokens, d}, gaussian_fill(g, cfg.max_tokens * d, pos_std));
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
        block("dec." + std::to_string(i));
    add("dec.ln.g", {d}, std::vector<double>(d, 1.0));
    add("dec.ln.b", {d}, std::vector<double>(d, 0.0));
    add("dec.head", {d, v}, gaussian_fill(g, d * v, w_std));

    add("clip.logit_scale", {1}, {std::log(1.0 / 0.07)});
}

ModelParams make_params_shell(const ModelConfig& cfg) {
    ModelParams p(cfg, 0);
    for (Param& param : p.params_)
        if (param.name != "clip.logit_scale" &&
            param.name.find(".ln") == std::string::npos)
            std::fill(param.value.begin(), param.value.end(), 0.0);
    return p;
}

Param& ModelParams::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
        throw ContractError("no parameter named '" + name + "'");
    return params_[it->second];
}

const Param& ModelParams::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        throw ContractError("no parameter named '" + name + "'");
    return params_[it->second];
}

std::size_t ModelParams::total_elements() const {
    std::size_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
}

void ModelParams::quantize_to_f32() {
    for (Param& p : params_)
        for (double& v : p.value) v = static_cast<double>(static_cast<float>(v));
}

const Tensor& Binding::at(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end())
        throw ContractError("binding has no parameter '" + name + "'");
    return it->second;
}

Binding bind_params(Tape& tape, const ModelParams& params, bool with_grad) {
    Binding b;
    b.cfg = &params.config();
    for (const Param& p : params.params())
        b.leaves.emplace(p.name, tape.leaf(p.shape, p.value, with_grad));
    return b;
}

std::map<std::string, std::vector<double>> collect_grads(const Binding& binding) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, tensor] : binding.leaves) out.emplace(name, tensor.grad());
    return out;
}

namespace {

Tensor mha(Tape& tape, const Binding& b, const std::string& pfx, const Tensor& x,
           bool causal) {
    const std::size_t d = b.cfg->embed_dim;
    const std::size_t heads = b.cfg->heads;
    const std::size_t dh = d / heads;
    Tensor q = matmul(x, b.at(pfx + ".attn.wq"));
    Tensor k = matmul(x, b.at(pfx + ".attn.wk"));
    Tensor v = matmul(x, b.at(pfx + ".attn.wv"));
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        outs.push_back(scaled_dot_attention(qh, kh, vh, causal));
    }
    (void)tape;
    return matmul(concat_cols(outs), b.at(pfx + ".attn.wo"));
}

Tensor transformer_block(Tape& tape, const Binding& b, const std::string& pfx,
                         Tensor x, bool causal) {
    Tensor n1 = layer_norm_rows(x, b.at(pfx + ".ln1.g"), b.at(pfx + ".ln1.b"));
    x = add(x, mha(tape, b, pfx, n1, causal));
    Tensor n2 = layer_norm_rows(x, b.at(pfx + ".ln2.g"), b.at(pfx + ".ln2.b"));
    return add(x, swiglu_ffn(n2, b.at(pfx + ".ffn.wg"), b.at(pfx + ".ffn.wu"),
                             b.at(pfx + ".ffn.wd")));
}

std::vector<double> patchify(const ModelConfig& cfg, const Image& image) {
    const std::size_t side = cfg.image_size / cfg.patch_size;
    const std::size_t ps = cfg.patch_size;
    std::vector<double> out(cfg.num_patches() * cfg.patch_dim());
    std::size_t w = 0;
    for (std::size_t py = 0; py < side; ++py)
        for (std::size_t px = 0; px < side; ++px)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x) {
                    const std::size_t iy = py * ps + y, ix = px * ps + x;
                    const double* p = &image.pixels[(iy * cfg.image_size + ix) * 3];
                    out[w++] = p[0];
                    out[w++] = p[1];
                    out[w++] = p[2];
                }
    return out;
}

}  // namespace

VisualEmbedding encode_image(Tape& tape, const Binding& b, const Image& image) {
    const ModelConfig& cfg = *b.cfg;
    if (!image.valid() || image.width != cfg.image_size ||
        image.height != cfg.image_size)
        throw DimensionError("encode_image: expected " +
                             std::to_string(cfg.image_size) + "x" +
                             std::to_string(cfg.image_size) + " RGB image, got " +
                             std::to_string(image.width) + "x" +
                             std::to_string(image.height));
    Tensor patches =
        tape.constant({cfg.num_patches(), cfg.patch_dim()}, patchify(cfg, image));
    Tensor x = add_rowvec(matmul(patches, b.at("enc.patch_proj.w")),
                          b.at("enc.patch_proj.b"));
    x = add(x, b.at("enc.pos"));
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
        x = transformer_block(tape, b, "enc." + std::to_string(i), x, false);
    x = layer_norm_rows(x, b.at("enc.ln.g"), b.at("enc.ln.b"));
    VisualEmbedding v;
    v.patch_tokens = x;
    v.pooled = l2_normalize_rows(mean_rows(x));
    return v;
}

Tensor encode_text_contrastive(Tape& tape, const Binding& b,
                               const std::vector<int>& tokens) {
    const ModelConfig& cfg = *b.cfg;
    if (tokens.empty())
        throw ContractError("encode_text_contrastive: empty token sequence");
    if (tokens.size() > cfg.max_tokens)
        throw ContractError("encode_text_contrastive: " +
                            std::to_string(tokens.size()) + " tokens exceed max " +
                            std::to_string(cfg.max_tokens));
    std::vector<std::size_t> ids;
    ids.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
            throw ContractError("encode_text_contrastive: token " +
                                std::to_string(t) + " outside vocab " +
                                std::to_string(cfg.vocab_size));
        ids.push_back(static_cast<std::size_t>(t));
    }
    Tensor x = add(gather_rows(b.at("txt.embed"), ids),
                   slice_rows(b.at("txt.pos"), 0, ids.size()));
    for (std::size_t i = 0; i < cfg.encoder_layers; ++i)
        x = transformer_block(tape, b, "txt." + std::to_string(i), x, false);
    x = layer_norm_rows(x, b.at("txt.ln.g"), b.at("txt.ln.b"));
    return l2_normalize_rows(mean_rows(x));
}

Tensor predict_sign_logits(Tape& tape, const Binding& b, const VisualEmbedding& v) {
    (void)tape;
    return add_rowvec(matmul(v.pooled, b.at("adapter.w")), b.at("adapter.b"));
}

std::vector<double> sign_probabilities(const Tensor& logits) {
    std::vector<double> probs;
    probs.reserve(logits.size());
    for (double z : logits.value()) probs.push_back(1.0 / (1.0 + std::exp(-z)));
    return probs;
}

AssembledInput assemble_llm_input(Tape& tape, const Binding& b,
                                  const VisualEmbedding& v,
                                  const std::vector<double>& sign_probs,
                                  const std::vector<int>& dialogue_tokens,
                                  double threshold) {
    const ModelConfig& cfg = *b.cfg;
    if (sign_probs.size() != kSignCount)
        throw DimensionError("assemble_llm_input: " +
                             std::to_string(sign_probs.size()) +
                             " sign probabilities, expected 6");
    AssembledInput out;
    Tensor prefix = cfg.pooled_projector_input
                        ? matmul(v.pooled, b.at("proj.w"))
                        : matmul(v.patch_tokens, b.at("proj.w"));
    out.prefix_len = prefix.rows();

    for (std::size_t k = 0; k < kSignCount; ++k)
        if (sign_probs[k] >= threshold) out.sign_slots.push_back(k);
    if (out.sign_slots.empty())
        out.sign_slots.push_back(static_cast<std::size_t>(Sign::Other));
    Tensor signs = gather_rows(b.at("sign.cls"), out.sign_slots);

    const std::size_t fixed = out.prefix_len + out.sign_slots.size();
    if (fixed >= cfg.max_tokens)
        throw ContractError("assemble_llm_input: prefix and sign slots (" +
                            std::to_string(fixed) + ") already reach max_tokens " +
                            std::to_string(cfg.max_tokens));
    out.tokens = dialogue_tokens;
    const std::size_t room = cfg.max_tokens - fixed;
    if (out.tokens.size() > room) {
        out.dropped = out.tokens.size() - room;
        out.tokens.erase(out.tokens.begin(),
                         out.tokens.begin() + static_cast<long>(out.dropped));
        out.truncated = true;
    }

    std::vector<Tensor> parts = {prefix, signs};
    if (!out.tokens.empty()) {
        std::vector<std::size_t> ids;
        ids.reserve(out.tokens.size());
        for (int t : out.tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size)
                throw ContractError("assemble_llm_input: token " +
                                    std::to_string(t) + " outside vocab " +
                                    std::to_string(cfg.vocab_size));
            ids.push_back(static_cast<std::size_t>(t));
        }
        parts.push_back(gather_rows(b.at("dec.embed"), ids));
    }
    out.sequence = concat_rows(parts);
    (void)tape;
    return out;
}

Tensor lm_forward(Tape& tape, const Binding& b, const Tensor& sequence) {
    const ModelConfig& cfg = *b.cfg;
    const std::size_t t = sequence.rows();
    if (t > cfg.max_tokens)
        throw ContractError("lm_forward: sequence length " + std::to_string(t) +
                            " exceeds max_tokens " + std::to_string(cfg.max_tokens));
    Tensor x = add(sequence, slice_rows(b.at("dec.pos"), 0, t));
    for (std::size_t i = 0; i < cfg.decoder_layers; ++i)
        x = transformer_block(tape, b, "dec." + std::to_string(i), x, true);
    x = layer_norm_rows(x, b.at("dec.ln.g"), b.at("dec.ln.b"));
    return matmul(x, b.at("dec.head"));
}

Tensor sequence_nll(Tape& tape, const Binding& b, const AssembledInput& input,
                    const std::vector<std::uint8_t>& is_target) {
    if (is_target.size() != input.tokens.size())
        throw DimensionError("sequence_nll: mask length " +
                             std::to_string(is_target.size()) + " vs " +
                             std::to_string(input.tokens.size()) + " tokens");
    Tensor logits = lm_forward(tape, b, input.sequence);
    const std::size_t t = logits.rows();
    const std::size_t base = input.prefix_len + input.sign_slots.size();
    std::vector<std::size_t> targets(t, 0);
    std::vector<std::uint8_t> mask(t, 0);
    // Row base+j carries token j and predicts token j+1.
    for (std::size_t j = 0; j + 1 < input.tokens.size(); ++j) {
        if (!is_target[j + 1]) continue;
        targets[base + j] = static_cast<std::size_t>(input.tokens[j + 1]);
        mask[base + j] = 1;
    }
    return masked_token_nll(logits, std::move(targets), std::move(mask));
}

std::vector<int> generate(const ModelParams& params, const Image& image,
                          const std::vector<int>& prompt_tokens,
                          std::size_t max_new) {
    const ModelConfig& cfg = params.config();
    if (max_new == 0) throw ContractError("generate: max_new must be >= 1");
    if (prompt_tokens.empty()) throw ContractError("generate: empty prompt");

    // Sign probabilities are fixed once per image, outside the decode loop.
    std::vector<double> probs;
    {
        Tape tape;
        Binding b = bind_params(tape, params, false);
        VisualEmbedding v = encode_image(tape, b, image);
        probs = sign_probabilities(predict_sign_logits(tape, b, v));
    }

    std::vector<int> tokens = prompt_tokens;
    const std::size_t prefix_guess =
        (cfg.pooled_projector_input ? 1 : cfg.num_patches()) + 1;
    if (prompt_tokens.size() + prefix_guess >= cfg.max_tokens)
        throw ContractError("generate: prompt already fills max_tokens");

    for (std::size_t step = 0; step < max_new; ++step) {
        Tape tape;
        Binding b = bind_params(tape, params, false);
        VisualEmbedding v = encode_image(tape, b, image);
        AssembledInput in =
            assemble_llm_input(tape, b, v, probs, tokens, cfg.sign_threshold);
        if (in.truncated)
            throw ContractError("generate: sequence reached max_tokens");
        Tensor logits = lm_forward(tape, b, in.sequence);
        const std::size_t last = logits.rows() - 1;
        const double* row = &logits.value()[last * cfg.vocab_size];
        std::size_t best = 0;
        for (std::size_t j = 1; j < cfg.vocab_size; ++j)
            if (row[j] > row[best]) best = j;
        tokens.push_back(static_cast<int>(best));
        if (static_cast<int>(best) == kEos) break;
        const std::size_t fixed = in.prefix_len + in.sign_slots.size();
        if (fixed + tokens.size() >= cfg.max_tokens) break;
    }
    return tokens;
}

}  // namespace fvlm
