#include "fvlm/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "fvlm/checkpoint.hpp"
#include "fvlm/errors.hpp"

namespace fvlm {

void TrainConfig::validate() const {
    model.validate();
    if (base_lr <= 0.0) throw ContractError("config: base_lr must be positive");
    if (batch_size == 0) throw ContractError("config: batch_size must be >= 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ContractError("config: betas must lie in [0, 1)");
    if (weight_decay < 0.0)
        throw ContractError("config: weight_decay must be non-negative");
    if (pretrain_epochs == 0 || finetune_epochs == 0)
        throw ContractError("config: epoch counts must be >= 1");
    if (lr_floor != 0.0)
        throw ContractError("config: lr_floor is fixed at 0");
    if (loss_weights.clip < 0.0 || loss_weights.cls < 0.0 || loss_weights.llm < 0.0)
        throw ContractError("config: loss weights must be non-negative");
    if (loss_weights.clip == 0.0 && loss_weights.cls == 0.0 &&
        loss_weights.llm == 0.0)
        throw ContractError("config: loss weights must not all be zero");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
        throw ContractError("config: label_smoothing must lie in [0, 1)");
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::size_t parse_count(const std::string& key, const std::string& value) {
    try {
        // stoull would wrap a leading '-' around instead of rejecting it
        if (value.empty() || !std::isdigit(static_cast<unsigned char>(value[0])))
            throw std::invalid_argument("not a digit");
        std::size_t used = 0;
        const unsigned long long v = std::stoull(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing text");
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw ContractError("config: key '" + key + "': invalid count '" + value +
                            "'");
    }
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing text");
        return v;
    } catch (const std::exception&) {
        throw ContractError("config: key '" + key + "': invalid real '" + value +
                            "'");
    }
}

bool parse_flag(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ContractError("config: key '" + key + "': invalid flag '" + value +
                        "' (use true/false/1/0)");
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ContractError("config: line " + std::to_string(line_no) +
                                " is not 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ContractError("config: line " + std::to_string(line_no) +
                                " is missing a key or value");

        if (key == "image_size") cfg.model.image_size = parse_count(key, value);
        else if (key == "patch_size") cfg.model.patch_size = parse_count(key, value);
        else if (key == "embed_dim") cfg.model.embed_dim = parse_count(key, value);
        else if (key == "encoder_layers")
            cfg.model.encoder_layers = parse_count(key, value);
        else if (key == "decoder_layers")
            cfg.model.decoder_layers = parse_count(key, value);
        else if (key == "heads") cfg.model.heads = parse_count(key, value);
        else if (key == "ffn_hidden") cfg.model.ffn_hidden = parse_count(key, value);
        else if (key == "max_tokens") cfg.model.max_tokens = parse_count(key, value);
        else if (key == "sign_threshold")
            cfg.model.sign_threshold = parse_real(key, value);
        else if (key == "pooled_projector_input")
            cfg.model.pooled_projector_input = parse_flag(key, value);
        else if (key == "base_lr") cfg.base_lr = parse_real(key, value);
        else if (key == "beta1") cfg.beta1 = parse_real(key, value);
        else if (key == "beta2") cfg.beta2 = parse_real(key, value);
        else if (key == "weight_decay") cfg.weight_decay = parse_real(key, value);
        else if (key == "batch_size") cfg.batch_size = parse_count(key, value);
        else if (key == "pretrain_epochs")
            cfg.pretrain_epochs = parse_count(key, value);
        else if (key == "finetune_epochs")
            cfg.finetune_epochs = parse_count(key, value);
        else if (key == "warmup_epochs") cfg.warmup_epochs = parse_count(key, value);
        else if (key == "lr_floor") cfg.lr_floor = parse_real(key, value);
        else if (key == "clip_weight") cfg.loss_weights.clip = parse_real(key, value);
        else if (key == "cls_weight") cfg.loss_weights.cls = parse_real(key, value);
        else if (key == "llm_weight") cfg.loss_weights.llm = parse_real(key, value);
        else if (key == "label_smoothing")
            cfg.label_smoothing = parse_real(key, value);
        else if (key == "seed")
            cfg.seed = static_cast<std::uint64_t>(parse_count(key, value));
        else
            throw ContractError("config: unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_train_config(buf.str());
}

double compute_absolute_lr(double base_lr, std::size_t batch_size) {
    if (batch_size == 0)
        throw ContractError("compute_absolute_lr: batch_size must be >= 1");
    return base_lr * double(batch_size) / 256.0;
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
             double peak) {
    if (total_steps == 0) throw ContractError("lr_at: total_steps must be >= 1");
    if (warmup_steps >= total_steps)
        throw ContractError("lr_at: warmup_steps must be below total_steps");
    if (step > total_steps)
        throw ContractError("lr_at: step " + std::to_string(step) +
                            " beyond total_steps " + std::to_string(total_steps));
    if (step == total_steps) return 0.0;
    if (step < warmup_steps) return peak * double(step) / double(warmup_steps);
    if (step == warmup_steps) return peak;
    const double u =
        double(step - warmup_steps) / double(total_steps - warmup_steps);
    return peak * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279502884 * u));
}

void adamw_step(std::vector<Param>& params,
                const std::map<std::string, std::vector<double>>& grads,
                OptimizerState& state, const AdamWConfig& opt) {
    if (opt.lr < 0.0) throw ContractError("adamw_step: lr must be non-negative");
    if (opt.beta1 < 0.0 || opt.beta1 >= 1.0 || opt.beta2 < 0.0 || opt.beta2 >= 1.0)
        throw ContractError("adamw_step: betas must lie in [0, 1)");
    if (opt.eps <= 0.0) throw ContractError("adamw_step: eps must be positive");

    state.step += 1;
    const double t = double(state.step);
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);

    for (Param& p : params) {
        const auto git = grads.find(p.name);
        if (git == grads.end())
            throw ContractError("adamw_step: no gradient for parameter '" +
                                p.name + "'");
        const std::vector<double>& g = git->second;
        if (g.size() != p.value.size())
            throw DimensionError("adamw_step: gradient for '" + p.name + "' has " +
                                 std::to_string(g.size()) + " values, parameter has " +
                                 std::to_string(p.value.size()));
        for (double gi : g)
            if (!std::isfinite(gi))
                throw NumericError("adamw_step: non-finite gradient for parameter '" +
                                   p.name + "'");

        std::vector<double>& m = state.m[p.name];
        std::vector<double>& v = state.v[p.name];
        if (m.empty()) m.assign(p.value.size(), 0.0);
        if (v.empty()) v.assign(p.value.size(), 0.0);
        if (m.size() != p.value.size() || v.size() != p.value.size())
            throw DimensionError("adamw_step: optimizer moments for '" + p.name +
                                 "' do not match the parameter");

        for (std::size_t i = 0; i < p.value.size(); ++i) {
            p.value[i] -= opt.lr * opt.weight_decay * p.value[i];
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            p.value[i] -= opt.lr * mh / (std::sqrt(vh) + opt.eps);
        }
    }
}

void write_metrics_csv(const std::vector<StepMetrics>& metrics,
                       const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ContractError("metrics: cannot open '" + path + "'");
    char buf[256];
    for (const StepMetrics& m : metrics) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      m.step, m.lr, m.clip, m.cls, m.llm, m.total);
        f << buf;
    }
    if (!f) throw ContractError("metrics: write to '" + path + "' failed");
}

std::vector<StepMetrics> read_metrics_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("metrics: cannot open '" + path + "'");
    std::vector<StepMetrics> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(row, field, ',')) fields.push_back(field);
        if (fields.size() != 6)
            throw CorruptionError("metrics: line " + std::to_string(line_no) +
                                  " has " + std::to_string(fields.size()) +
                                  " fields, expected 6");
        try {
            StepMetrics m;
            m.step = std::stoull(fields[0]);
            m.lr = std::stod(fields[1]);
            m.clip = std::stod(fields[2]);
            m.cls = std::stod(fields[3]);
            m.llm = std::stod(fields[4]);
            m.total = std::stod(fields[5]);
            out.push_back(m);
        } catch (const std::exception&) {
            throw CorruptionError("metrics: line " + std::to_string(line_no) +
                                  " is not numeric");
        }
    }
    return out;
}

namespace {

struct TrainSample {
    Image image;
    std::vector<int> text_tokens;
    std::vector<double> sign_targets;
    TokenStream dialogue;
};

TrainResult run_training(const std::vector<TrainSample>& samples,
                         ModelParams& model, const TrainConfig& cfg,
                         const LossWeights& weights, std::size_t epochs,
                         const std::string& out_dir, const std::string& phase,
                         std::size_t skipped) {
    if (samples.empty())
        throw ContractError(phase + ": no usable records in the corpus");
    if (cfg.warmup_epochs >= epochs)
        throw ContractError(phase + ": warmup_epochs (" +
                            std::to_string(cfg.warmup_epochs) +
                            ") must be below the epoch count (" +
                            std::to_string(epochs) + ")");

    const std::size_t n = samples.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = epochs * steps_per_epoch;
    const std::size_t warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    const double peak = compute_absolute_lr(cfg.base_lr, cfg.batch_size);

    if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

    std::mt19937_64 rng(cfg.seed);
    OptimizerState state;
    TrainResult result;
    result.skipped = skipped;
    std::size_t step = 0;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = n - 1; i > 0; --i) {
            const std::size_t j = rng() % (i + 1);
            std::swap(order[i], order[j]);
        }

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t batch = std::min(cfg.batch_size, n - start);
            const double lr = lr_at(step, total_steps, warmup_steps, peak);

            Tape tape;
            Binding b = bind_params(tape, model);
            std::vector<Tensor> pooled_rows, text_rows, sign_rows, nlls;
            std::vector<double> sign_targets;

            for (std::size_t k = 0; k < batch; ++k) {
                const TrainSample& s = samples[order[start + k]];
                VisualEmbedding vis = encode_image(tape, b, s.image);
                Tensor sign_logits = predict_sign_logits(tape, b, vis);

                if (weights.clip > 0.0) {
                    pooled_rows.push_back(vis.pooled);
                    text_rows.push_back(
                        encode_text_contrastive(tape, b, s.text_tokens));
                }
                if (weights.cls > 0.0) {
                    sign_rows.push_back(sign_logits);
                    sign_targets.insert(sign_targets.end(),
                                        s.sign_targets.begin(),
                                        s.sign_targets.end());
                }
                if (weights.llm > 0.0) {
                    const std::vector<double> probs =
                        sign_probabilities(sign_logits);
                    AssembledInput in = assemble_llm_input(
                        tape, b, vis, probs, s.dialogue.tokens,
                        cfg.model.sign_threshold);
                    std::vector<std::uint8_t> mask(
                        s.dialogue.is_target.begin() +
                            static_cast<long>(in.dropped),
                        s.dialogue.is_target.end());
                    nlls.push_back(sequence_nll(tape, b, in, mask));
                }
            }

            Tensor clip_term, cls_term, llm_term;
            if (weights.clip > 0.0) {
                const double smoothing = batch > 1 ? cfg.label_smoothing : 0.0;
                clip_term = clip_loss(concat_rows(pooled_rows),
                                      concat_rows(text_rows),
                                      b.at("clip.logit_scale"),
                                      make_soft_labels(batch, smoothing));
            }
            if (weights.cls > 0.0)
                cls_term = cls_loss(concat_rows(sign_rows), sign_targets);
            if (weights.llm > 0.0) llm_term = llm_loss(nlls);

            Tensor total = combined_loss(clip_term, cls_term, llm_term, weights);
            tape.backward(total);

            AdamWConfig opt;
            opt.lr = lr;
            opt.beta1 = cfg.beta1;
            opt.beta2 = cfg.beta2;
            opt.weight_decay = cfg.weight_decay;
            adamw_step(model.params(), collect_grads(b), state, opt);

            StepMetrics m;
            m.step = step;
            m.lr = lr;
            m.clip = clip_term.defined() ? clip_term.scalar() : 0.0;
            m.cls = cls_term.defined() ? cls_term.scalar() : 0.0;
            m.llm = llm_term.defined() ? llm_term.scalar() : 0.0;
            m.total = total.scalar();
            result.metrics.push_back(m);
            ++step;
        }

        if (!out_dir.empty()) {
            const std::string path = out_dir + "/" + phase + "_epoch" +
                                     std::to_string(epoch + 1) + ".ckpt";
            save_checkpoint(path, model, &state);
            result.checkpoints.push_back(path);
            if (result.checkpoints.size() > 2) {
                std::filesystem::remove(result.checkpoints.front());
                result.checkpoints.erase(result.checkpoints.begin());
            }
        }
    }

    if (!out_dir.empty())
        write_metrics_csv(result.metrics, out_dir + "/metrics.csv");
    return result;
}

}  // namespace

TrainResult run_pretrain(const std::vector<PretrainPair>& corpus,
                         ModelParams& model, const TrainConfig& cfg,
                         const std::string& out_dir,
                         const std::string& corpus_dir) {
    cfg.validate();
    if (corpus.empty()) throw ContractError("pretrain: empty corpus");

    std::vector<TrainSample> samples;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const PretrainPair& pair = corpus[i];
        if (pair.modality == Modality::TableChart) {
            std::cerr << "warning: skipping pair " << i << ": TableChart modality\n";
            ++skipped;
            continue;
        }
        TrainSample s;
        try {
            s.image = load_image(pair.image, corpus_dir);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping pair " << i << ": " << e.what() << "\n";
            ++skipped;
            continue;
        }
        if (s.image.width != cfg.model.image_size ||
            s.image.height != cfg.model.image_size) {
            std::cerr << "warning: skipping pair " << i << ": image is "
                      << s.image.width << "x" << s.image.height << ", model wants "
                      << cfg.model.image_size << "\n";
            ++skipped;
            continue;
        }
        const std::string answer =
            prepend_modality(clean_caption(pair.caption), pair.modality);
        const std::string& question =
            select_instruction(answer, cfg.seed ^ ((i + 1) * 0x9e3779b97f4a7c15ull));
        s.dialogue = encode_dialogue({{question, answer}});
        samples.push_back(std::move(s));
    }

    LossWeights llm_only;
    llm_only.clip = 0.0;
    llm_only.cls = 0.0;
    llm_only.llm = 1.0;
    return run_training(samples, model, cfg, llm_only, cfg.pretrain_epochs,
                        out_dir, "pretrain", skipped);
}

TrainResult run_finetune(const std::vector<FundusRecord>& corpus,
                         ModelParams& model, const TrainConfig& cfg,
                         const std::string& out_dir,
                         const std::string& corpus_dir) {
    cfg.validate();
    if (corpus.empty()) throw ContractError("finetune: empty corpus");

    std::vector<bool> bad(corpus.size(), false);
    for (const ValidationIssue& issue : validate_corpus(corpus)) {
        if (!bad[issue.record])
            std::cerr << "warning: skipping record " << issue.record << ": "
                      << issue.message << "\n";
        bad[issue.record] = true;
    }

    std::vector<TrainSample> samples;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (bad[i]) {
            ++skipped;
            continue;
        }
        const FundusRecord& rec = corpus[i];
        TrainSample s;
        try {
            s.image = load_image(rec.image, corpus_dir);
        } catch (const std::exception& e) {
            std::cerr << "warning: skipping record " << i << ": " << e.what()
                      << "\n";
            ++skipped;
            continue;
        }
        if (s.image.width != cfg.model.image_size ||
            s.image.height != cfg.model.image_size) {
            std::cerr << "warning: skipping record " << i << ": image is "
                      << s.image.width << "x" << s.image.height
                      << ", model wants " << cfg.model.image_size << "\n";
            ++skipped;
            continue;
        }
        s.text_tokens = encode_bytes(rec.description);
        if (s.text_tokens.size() > cfg.model.max_tokens)
            s.text_tokens.resize(cfg.model.max_tokens);
        for (int sign : rec.signs) s.sign_targets.push_back(double(sign));
        s.dialogue = encode_dialogue(rec.dialogue);
        samples.push_back(std::move(s));
    }

    return run_training(samples, model, cfg, cfg.loss_weights,
                        cfg.finetune_epochs, out_dir, "finetune", skipped);
}

}  // namespace fvlm
