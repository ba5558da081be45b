// Release gate: ten end-to-end checks over the trained-from-scratch stack.
// Each criterion prints exactly one PASS/FAIL line; the exit status is the
// number of failures. Tolerances are pinned next to each check.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fvlm/forge.hpp"
#include "fvlm/model.hpp"
#include "fvlm/objectives.hpp"
#include "fvlm/stats.hpp"
#include "fvlm/tensor.hpp"
#include "fvlm/tokenizer.hpp"
#include "fvlm/train.hpp"

using namespace fvlm;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    return std::string((std::istreambuf_iterator<char>(f)),
                       std::istreambuf_iterator<char>());
}

std::vector<std::string> read_lines(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(line);
    return lines;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

// Two image classes with equal-length round-1 answers, so the streams stay
// position-aligned and only the image decides the branch.
std::vector<FundusRecord> two_class_records(std::size_t n, std::size_t image_size) {
    std::vector<FundusRecord> records;
    for (std::size_t i = 0; i < n; ++i) {
        const std::string disease = i % 2 ? "Glaucoma" : "Cataract";
        FundusRecord rec;
        rec.diseases = {disease};
        rec.abnormal = true;
        rec.description = build_description(rec.diseases, true);
        rec.signs = derive_signs(rec.diseases);
        rec.dialogue = {{"What condition is shown?", disease},
                        {"Which signs support it?", "Typical fundus changes."},
                        {"What should happen next?", "Refer to a specialist."}};
        rec.image.inline_image = synthetic_image(image_size, 300 + i);
        records.push_back(rec);
    }
    return records;
}

// ---- 1: analytic vs numeric gradients through the full tiny model ----------

bool grad_fidelity(std::string& detail) {
    const auto t0 = Clock::now();
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.embed_dim = 8;
    cfg.encoder_layers = 1;
    cfg.decoder_layers = 1;
    cfg.heads = 2;
    cfg.ffn_hidden = 16;
    cfg.vocab_size = 64;
    cfg.max_tokens = 64;
    ModelParams params(cfg, 17);

    const std::vector<Image> images = {synthetic_image(16, 5),
                                       synthetic_image(16, 6)};
    const std::vector<std::vector<int>> dialogue = {{5, 6, 7, 8, 9},
                                                    {10, 11, 12, 13}};
    const std::vector<std::vector<std::uint8_t>> masks = {{0, 1, 1, 1, 1},
                                                          {0, 1, 1, 1}};
    const std::vector<std::vector<int>> text = {{1, 2, 3}, {4, 5, 6}};
    const std::vector<double> sign_targets = {1, 0, 0, 0, 1, 0,
                                              0, 1, 0, 0, 0, 1};
    const LossWeights weights;  // 1, 1, 1

    std::vector<GradCheckParam> check;
    for (const Param& p : params.params())
        check.push_back({p.name, p.shape, p.value});

    auto build = [&](Tape& tape, const std::map<std::string, Tensor>& leaves) {
        Binding b;
        b.cfg = &cfg;
        b.leaves = leaves;
        std::vector<Tensor> pooled, texts, signs, nlls;
        for (std::size_t k = 0; k < images.size(); ++k) {
            VisualEmbedding v = encode_image(tape, b, images[k]);
            Tensor sign_logits = predict_sign_logits(tape, b, v);
            pooled.push_back(v.pooled);
            texts.push_back(encode_text_contrastive(tape, b, text[k]));
            signs.push_back(sign_logits);
            AssembledInput in =
                assemble_llm_input(tape, b, v, sign_probabilities(sign_logits),
                                   dialogue[k], cfg.sign_threshold);
            std::vector<std::uint8_t> mask(
                masks[k].begin() + static_cast<long>(in.dropped),
                masks[k].end());
            nlls.push_back(sequence_nll(tape, b, in, mask));
        }
        Tensor clip = clip_loss(concat_rows(pooled), concat_rows(texts),
                                b.at("clip.logit_scale"),
                                make_soft_labels(images.size()));
        Tensor cls = cls_loss(concat_rows(signs), sign_targets);
        Tensor llm = llm_loss(nlls);
        return combined_loss(clip, cls, llm, weights);
    };

    GradCheckResult r = grad_check(build, check, 1e-5);
    const double secs = seconds_since(t0);
    detail = "max rel err " + num(r.max_rel_error) + " (" + r.worst_param +
             "), " + std::to_string(r.checked) + " elements, " + num(secs) + " s";
    return r.max_rel_error < 1e-4 && secs < 60.0 &&
           r.checked == params.total_elements();
}

// ---- 2: closed-form loss values ---------------------------------------------

bool closed_form_losses(std::string& detail) {
    Tape tape;
    const std::vector<double> basis = {1, 0, 0, 1};
    Tensor img = tape.leaf({2, 2}, basis);
    Tensor txt = tape.leaf({2, 2}, basis);
    Tensor unit_scale = tape.leaf({1}, {0.0});
    const double clip = clip_loss(img, txt, unit_scale).scalar();

    Tensor uniform_signs = tape.leaf({1, 6}, std::vector<double>(6, 0.0));
    const double cls = cls_loss(uniform_signs, {1, 0, 1, 0, 0, 1}).scalar();

    Tensor uniform_logits = tape.leaf({5, 256}, std::vector<double>(5 * 256, 0.0));
    Tensor nll = masked_token_nll(uniform_logits, {0, 3, 9, 200, 0},
                                  {0, 1, 1, 1, 0});
    const double llm = llm_loss({nll}).scalar();

    detail = "clip " + num(clip) + ", cls " + num(cls) + ", llm " + num(llm);
    return std::fabs(clip - 0.313262) < 1e-6 &&
           std::fabs(cls - 6.0 * std::log(2.0)) < 1e-9 &&
           std::fabs(llm - 3.0 * std::log(256.0)) < 1e-9;
}

// ---- 3: learning-rate batch scaling -----------------------------------------

bool lr_rule(std::string& detail) {
    const double lr = compute_absolute_lr(0.001, 32);
    detail = "compute_absolute_lr(0.001, 32) = " + num(lr);
    return lr == 1.25e-4;
}

// ---- 4: memorization run on 16 records --------------------------------------

bool overfit_run(std::string& detail) {
    const auto t0 = Clock::now();
    TrainConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 8;
    cfg.model.embed_dim = 16;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 32;
    cfg.model.max_tokens = 192;
    cfg.batch_size = 16;
    cfg.finetune_epochs = 450;  // one full-batch step per epoch
    cfg.warmup_epochs = 40;
    cfg.base_lr = 0.32;  // absolute peak 0.02
    cfg.weight_decay = 0.0;
    cfg.seed = 42;

    std::vector<FundusRecord> records = two_class_records(16, cfg.model.image_size);
    ModelParams model(cfg.model, 1);
    TrainResult result = run_finetune(records, model, cfg);

    const std::size_t steps = result.metrics.size();
    const double llm = result.metrics.back().llm;

    std::size_t signs_right = 0;
    for (const FundusRecord& rec : records) {
        Tape tape;
        Binding b = bind_params(tape, model, false);
        VisualEmbedding v = encode_image(tape, b, rec.image.inline_image);
        const std::vector<double> probs =
            sign_probabilities(predict_sign_logits(tape, b, v));
        bool ok = true;
        for (std::size_t k = 0; k < kSignCount; ++k) {
            const int pred = probs[k] >= cfg.model.sign_threshold ? 1 : 0;
            ok = ok && pred == rec.signs[k];
        }
        signs_right += ok ? 1 : 0;
    }

    std::size_t regenerated = 0;
    for (const FundusRecord& rec : records) {
        std::vector<int> prompt = {kBos};
        for (int t : encode_bytes(rec.dialogue[0].question)) prompt.push_back(t);
        std::vector<int> expected = encode_bytes(rec.dialogue[0].answer);
        expected.push_back(kEos);
        const std::vector<int> out =
            generate(model, rec.image.inline_image, prompt, expected.size() + 8);
        const std::vector<int> got(out.begin() + static_cast<long>(prompt.size()),
                                   out.end());
        regenerated += got == expected ? 1 : 0;
    }

    const double secs = seconds_since(t0);
    detail = "llm " + num(llm) + " after " + std::to_string(steps) +
             " steps, signs " + std::to_string(signs_right) + "/16, regen " +
             std::to_string(regenerated) + "/16, " + num(secs) + " s";
    return llm < 0.05 && signs_right == 16 && regenerated == 16 &&
           steps <= 500 && secs < 300.0;
}

// ---- 5: bundled text fidelity and corpus shape -------------------------------

bool forge_fidelity(std::string& detail) {
    const fs::path data = fs::path(FVLM_SOURCE_DIR) / "data";

    const auto rule_lines = read_lines(data / "description_rules.txt");
    const auto& rules = description_rules();
    bool rules_ok = rules.size() == 61 && rule_lines.size() == 61;
    for (std::size_t i = 0; rules_ok && i < rules.size(); ++i)
        rules_ok = rules[i].line == rule_lines[i];

    const auto short_lines = read_lines(data / "instructions_short.txt");
    const auto long_lines = read_lines(data / "instructions_long.txt");
    bool instr_ok =
        short_instructions().size() + long_instructions().size() == 20 &&
        short_instructions().size() == short_lines.size() &&
        long_instructions().size() == long_lines.size();
    for (std::size_t i = 0; instr_ok && i < short_lines.size(); ++i)
        instr_ok = short_instructions()[i] == short_lines[i];
    for (std::size_t i = 0; instr_ok && i < long_lines.size(); ++i)
        instr_ok = long_instructions()[i] == long_lines[i];

    const auto prompt_lines = read_lines(data / "dialogue_prompt.txt");
    std::string expected_prompt =
        prompt_lines.size() == 1 ? prompt_lines[0] : "";
    const std::size_t marker = expected_prompt.find("[Keyword]");
    bool prompt_ok = marker != std::string::npos;
    if (prompt_ok) {
        expected_prompt.replace(marker, std::string("[Keyword]").size(),
                                "Glaucoma");
        prompt_ok = render_dialogue_prompt("Glaucoma") == expected_prompt;
    }

    ForgeOptions opt;
    opt.count = 64;
    opt.seed = 9;
    opt.image_size = 16;
    const std::vector<FundusRecord> corpus = forge_fundus_records(opt);
    std::size_t rounds = 0;
    for (const FundusRecord& rec : corpus) rounds += rec.dialogue.size();
    const bool corpus_ok =
        validate_corpus(corpus).empty() && rounds == 3 * corpus.size();

    detail = std::to_string(rules.size()) + " rules, " +
             std::to_string(short_instructions().size() +
                            long_instructions().size()) +
             " instructions, rounds " + std::to_string(rounds) + "/" +
             std::to_string(3 * corpus.size());
    return rules_ok && instr_ok && prompt_ok && corpus_ok;
}

// ---- 6: image and caption preprocessing --------------------------------------

bool preprocessing(std::string& detail) {
    const Image img = synthetic_image(24, 3);
    const bool identity = enhance_contrast(img, 1.0).pixels == img.pixels;

    const Image flat = enhance_contrast(img, 0.0);
    bool constant = true;
    for (double v : flat.pixels) constant = constant && v == flat.pixels[0];

    Image noise;
    noise.width = 100;
    noise.height = 100;
    noise.pixels.resize(100 * 100 * 3);
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (double& v : noise.pixels) v = uni(rng);
    const Image round = hsv_to_rgb(rgb_to_hsv(noise));
    double max_diff = 0.0;
    for (std::size_t i = 0; i < noise.pixels.size(); ++i)
        max_diff = std::max(max_diff, std::fabs(round.pixels[i] - noise.pixels[i]));

    const std::vector<std::string> listed = {
        "arrow", "line",  "star",   "red",    "yellow", "blue",  "orange",
        "green", "purple", "violet", "black", "white",  "gray"};
    std::string sentence = "A Red arrow and a YELLOW line point to the star;";
    sentence += " blue, orange, green, purple, violet, black, white and gray";
    sentence += " regions sit near the starlight.";
    const std::string cleaned = clean_caption(sentence);
    bool words_gone = cleaned == clean_caption(cleaned) &&
                      cleaned.find("starlight") != std::string::npos;
    std::string token;
    std::vector<std::string> tokens;
    for (char c : cleaned + " ") {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            token.push_back(static_cast<char>(
                std::tolower(static_cast<unsigned char>(c))));
        } else if (!token.empty()) {
            tokens.push_back(token);
            token.clear();
        }
    }
    for (const std::string& w : listed)
        words_gone =
            words_gone && std::find(tokens.begin(), tokens.end(), w) == tokens.end();

    detail = "hsv max diff " + num(max_diff) + ", cleaned \"" +
             cleaned.substr(0, 24) + "...\"";
    return identity && constant && max_diff <= 1.0 / 255.0 && words_gone;
}

// ---- 7: statistics oracles ----------------------------------------------------

bool statistics_oracles(std::string& detail) {
    const WilsonInterval w = wilson_interval(90, 180, 0.95);
    const bool wilson_ok = std::fabs(w.lower - 0.4277) < 1e-3 &&
                           std::fabs(w.upper - 0.5723) < 1e-3 &&
                           wilson_interval(0, 9, 0.95).lower == 0.0 &&
                           wilson_interval(9, 9, 0.95).upper == 1.0;

    const std::vector<double> sample = {1.2, 3.4, 2.2, 5.0, 4.1};
    const Interval a = bootstrap_ci(sample, 2000, 0.95, 77);
    const Interval b = bootstrap_ci(sample, 2000, 0.95, 77);
    const bool deterministic = a.lower == b.lower && a.upper == b.upper;

    std::mt19937_64 rng(2024);
    std::normal_distribution<double> gauss(0.0, 1.0);
    int covered = 0;
    const int reps = 500;
    for (int r = 0; r < reps; ++r) {
        std::vector<double> draw(200);
        for (double& x : draw) x = gauss(rng);
        const Interval ci = bootstrap_ci(draw, 1000, 0.95, 1000 + std::uint64_t(r));
        if (ci.lower <= 0.0 && 0.0 <= ci.upper) covered++;
    }
    const double coverage = double(covered) / reps;

    struct WelchFixture {
        std::vector<double> a, b;
        double p;
    };
    const std::vector<WelchFixture> fixtures = {
        {{1, 2, 3, 4}, {3, 4, 5, 6}, 0.070987654320987553},
        {{1.5, 2.1, 3.7, 4.4, 5.0}, {2.0, 2.2, 2.1, 2.3, 2.5},
         0.16951041329576683},
        {{0.1, 0.2, 0.15}, {0.9, 1.1, 1.0, 1.2}, 0.00019636143275614804},
        {{5, 5, 5, 6}, {7, 7, 7, 8.5}, 0.0046979599629113321},
        {{10.2, 9.8, 10.5, 10.1, 9.9, 10.3}, {9.0, 9.4, 8.8, 9.2},
         0.0005686961402422898},
    };
    bool welch_ok = true;
    for (const WelchFixture& f : fixtures)
        welch_ok = welch_ok && std::fabs(t_test_two_sided(f.a, f.b) - f.p) < 1e-6;

    detail = "wilson [" + num(w.lower) + ", " + num(w.upper) + "], coverage " +
             num(coverage) + ", 5 welch fixtures";
    return wilson_ok && deterministic && std::fabs(coverage - 0.95) <= 0.03 &&
           welch_ok;
}

// ---- 8: multiple-choice harness -----------------------------------------------

bool multiple_choice(std::string& detail) {
    const std::vector<std::string> universe = {
        "DR", "AMD", "Glaucoma", "Cataract", "Healthy", "RVO", "Myopia"};
    std::vector<EvalCase> cases;
    for (int i = 0; i < 2233; ++i) {
        EvalCase c;
        c.id = "case" + std::to_string(i);
        c.truth.required = {universe[std::size_t(i) % universe.size()]};
        cases.push_back(c);
    }

    bool options_ok = true;
    McqResponder oracle = [&options_ok](const EvalCase& c,
                                        const std::vector<std::string>& options) {
        std::set<std::string> distinct(options.begin(), options.end());
        std::size_t required_hits = 0;
        std::string answer;
        for (const std::string& o : options)
            if (c.truth.required.count(o)) {
                required_hits++;
                answer = o;
            }
        options_ok = options_ok && options.size() == 4 &&
                     distinct.size() == 4 && required_hits == 1;
        return answer;
    };
    const McqResult perfect = multiple_choice_eval(cases, universe, oracle, 42);

    std::mt19937_64 guess_rng(7);
    McqResponder guesser = [&guess_rng](const EvalCase&,
                                        const std::vector<std::string>& options) {
        return options[guess_rng() % options.size()];
    };
    const McqResult chance = multiple_choice_eval(cases, universe, guesser, 42);
    const double chance_acc = chance.overall.value();

    detail = "oracle " + num(perfect.overall.value()) + ", chance " +
             num(chance_acc) + " over " + std::to_string(perfect.overall.n) +
             " cases";
    return options_ok && perfect.overall.n == 2233 &&
           perfect.overall.value() == 1.0 && chance_acc >= 0.22 &&
           chance_acc <= 0.28;
}

// ---- 9: diagnostic accuracy judgment ------------------------------------------

bool judgment_rules(std::string& detail) {
    GroundTruth plain;
    plain.required = {"DR"};
    GroundTruth with_optional;
    with_optional.required = {"DR"};
    with_optional.optional = {"Myopia"};

    const bool exact = judge_accuracy({"DR"}, plain);
    const bool extra = judge_accuracy({"DR", "AMD"}, plain);
    const bool optional_only = judge_accuracy({"DR", "Myopia"}, with_optional);

    detail = std::string("exact ") + (exact ? "correct" : "wrong") +
             ", extra " + (extra ? "accepted" : "rejected") +
             ", optional " + (optional_only ? "accepted" : "rejected");
    return exact && !extra && optional_only;
}

// ---- 10: run-to-run determinism -------------------------------------------------

bool determinism(std::string& detail) {
    const fs::path base = fs::temp_directory_path();
    const fs::path dir_a = base / "fvlm_acceptance_det_a";
    const fs::path dir_b = base / "fvlm_acceptance_det_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    TrainConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 8;
    cfg.model.embed_dim = 8;
    cfg.model.encoder_layers = 1;
    cfg.model.decoder_layers = 1;
    cfg.model.heads = 2;
    cfg.model.ffn_hidden = 16;
    cfg.model.max_tokens = 160;
    cfg.batch_size = 3;
    cfg.finetune_epochs = 3;
    cfg.warmup_epochs = 1;
    cfg.seed = 99;

    std::vector<FundusRecord> records = two_class_records(5, cfg.model.image_size);
    ModelParams m1(cfg.model, 7);
    const TrainResult r1 = run_finetune(records, m1, cfg, dir_a.string());
    ModelParams m2(cfg.model, 7);
    const TrainResult r2 = run_finetune(records, m2, cfg, dir_b.string());

    bool same = slurp(dir_a / "metrics.csv") == slurp(dir_b / "metrics.csv") &&
                r1.checkpoints.size() == r2.checkpoints.size();
    for (std::size_t i = 0; same && i < r1.checkpoints.size(); ++i)
        same = slurp(r1.checkpoints[i]) == slurp(r2.checkpoints[i]);

    detail = "metrics.csv and " + std::to_string(r1.checkpoints.size()) +
             " checkpoints byte-compared";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    return same;
}

struct Criterion {
    const char* name;
    std::function<bool(std::string&)> run;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"gradient fidelity", grad_fidelity},
        {"closed-form losses", closed_form_losses},
        {"lr batch scaling", lr_rule},
        {"overfit memorization", overfit_run},
        {"forge fidelity", forge_fidelity},
        {"preprocessing", preprocessing},
        {"statistics oracles", statistics_oracles},
        {"multiple-choice harness", multiple_choice},
        {"judgment rules", judgment_rules},
        {"determinism", determinism},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        if (!ok) failures++;
        std::printf("%2zu. %-24s %s  (%s)\n", i + 1, criteria[i].name,
                    ok ? "PASS" : "FAIL", detail.c_str());
        std::fflush(stdout);
    }
    std::printf("%d/10 criteria passed\n", 10 - failures);
    return failures;
}
