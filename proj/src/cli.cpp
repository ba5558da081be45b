#include "fvlm/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fvlm/checkpoint.hpp"
#include "fvlm/errors.hpp"
#include "fvlm/forge.hpp"
#include "fvlm/hash.hpp"
#include "fvlm/model.hpp"
#include "fvlm/stats.hpp"
#include "fvlm/tokenizer.hpp"
#include "fvlm/train.hpp"
#include "nlohmann/json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fvlm {
namespace {

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string f4(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string f4_signed(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%+.4f", v);
    return buf;
}

std::string rate_str(const Rate& r) {
    return f4(r.value()) + " (" + std::to_string(r.k) + "/" +
           std::to_string(r.n) + ")";
}

std::string ci_str(const WilsonInterval& w) {
    return "CI [" + f4(w.lower) + ", " + f4(w.upper) + "]";
}

std::string ci_str(const Interval& iv) {
    return "CI [" + f4(iv.lower) + ", " + f4(iv.upper) + "]";
}

std::string iso_utc_now() {
    std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string file_hash(const std::string& path) {
    return "fnv1a64:" + hex64(fnv1a64_file(path));
}

json train_config_json(const TrainConfig& cfg) {
    return {{"image_size", cfg.model.image_size},
            {"patch_size", cfg.model.patch_size},
            {"embed_dim", cfg.model.embed_dim},
            {"encoder_layers", cfg.model.encoder_layers},
            {"decoder_layers", cfg.model.decoder_layers},
            {"heads", cfg.model.heads},
            {"ffn_hidden", cfg.model.ffn_hidden},
            {"max_tokens", cfg.model.max_tokens},
            {"sign_threshold", cfg.model.sign_threshold},
            {"pooled_projector_input", cfg.model.pooled_projector_input},
            {"base_lr", cfg.base_lr},
            {"beta1", cfg.beta1},
            {"beta2", cfg.beta2},
            {"weight_decay", cfg.weight_decay},
            {"batch_size", cfg.batch_size},
            {"pretrain_epochs", cfg.pretrain_epochs},
            {"finetune_epochs", cfg.finetune_epochs},
            {"warmup_epochs", cfg.warmup_epochs},
            {"lr_floor", cfg.lr_floor},
            {"clip_weight", cfg.loss_weights.clip},
            {"cls_weight", cfg.loss_weights.cls},
            {"llm_weight", cfg.loss_weights.llm},
            {"label_smoothing", cfg.label_smoothing},
            {"seed", cfg.seed}};
}

void write_manifest(const fs::path& run_dir, const std::string& command,
                    const json& config, std::uint64_t seed,
                    const std::map<std::string, std::string>& inputs,
                    const std::map<std::string, std::string>& outputs,
                    const std::string& started) {
    json m;
    m["command"] = command;
    m["config"] = config;
    m["seed"] = seed;
    m["inputs"] = inputs;
    m["outputs"] = outputs;
    m["started"] = started;
    m["finished"] = iso_utc_now();
    std::ofstream f(run_dir / "manifest.json", std::ios::trunc);
    if (!f) throw ContractError("cannot write manifest into '" + run_dir.string() + "'");
    f << m.dump(2) << "\n";
}

/// Structural fields must agree before checkpoint weights can be reused;
/// sign_threshold is an inference knob and deliberately exempt.
void require_same_architecture(const ModelConfig& ckpt, const ModelConfig& cfg) {
    auto want = [](const char* field, auto a, auto b) {
        if (a != b)
            throw ContractError(std::string("checkpoint ") + field + " = " +
                                std::to_string(a) + " but config says " +
                                std::to_string(b));
    };
    want("image_size", ckpt.image_size, cfg.image_size);
    want("patch_size", ckpt.patch_size, cfg.patch_size);
    want("embed_dim", ckpt.embed_dim, cfg.embed_dim);
    want("encoder_layers", ckpt.encoder_layers, cfg.encoder_layers);
    want("decoder_layers", ckpt.decoder_layers, cfg.decoder_layers);
    want("heads", ckpt.heads, cfg.heads);
    want("vocab_size", ckpt.vocab_size, cfg.vocab_size);
    want("max_tokens", ckpt.max_tokens, cfg.max_tokens);
    want("sign_count", ckpt.sign_count, cfg.sign_count);
    want("ffn_hidden", ckpt.ffn_hidden, cfg.ffn_hidden);
    want("pooled_projector_input", ckpt.pooled_projector_input,
         cfg.pooled_projector_input);
}

ModelParams with_config(const ModelParams& src, const ModelConfig& cfg) {
    ModelParams dst = make_params_shell(cfg);
    for (Param& p : dst.params()) p.value = src.at(p.name).value;
    return dst;
}

// ---- forge -------------------------------------------------------------------

struct ForgeCli {
    std::string rules = "default";
    std::string kind = "fundus";
    std::string out;
    std::size_t n = 100;
    std::uint64_t seed = 42;
    std::size_t image_size = 32;
    std::string ppm_dir;
};

int cmd_forge(const ForgeCli& o, std::ostream& out, std::ostream& err) {
    if (o.rules != "default")
        throw ContractError("unknown rule set '" + o.rules +
                            "' (only 'default' is bundled)");
    if (o.kind != "fundus" && o.kind != "pretrain")
        throw ContractError("unknown corpus kind '" + o.kind +
                            "' (fundus or pretrain)");
    const std::string started = iso_utc_now();
    out << "seed: " << o.seed << "\n";

    const fs::path out_path(o.out);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());

    std::size_t records = 0;
    if (o.kind == "fundus") {
        ForgeOptions opt;
        opt.count = o.n;
        opt.seed = o.seed;
        opt.image_size = o.image_size;
        opt.ppm_dir = o.ppm_dir;
        auto forged = forge_fundus_records(opt);
        write_fundus_corpus(forged, o.out);
        records = forged.size();
        auto issues = validate_corpus(forged);
        if (!issues.empty()) {
            for (const auto& issue : issues)
                err << "record " << issue.record << ": " << issue.message << "\n";
            return 1;
        }
        out << "validation: clean\n";
    } else {
        auto pairs = forge_pretrain_pairs(o.n, o.seed, o.image_size);
        write_pretrain_corpus(pairs, o.out);
        records = pairs.size();
    }
    out << "records: " << records << "\n";
    out << "corpus: " << o.out << "\n";

    const fs::path run_dir =
        out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
    json config = {{"rules", o.rules},     {"kind", o.kind},
                   {"n", o.n},             {"image_size", o.image_size},
                   {"ppm_dir", o.ppm_dir}, {"out", o.out}};
    write_manifest(run_dir, "forge", config, o.seed, {},
                   {{o.out, file_hash(o.out)}}, started);
    return 0;
}

// ---- pretrain / finetune -------------------------------------------------------

struct TrainCli {
    std::string config;
    std::string corpus;
    std::string out;
    std::string checkpoint;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double threshold = 0.0;
    bool threshold_set = false;
};

int cmd_train(const TrainCli& o, bool finetune, std::ostream& out,
              std::ostream& err) {
    const std::string started = iso_utc_now();
    TrainConfig cfg = load_train_config(o.config);
    if (o.seed_set) cfg.seed = o.seed;
    if (o.threshold_set) cfg.model.sign_threshold = o.threshold;
    cfg.validate();
    out << "seed: " << cfg.seed << "\n";

    ModelParams model;
    std::map<std::string, std::string> inputs;
    inputs[o.config] = file_hash(o.config);
    inputs[o.corpus] = file_hash(o.corpus);
    if (!o.checkpoint.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(o.checkpoint);
        require_same_architecture(loaded.model.config(), cfg.model);
        model = with_config(loaded.model, cfg.model);
        inputs[o.checkpoint] = file_hash(o.checkpoint);
        out << "initialized from " << o.checkpoint << "\n";
    } else {
        model = ModelParams(cfg.model, cfg.seed);
    }

    fs::create_directories(o.out);
    const std::string corpus_dir = fs::path(o.corpus).parent_path().string();

    TrainResult result;
    std::size_t loaded_records = 0;
    if (finetune) {
        auto corpus = read_fundus_corpus(o.corpus);
        loaded_records = corpus.size();
        result = run_finetune(corpus, model, cfg, o.out, corpus_dir);
    } else {
        auto corpus = read_pretrain_corpus(o.corpus);
        loaded_records = corpus.size();
        result = run_pretrain(corpus, model, cfg, o.out, corpus_dir);
    }

    out << "records: " << loaded_records << " (skipped " << result.skipped
        << ")\n";
    out << "steps: " << result.metrics.size() << "\n";
    if (!result.metrics.empty()) {
        const StepMetrics& last = result.metrics.back();
        out << "final losses: clip " << g17(last.clip) << ", cls "
            << g17(last.cls) << ", llm " << g17(last.llm) << ", total "
            << g17(last.total) << "\n";
    }
    for (const std::string& ckpt : result.checkpoints)
        out << "checkpoint: " << ckpt << "\n";
    if (result.metrics.empty()) {
        err << "no training steps ran; corpus may be empty after skips\n";
        return 1;
    }

    std::map<std::string, std::string> outputs;
    const std::string metrics_path = (fs::path(o.out) / "metrics.csv").string();
    outputs[metrics_path] = file_hash(metrics_path);
    for (const std::string& ckpt : result.checkpoints)
        outputs[ckpt] = file_hash(ckpt);
    write_manifest(o.out, finetune ? "finetune" : "pretrain",
                   train_config_json(cfg), cfg.seed, inputs, outputs, started);
    return 0;
}

// ---- eval ---------------------------------------------------------------------

struct CsvRow {
    std::string section, responder, metric, k, n, value, lower, upper;
};

void write_stats_csv(const std::vector<CsvRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ContractError("cannot write '" + path + "'");
    f << "section,responder,metric,k,n,value,lower,upper\n";
    for (const CsvRow& r : rows)
        f << r.section << ',' << r.responder << ',' << r.metric << ',' << r.k
          << ',' << r.n << ',' << r.value << ',' << r.lower << ',' << r.upper
          << "\n";
    if (!f) throw ContractError("write to '" + path + "' failed");
}

CsvRow rate_row(const std::string& section, const std::string& responder,
                const std::string& metric, const Rate& rate,
                const WilsonInterval& ci) {
    CsvRow row;
    row.section = section;
    row.responder = responder;
    row.metric = metric;
    row.k = std::to_string(rate.k);
    row.n = std::to_string(rate.n);
    row.value = g17(rate.value());
    row.lower = g17(ci.lower);
    row.upper = g17(ci.upper);
    return row;
}

struct EvalCli {
    std::string cases;
    std::string out;
    std::uint64_t seed = 42;
    std::size_t resamples = 10000;
};

std::vector<std::string> round1_responders(const std::vector<EvalCase>& cases) {
    std::set<std::string> names;
    for (const EvalCase& c : cases)
        if (!c.rounds.empty())
            for (const auto& [name, preds] : c.rounds[0].predictions)
                names.insert(name);
    return {names.begin(), names.end()};
}

int cmd_eval(const EvalCli& o, std::ostream& out, std::ostream& err) {
    const std::string started = iso_utc_now();
    auto cases = read_eval_cases(o.cases);
    if (cases.empty()) throw ContractError("'" + o.cases + "' holds no cases");

    std::ostringstream text;
    std::vector<CsvRow> rows;
    text << "evaluation report\n";
    text << "cases: " << cases.size() << ", seed: " << o.seed
         << ", confidence: 95%\n";

    const auto responders = round1_responders(cases);

    // round-1 diagnostic accuracy, overall and attributed per disease
    std::map<std::string, Rate> accuracy;
    std::map<std::string, std::map<std::string, Rate>> by_disease;
    for (const EvalCase& c : cases) {
        if (c.rounds.empty()) continue;
        for (const auto& [name, preds] : c.rounds[0].predictions) {
            const bool ok = judge_accuracy(preds, c.truth);
            Rate& r = accuracy[name];
            r.n++;
            if (ok) r.k++;
            for (const std::string& disease : c.truth.required) {
                Rate& d = by_disease[name][disease];
                d.n++;
                if (ok) d.k++;
            }
        }
    }
    text << "\ndiagnostic accuracy (round 1)\n";
    for (const auto& [name, rate] : accuracy) {
        const auto ci = wilson_interval(rate.k, rate.n, 0.95);
        text << "  " << name << ": " << rate_str(rate) << ", " << ci_str(ci)
             << "\n";
        rows.push_back(rate_row("accuracy", name, "round1", rate, ci));
        for (const auto& [disease, drate] : by_disease[name]) {
            const auto dci = wilson_interval(drate.k, drate.n, 0.95);
            text << "    " << disease << ": " << rate_str(drate) << ", "
                 << ci_str(dci) << "\n";
            rows.push_back(
                rate_row("accuracy_by_disease", name, disease, drate, dci));
        }
    }

    if (accuracy.size() > 1) {
        text << "\naccuracy comparisons (two-sided z on Wilson standard errors)\n";
        for (auto a = accuracy.begin(); a != accuracy.end(); ++a)
            for (auto b = std::next(a); b != accuracy.end(); ++b) {
                const double p = proportion_test(a->second.k, a->second.n,
                                                 b->second.k, b->second.n);
                text << "  " << a->first << " vs " << b->first
                     << ": p = " << f4(p) << "\n";
                CsvRow row;
                row.section = "accuracy_comparison";
                row.responder = a->first + " vs " + b->first;
                row.metric = "p_value";
                row.value = g17(p);
                rows.push_back(row);
            }
    }

    // relevance ranking
    std::map<std::string, std::vector<double>> ranks;
    for (const EvalCase& c : cases)
        for (const EvalRound& r : c.rounds)
            if (!r.relevance.empty())
                for (const auto& [name, rank] : r.relevance)
                    ranks[name].push_back(double(rank));
    auto relevance = relevance_stats(cases, o.resamples, 0.95, o.seed);
    if (!relevance.empty()) {
        text << "\ndiagnostic relevance (mean rank of 4, bootstrap CI, "
             << o.resamples << " resamples)\n";
        for (const auto& s : relevance) {
            text << "  " << s.responder << ": " << f4(s.mean_rank)
                 << " (n=" << s.n << "), " << ci_str(s.ci) << "\n";
            CsvRow row;
            row.section = "relevance";
            row.responder = s.responder;
            row.metric = "mean_rank";
            row.n = std::to_string(s.n);
            row.value = g17(s.mean_rank);
            row.lower = g17(s.ci.lower);
            row.upper = g17(s.ci.upper);
            rows.push_back(row);
        }
        text << "relevance comparisons (Welch two-sided t)\n";
        for (auto a = ranks.begin(); a != ranks.end(); ++a)
            for (auto b = std::next(a); b != ranks.end(); ++b) {
                if (a->second.size() < 2 || b->second.size() < 2) continue;
                const double p = t_test_two_sided(a->second, b->second);
                text << "  " << a->first << " vs " << b->first
                     << ": p = " << f4(p) << "\n";
                CsvRow row;
                row.section = "relevance_comparison";
                row.responder = a->first + " vs " + b->first;
                row.metric = "p_value";
                row.value = g17(p);
                rows.push_back(row);
            }
    }

    // follow-up correction over three-round cases
    bool correction_header = false;
    for (const std::string& name : responders) {
        std::vector<EvalCase> eligible;
        for (const EvalCase& c : cases) {
            if (c.rounds.size() != 3) continue;
            bool covered = true;
            for (const EvalRound& r : c.rounds)
                if (!r.predictions.count(name)) covered = false;
            if (covered) eligible.push_back(c);
        }
        if (eligible.empty()) continue;
        if (!correction_header) {
            text << "\nfollow-up correction (round 3 scored unconditionally on "
                    "round 2)\n";
            correction_header = true;
        }
        const auto s = correction_stats(eligible, name);
        if (!s.overall.defined()) {
            text << "  " << name << ": no round-1 failures among "
                 << eligible.size() << " cases\n";
            continue;
        }
        text << "  " << name << ": overall " << rate_str(s.overall) << ", "
             << ci_str(s.overall_ci) << "; round2 " << rate_str(s.round2)
             << ", " << ci_str(s.round2_ci) << "; round3 "
             << rate_str(s.round3) << ", " << ci_str(s.round3_ci) << "\n";
        rows.push_back(rate_row("correction", name, "overall", s.overall,
                                s.overall_ci));
        rows.push_back(rate_row("correction", name, "round2", s.round2,
                                s.round2_ci));
        rows.push_back(rate_row("correction", name, "round3", s.round3,
                                s.round3_ci));
    }

    // misdiagnosis on healthy-truth cases
    bool misdiagnosis_header = false;
    for (const std::string& name : responders) {
        std::vector<EvalCase> healthy;
        for (const EvalCase& c : cases)
            if (c.truth.required == std::set<std::string>{"Healthy"} &&
                !c.rounds.empty() && c.rounds[0].predictions.count(name))
                healthy.push_back(c);
        if (healthy.empty()) continue;
        if (!misdiagnosis_header) {
            text << "\nmisdiagnosis rate (healthy-truth cases, round 1)\n";
            misdiagnosis_header = true;
        }
        const auto s = misdiagnosis_rate(healthy, name);
        text << "  " << name << ": " << rate_str(s.rate) << ", " << ci_str(s.ci)
             << "\n";
        rows.push_back(rate_row("misdiagnosis", name, "rate", s.rate, s.ci));
    }

    // error taxonomy over labeled cases
    std::vector<EvalCase> labeled;
    for (const EvalCase& c : cases)
        if (c.errors.present) labeled.push_back(c);
    if (!labeled.empty()) {
        const auto s = error_taxonomy(labeled);
        text << "\nerror taxonomy (" << s.n << " labeled cases)\n";
        text << "  missed error-free: " << rate_str(s.missed_error_free) << ", "
             << ci_str(s.missed_ci) << "\n";
        text << "  incorrect error-free: " << rate_str(s.incorrect_error_free)
             << ", " << ci_str(s.incorrect_ci) << "\n";
        rows.push_back(rate_row("taxonomy", "", "missed_error_free",
                                s.missed_error_free, s.missed_ci));
        rows.push_back(rate_row("taxonomy", "", "incorrect_error_free",
                                s.incorrect_error_free, s.incorrect_ci));
        text << "  cross-tab (missed x incorrect):\n";
        for (std::size_t i = 0; i < 3; ++i) {
            text << "    " << severity_name(Severity(i)) << ":";
            for (std::size_t j = 0; j < 3; ++j) {
                text << " " << severity_name(Severity(j)) << "="
                     << s.cross[i][j];
                CsvRow row;
                row.section = "taxonomy_cross";
                row.metric = std::string(severity_name(Severity(i))) + "_" +
                             severity_name(Severity(j));
                row.k = std::to_string(s.cross[i][j]);
                row.n = std::to_string(s.n);
                rows.push_back(row);
            }
            text << "\n";
        }
    }

    // assisted diagnosis over timed cases
    bool any_timing = false;
    for (const EvalCase& c : cases) any_timing |= c.timing.present;
    if (any_timing) {
        const auto s = assisted_comparison(cases);
        std::vector<double> saved;
        for (const EvalCase& c : cases)
            if (c.timing.present)
                saved.push_back(c.timing.doctor_seconds -
                                c.timing.assisted_seconds);
        const auto saved_ci = bootstrap_ci(saved, o.resamples, 0.95, o.seed);
        auto render = [&](const std::string& label, const AssistedDelta& d) {
            const auto doc_ci =
                wilson_interval(d.doctor_accuracy.k, d.doctor_accuracy.n, 0.95);
            const auto both_ci = wilson_interval(d.assisted_accuracy.k,
                                                 d.assisted_accuracy.n, 0.95);
            text << "  " << label << ": n=" << d.n << ", time "
                 << f4(d.mean_doctor_seconds) << "s -> "
                 << f4(d.mean_assisted_seconds) << "s";
            if (d.time_defined)
                text << " (reduction " << f4(d.time_reduction * 100.0) << "%)";
            else
                text << " (reduction undefined: zero baseline)";
            text << ", accuracy " << rate_str(d.doctor_accuracy) << " "
                 << ci_str(doc_ci) << " -> " << rate_str(d.assisted_accuracy)
                 << " " << ci_str(both_ci) << " ("
                 << f4_signed(d.accuracy_increase_points) << " points, p = "
                 << f4(proportion_test(d.doctor_accuracy.k, d.doctor_accuracy.n,
                                       d.assisted_accuracy.k,
                                       d.assisted_accuracy.n))
                 << ")\n";
            rows.push_back(rate_row("assisted", label, "doctor_accuracy",
                                    d.doctor_accuracy, doc_ci));
            rows.push_back(rate_row("assisted", label, "assisted_accuracy",
                                    d.assisted_accuracy, both_ci));
            if (d.time_defined) {
                CsvRow row;
                row.section = "assisted";
                row.responder = label;
                row.metric = "time_reduction";
                row.n = std::to_string(d.n);
                row.value = g17(d.time_reduction);
                rows.push_back(row);
            }
        };
        text << "\nassisted diagnosis (doctor vs doctor+model, timed cases)\n";
        render("overall", s.overall);
        text << "  mean seconds saved per case: "
             << f4(s.overall.mean_doctor_seconds -
                   s.overall.mean_assisted_seconds)
             << " (n=" << s.overall.n << "), bootstrap " << ci_str(saved_ci)
             << "\n";
        for (const auto& [condition, delta] : s.per_condition)
            render(condition, delta);
    }

    out << text.str();
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        const std::string summary = (fs::path(o.out) / "summary.txt").string();
        const std::string csv = (fs::path(o.out) / "stats.csv").string();
        std::ofstream f(summary, std::ios::trunc);
        if (!f) throw ContractError("cannot write '" + summary + "'");
        f << text.str();
        f.close();
        write_stats_csv(rows, csv);
        json config = {{"cases", o.cases},
                       {"resamples", o.resamples},
                       {"confidence", 0.95}};
        write_manifest(o.out, "eval", config, o.seed,
                       {{o.cases, file_hash(o.cases)}},
                       {{summary, file_hash(summary)}, {csv, file_hash(csv)}},
                       started);
        out << "\nreport written to " << o.out << "\n";
    }
    (void)err;
    return 0;
}

// ---- mcq ----------------------------------------------------------------------

struct McqCli {
    std::string cases;
    std::string out;
    std::uint64_t seed = 42;
};

int cmd_mcq(const McqCli& o, std::ostream& out, std::ostream& err) {
    const std::string started = iso_utc_now();
    auto cases = read_eval_cases(o.cases);
    if (cases.empty()) throw ContractError("'" + o.cases + "' holds no cases");

    std::set<std::string> labels;
    for (const EvalCase& c : cases) {
        labels.insert(c.truth.required.begin(), c.truth.required.end());
        labels.insert(c.truth.optional.begin(), c.truth.optional.end());
    }
    const std::vector<std::string> universe(labels.begin(), labels.end());

    std::size_t unlabeled = 0;
    std::vector<EvalCase> usable;
    for (EvalCase& c : cases) {
        if (c.truth.required.empty())
            unlabeled++;
        else
            usable.push_back(std::move(c));
    }

    out << "seed: " << o.seed << "\n";
    out << "multiple choice: 4 options per case, " << universe.size()
        << " labels in the universe\n";
    out << "cases: " << usable.size();
    if (unlabeled > 0) out << " (skipped " << unlabeled << " without a required disease)";
    out << "\n";
    if (usable.empty()) throw ContractError("no usable multiple-choice cases");

    std::vector<CsvRow> rows;
    for (const std::string& name : round1_responders(usable)) {
        std::vector<EvalCase> mine;
        for (const EvalCase& c : usable)
            if (!c.rounds.empty() && c.rounds[0].predictions.count(name))
                mine.push_back(c);
        if (mine.empty()) continue;
        McqResponder pick_from_round1 =
            [&name](const EvalCase& c, const std::vector<std::string>& options) {
                const auto& preds = c.rounds[0].predictions.at(name);
                for (const std::string& option : options)
                    if (preds.count(option)) return option;
                return std::string();
            };
        const McqResult res =
            multiple_choice_eval(mine, universe, pick_from_round1, o.seed);
        const auto ci = wilson_interval(res.overall.k, res.overall.n, 0.95);
        out << "  " << name << ": " << rate_str(res.overall) << ", "
            << ci_str(ci) << "\n";
        rows.push_back(rate_row("mcq", name, "overall", res.overall, ci));
        for (const auto& [disease, rate] : res.per_disease) {
            const auto dci = wilson_interval(rate.k, rate.n, 0.95);
            out << "    " << disease << ": " << rate_str(rate) << ", "
                << ci_str(dci) << "\n";
            rows.push_back(rate_row("mcq_by_disease", name, disease, rate, dci));
        }
    }
    if (rows.empty()) {
        err << "no responder has round-1 predictions; nothing to score\n";
        return 1;
    }

    if (!o.out.empty()) {
        fs::create_directories(o.out);
        const std::string csv = (fs::path(o.out) / "mcq.csv").string();
        write_stats_csv(rows, csv);
        json config = {{"cases", o.cases}, {"universe_size", universe.size()}};
        write_manifest(o.out, "mcq", config, o.seed,
                       {{o.cases, file_hash(o.cases)}},
                       {{csv, file_hash(csv)}}, started);
        out << "results written to " << o.out << "\n";
    }
    return 0;
}

// ---- chat ---------------------------------------------------------------------

struct ChatCli {
    std::string checkpoint;
    std::string corpus;
    std::string out;
    std::uint64_t seed = 42;
    double threshold = 0.0;
    bool threshold_set = false;
};

int cmd_chat(const ChatCli& o, std::istream& in, std::ostream& out,
             std::ostream& err) {
    const std::string started = iso_utc_now();
    LoadedCheckpoint loaded = load_checkpoint(o.checkpoint);
    ModelParams model = std::move(loaded.model);
    if (o.threshold_set) {
        ModelConfig cfg = model.config();
        cfg.sign_threshold = o.threshold;
        cfg.validate();
        model = with_config(model, cfg);
    }

    Image image;
    std::string image_source;
    if (!o.corpus.empty()) {
        auto records = read_fundus_corpus(o.corpus);
        if (records.empty())
            throw ContractError("'" + o.corpus + "' holds no records");
        image = load_image(records[0].image,
                           fs::path(o.corpus).parent_path().string());
        image_source = "record 0 of " + o.corpus;
    } else {
        image = synthetic_image(model.config().image_size, o.seed);
        image_source = "synthetic pattern";
    }

    out << "chat demo (greedy decode; not a clinical interface)\n";
    out << "seed: " << o.seed << "\n";
    out << "image: " << image_source << "\n";
    out << "empty line or end of input finishes the session\n";

    std::ostringstream transcript;
    std::string question;
    while (true) {
        out << "> " << std::flush;
        if (!std::getline(in, question) || question.empty()) break;
        std::vector<int> prompt = {kBos};
        for (int t : encode_bytes(question)) prompt.push_back(t);
        std::string answer;
        try {
            const std::vector<int> result = generate(model, image, prompt, 256);
            answer = decode_bytes(
                {result.begin() + std::ptrdiff_t(prompt.size()), result.end()});
        } catch (const ContractError& e) {
            err << "error: " << e.what() << "\n";
            continue;
        }
        out << answer << "\n";
        transcript << "Q: " << question << "\nA: " << answer << "\n";
    }
    out << "\n";

    if (!o.out.empty()) {
        fs::create_directories(o.out);
        const std::string path = (fs::path(o.out) / "transcript.txt").string();
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw ContractError("cannot write '" + path + "'");
        f << transcript.str();
        f.close();
        json config = {{"checkpoint", o.checkpoint},
                       {"corpus", o.corpus},
                       {"threshold", o.threshold_set
                                         ? o.threshold
                                         : model.config().sign_threshold}};
        write_manifest(o.out, "chat", config, o.seed,
                       {{o.checkpoint, file_hash(o.checkpoint)}},
                       {{path, file_hash(path)}}, started);
    }
    return 0;
}

// ---- report -------------------------------------------------------------------

struct ReportCli {
    std::string path;
    std::string out;
    std::uint64_t seed = 42;
};

int cmd_report(const ReportCli& o, std::ostream& out, std::ostream& err) {
    const std::string started = iso_utc_now();
    fs::path source(o.path);
    fs::path metrics_path = source;
    fs::path manifest_path;
    if (fs::is_directory(source)) {
        metrics_path = source / "metrics.csv";
        manifest_path = source / "manifest.json";
    }
    auto metrics = read_metrics_csv(metrics_path.string());
    if (metrics.empty())
        throw ContractError("'" + metrics_path.string() + "' has no steps");

    out << "seed: " << o.seed << "\n";
    out << "run report for " << o.path << "\n";
    if (!manifest_path.empty() && fs::exists(manifest_path)) {
        std::ifstream mf(manifest_path);
        json manifest = json::parse(mf, nullptr, false);
        if (!manifest.is_discarded() && manifest.contains("command"))
            out << "manifest: command=" << manifest["command"].get<std::string>()
                << " seed=" << manifest.value("seed", 0) << "\n";
    }
    out << "steps: " << metrics.size() << "\n";

    struct Column {
        const char* name;
        double StepMetrics::* field;
    };
    const Column columns[] = {{"lr", &StepMetrics::lr},
                              {"clip", &StepMetrics::clip},
                              {"cls", &StepMetrics::cls},
                              {"llm", &StepMetrics::llm},
                              {"total", &StepMetrics::total}};
    std::ostringstream csv;
    csv << "metric,first,last,min,max,mean\n";
    for (const Column& col : columns) {
        double first = metrics.front().*col.field;
        double last = metrics.back().*col.field;
        double lo = first, hi = first, sum = 0.0;
        for (const StepMetrics& m : metrics) {
            const double v = m.*col.field;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
        const double mean = sum / double(metrics.size());
        out << "  " << col.name << ": first " << g17(first) << ", last "
            << g17(last) << ", min " << g17(lo) << ", max " << g17(hi)
            << ", mean " << g17(mean) << "\n";
        csv << col.name << ',' << g17(first) << ',' << g17(last) << ','
            << g17(lo) << ',' << g17(hi) << ',' << g17(mean) << "\n";
    }
    if (fs::is_directory(source)) {
        std::vector<std::string> ckpts;
        for (const auto& entry : fs::directory_iterator(source))
            if (entry.path().extension() == ".ckpt")
                ckpts.push_back(entry.path().filename().string());
        std::sort(ckpts.begin(), ckpts.end());
        for (const auto& name : ckpts) out << "checkpoint: " << name << "\n";
    }

    if (!o.out.empty()) {
        fs::create_directories(o.out);
        const std::string path = (fs::path(o.out) / "report.csv").string();
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw ContractError("cannot write '" + path + "'");
        f << csv.str();
        f.close();
        json config = {{"source", o.path}};
        write_manifest(o.out, "report", config, o.seed,
                       {{metrics_path.string(), file_hash(metrics_path.string())}},
                       {{path, file_hash(path)}}, started);
        out << "report written to " << o.out << "\n";
    }
    (void)err;
    return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::istream& in,
                std::ostream& out, std::ostream& err) {
    CLI::App app{"synthetic fundus vision-language model toolkit"};
    app.name("fundusvlm");
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    ForgeCli forge_opts;
    auto* forge = app.add_subcommand("forge", "build and validate a synthetic corpus");
    forge->add_option("--rules", forge_opts.rules, "description rule set")
        ->capture_default_str();
    forge->add_option("--kind", forge_opts.kind, "fundus or pretrain")
        ->capture_default_str();
    forge->add_option("--out", forge_opts.out, "corpus file to write")->required();
    forge->add_option("--n", forge_opts.n, "record count")->capture_default_str();
    forge->add_option("--seed", forge_opts.seed, "rng seed")->capture_default_str();
    forge->add_option("--image-size", forge_opts.image_size, "square image side")
        ->capture_default_str();
    forge->add_option("--ppm-dir", forge_opts.ppm_dir,
                      "write PPM files here instead of inline pixels");

    TrainCli pre_opts, fine_opts;
    auto add_train_flags = [](CLI::App* cmd, TrainCli& o) {
        cmd->add_option("--config", o.config, "key = value training config")
            ->required();
        cmd->add_option("--corpus", o.corpus, "corpus file")->required();
        cmd->add_option("--out", o.out, "run directory")->required();
        cmd->add_option("--checkpoint", o.checkpoint,
                        "initialize weights from this checkpoint");
        cmd->add_option("--seed", o.seed, "overrides the config seed");
        cmd->add_option("--threshold", o.threshold,
                        "overrides the sign probability threshold");
    };
    auto* pretrain = app.add_subcommand(
        "pretrain", "caption-alignment training on image/text pairs");
    add_train_flags(pretrain, pre_opts);
    auto* finetune = app.add_subcommand(
        "finetune", "three-objective training on fundus records");
    add_train_flags(finetune, fine_opts);

    EvalCli eval_opts;
    auto* eval = app.add_subcommand("eval", "clinical statistics over a case file");
    eval->add_option("--cases", eval_opts.cases, "JSONL evaluation cases")
        ->required();
    eval->add_option("--out", eval_opts.out, "run directory for summary + CSV");
    eval->add_option("--seed", eval_opts.seed, "bootstrap seed")
        ->capture_default_str();
    eval->add_option("--resamples", eval_opts.resamples, "bootstrap resamples")
        ->capture_default_str();

    McqCli mcq_opts;
    auto* mcq = app.add_subcommand("mcq", "four-option multiple-choice harness");
    mcq->add_option("--cases", mcq_opts.cases, "JSONL evaluation cases")
        ->required();
    mcq->add_option("--out", mcq_opts.out, "run directory for CSV results");
    mcq->add_option("--seed", mcq_opts.seed, "distractor seed")
        ->capture_default_str();

    ChatCli chat_opts;
    auto* chat = app.add_subcommand("chat", "interactive greedy-decode demo");
    chat->add_option("--checkpoint", chat_opts.checkpoint, "model checkpoint")
        ->required();
    chat->add_option("--corpus", chat_opts.corpus,
                     "take the conditioning image from this corpus");
    chat->add_option("--out", chat_opts.out, "write a transcript here");
    chat->add_option("--seed", chat_opts.seed, "seed for the synthetic image")
        ->capture_default_str();
    chat->add_option("--threshold", chat_opts.threshold,
                     "overrides the sign probability threshold");

    ReportCli report_opts;
    auto* report = app.add_subcommand("report", "summarize a training run");
    report->add_option("run", report_opts.path,
                       "run directory or metrics.csv file")
        ->required();
    report->add_option("--out", report_opts.out, "write report.csv here");
    report->add_option("--seed", report_opts.seed, "echoed for uniformity")
        ->capture_default_str();

    std::vector<std::string> argv = {"fundusvlm"};
    argv.insert(argv.end(), args.begin(), args.end());
    std::vector<const char*> raw;
    raw.reserve(argv.size());
    for (const std::string& a : argv) raw.push_back(a.c_str());
    try {
        app.parse(int(raw.size()), raw.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }
    pre_opts.seed_set = pretrain->count("--seed") > 0;
    pre_opts.threshold_set = pretrain->count("--threshold") > 0;
    fine_opts.seed_set = finetune->count("--seed") > 0;
    fine_opts.threshold_set = finetune->count("--threshold") > 0;
    chat_opts.threshold_set = chat->count("--threshold") > 0;

    try {
        if (forge->parsed()) return cmd_forge(forge_opts, out, err);
        if (pretrain->parsed()) return cmd_train(pre_opts, false, out, err);
        if (finetune->parsed()) return cmd_train(fine_opts, true, out, err);
        if (eval->parsed()) return cmd_eval(eval_opts, out, err);
        if (mcq->parsed()) return cmd_mcq(mcq_opts, out, err);
        if (chat->parsed()) return cmd_chat(chat_opts, in, out, err);
        if (report->parsed()) return cmd_report(report_opts, out, err);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << "no command selected\n";
    return 2;
}

}  // namespace fvlm
