#include "fvlm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "fvlm/errors.hpp"
#include "fvlm/hash.hpp"
#include "nlohmann/json.hpp"

namespace fvlm {

const char* severity_name(Severity s) {
    switch (s) {
        case Severity::None: return "none";
        case Severity::Minor: return "minor";
        case Severity::Major: return "major";
    }
    throw ContractError("severity_name: invalid severity");
}

Severity parse_severity(const std::string& name) {
    if (name == "none") return Severity::None;
    if (name == "minor") return Severity::Minor;
    if (name == "major") return Severity::Major;
    throw ContractError("unknown severity '" + name + "'");
}

double Rate::value() const {
    if (n == 0) throw ContractError("rate is undefined (n = 0)");
    return double(k) / double(n);
}

// ---- primitive statistics ---------------------------------------------------

namespace {

double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

}  // namespace

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw ContractError("normal_quantile: p must lie strictly inside (0,1)");

    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double p_low = 0.02425, p_high = 1.0 - p_low;

    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= p_high) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
            q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }

    // one Halley step against the exact CDF brings the estimate to full
    // double precision
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * 3.141592653589793238462643383279502884) *
                     std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

WilsonInterval wilson_interval(std::size_t successes, std::size_t n,
                               double confidence) {
    if (n == 0) throw ContractError("wilson_interval: n must be >= 1");
    if (successes > n)
        throw ContractError("wilson_interval: successes exceed n");
    if (!(confidence > 0.0 && confidence < 1.0))
        throw ContractError("wilson_interval: confidence must lie in (0,1)");

    const double z = normal_quantile(0.5 + confidence / 2.0);
    const double nn = double(n);
    const double ph = double(successes) / nn;
    const double denom = 1.0 + z * z / nn;
    const double center = (ph + z * z / (2.0 * nn)) / denom;
    const double half = z / denom *
                        std::sqrt(ph * (1.0 - ph) / nn + z * z / (4.0 * nn * nn));

    WilsonInterval w;
    w.point = ph;
    w.confidence = confidence;
    w.lower = successes == 0 ? 0.0 : std::max(0.0, center - half);
    w.upper = successes == n ? 1.0 : std::min(1.0, center + half);
    return w;
}

Interval bootstrap_ci(const std::vector<double>& values, std::size_t resamples,
                      double confidence, std::uint64_t seed) {
    if (values.empty()) throw ContractError("bootstrap_ci: empty sample");
    if (resamples == 0) throw ContractError("bootstrap_ci: resamples must be >= 1");
    if (!(confidence > 0.0 && confidence < 1.0))
        throw ContractError("bootstrap_ci: confidence must lie in (0,1)");

    const std::size_t n = values.size();
    std::mt19937_64 rng(seed);
    std::vector<double> means(resamples);
    for (std::size_t r = 0; r < resamples; ++r) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) sum += values[rng() % n];
        means[r] = sum / double(n);
    }
    std::sort(means.begin(), means.end());

    auto quantile = [&](double p) {
        const double h = p * double(resamples - 1);
        const std::size_t i = std::size_t(h);
        if (i + 1 >= resamples) return means[resamples - 1];
        return means[i] + (h - double(i)) * (means[i + 1] - means[i]);
    };
    const double alpha = (1.0 - confidence) / 2.0;
    return {quantile(alpha), quantile(1.0 - alpha)};
}

namespace {

double beta_cont_frac(double a, double b, double x) {
    const double fpmin = 1e-300, eps = 3e-14;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < fpmin) d = fpmin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = 1.0 + aa / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) -
                               std::lgamma(b) + a * std::log(x) +
                               b * std::log(1.0 - x));
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * beta_cont_frac(a, b, x) / a;
    return 1.0 - bt * beta_cont_frac(b, a, 1.0 - x) / b;
}

double sample_mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

double sample_variance(const std::vector<double>& v, double mean) {
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / double(v.size() - 1);
}

}  // namespace

double t_test_two_sided(const std::vector<double>& a,
                        const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw ContractError("t_test_two_sided: each sample needs >= 2 values");
    const double na = double(a.size()), nb = double(b.size());
    const double ma = sample_mean(a), mb = sample_mean(b);
    const double va = sample_variance(a, ma), vb = sample_variance(b, mb);
    if (va == 0.0 && vb == 0.0) return ma == mb ? 1.0 : 0.0;

    const double sa = va / na, sb = vb / nb;
    const double t = (ma - mb) / std::sqrt(sa + sb);
    const double df = (sa + sb) * (sa + sb) /
                      (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    return reg_inc_beta(df / 2.0, 0.5, df / (df + t * t));
}

double proportion_test(std::size_t k1, std::size_t n1, std::size_t k2,
                       std::size_t n2, double confidence) {
    const WilsonInterval w1 = wilson_interval(k1, n1, confidence);
    const WilsonInterval w2 = wilson_interval(k2, n2, confidence);
    const double z = normal_quantile(0.5 + confidence / 2.0);
    const double se1 = (w1.upper - w1.lower) / (2.0 * z);
    const double se2 = (w2.upper - w2.lower) / (2.0 * z);
    const double stat = (w1.point - w2.point) /
                        std::sqrt(se1 * se1 + se2 * se2);
    return std::erfc(std::fabs(stat) / std::sqrt(2.0));
}

// ---- clinical metrics ---------------------------------------------------------

bool judge_accuracy(const std::set<std::string>& predicted,
                    const GroundTruth& truth) {
    for (const std::string& d : truth.required)
        if (!predicted.count(d)) return false;
    for (const std::string& d : predicted)
        if (!truth.required.count(d) && !truth.optional.count(d)) return false;
    return true;
}

std::vector<RelevanceStat> relevance_stats(const std::vector<EvalCase>& cases,
                                           std::size_t resamples,
                                           double confidence,
                                           std::uint64_t seed) {
    std::map<std::string, std::vector<double>> ranks;
    for (const EvalCase& c : cases) {
        for (const EvalRound& round : c.rounds) {
            if (round.relevance.empty()) continue;
            if (round.relevance.size() != 4)
                throw ContractError("case '" + c.id + "': a ranked round names " +
                                    std::to_string(round.relevance.size()) +
                                    " responders, expected 4");
            std::array<int, 5> seen{};
            for (const auto& [name, rank] : round.relevance) {
                if (rank < 1 || rank > 4 || seen[std::size_t(rank)]++)
                    throw ContractError("case '" + c.id +
                                        "': relevance ranks are not a "
                                        "permutation of 1..4");
            }
            for (const auto& [name, rank] : round.relevance)
                ranks[name].push_back(double(rank));
        }
    }

    std::vector<RelevanceStat> out;
    for (const auto& [name, values] : ranks) {
        RelevanceStat stat;
        stat.responder = name;
        stat.n = values.size();
        stat.mean_rank = sample_mean(values);
        stat.ci = bootstrap_ci(values, resamples, confidence,
                               seed ^ fnv1a64(name));
        out.push_back(std::move(stat));
    }
    return out;
}

namespace {

bool round_correct(const EvalCase& c, std::size_t round,
                   const std::string& responder) {
    const auto it = c.rounds[round].predictions.find(responder);
    if (it == c.rounds[round].predictions.end())
        throw ContractError("case '" + c.id + "': round " +
                            std::to_string(round + 1) +
                            " has no prediction from '" + responder + "'");
    return judge_accuracy(it->second, c.truth);
}

}  // namespace

CorrectionStats correction_stats(const std::vector<EvalCase>& cases,
                                 const std::string& responder,
                                 double confidence) {
    CorrectionStats s;
    for (const EvalCase& c : cases) {
        if (c.rounds.size() != 3)
            throw ContractError("case '" + c.id + "': has " +
                                std::to_string(c.rounds.size()) +
                                " rounds, correction analysis needs 3");
        if (round_correct(c, 0, responder)) continue;
        const bool r2 = round_correct(c, 1, responder);
        const bool r3 = round_correct(c, 2, responder);
        s.overall.n++;
        s.round2.n++;
        s.round3.n++;
        if (r2 || r3) s.overall.k++;
        if (r2) s.round2.k++;
        if (r3) s.round3.k++;
    }
    if (s.overall.defined()) {
        s.overall_ci = wilson_interval(s.overall.k, s.overall.n, confidence);
        s.round2_ci = wilson_interval(s.round2.k, s.round2.n, confidence);
        s.round3_ci = wilson_interval(s.round3.k, s.round3.n, confidence);
    }
    return s;
}

MisdiagnosisStats misdiagnosis_rate(const std::vector<EvalCase>& cases,
                                    const std::string& responder,
                                    double confidence) {
    MisdiagnosisStats s;
    for (const EvalCase& c : cases) {
        if (c.truth.required != std::set<std::string>{"Healthy"}) continue;
        if (c.rounds.empty())
            throw ContractError("case '" + c.id + "': has no rounds");
        s.rate.n++;
        if (!round_correct(c, 0, responder)) s.rate.k++;
    }
    if (!s.rate.defined())
        throw ContractError("misdiagnosis_rate: no healthy-truth cases");
    s.ci = wilson_interval(s.rate.k, s.rate.n, confidence);
    return s;
}

namespace {

std::vector<std::string> dedupe(const std::vector<std::string>& universe) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const std::string& s : universe)
        if (seen.insert(s).second) out.push_back(s);
    return out;
}

}  // namespace

std::vector<std::string> build_mcq_options(const GroundTruth& truth,
                                           const std::vector<std::string>& universe,
                                           std::uint64_t seed) {
    if (truth.required.empty())
        throw ContractError("multiple choice needs a correct disease");
    std::vector<std::string> labels = dedupe(universe);
    if (labels.size() < 4)
        throw ContractError("multiple choice needs at least 4 distinct labels, got " +
                            std::to_string(labels.size()));
    std::vector<std::string> pool;
    for (const std::string& l : labels)
        if (!truth.required.count(l)) pool.push_back(l);
    if (pool.size() < 3)
        throw ContractError("multiple choice needs 3 distractors outside the "
                            "correct set, only " +
                            std::to_string(pool.size()) + " available");

    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t j = i + rng() % (pool.size() - i);
        std::swap(pool[i], pool[j]);
    }
    std::vector<std::string> options = {*truth.required.begin(), pool[0],
                                        pool[1], pool[2]};
    for (std::size_t i = 3; i > 0; --i) {
        const std::size_t j = rng() % (i + 1);
        std::swap(options[i], options[j]);
    }
    return options;
}

McqResult multiple_choice_eval(const std::vector<EvalCase>& cases,
                               const std::vector<std::string>& universe,
                               const McqResponder& responder,
                               std::uint64_t seed) {
    if (!responder) throw ContractError("multiple_choice_eval: null responder");
    McqResult result;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const EvalCase& c = cases[i];
        const std::vector<std::string> options = build_mcq_options(
            c.truth, universe, seed ^ ((i + 1) * 0x9e3779b97f4a7c15ull));
        const std::string target = *c.truth.required.begin();
        const std::string pick = responder(c, options);
        const bool correct = pick == target;
        result.overall.n++;
        if (correct) result.overall.k++;
        for (const std::string& disease : c.truth.required) {
            Rate& per = result.per_disease[disease];
            per.n++;
            if (correct) per.k++;
        }
    }
    return result;
}

TaxonomyStats error_taxonomy(const std::vector<EvalCase>& cases,
                             double confidence) {
    TaxonomyStats s;
    for (const EvalCase& c : cases) {
        if (!c.errors.present)
            throw ContractError("case '" + c.id + "': missing error labels");
        s.n++;
        s.cross[std::size_t(c.errors.missed)][std::size_t(c.errors.incorrect)]++;
        if (c.errors.missed == Severity::None) s.missed_error_free.k++;
        if (c.errors.incorrect == Severity::None) s.incorrect_error_free.k++;
    }
    if (s.n == 0) throw ContractError("error_taxonomy: no labeled cases");
    s.missed_error_free.n = s.n;
    s.incorrect_error_free.n = s.n;
    s.missed_ci = wilson_interval(s.missed_error_free.k, s.n, confidence);
    s.incorrect_ci = wilson_interval(s.incorrect_error_free.k, s.n, confidence);
    return s;
}

namespace {

AssistedDelta assisted_delta(const std::vector<const EvalCase*>& cases) {
    AssistedDelta d;
    double t_doc = 0.0, t_both = 0.0;
    for (const EvalCase* c : cases) {
        d.n++;
        t_doc += c->timing.doctor_seconds;
        t_both += c->timing.assisted_seconds;
        d.doctor_accuracy.n++;
        d.assisted_accuracy.n++;
        if (c->timing.doctor_correct) d.doctor_accuracy.k++;
        if (c->timing.assisted_correct) d.assisted_accuracy.k++;
    }
    d.mean_doctor_seconds = t_doc / double(d.n);
    d.mean_assisted_seconds = t_both / double(d.n);
    if (d.mean_doctor_seconds > 0.0) {
        d.time_defined = true;
        d.time_reduction = (d.mean_doctor_seconds - d.mean_assisted_seconds) /
                           d.mean_doctor_seconds;
    }
    d.accuracy_increase_points =
        (d.assisted_accuracy.value() - d.doctor_accuracy.value()) * 100.0;
    return d;
}

}  // namespace

AssistedStats assisted_comparison(const std::vector<EvalCase>& cases) {
    std::vector<const EvalCase*> timed;
    std::map<std::string, std::vector<const EvalCase*>> grouped;
    for (const EvalCase& c : cases) {
        if (!c.timing.present) continue;
        if (c.timing.doctor_seconds < 0.0 || c.timing.assisted_seconds < 0.0)
            throw ContractError("case '" + c.id + "': negative timing");
        timed.push_back(&c);
        const std::string key = c.truth.required.empty()
                                    ? std::string("(unspecified)")
                                    : *c.truth.required.begin();
        grouped[key].push_back(&c);
    }
    if (timed.empty())
        throw ContractError("assisted_comparison: no cases carry timing data");

    AssistedStats s;
    s.overall = assisted_delta(timed);
    for (const auto& [key, group] : grouped)
        s.per_condition.emplace(key, assisted_delta(group));
    return s;
}

// ---- JSONL io ----------------------------------------------------------------

void write_eval_cases(const std::vector<EvalCase>& cases,
                      const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ContractError("cases: cannot open '" + path + "'");
    for (const EvalCase& c : cases) {
        nlohmann::json j;
        j["id"] = c.id;
        j["required"] = c.truth.required;
        j["optional"] = c.truth.optional;
        nlohmann::json rounds = nlohmann::json::array();
        for (const EvalRound& r : c.rounds) {
            nlohmann::json round;
            round["predictions"] = nlohmann::json::object();
            for (const auto& [name, preds] : r.predictions)
                round["predictions"][name] = preds;
            if (!r.relevance.empty()) {
                round["relevance"] = nlohmann::json::object();
                for (const auto& [name, rank] : r.relevance)
                    round["relevance"][name] = rank;
            }
            rounds.push_back(std::move(round));
        }
        j["rounds"] = std::move(rounds);
        if (c.errors.present)
            j["errors"] = {{"missed", severity_name(c.errors.missed)},
                           {"incorrect", severity_name(c.errors.incorrect)}};
        if (c.timing.present)
            j["timing"] = {{"doctor_seconds", c.timing.doctor_seconds},
                           {"assisted_seconds", c.timing.assisted_seconds},
                           {"doctor_correct", c.timing.doctor_correct},
                           {"assisted_correct", c.timing.assisted_correct}};
        f << j.dump() << "\n";
    }
    if (!f) throw ContractError("cases: write to '" + path + "' failed");
}

std::vector<EvalCase> read_eval_cases(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ContractError("cases: cannot open '" + path + "'");
    std::vector<EvalCase> cases;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            EvalCase c;
            c.id = j.at("id").get<std::string>();
            for (const auto& d : j.at("required"))
                c.truth.required.insert(d.get<std::string>());
            for (const auto& d : j.value("optional", nlohmann::json::array()))
                c.truth.optional.insert(d.get<std::string>());
            for (const std::string& d : c.truth.required)
                if (c.truth.optional.count(d))
                    throw ContractError("required and optional overlap on '" +
                                        d + "'");
            for (const auto& jr : j.value("rounds", nlohmann::json::array())) {
                EvalRound round;
                for (const auto& [name, preds] :
                     jr.at("predictions").items()) {
                    std::set<std::string>& target = round.predictions[name];
                    for (const auto& p : preds)
                        target.insert(p.get<std::string>());
                }
                if (jr.contains("relevance"))
                    for (const auto& [name, rank] : jr.at("relevance").items())
                        round.relevance[name] = rank.get<int>();
                c.rounds.push_back(std::move(round));
            }
            if (j.contains("errors")) {
                c.errors.present = true;
                c.errors.missed =
                    parse_severity(j.at("errors").at("missed").get<std::string>());
                c.errors.incorrect = parse_severity(
                    j.at("errors").at("incorrect").get<std::string>());
            }
            if (j.contains("timing")) {
                const auto& t = j.at("timing");
                c.timing.present = true;
                c.timing.doctor_seconds = t.at("doctor_seconds").get<double>();
                c.timing.assisted_seconds = t.at("assisted_seconds").get<double>();
                c.timing.doctor_correct = t.at("doctor_correct").get<bool>();
                c.timing.assisted_correct = t.at("assisted_correct").get<bool>();
                if (c.timing.doctor_seconds < 0.0 ||
                    c.timing.assisted_seconds < 0.0)
                    throw ContractError("negative timing");
            }
            cases.push_back(std::move(c));
        } catch (const nlohmann::json::exception& e) {
            throw CorruptionError("cases: line " + std::to_string(line_no) +
                                  ": " + e.what());
        } catch (const ContractError& e) {
            throw CorruptionError("cases: line " + std::to_string(line_no) +
                                  ": " + e.what());
        }
    }
    return cases;
}

}  // namespace fvlm
