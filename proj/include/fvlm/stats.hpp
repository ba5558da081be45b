#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fvlm {

// ---- evaluation cases -------------------------------------------------------

struct GroundTruth {
    std::set<std::string> required;  // every diagnosable disease
    std::set<std::string> optional;  // acceptable but unnecessary extras
};

struct EvalRound {
    std::map<std::string, std::set<std::string>> predictions;  // responder -> set
    std::map<std::string, int> relevance;  // responder -> rank, 4 = best
};

enum class Severity { None, Minor, Major };

const char* severity_name(Severity s);
Severity parse_severity(const std::string& name);

struct ErrorLabels {
    bool present = false;
    Severity missed = Severity::None;
    Severity incorrect = Severity::None;
};

struct AssistedTiming {
    bool present = false;
    double doctor_seconds = 0.0;
    double assisted_seconds = 0.0;
    bool doctor_correct = false;
    bool assisted_correct = false;
};

struct EvalCase {
    std::string id;
    GroundTruth truth;
    std::vector<EvalRound> rounds;
    ErrorLabels errors;
    AssistedTiming timing;
};

void write_eval_cases(const std::vector<EvalCase>& cases, const std::string& path);
std::vector<EvalCase> read_eval_cases(const std::string& path);

// ---- primitive statistics ---------------------------------------------------

/// Exact k-of-n pair kept beside every reported rate.
struct Rate {
    std::size_t k = 0;
    std::size_t n = 0;
    bool defined() const { return n > 0; }
    double value() const;  // ContractError when undefined
};

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

struct WilsonInterval {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    double confidence = 0.0;
};

/// Inverse standard normal CDF (Acklam's rational approximation plus one
/// Halley refinement); p must lie strictly inside (0, 1).
double normal_quantile(double p);

/// Wilson score interval; k == 0 and k == n pin the touched bound exactly.
WilsonInterval wilson_interval(std::size_t successes, std::size_t n,
                               double confidence);

/// Percentile bootstrap of the mean with type-7 quantile interpolation.
Interval bootstrap_ci(const std::vector<double>& values, std::size_t resamples,
                      double confidence, std::uint64_t seed);

/// Welch's two-sided t-test. Both samples degenerate: p = 1 when the means
/// agree, 0 when they differ.
double t_test_two_sided(const std::vector<double>& a,
                        const std::vector<double>& b);

/// Two-sided z-style comparison of two proportions whose standard errors are
/// read off the Wilson interval half-widths at the same confidence.
double proportion_test(std::size_t k1, std::size_t n1, std::size_t k2,
                       std::size_t n2, double confidence = 0.95);

// ---- clinical metrics ---------------------------------------------------------

/// Correct iff required ⊆ predicted ⊆ required ∪ optional.
bool judge_accuracy(const std::set<std::string>& predicted,
                    const GroundTruth& truth);

struct RelevanceStat {
    std::string responder;
    double mean_rank = 0.0;
    Interval ci;
    std::size_t n = 0;  // ranked rounds
};

/// Mean relevance rank per responder over every ranked round, with a
/// bootstrap CI. Each ranked round must carry a permutation of 1..4.
std::vector<RelevanceStat> relevance_stats(const std::vector<EvalCase>& cases,
                                           std::size_t resamples = 10000,
                                           double confidence = 0.95,
                                           std::uint64_t seed = 42);

struct CorrectionStats {
    Rate overall;  // corrected in round 2 or 3; n = wrong-in-round-1 cases
    Rate round2;
    Rate round3;  // unconditional on round 2
    WilsonInterval overall_ci{};
    WilsonInterval round2_ci{};
    WilsonInterval round3_ci{};
};

/// Follow-up correction rates for one responder over 3-round cases. With no
/// round-1 failures the rates stay undefined (n = 0) rather than numeric.
CorrectionStats correction_stats(const std::vector<EvalCase>& cases,
                                 const std::string& responder,
                                 double confidence = 0.95);

struct MisdiagnosisStats {
    Rate rate;  // wrong round-1 calls among healthy-truth cases
    WilsonInterval ci;
};

/// 1 - accuracy over the healthy-truth subset, judged on round 1.
MisdiagnosisStats misdiagnosis_rate(const std::vector<EvalCase>& cases,
                                    const std::string& responder,
                                    double confidence = 0.95);

/// Four options: the case's first required disease plus three seeded
/// distractors drawn from the universe minus every required disease.
std::vector<std::string> build_mcq_options(const GroundTruth& truth,
                                           const std::vector<std::string>& universe,
                                           std::uint64_t seed);

using McqResponder = std::function<std::string(
    const EvalCase&, const std::vector<std::string>& options)>;

struct McqResult {
    Rate overall;
    std::map<std::string, Rate> per_disease;  // a case counts toward every required disease
};

McqResult multiple_choice_eval(const std::vector<EvalCase>& cases,
                               const std::vector<std::string>& universe,
                               const McqResponder& responder,
                               std::uint64_t seed);

struct TaxonomyStats {
    std::size_t n = 0;
    Rate missed_error_free;
    Rate incorrect_error_free;
    WilsonInterval missed_ci;
    WilsonInterval incorrect_ci;
    // cross[missed severity][incorrect severity], indexed None/Minor/Major
    std::array<std::array<std::size_t, 3>, 3> cross{};
};

TaxonomyStats error_taxonomy(const std::vector<EvalCase>& cases,
                             double confidence = 0.95);

struct AssistedDelta {
    std::size_t n = 0;
    double mean_doctor_seconds = 0.0;
    double mean_assisted_seconds = 0.0;
    bool time_defined = false;
    double time_reduction = 0.0;  // (t_doc - t_assisted) / t_doc
    Rate doctor_accuracy;
    Rate assisted_accuracy;
    double accuracy_increase_points = 0.0;
};

struct AssistedStats {
    AssistedDelta overall;
    std::map<std::string, AssistedDelta> per_condition;
};

AssistedStats assisted_comparison(const std::vector<EvalCase>& cases);

}  // namespace fvlm
