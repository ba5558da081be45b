#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "fvlm/assets.hpp"
#include "fvlm/image.hpp"
#include "fvlm/tokenizer.hpp"

namespace fvlm {

enum class Modality { CT, FA, Fundus, MRI, OCT, Pathology, PET, XRay, TableChart };

const char* modality_name(Modality m);
Modality parse_modality(const std::string& name);

/// Either a path (relative to its corpus file) or inline pixels.
struct ImageRef {
    std::string path;
    Image inline_image;

    bool is_inline() const { return inline_image.valid() && inline_image.width > 0; }
    bool present() const { return is_inline() || !path.empty(); }
};

struct FundusRecord {
    ImageRef image;
    std::vector<std::string> diseases;
    bool abnormal = false;
    SignVector signs{};
    std::string description;
    std::vector<DialogueRound> dialogue;
};

struct PretrainPair {
    ImageRef image;
    std::string caption;
    Modality modality = Modality::Fundus;
    double confidence = 1.0;
};

// ---- description / sign derivation ----------------------------------------

/// "Abnormal, <disease>, <clauses>, ..." in input order; [] + normal flag (or
/// ["Healthy"]) yields the bundled healthy line. Unknown disease -> ContractError.
std::string build_description(const std::vector<std::string>& diseases, bool abnormal);

/// Union of the per-disease sign assignments; empty input -> only Other set.
SignVector derive_signs(const std::vector<std::string>& diseases);

// ---- dialogue --------------------------------------------------------------

/// The bundled prompt with "[Keyword]" substituted.
std::string render_dialogue_prompt(const std::string& keyword);

struct DialogueGenerator {
    virtual ~DialogueGenerator() = default;
    virtual std::vector<DialogueRound> generate(const std::string& prompt) = 0;
};

/// Deterministic offline generator: three templated rounds (diagnosis,
/// supporting signs, advice) whose answers embed the description.
class TemplateGenerator : public DialogueGenerator {
public:
    std::vector<DialogueRound> generate(const std::string& prompt) override;
};

/// POSTs {"prompt": ...} to an HTTP endpoint and expects {"rounds": [...]}.
class HttpGenerator : public DialogueGenerator {
public:
    explicit HttpGenerator(std::string endpoint);
    std::vector<DialogueRound> generate(const std::string& prompt) override;

private:
    std::string host_;
    int port_ = 80;
    std::string path_;
};

/// Name of the environment variable holding the optional generator endpoint.
inline constexpr const char* kGeneratorEnv = "FUNDUSVLM_GENERATOR";

/// HttpGenerator when the endpoint env var is set, TemplateGenerator otherwise.
std::unique_ptr<DialogueGenerator> default_generator();

/// Renders the prompt for `description`, queries the generator (one retry on
/// failure), and validates: exactly 3 rounds, answers nonempty and <= 200 words.
std::vector<DialogueRound> build_dialogue(const std::string& description,
                                          DialogueGenerator& generator);

// ---- pretrain caption processing -------------------------------------------

/// Removes listed marker/color words (whole-word, case-insensitive) and
/// collapses the whitespace they leave behind. Idempotent.
std::string clean_caption(const std::string& text);

/// "This is a <Modality> image. " + caption. TableChart -> ContractError.
std::string prepend_modality(const std::string& caption, Modality modality);

/// Keeps pairs with modality != TableChart and confidence >= threshold.
std::vector<PretrainPair> filter_modality(const std::vector<PretrainPair>& pairs,
                                          double threshold);

/// Short/long instruction choice: answers with >= 30 words draw (seeded)
/// from the long templates, shorter ones from the short templates.
const std::string& select_instruction(const std::string& answer, std::uint64_t seed);

// ---- corpus construction and serialization ---------------------------------

struct ForgeOptions {
    std::size_t count = 100;
    std::uint64_t seed = 42;
    std::size_t image_size = 32;
    std::string ppm_dir;  // empty: inline pixels; else PPMs written here
    DialogueGenerator* generator = nullptr;  // nullptr: default_generator()
};

std::vector<FundusRecord> forge_fundus_records(const ForgeOptions& opt);
std::vector<PretrainPair> forge_pretrain_pairs(std::size_t count, std::uint64_t seed,
                                               std::size_t image_size);

void write_fundus_corpus(const std::vector<FundusRecord>& records,
                         const std::string& path);
std::vector<FundusRecord> read_fundus_corpus(const std::string& path);
void write_pretrain_corpus(const std::vector<PretrainPair>& pairs,
                           const std::string& path);
std::vector<PretrainPair> read_pretrain_corpus(const std::string& path);

/// Loads a record's pixels (inline or from its PPM next to the corpus).
Image load_image(const ImageRef& ref, const std::string& corpus_dir);

struct ValidationIssue {
    std::size_t record = 0;
    std::string message;
};

/// Structural checks: 3 dialogue rounds, description prefix, sign consistency,
/// known diseases, image presence. Empty result means the corpus is clean.
std::vector<ValidationIssue> validate_corpus(const std::vector<FundusRecord>& records);

}  // namespace fvlm
