#include "fvlm/forge.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <sstream>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fvlm/errors.hpp"

namespace fvlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kModalityNames[] = {"CT",  "FA",  "Fundus",    "MRI",  "OCT",
                                          "Pathology", "PET", "X-ray", "TableChart"};

std::size_t word_count(const std::string& text) {
    std::istringstream in(text);
    std::string w;
    std::size_t n = 0;
    while (in >> w) ++n;
    return n;
}

}  // namespace

const char* modality_name(Modality m) {
    return kModalityNames[static_cast<std::size_t>(m)];
}

Modality parse_modality(const std::string& name) {
    for (std::size_t i = 0; i < std::size(kModalityNames); ++i)
        if (name == kModalityNames[i]) return static_cast<Modality>(i);
    throw ContractError("unknown modality '" + name + "'");
}

std::string build_description(const std::vector<std::string>& diseases,
                              bool abnormal) {
    if (diseases.empty()) {
        if (abnormal)
            throw ContractError(
                "build_description: abnormal record needs at least one disease");
        return find_rule("Healthy")->line;
    }
    if (diseases.size() == 1 && diseases[0] == "Healthy")
        return find_rule("Healthy")->line;

    std::string out = abnormal ? "Abnormal" : "Normal";
    for (const std::string& d : diseases) {
        if (d == "Healthy")
            throw ContractError(
                "build_description: Healthy cannot combine with other diseases");
        const DescriptionRule* rule = find_rule(d);
        if (!rule)
            throw ContractError("build_description: no rule for disease '" + d + "'");
        out += ", " + d;
        for (const std::string& clause : rule->clauses) out += ", " + clause;
    }
    return out + ".";
}

SignVector derive_signs(const std::vector<std::string>& diseases) {
    SignVector v{};
    if (diseases.empty()) {
        v[static_cast<std::size_t>(Sign::Other)] = 1;
        return v;
    }
    for (const std::string& d : diseases) {
        const SignVector s = signs_for(d);
        for (std::size_t k = 0; k < kSignCount; ++k) v[k] |= s[k];
    }
    return v;
}

std::string render_dialogue_prompt(const std::string& keyword) {
    const std::string& tmpl = dialogue_prompt();
    const std::string marker = "[Keyword]";
    const std::size_t pos = tmpl.find(marker);
    std::string out = tmpl;
    out.replace(pos, marker.size(), keyword);
    return out;
}

namespace {

const std::string kKeywordLead = "The fundus information is as follows: ";
const std::string kKeywordTail = ". You are an ophthalmologist";

std::string extract_keyword(const std::string& prompt) {
    const std::size_t a = prompt.find(kKeywordLead);
    const std::size_t b = prompt.find(kKeywordTail);
    if (a == std::string::npos || b == std::string::npos || b <= a)
        throw ContractError("dialogue prompt is missing the keyword frame");
    const std::size_t start = a + kKeywordLead.size();
    return prompt.substr(start, b - start);
}

void validate_rounds(const std::vector<DialogueRound>& rounds) {
    if (rounds.size() != 3)
        throw ContractError("dialogue generator returned " +
                            std::to_string(rounds.size()) + " rounds, expected 3");
    for (std::size_t i = 0; i < rounds.size(); ++i) {
        if (rounds[i].question.empty() || rounds[i].answer.empty())
            throw ContractError("dialogue round " + std::to_string(i + 1) +
                                " has an empty question or answer");
        if (word_count(rounds[i].answer) > 200)
            throw ContractError("dialogue round " + std::to_string(i + 1) +
                                " answer exceeds 200 words");
    }
}

}  // namespace

std::vector<DialogueRound> TemplateGenerator::generate(const std::string& prompt) {
    const std::string keyword = extract_keyword(prompt);
    // keyword ends with '.'; body drops the Normal/Abnormal prefix.
    std::string body = keyword;
    if (!body.empty() && body.back() == '.') body.pop_back();
    bool normal = body.rfind("Normal, ", 0) == 0;
    if (normal)
        body = body.substr(8);
    else if (body.rfind("Abnormal, ", 0) == 0)
        body = body.substr(10);

    std::vector<DialogueRound> rounds(3);
    rounds[0].question = "Could you describe what my fundus image shows?";
    rounds[0].answer = "Based on the image, the assessment is: " + keyword +
                       (normal ? " No disease findings are present."
                               : " These findings merit clinical attention.");
    rounds[1].question =
        "Which specific signs in the image support this assessment, and why?";
    rounds[1].answer =
        "The assessment rests on the following observations: " + body +
        ". Each of these findings is read directly from the fundus photograph.";
    rounds[2].question = "What should I do next about these findings?";
    rounds[2].answer =
        normal ? "No treatment is indicated. Keep up routine eye examinations and "
                 "return if you notice changes in your vision."
               : "Please arrange a prompt consultation with an ophthalmologist to "
                 "confirm these findings and discuss a tailored treatment plan. "
                 "Earlier review is warranted if symptoms worsen.";
    return rounds;
}

HttpGenerator::HttpGenerator(std::string endpoint) {
    std::string rest = endpoint;
    const std::string scheme = "http://";
    if (rest.rfind(scheme, 0) == 0) rest = rest.substr(scheme.size());
    const std::size_t slash = rest.find('/');
    path_ = slash == std::string::npos ? "/generate" : rest.substr(slash);
    std::string hostport = rest.substr(0, slash);
    const std::size_t colon = hostport.rfind(':');
    if (colon == std::string::npos) {
        host_ = hostport;
    } else {
        host_ = hostport.substr(0, colon);
        port_ = std::atoi(hostport.c_str() + colon + 1);
    }
    if (host_.empty() || port_ <= 0)
        throw ContractError("invalid dialogue generator endpoint '" + endpoint + "'");
}

std::vector<DialogueRound> HttpGenerator::generate(const std::string& prompt) {
    httplib::Client client(host_, port_);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(30, 0);
    json body = {{"prompt", prompt}};
    auto res = client.Post(path_, body.dump(), "application/json");
    if (!res)
        throw TransportError("dialogue generator at " + host_ + ":" +
                             std::to_string(port_) + " unreachable: " +
                             httplib::to_string(res.error()));
    if (res->status != 200)
        throw TransportError("dialogue generator returned HTTP " +
                             std::to_string(res->status));
    json reply = json::parse(res->body, nullptr, false);
    if (reply.is_discarded() || !reply.contains("rounds") ||
        !reply["rounds"].is_array())
        throw TransportError("dialogue generator reply is not {\"rounds\": [...]}");
    std::vector<DialogueRound> rounds;
    for (const json& r : reply["rounds"])
        rounds.push_back({r.at("question").get<std::string>(),
                          r.at("answer").get<std::string>()});
    return rounds;
}

std::unique_ptr<DialogueGenerator> default_generator() {
    const char* endpoint = std::getenv(kGeneratorEnv);
    if (endpoint && *endpoint)
        return std::make_unique<HttpGenerator>(endpoint);
    return std::make_unique<TemplateGenerator>();
}

std::vector<DialogueRound> build_dialogue(const std::string& description,
                                          DialogueGenerator& generator) {
    const std::string prompt = render_dialogue_prompt(description);
    std::vector<DialogueRound> rounds;
    try {
        rounds = generator.generate(prompt);
    } catch (const std::exception& first) {
        try {
            rounds = generator.generate(prompt);
        } catch (const std::exception& second) {
            throw TransportError(std::string("dialogue generation failed twice: ") +
                                 first.what() + " / " + second.what());
        }
    }
    validate_rounds(rounds);
    return rounds;
}

std::string clean_caption(const std::string& text) {
    static const std::regex words(
        R"(\b(arrow|line|star|red|yellow|blue|orange|green|purple|violet|black|white|gray)\b)",
        std::regex::icase);
    std::string stripped = std::regex_replace(text, words, "");
    std::string out;
    out.reserve(stripped.size());
    bool in_space = false;
    for (char c : stripped) {
        if (c == ' ' || c == '\t') {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(c);
    }
    return out;
}

std::string prepend_modality(const std::string& caption, Modality modality) {
    if (modality == Modality::TableChart)
        throw ContractError("prepend_modality: TableChart pairs are discarded, not "
                            "captioned");
    return std::string("This is a ") + modality_name(modality) + " image. " + caption;
}

std::vector<PretrainPair> filter_modality(const std::vector<PretrainPair>& pairs,
                                          double threshold) {
    if (threshold < 0.0 || threshold > 1.0)
        throw ContractError("filter_modality: threshold " +
                            std::to_string(threshold) + " outside [0,1]");
    std::vector<PretrainPair> kept;
    for (const PretrainPair& p : pairs)
        if (p.modality != Modality::TableChart && p.confidence >= threshold)
            kept.push_back(p);
    return kept;
}

const std::string& select_instruction(const std::string& answer, std::uint64_t seed) {
    if (answer.empty()) throw ContractError("select_instruction: empty answer");
    const auto& pool =
        word_count(answer) >= 30 ? long_instructions() : short_instructions();
    std::mt19937_64 rng(seed);
    return pool[rng() % pool.size()];
}

// ---- corpus construction ----------------------------------------------------

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (i + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace

std::vector<FundusRecord> forge_fundus_records(const ForgeOptions& opt) {
    if (opt.count == 0) throw ContractError("forge: record count must be positive");
    std::unique_ptr<DialogueGenerator> owned;
    DialogueGenerator* gen = opt.generator;
    if (!gen) {
        owned = default_generator();
        gen = owned.get();
    }
    // Disease pool: every mapped disease except the healthy marker.
    std::vector<std::string> pool;
    for (const std::string& d : mapped_diseases())
        if (d != "Healthy") pool.push_back(d);

    if (!opt.ppm_dir.empty()) fs::create_directories(opt.ppm_dir);

    std::mt19937_64 rng(opt.seed);
    std::vector<FundusRecord> records;
    records.reserve(opt.count);
    for (std::size_t i = 0; i < opt.count; ++i) {
        FundusRecord rec;
        const bool healthy = rng() % 5 == 0;
        if (!healthy) {
            const std::size_t n = 1 + rng() % 2;
            while (rec.diseases.size() < n) {
                const std::string& cand = pool[rng() % pool.size()];
                if (std::find(rec.diseases.begin(), rec.diseases.end(), cand) ==
                    rec.diseases.end())
                    rec.diseases.push_back(cand);
            }
            rec.abnormal = true;
        }
        rec.description = build_description(rec.diseases, rec.abnormal);
        rec.signs = derive_signs(rec.diseases);
        rec.dialogue = build_dialogue(rec.description, *gen);
        Image img = synthetic_image(opt.image_size, mix_seed(opt.seed, i));
        if (opt.ppm_dir.empty()) {
            rec.image.inline_image = std::move(img);
        } else {
            char name[32];
            std::snprintf(name, sizeof(name), "rec_%05zu.ppm", i);
            write_ppm(img, (fs::path(opt.ppm_dir) / name).string());
            rec.image.path = (fs::path(opt.ppm_dir).filename() / name).string();
        }
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<PretrainPair> forge_pretrain_pairs(std::size_t count, std::uint64_t seed,
                                               std::size_t image_size) {
    if (count == 0) throw ContractError("forge: pair count must be positive");
    std::mt19937_64 rng(seed);
    const auto& rules = description_rules();
    static const char* kNoiseLead[] = {"red arrow indicates", "white star marks",
                                       "yellow line traces", ""};
    std::vector<PretrainPair> pairs;
    pairs.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        PretrainPair p;
        const std::size_t kind = rng() % 10;
        if (kind == 0)
            p.modality = Modality::TableChart;
        else if (kind == 1)
            p.modality = static_cast<Modality>(rng() % 8);
        else
            p.modality = Modality::Fundus;
        p.confidence = static_cast<double>(rng() % 1001) / 1000.0;
        const DescriptionRule& rule = rules[rng() % rules.size()];
        const char* lead = kNoiseLead[rng() % std::size(kNoiseLead)];
        p.caption = std::string(lead);
        if (!p.caption.empty()) p.caption += " ";
        p.caption += rule.clauses.empty() ? rule.disease : rule.clauses.front();
        p.image.inline_image = synthetic_image(image_size, mix_seed(seed ^ 0xabcd, i));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---- serialization ----------------------------------------------------------

namespace {

json image_to_json(const ImageRef& ref) {
    if (ref.is_inline()) {
        json px = json::array();
        for (double v : ref.inline_image.pixels)
            px.push_back(static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
        return json{{"size", ref.inline_image.width}, {"data", std::move(px)}};
    }
    return json(ref.path);
}

ImageRef image_from_json(const json& j, const char* where) {
    ImageRef ref;
    if (j.is_string()) {
        ref.path = j.get<std::string>();
        return ref;
    }
    if (!j.is_object() || !j.contains("size") || !j.contains("data"))
        throw CorruptionError(std::string(where) +
                              ": image must be a path or {size, data}");
    const std::size_t side = j["size"].get<std::size_t>();
    const auto& data = j["data"];
    if (data.size() != side * side * 3)
        throw CorruptionError(std::string(where) + ": inline image holds " +
                              std::to_string(data.size()) + " bytes for side " +
                              std::to_string(side));
    ref.inline_image.width = ref.inline_image.height = side;
    ref.inline_image.pixels.reserve(data.size());
    for (const json& v : data)
        ref.inline_image.pixels.push_back(v.get<double>() / 255.0);
    return ref;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("cannot open " + path + " for writing");
    return out;
}

std::ifstream open_in(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptionError("cannot open " + path);
    return in;
}

}  // namespace

void write_fundus_corpus(const std::vector<FundusRecord>& records,
                         const std::string& path) {
    std::ofstream out = open_out(path);
    for (const FundusRecord& r : records) {
        json rounds = json::array();
        for (const DialogueRound& d : r.dialogue)
            rounds.push_back({{"question", d.question}, {"answer", d.answer}});
        json j{{"image", image_to_json(r.image)},
               {"diseases", r.diseases},
               {"abnormal", r.abnormal},
               {"signs", r.signs},
               {"description", r.description},
               {"dialogue", std::move(rounds)}};
        out << j.dump() << "\n";
    }
}

std::vector<FundusRecord> read_fundus_corpus(const std::string& path) {
    std::ifstream in = open_in(path);
    std::vector<FundusRecord> records;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw CorruptionError(path + ":" + std::to_string(lineno) +
                                  ": malformed JSON record");
        FundusRecord r;
        const std::string where = path + ":" + std::to_string(lineno);
        try {
            r.image = image_from_json(j.at("image"), where.c_str());
            r.diseases = j.at("diseases").get<std::vector<std::string>>();
            r.abnormal = j.at("abnormal").get<bool>();
            const auto signs = j.at("signs").get<std::vector<int>>();
            if (signs.size() != kSignCount)
                throw CorruptionError(where + ": sign vector has " +
                                      std::to_string(signs.size()) + " slots");
            std::copy(signs.begin(), signs.end(), r.signs.begin());
            r.description = j.at("description").get<std::string>();
            for (const json& d : j.at("dialogue"))
                r.dialogue.push_back({d.at("question").get<std::string>(),
                                      d.at("answer").get<std::string>()});
        } catch (const json::exception& e) {
            throw CorruptionError(where + ": " + e.what());
        }
        records.push_back(std::move(r));
    }
    return records;
}

void write_pretrain_corpus(const std::vector<PretrainPair>& pairs,
                           const std::string& path) {
    std::ofstream out = open_out(path);
    for (const PretrainPair& p : pairs) {
        json j{{"image", image_to_json(p.image)},
               {"caption", p.caption},
               {"modality", modality_name(p.modality)},
               {"confidence", p.confidence}};
        out << j.dump() << "\n";
    }
}

std::vector<PretrainPair> read_pretrain_corpus(const std::string& path) {
    std::ifstream in = open_in(path);
    std::vector<PretrainPair> pairs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw CorruptionError(path + ":" + std::to_string(lineno) +
                                  ": malformed JSON record");
        PretrainPair p;
        const std::string where = path + ":" + std::to_string(lineno);
        try {
            p.image = image_from_json(j.at("image"), where.c_str());
            p.caption = j.at("caption").get<std::string>();
            p.modality = parse_modality(j.at("modality").get<std::string>());
            p.confidence = j.at("confidence").get<double>();
        } catch (const json::exception& e) {
            throw CorruptionError(where + ": " + e.what());
        }
        if (p.confidence < 0.0 || p.confidence > 1.0)
            throw CorruptionError(where + ": confidence outside [0,1]");
        pairs.push_back(std::move(p));
    }
    return pairs;
}

Image load_image(const ImageRef& ref, const std::string& corpus_dir) {
    if (ref.is_inline()) return ref.inline_image;
    if (ref.path.empty()) throw ContractError("record has no image");
    fs::path p(ref.path);
    if (p.is_relative() && !corpus_dir.empty()) p = fs::path(corpus_dir) / p;
    return read_ppm(p.string());
}

std::vector<ValidationIssue> validate_corpus(
    const std::vector<FundusRecord>& records) {
    std::vector<ValidationIssue> issues;
    auto flag = [&issues](std::size_t i, std::string msg) {
        issues.push_back({i, std::move(msg)});
    };
    for (std::size_t i = 0; i < records.size(); ++i) {
        const FundusRecord& r = records[i];
        if (r.dialogue.size() != 3)
            flag(i, "dialogue has " + std::to_string(r.dialogue.size()) +
                        " rounds, expected 3");
        for (std::size_t k = 0; k < r.dialogue.size(); ++k) {
            if (r.dialogue[k].question.empty() || r.dialogue[k].answer.empty())
                flag(i, "round " + std::to_string(k + 1) + " is empty");
            else if (word_count(r.dialogue[k].answer) > 200)
                flag(i, "round " + std::to_string(k + 1) + " answer exceeds 200 words");
        }
        const bool prefix_normal = r.description.rfind("Normal", 0) == 0;
        const bool prefix_abnormal = r.description.rfind("Abnormal", 0) == 0;
        if (!prefix_normal && !prefix_abnormal)
            flag(i, "description does not begin with Normal or Abnormal");
        else if (r.abnormal != prefix_abnormal)
            flag(i, "abnormal flag disagrees with description prefix");
        bool known = true;
        for (const std::string& d : r.diseases) {
            if (!find_rule(d)) {
                flag(i, "unknown disease '" + d + "'");
                known = false;
            }
        }
        if (known) {
            SignVector expect{};
            try {
                expect = derive_signs(r.diseases);
            } catch (const std::exception& e) {
                flag(i, e.what());
                known = false;
            }
            if (known && expect != r.signs)
                flag(i, "stored signs disagree with the mapping table");
        }
        bool any = false;
        for (int s : r.signs) any = any || s != 0;
        if (!any) flag(i, "no sign category set");
        if (!r.image.present()) flag(i, "record has no image");
    }
    return issues;
}

}  // namespace fvlm
