#include "fvlm/assets.hpp"

#include <unordered_map>

#include "fvlm/errors.hpp"

namespace fvlm {

namespace {

#include "assets_data.inc"

// "Prefix, Disease, clause, clause." -> rule; the prefix may be absent
// (one bundled line names the disease first).
DescriptionRule parse_rule(const std::string& line) {
    DescriptionRule rule;
    rule.line = line;
    std::string body = line;
    if (!body.empty() && body.back() == '.') body.pop_back();
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
        std::size_t next = body.find(", ", pos);
        if (next == std::string::npos) {
            parts.push_back(body.substr(pos));
            break;
        }
        parts.push_back(body.substr(pos, next - pos));
        pos = next + 2;
    }
    std::size_t idx = 0;
    if (parts[idx] == "Abnormal") {
        rule.abnormal = true;
        ++idx;
    } else if (parts[idx] == "Normal") {
        rule.abnormal = false;
        ++idx;
    }
    if (idx >= parts.size())
        throw ContractError("malformed description rule: " + line);
    rule.disease = parts[idx++];
    rule.clauses.assign(parts.begin() + static_cast<long>(idx), parts.end());
    return rule;
}

std::vector<DescriptionRule> parse_all(const char* const* lines, std::size_t n) {
    std::vector<DescriptionRule> rules;
    rules.reserve(n);
    for (std::size_t i = 0; i < n; ++i) rules.push_back(parse_rule(lines[i]));
    return rules;
}

const std::unordered_map<std::string, const DescriptionRule*>& rule_index() {
    static const auto index = [] {
        std::unordered_map<std::string, const DescriptionRule*> m;
        for (const DescriptionRule& r : description_rules())
            m.emplace(r.disease, &r);  // first occurrence wins
        for (const DescriptionRule& r : extra_rules()) m.emplace(r.disease, &r);
        return m;
    }();
    return index;
}

SignVector parse_signs(const std::string& names) {
    SignVector v{};
    std::size_t pos = 0;
    while (pos < names.size()) {
        std::size_t next = names.find(',', pos);
        if (next == std::string::npos) next = names.size();
        const std::string name = names.substr(pos, next - pos);
        bool found = false;
        for (std::size_t k = 0; k < kSignCount; ++k) {
            if (name == kSignNames[k]) {
                v[k] = 1;
                found = true;
                break;
            }
        }
        if (!found) throw ContractError("unknown sign category '" + name + "'");
        pos = next + 1;
    }
    return v;
}

}  // namespace

const std::vector<DescriptionRule>& description_rules() {
    static const auto rules =
        parse_all(kDescriptionRules, std::size(kDescriptionRules));
    return rules;
}

const std::vector<DescriptionRule>& extra_rules() {
    static const auto rules = parse_all(kExtraRules, std::size(kExtraRules));
    return rules;
}

const DescriptionRule* find_rule(const std::string& disease) {
    const auto& idx = rule_index();
    auto it = idx.find(disease);
    return it == idx.end() ? nullptr : it->second;
}

const std::vector<std::string>& short_instructions() {
    static const std::vector<std::string> v(std::begin(kShortInstructions),
                                            std::end(kShortInstructions));
    return v;
}

const std::vector<std::string>& long_instructions() {
    static const std::vector<std::string> v(std::begin(kLongInstructions),
                                            std::end(kLongInstructions));
    return v;
}

const std::string& dialogue_prompt() {
    static const std::string p = kDialoguePrompt;
    return p;
}

SignVector signs_for(const std::string& disease) {
    static const auto table = [] {
        std::unordered_map<std::string, SignVector> m;
        for (const auto& row : kSignMap) m.emplace(row[0], parse_signs(row[1]));
        return m;
    }();
    auto it = table.find(disease);
    if (it == table.end())
        throw ContractError("no sign mapping for disease '" + disease + "'");
    return it->second;
}

const std::vector<std::string>& mapped_diseases() {
    static const auto names = [] {
        std::vector<std::string> v;
        for (const auto& row : kSignMap) v.emplace_back(row[0]);
        return v;
    }();
    return names;
}

}  // namespace fvlm
