#pragma once

#include <array>
#include <string>
#include <vector>

namespace fvlm {

inline constexpr std::size_t kSignCount = 6;

// Canonical slot order of the six sign categories.
enum class Sign : std::size_t { Vascular = 0, Macular, FBC, OCD, FHE, Other };

inline constexpr std::array<const char*, kSignCount> kSignNames = {
    "Vascular", "Macular", "FBC", "OCD", "FHE", "Other"};

using SignVector = std::array<int, kSignCount>;

struct DescriptionRule {
    std::string disease;
    std::vector<std::string> clauses;
    bool abnormal = true;
    std::string line;  // the bundled source string, verbatim
};

/// The 61 bundled description rules, in bundled order.
const std::vector<DescriptionRule>& description_rules();
/// Supplemental rules for diseases referenced outside the main list.
const std::vector<DescriptionRule>& extra_rules();
/// Lookup across both lists; first occurrence wins for duplicate names.
const DescriptionRule* find_rule(const std::string& disease);

const std::vector<std::string>& short_instructions();
const std::vector<std::string>& long_instructions();
const std::string& dialogue_prompt();

/// Signs assigned to one disease by the bundled mapping table.
SignVector signs_for(const std::string& disease);

/// Names of all mapped diseases, in bundled order.
const std::vector<std::string>& mapped_diseases();

}  // namespace fvlm
