#include "fvlm/tokenizer.hpp"

#include "fvlm/errors.hpp"

namespace fvlm {

std::vector<int> encode_bytes(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

std::string decode_bytes(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t == kEos) break;
        if (t == kBos || t == kPad) continue;
        if (t < 0 || t > 255)
            throw ContractError("decode_bytes: token " + std::to_string(t) +
                                " outside vocabulary");
        out.push_back(static_cast<char>(t));
    }
    return out;
}

TokenStream encode_dialogue(const std::vector<DialogueRound>& rounds) {
    if (rounds.empty()) throw ContractError("encode_dialogue: no rounds");
    TokenStream s;
    s.tokens.push_back(kBos);
    s.is_target.push_back(0);
    for (const DialogueRound& r : rounds) {
        if (r.answer.empty())
            throw ContractError("encode_dialogue: empty answer");
        for (unsigned char c : r.question) {
            s.tokens.push_back(static_cast<int>(c));
            s.is_target.push_back(0);
        }
        for (unsigned char c : r.answer) {
            s.tokens.push_back(static_cast<int>(c));
            s.is_target.push_back(1);
        }
        s.tokens.push_back(kEos);
        s.is_target.push_back(1);
    }
    return s;
}

}  // namespace fvlm
