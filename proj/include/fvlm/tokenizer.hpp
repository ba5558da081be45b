#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fvlm {

// Byte-level vocabulary: raw bytes 0..255 plus three specials.
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr std::size_t kVocabSize = 259;

/// UTF-8 agnostic: every byte becomes one token.
std::vector<int> encode_bytes(const std::string& text);

/// Inverse of encode_bytes; skips BOS/PAD and stops at the first EOS.
std::string decode_bytes(const std::vector<int>& tokens);

struct DialogueRound {
    std::string question;
    std::string answer;
};

struct TokenStream {
    std::vector<int> tokens;            // BOS then per round: Q bytes, A bytes, EOS
    std::vector<std::uint8_t> is_target;  // answer bytes and their EOS
};

/// Training stream for a dialogue; the loss mask covers answers and round EOS.
TokenStream encode_dialogue(const std::vector<DialogueRound>& rounds);

}  // namespace fvlm
