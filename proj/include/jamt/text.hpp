#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "jamt/error.hpp"

namespace jamt {

enum class TextVariant { normalized, punctuated };

struct TokenSequence {
    std::vector<int> ids;
    TextVariant variant = TextVariant::punctuated;
};

struct NormalizationRules {
    // keys are UTF-8 codepoint strings, values ASCII placeholder tokens
    std::map<std::string, std::string> umlaut_map;
    bool ascii_only = true;
    bool lowercase = false;
    bool strip_punct = false;

    static NormalizationRules defaults();
};

// The punctuation characters handled by strip_punctuation and the rules.
const std::string& punctuation_chars();

std::string normalize_text(const std::string& s, const NormalizationRules& rules);

// Removes punctuation characters and lowercases (ASCII case only).
std::string strip_punctuation(const std::string& s);

// Keeps the first occurrence of each line, preserving order.
std::vector<std::string> dedup_corpus(const std::vector<std::string>& lines);

// Drops words longer than max_chars codepoints; max_chars <= 0 disables.
std::vector<std::string> filter_long_words(const std::vector<std::string>& lines, int max_chars);

// Byte-pair tokenizer over whitespace-split words. Word-final symbols carry
// a "</w>" marker. Merge rules are stored and matched on marker-stripped
// spellings; a merged symbol inherits the marker of its right constituent.
class BpeModel {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;
    static constexpr const char* marker = "</w>";

    static BpeModel train(const std::vector<std::string>& corpus, int merges);

    TokenSequence encode(const std::string& s, TextVariant variant = TextVariant::punctuated) const;
    std::string decode(const TokenSequence& t) const;
    std::string decode(const std::vector<int>& ids) const;

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::vector<std::string>& id_to_token() const { return id_to_token_; }
    int token_id(const std::string& token) const;

    void save(const std::string& path) const;
    static BpeModel load(const std::string& path);

private:
    void build_index();

    std::vector<std::pair<std::string, std::string>> merges_;
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// Splits on whitespace, collapsing runs; no empty words.
std::vector<std::string> split_words(const std::string& s);

// Splits a UTF-8 string into codepoint strings; invalid bytes pass through
// as single-byte units.
std::vector<std::string> utf8_codepoints(const std::string& s);

}  // namespace jamt
