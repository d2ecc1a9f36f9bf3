#include "jamt/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace jamt {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

int utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xe) return 3;
    if ((lead >> 3) == 0x1e) return 4;
    return 1;
}

std::string collapse_whitespace(const std::string& s) {
    std::string out;
    bool pending = false;
    for (char c : s) {
        if (is_space(c)) {
            pending = !out.empty();
        } else {
            if (pending) out.push_back(' ');
            pending = false;
            out.push_back(c);
        }
    }
    return out;
}

}  // namespace

std::vector<std::string> utf8_codepoints(const std::string& s) {
    std::vector<std::string> cps;
    std::size_t i = 0;
    while (i < s.size()) {
        std::size_t n = static_cast<std::size_t>(utf8_len(static_cast<unsigned char>(s[i])));
        if (i + n > s.size()) n = 1;
        cps.push_back(s.substr(i, n));
        i += n;
    }
    return cps;
}

const std::string& punctuation_chars() {
    static const std::string chars = ".,?!;:\"'()-";
    return chars;
}

NormalizationRules NormalizationRules::defaults() {
    NormalizationRules r;
    r.umlaut_map = {{"ä", "<ae>"}, {"ö", "<oe>"}, {"ü", "<ue>"}, {"ß", "<ss>"}};
    r.ascii_only = true;
    return r;
}

std::string normalize_text(const std::string& s, const NormalizationRules& rules) {
    std::string out;
    out.reserve(s.size());
    for (const std::string& cp : utf8_codepoints(s)) {
        auto it = rules.umlaut_map.find(cp);
        if (it != rules.umlaut_map.end()) {
            out += it->second;
            continue;
        }
        if (cp.size() > 1 || static_cast<unsigned char>(cp[0]) >= 0x80) {
            if (rules.ascii_only) continue;
            out += cp;
            continue;
        }
        char c = cp[0];
        if (rules.strip_punct && punctuation_chars().find(c) != std::string::npos) continue;
        if (rules.lowercase) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(c);
    }
    return collapse_whitespace(out);
}

std::string strip_punctuation(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (punctuation_chars().find(c) != std::string::npos) continue;
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return collapse_whitespace(out);
}

std::vector<std::string> dedup_corpus(const std::vector<std::string>& lines) {
    std::vector<std::string> out;
    std::unordered_set<std::string> seen;
    for (const auto& line : lines)
        if (seen.insert(line).second) out.push_back(line);
    return out;
}

std::vector<std::string> filter_long_words(const std::vector<std::string>& lines, int max_chars) {
    if (max_chars <= 0) return lines;
    std::vector<std::string> out;
    out.reserve(lines.size());
    for (const auto& line : lines) {
        std::string kept;
        for (const auto& w : split_words(line)) {
            if (static_cast<int>(utf8_codepoints(w).size()) > max_chars) continue;
            if (!kept.empty()) kept.push_back(' ');
            kept += w;
        }
        out.push_back(kept);
    }
    return out;
}

std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : s) {
        if (is_space(c)) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

namespace {

struct Symbol {
    std::string spell;
    bool final = false;  // word-final marker
};

std::vector<Symbol> word_symbols(const std::string& word) {
    std::vector<Symbol> syms;
    for (auto& cp : utf8_codepoints(word)) syms.push_back({cp, false});
    if (!syms.empty()) syms.back().final = true;
    return syms;
}

// One left-to-right pass applying a single merge rule wherever it matches.
void apply_merge(std::vector<Symbol>& syms, const std::pair<std::string, std::string>& rule) {
    std::size_t i = 0;
    while (i + 1 < syms.size()) {
        if (syms[i].spell == rule.first && syms[i + 1].spell == rule.second) {
            syms[i].spell += syms[i + 1].spell;
            syms[i].final = syms[i + 1].final;
            syms.erase(syms.begin() + static_cast<std::ptrdiff_t>(i) + 1);
        } else {
            ++i;
        }
    }
}

}  // namespace

BpeModel BpeModel::train(const std::vector<std::string>& corpus, int merges) {
    if (corpus.empty()) throw ValueError("BPE training corpus is empty");
    if (merges < 0) throw ValueError("merge count must be >= 0");
    // distinct words with frequencies; iteration order fixed by the map
    std::map<std::string, long long> word_freq;
    for (const auto& line : corpus)
        for (const auto& w : split_words(line)) ++word_freq[w];
    if (word_freq.empty()) throw ValueError("BPE training corpus has no words");

    std::vector<std::vector<Symbol>> words;
    std::vector<long long> freqs;
    std::map<std::string, bool> chars;
    for (const auto& [w, f] : word_freq) {
        words.push_back(word_symbols(w));
        freqs.push_back(f);
        for (const auto& cp : utf8_codepoints(w)) chars[cp] = true;
    }

    BpeModel model;
    for (int step = 0; step < merges; ++step) {
        std::map<std::pair<std::string, std::string>, long long> pair_freq;
        for (std::size_t wi = 0; wi < words.size(); ++wi) {
            const auto& syms = words[wi];
            for (std::size_t i = 0; i + 1 < syms.size(); ++i)
                pair_freq[{syms[i].spell, syms[i + 1].spell}] += freqs[wi];
        }
        if (pair_freq.empty()) break;
        // highest count, ties to the lexicographically smallest pair
        auto best = pair_freq.begin();
        for (auto it = std::next(pair_freq.begin()); it != pair_freq.end(); ++it)
            if (it->second > best->second) best = it;
        model.merges_.push_back(best->first);
        for (auto& syms : words) apply_merge(syms, best->first);
    }

    model.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    auto add_variants = [&model](const std::string& spell) {
        for (const std::string& tok : {spell, spell + marker}) {
            bool present = false;
            for (const auto& t : model.id_to_token_)
                if (t == tok) {
                    present = true;
                    break;
                }
            if (!present) model.id_to_token_.push_back(tok);
        }
    };
    for (const auto& [cp, _] : chars) add_variants(cp);
    for (const auto& m : model.merges_) add_variants(m.first + m.second);
    model.build_index();
    return model;
}

void BpeModel::build_index() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<int>(i);
}

int BpeModel::token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk_id : it->second;
}

TokenSequence BpeModel::encode(const std::string& s, TextVariant variant) const {
    TokenSequence out;
    out.variant = variant;
    for (const auto& word : split_words(s)) {
        std::vector<Symbol> syms = word_symbols(word);
        // unknown characters become unk before merges run
        std::vector<Symbol> known;
        for (auto& sym : syms) {
            if (token_to_id_.count(sym.spell) || token_to_id_.count(sym.spell + marker))
                known.push_back(sym);
            else
                known.push_back({"<unk>", sym.final});
        }
        std::vector<Symbol> merged;
        std::size_t i = 0;
        while (i < known.size()) {
            if (known[i].spell == "<unk>") {
                if (!merged.empty()) {
                    for (const auto& rule : merges_) apply_merge(merged, rule);
                    for (auto& sym : merged) out.ids.push_back(token_id(sym.final ? sym.spell + marker : sym.spell));
                    merged.clear();
                }
                out.ids.push_back(unk_id);
                ++i;
                continue;
            }
            merged.push_back(known[i]);
            ++i;
        }
        if (!merged.empty()) {
            for (const auto& rule : merges_) apply_merge(merged, rule);
            for (auto& sym : merged) out.ids.push_back(token_id(sym.final ? sym.spell + marker : sym.spell));
        }
    }
    return out;
}

std::string BpeModel::decode(const std::vector<int>& ids) const {
    std::string out;
    std::string word;
    auto flush = [&]() {
        if (word.empty()) return;
        if (!out.empty()) out.push_back(' ');
        out += word;
        word.clear();
    };
    const std::size_t mlen = std::string(marker).size();
    for (int id : ids) {
        if (id == pad_id || id == bos_id || id == eos_id) continue;
        if (id < 0 || id >= vocab_size()) throw ValueError("token id out of range in decode");
        if (id == unk_id) {
            // the unk token closes the current word
            word += "<unk>";
            flush();
            continue;
        }
        const std::string& tok = id_to_token_[static_cast<std::size_t>(id)];
        if (tok.size() >= mlen && tok.compare(tok.size() - mlen, mlen, marker) == 0) {
            word += tok.substr(0, tok.size() - mlen);
            flush();
        } else {
            word += tok;
        }
    }
    flush();
    return out;
}

std::string BpeModel::decode(const TokenSequence& t) const { return decode(t.ids); }

void BpeModel::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write BPE model: " + path);
    f << "BPE v1\n" << merges_.size() << "\n";
    for (const auto& m : merges_) f << m.first << " " << m.second << "\n";
    f << "VOCAB\n";
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) f << id_to_token_[i] << "\t" << i << "\n";
    if (!f) throw IoError("write failed: " + path);
}

BpeModel BpeModel::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read BPE model: " + path);
    std::string line;
    if (!std::getline(f, line) || line != "BPE v1") throw IoError("bad BPE model header in " + path);
    if (!std::getline(f, line)) throw IoError("truncated BPE model: " + path);
    long long n_merges = -1;
    try {
        n_merges = std::stoll(line);
    } catch (const std::exception&) {
        throw IoError("bad merge count in " + path);
    }
    if (n_merges < 0) throw IoError("bad merge count in " + path);
    BpeModel model;
    for (long long i = 0; i < n_merges; ++i) {
        if (!std::getline(f, line)) throw IoError("truncated BPE model: " + path);
        auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size()) throw IoError("bad merge line in " + path);
        model.merges_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    if (!std::getline(f, line) || line != "VOCAB") throw IoError("missing VOCAB section in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("bad vocab line in " + path);
        const std::string tok = line.substr(0, tab);
        int id = -1;
        try {
            id = std::stoi(line.substr(tab + 1));
        } catch (const std::exception&) {
            throw IoError("bad vocab id in " + path);
        }
        if (id != static_cast<int>(model.id_to_token_.size())) throw IoError("vocab ids not dense in " + path);
        model.id_to_token_.push_back(tok);
    }
    if (model.id_to_token_.size() < 4) throw IoError("vocab missing specials in " + path);
    model.build_index();
    return model;
}

}  // namespace jamt
