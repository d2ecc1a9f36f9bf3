#include "jamt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "jamt/checkpoint.hpp"
#include "jamt/error.hpp"
#include "jamt/rng.hpp"

namespace jamt {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    return mix64(mix64(seed) ^ mix64(stream) ^ mix64(index + 0x1234567ull));
}

std::string spell(int id) {
    std::string out;
    do {
        out.insert(out.begin(), static_cast<char>('a' + id % 26));
        id /= 26;
    } while (id > 0);
    return out;
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i > 0) out.push_back(' ');
        out += words[i];
    }
    return out;
}

std::unordered_map<std::string, int> src_word_ids(const SyntheticSpec& spec) {
    std::unordered_map<std::string, int> ids;
    for (int i = 0; i < spec.src_vocab; ++i) ids[src_word(i)] = i;
    return ids;
}

std::vector<std::string> mapped_words(const SyntheticSpec& spec, const std::vector<std::string>& words) {
    std::unordered_map<std::string, int> ids = src_word_ids(spec);
    std::vector<int> bij = token_bijection(spec);
    std::vector<std::string> out;
    for (const auto& w : words) {
        auto it = ids.find(w);
        if (it == ids.end()) throw ValueError("unknown source word: " + w);
        out.push_back(tgt_word(bij[it->second]));
    }
    return out;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (src_vocab < 1 || tgt_vocab < 1) throw ValueError("vocab sizes must be positive");
    if (tgt_vocab < src_vocab) throw ValueError("target vocab must cover the source vocab");
    if (frames_per_token < 1) throw ValueError("frames_per_token must be >= 1");
    if (feature_dim < 1) throw ValueError("feature_dim must be >= 1");
    if (sigma < 0.0) throw ValueError("sigma must be >= 0");
    if (min_sentence_len < 1 || max_sentence_len < min_sentence_len)
        throw ValueError("sentence length bounds must satisfy 1 <= min <= max");
}

std::string src_word(int id) { return "s" + spell(id); }
std::string tgt_word(int id) { return "t" + spell(id); }

std::vector<int> token_bijection(const SyntheticSpec& spec) {
    spec.validate();
    std::vector<int> all(spec.tgt_vocab);
    for (int i = 0; i < spec.tgt_vocab; ++i) all[i] = i;
    Rng rng(stream_seed(spec.seed, 0xB1, 0));
    rng.shuffle(all);
    all.resize(spec.src_vocab);
    return all;
}

Tensor token_prototypes(const SyntheticSpec& spec) {
    spec.validate();
    Tensor protos = Tensor::zeros({spec.src_vocab + 2, spec.feature_dim});
    Rng rng(stream_seed(spec.seed, 0xF0, 0));
    for (auto& v : protos.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return protos;
}

Triplet generate_triplet(const SyntheticSpec& spec, int length, std::uint64_t index) {
    spec.validate();
    if (length < 1) throw ValueError("sentence length must be >= 1");
    if (length > spec.max_sentence_len) throw ValueError("sentence length exceeds the configured max");

    Rng rng(stream_seed(spec.seed, 0x7A, index));
    std::vector<int> ids(length);
    for (auto& id : ids) id = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.src_vocab)));
    bool question = spec.punctuated && rng.uniform() < 0.5;

    std::vector<std::string> src_words;
    for (int id : ids) src_words.push_back(src_word(id));
    std::vector<int> bij = token_bijection(spec);
    std::vector<std::string> tgt_words;
    for (int id : ids) tgt_words.push_back(tgt_word(bij[id]));
    if (question) std::reverse(tgt_words.begin(), tgt_words.end());

    Triplet t;
    std::string punct = question ? "?" : ".";
    t.src_text = join_words(src_words) + (spec.punctuated ? " " + punct : "");
    t.tgt_text = join_words(tgt_words) + (spec.punctuated ? " " + punct : "");

    Tensor protos = token_prototypes(spec);
    std::vector<int> rows = ids;
    if (spec.punctuated) rows.push_back(spec.src_vocab + (question ? 1 : 0));
    int total_rows = spec.frames_per_token * static_cast<int>(rows.size());
    t.feats = Tensor::zeros({total_rows, spec.feature_dim});
    auto& out = t.feats.values();
    const auto& proto = protos.values();
    int r = 0;
    for (int row_id : rows)
        for (int k = 0; k < spec.frames_per_token; ++k, ++r)
            for (int c = 0; c < spec.feature_dim; ++c) {
                double noise = spec.sigma > 0.0 ? spec.sigma * rng.normal() : 0.0;
                out[static_cast<std::size_t>(r) * spec.feature_dim + c] =
                    static_cast<float>(proto[static_cast<std::size_t>(row_id) * spec.feature_dim + c] + noise);
            }
    return t;
}

std::string oracle_translate(const SyntheticSpec& spec, const std::string& src_text) {
    std::vector<std::string> words = split_words(src_text);
    if (words.empty()) throw ValueError("empty source sentence");
    std::string punct;
    if (words.back() == "." || words.back() == "?") {
        punct = words.back();
        words.pop_back();
    }
    std::vector<std::string> out = mapped_words(spec, words);
    if (punct == "?") std::reverse(out.begin(), out.end());
    std::string text = join_words(out);
    if (!punct.empty()) text += " " + punct;
    return text;
}

std::string oracle_translate_normalized(const SyntheticSpec& spec, const std::string& normalized_src) {
    std::vector<std::string> words = split_words(normalized_src);
    if (words.empty()) throw ValueError("empty source sentence");
    return join_words(mapped_words(spec, words));
}

Corpora generate_corpora(const SyntheticSpec& spec, const CorpusSizes& sizes) {
    spec.validate();
    if (sizes.asr_pairs < 0 || sizes.mt_pairs < 0 || sizes.st_triplets < 0 || sizes.text_pairs < 0 ||
        sizes.test_items < 0)
        throw ValueError("corpus sizes must be >= 0");
    if (sizes.corrupt_fraction < 0.0 || sizes.corrupt_fraction > 1.0)
        throw ValueError("corrupt_fraction must be in [0, 1]");
    long long total = static_cast<long long>(sizes.asr_pairs) + sizes.mt_pairs + sizes.st_triplets +
                      sizes.text_pairs + sizes.test_items;
    if (total == 0) throw ValueError("at least one split must be nonempty");

    std::vector<Triplet> unique;
    std::unordered_set<std::string> seen;
    std::uint64_t index = 0;
    std::uint64_t limit = static_cast<std::uint64_t>(total) * 64 + 1024;
    Rng len_rng(stream_seed(spec.seed, 0x1E, 0));
    while (unique.size() < static_cast<std::size_t>(total)) {
        if (index >= limit)
            throw ValueError("vocabulary too small to generate disjoint splits of the requested size");
        int span = spec.max_sentence_len - spec.min_sentence_len + 1;
        int length = spec.min_sentence_len + static_cast<int>(len_rng.uniform_int(span));
        Triplet t = generate_triplet(spec, length, index++);
        if (seen.insert(t.src_text).second) unique.push_back(std::move(t));
    }

    auto take = [&](const char* prefix, int count, bool with_feats, std::size_t offset) {
        std::vector<SyntheticItem> out;
        for (int i = 0; i < count; ++i) {
            Triplet& t = unique[offset + i];
            SyntheticItem item;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s-%04d", prefix, i);
            item.id = buf;
            item.src_text = t.src_text;
            item.tgt_text = t.tgt_text;
            if (with_feats) item.feats = t.feats;
            out.push_back(std::move(item));
        }
        return out;
    };

    Corpora c;
    std::size_t offset = 0;
    c.asr_pairs = take("asr", sizes.asr_pairs, true, offset);
    offset += sizes.asr_pairs;
    c.mt_pairs = take("mt", sizes.mt_pairs, false, offset);
    offset += sizes.mt_pairs;
    c.st_triplets = take("st", sizes.st_triplets, true, offset);
    offset += sizes.st_triplets;
    c.text_pairs = take("tx", sizes.text_pairs, false, offset);
    offset += sizes.text_pairs;
    c.test_items = take("tst", sizes.test_items, true, offset);

    int n_st = static_cast<int>(c.st_triplets.size());
    int corrupt = static_cast<int>(std::llround(sizes.corrupt_fraction * n_st));
    if (corrupt > 0 && n_st < 2)
        throw ValueError("corruption needs at least two st items to shift transcripts");
    if (corrupt > 0) {
        std::vector<std::size_t> order(n_st);
        for (int i = 0; i < n_st; ++i) order[i] = i;
        Rng rng(stream_seed(spec.seed, 0xC0, 0));
        rng.shuffle(order);
        std::vector<std::string> clean;
        for (const auto& item : c.st_triplets) clean.push_back(item.src_text);
        for (int k = 0; k < corrupt; ++k) {
            std::size_t i = order[k];
            std::size_t shifted = (i + 1) % n_st;
            c.st_triplets[i].src_text = clean[shifted];
        }
        for (int k = 0; k < corrupt; ++k) c.corrupted_ids.push_back(c.st_triplets[order[k]].id);
        std::sort(c.corrupted_ids.begin(), c.corrupted_ids.end());
    }
    return c;
}

void write_feats(const std::string& path, const Tensor& feats) {
    if (!feats.defined() || feats.rank() != 2) throw ValueError("features must be a rank-2 tensor");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    detail::write_u32(out, static_cast<std::uint32_t>(feats.dim(0)));
    detail::write_u32(out, static_cast<std::uint32_t>(feats.dim(1)));
    for (float v : feats.values()) detail::write_f32(out, v);
    if (!out) throw IoError("failed writing: " + path);
}

Tensor read_feats(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    std::uint32_t rows = detail::read_u32(in);
    std::uint32_t cols = detail::read_u32(in);
    if (rows == 0 || cols == 0) throw IoError("empty feature matrix: " + path);
    Tensor t = Tensor::zeros({static_cast<int>(rows), static_cast<int>(cols)});
    for (auto& v : t.values()) v = detail::read_f32(in);
    if (!in) throw IoError("truncated feature file: " + path);
    return t;
}

void write_corpus(const std::string& dir, const std::vector<SyntheticItem>& items) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory: " + dir);
    bool any_feats = false;
    for (const auto& item : items) any_feats = any_feats || item.feats.defined();
    if (any_feats) {
        fs::create_directories(dir + "/feats", ec);
        if (ec) throw IoError("cannot create directory: " + dir + "/feats");
    }
    std::ofstream ids(dir + "/ids.txt"), src(dir + "/src.txt"), tgt(dir + "/tgt.txt");
    if (!ids || !src || !tgt) throw IoError("cannot open corpus files under: " + dir);
    for (const auto& item : items) {
        ids << item.id << "\n";
        src << item.src_text << "\n";
        tgt << item.tgt_text << "\n";
        if (item.feats.defined()) write_feats(dir + "/feats/" + item.id + ".f32", item.feats);
    }
    if (!ids || !src || !tgt) throw IoError("failed writing corpus under: " + dir);
}

namespace {

std::vector<std::string> read_lines_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

}  // namespace

std::vector<SyntheticItem> read_corpus(const std::string& dir) {
    std::vector<std::string> ids = read_lines_file(dir + "/ids.txt");
    std::vector<std::string> src = read_lines_file(dir + "/src.txt");
    std::vector<std::string> tgt = read_lines_file(dir + "/tgt.txt");
    if (ids.size() != src.size() || ids.size() != tgt.size())
        throw IoError("corpus files are not line-aligned under: " + dir);
    std::vector<SyntheticItem> items;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        SyntheticItem item;
        item.id = ids[i];
        item.src_text = src[i];
        item.tgt_text = tgt[i];
        std::string fpath = dir + "/feats/" + item.id + ".f32";
        if (std::filesystem::exists(fpath)) item.feats = read_feats(fpath);
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace jamt
