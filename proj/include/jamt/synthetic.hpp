#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jamt/tensor.hpp"

namespace jamt {

// Desk-scale data generator: sources are random word sequences, targets come
// from a seeded word bijection, and the final "?" flips target order. Each
// word owns a fixed prototype feature vector; frames are prototypes plus
// Gaussian noise.
struct SyntheticSpec {
    int src_vocab = 30;
    int tgt_vocab = 30;
    int frames_per_token = 3;
    int feature_dim = 8;
    double sigma = 0.0;
    bool punctuated = true;
    std::uint64_t seed = 1;
    int min_sentence_len = 2;
    int max_sentence_len = 8;

    void validate() const;
};

struct Triplet {
    Tensor feats;
    std::string src_text;
    std::string tgt_text;
};

std::string src_word(int id);
std::string tgt_word(int id);

// Seeded injective map from source word ids into target word ids.
std::vector<int> token_bijection(const SyntheticSpec& spec);

// Rows 0..src_vocab-1 are word prototypes; the last two rows belong to "."
// and "?".
Tensor token_prototypes(const SyntheticSpec& spec);

Triplet generate_triplet(const SyntheticSpec& spec, int length, std::uint64_t index);

// Exact reference translation of a punctuated source sentence.
std::string oracle_translate(const SyntheticSpec& spec, const std::string& src_text);

// Best-possible translation of a punctuation-stripped source: word order is
// unrecoverable, so the forward order is emitted.
std::string oracle_translate_normalized(const SyntheticSpec& spec, const std::string& normalized_src);

struct CorpusSizes {
    int asr_pairs = 0;
    int mt_pairs = 0;
    int st_triplets = 0;
    int text_pairs = 0;
    int test_items = 0;
    double corrupt_fraction = 0.0;
};

struct SyntheticItem {
    std::string id;
    Tensor feats;
    std::string src_text;
    std::string tgt_text;
};

struct Corpora {
    std::vector<SyntheticItem> asr_pairs;
    std::vector<SyntheticItem> mt_pairs;
    std::vector<SyntheticItem> st_triplets;
    std::vector<SyntheticItem> text_pairs;
    std::vector<SyntheticItem> test_items;
    std::vector<std::string> corrupted_ids;
};

// Splits draw from disjoint sentence inventories; a corrupt_fraction of the
// ST transcripts is replaced by the neighbouring sentence's transcript while
// features and targets keep following the original sentence.
Corpora generate_corpora(const SyntheticSpec& spec, const CorpusSizes& sizes);

// Feature files carry a u32 row count and u32 column count, then float32
// row-major data, all little-endian.
void write_feats(const std::string& path, const Tensor& feats);
Tensor read_feats(const std::string& path);

// A corpus directory holds line-aligned ids.txt / src.txt / tgt.txt and a
// feats/<id>.f32 file per item that carries features.
void write_corpus(const std::string& dir, const std::vector<SyntheticItem>& items);
std::vector<SyntheticItem> read_corpus(const std::string& dir);

}  // namespace jamt
