#pragma once

#include <string>
#include <utility>
#include <vector>

#include "jamt/error.hpp"

namespace jamt {

struct EditAlignment {
    long long substitutions = 0;
    long long insertions = 0;
    long long deletions = 0;
    long long matches = 0;
};

struct WerResult {
    double rate = 0;
    EditAlignment alignment;
};

// Levenshtein distance with unit costs, normalized by |ref|. May exceed 1.
WerResult wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp);
WerResult wer(const std::string& ref, const std::string& hyp);

struct BleuStats {
    long long matches[4] = {0, 0, 0, 0};
    long long totals[4] = {0, 0, 0, 0};
    long long hyp_len = 0;
    long long ref_len = 0;

    BleuStats& operator+=(const BleuStats& o);
};

BleuStats sentence_bleu_stats(const std::string& ref, const std::string& hyp);

// Geometric mean of clipped 1..4-gram precisions times brevity penalty,
// as a percentage; 0 when any precision is 0.
double bleu_from_stats(const BleuStats& stats);

double corpus_bleu(const std::vector<std::string>& refs, const std::vector<std::string>& hyps);

struct ScoredUtterance {
    std::string id;
    std::string ref;
    std::string hyp;
};

// WER per utterance in input order, on whitespace-split words.
std::vector<std::pair<std::string, double>> per_sentence_wer_report(const std::vector<ScoredUtterance>& corpus);

}  // namespace jamt
