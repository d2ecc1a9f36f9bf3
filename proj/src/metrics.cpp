#include "jamt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "jamt/text.hpp"

namespace jamt {

WerResult wer(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    if (ref.empty()) throw ValueError("WER reference is empty");
    const std::size_t R = ref.size(), H = hyp.size();
    // cost matrix, then a backtrace with fixed priority diagonal > up > left
    std::vector<std::vector<int>> d(R + 1, std::vector<int>(H + 1, 0));
    for (std::size_t i = 0; i <= R; ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= H; ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= R; ++i)
        for (std::size_t j = 1; j <= H; ++j) {
            const int sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            const int del = d[i - 1][j] + 1;
            const int ins = d[i][j - 1] + 1;
            d[i][j] = std::min({sub, del, ins});
        }
    EditAlignment a;
    std::size_t i = R, j = H;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const int sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            if (d[i][j] == sub) {
                if (ref[i - 1] == hyp[j - 1])
                    ++a.matches;
                else
                    ++a.substitutions;
                --i;
                --j;
                continue;
            }
        }
        if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
            ++a.deletions;
            --i;
            continue;
        }
        ++a.insertions;
        --j;
    }
    WerResult res;
    res.alignment = a;
    res.rate = static_cast<double>(a.substitutions + a.insertions + a.deletions) / static_cast<double>(R);
    return res;
}

WerResult wer(const std::string& ref, const std::string& hyp) { return wer(split_words(ref), split_words(hyp)); }

BleuStats& BleuStats::operator+=(const BleuStats& o) {
    for (int n = 0; n < 4; ++n) {
        matches[n] += o.matches[n];
        totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
}

BleuStats sentence_bleu_stats(const std::string& ref, const std::string& hyp) {
    const std::vector<std::string> rw = split_words(ref);
    const std::vector<std::string> hw = split_words(hyp);
    BleuStats s;
    s.ref_len = static_cast<long long>(rw.size());
    s.hyp_len = static_cast<long long>(hw.size());
    for (int n = 1; n <= 4; ++n) {
        std::map<std::vector<std::string>, long long> ref_counts;
        for (std::size_t i = 0; i + n <= rw.size(); ++i)
            ++ref_counts[std::vector<std::string>(rw.begin() + static_cast<std::ptrdiff_t>(i),
                                                  rw.begin() + static_cast<std::ptrdiff_t>(i) + n)];
        std::map<std::vector<std::string>, long long> hyp_counts;
        for (std::size_t i = 0; i + n <= hw.size(); ++i)
            ++hyp_counts[std::vector<std::string>(hw.begin() + static_cast<std::ptrdiff_t>(i),
                                                  hw.begin() + static_cast<std::ptrdiff_t>(i) + n)];
        long long matched = 0, total = 0;
        for (const auto& [gram, cnt] : hyp_counts) {
            total += cnt;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end()) matched += std::min(cnt, it->second);
        }
        s.matches[n - 1] = matched;
        s.totals[n - 1] = total;
    }
    return s;
}

double bleu_from_stats(const BleuStats& stats) {
    if (stats.hyp_len == 0) return 0.0;
    double log_prec = 0;
    for (int n = 0; n < 4; ++n) {
        if (stats.matches[n] == 0 || stats.totals[n] == 0) return 0.0;
        log_prec += std::log(static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]));
    }
    const double bp =
        stats.hyp_len >= stats.ref_len
            ? 1.0
            : std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));
    return 100.0 * bp * std::exp(log_prec / 4.0);
}

double corpus_bleu(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
    if (refs.size() != hyps.size()) throw ValueError("BLEU reference/hypothesis count mismatch");
    if (refs.empty()) throw ValueError("BLEU corpus is empty");
    BleuStats total;
    for (std::size_t i = 0; i < refs.size(); ++i) total += sentence_bleu_stats(refs[i], hyps[i]);
    return bleu_from_stats(total);
}

std::vector<std::pair<std::string, double>> per_sentence_wer_report(const std::vector<ScoredUtterance>& corpus) {
    std::vector<std::pair<std::string, double>> report;
    report.reserve(corpus.size());
    for (const auto& u : corpus) report.emplace_back(u.id, wer(u.ref, u.hyp).rate);
    return report;
}

}  // namespace jamt
