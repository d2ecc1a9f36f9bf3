#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "jamt/decoding.hpp"
#include "jamt/rng.hpp"

using namespace jamt;

namespace {

// Deterministic stand-in model: log-softmax rows hashed from the prefix.
class HashScorer : public SequenceScorer {
public:
    HashScorer(int vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
    int vocab() const override { return vocab_; }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override {
        ++calls;
        std::vector<std::vector<double>> out;
        for (const auto& p : prefixes) out.push_back(row(p));
        return out;
    }
    std::vector<double> row(const std::vector<int>& prefix) const {
        std::vector<double> logits(vocab_);
        std::uint64_t h = mix(seed_ + 0x51u);
        for (int t : prefix) h = mix(h ^ static_cast<std::uint64_t>(t + 7));
        for (int v = 0; v < vocab_; ++v) {
            std::uint64_t g = mix(h ^ (static_cast<std::uint64_t>(v) * 0x9e3779b97f4a7c15ull));
            logits[v] = static_cast<double>(g >> 11) * 0x1.0p-53 * 4.0 - 2.0;
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double lse = 0.0;
        for (double l : logits) lse += std::exp(l - mx);
        lse = mx + std::log(lse);
        for (double& l : logits) l -= lse;
        return logits;
    }
    int calls = 0;

private:
    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }
    int vocab_;
    std::uint64_t seed_;
};

// Same fixed score row at every step.
class FixedScorer : public SequenceScorer {
public:
    explicit FixedScorer(std::vector<double> row) : row_(std::move(row)) {}
    int vocab() const override { return static_cast<int>(row_.size()); }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override {
        ++calls;
        return std::vector<std::vector<double>>(prefixes.size(), row_);
    }
    int calls = 0;

private:
    std::vector<double> row_;
};

struct Enumerated {
    std::vector<int> tokens;
    double log_prob = 0.0;
};

// All sequences the gate admits, terminated ones and full-length open ones.
void enumerate_all(const HashScorer& s, double eos_factor, int max_tokens, std::vector<int>& prefix,
                   double log_prob, int appended, std::vector<Enumerated>& terminated,
                   std::vector<Enumerated>& open) {
    if (appended == max_tokens) {
        open.push_back({prefix, log_prob});
        return;
    }
    std::vector<double> row = s.row(prefix);
    double best_other = -std::numeric_limits<double>::infinity();
    for (int v = 0; v < s.vocab(); ++v)
        if (v != s.eos()) best_other = std::max(best_other, row[v]);
    for (int v = 0; v < s.vocab(); ++v) {
        if (v == s.eos()) {
            if (row[v] >= eos_factor * best_other) {
                prefix.push_back(v);
                terminated.push_back({prefix, log_prob + row[v]});
                prefix.pop_back();
            }
            continue;
        }
        prefix.push_back(v);
        enumerate_all(s, eos_factor, max_tokens, prefix, log_prob + row[v], appended + 1, terminated,
                      open);
        prefix.pop_back();
    }
}

const Enumerated& best_of(const std::vector<Enumerated>& pool) {
    REQUIRE_FALSE(pool.empty());
    std::size_t best = 0;
    for (std::size_t i = 1; i < pool.size(); ++i)
        if (pool[i].log_prob > pool[best].log_prob) best = i;
    return pool[best];
}

TransformerConfig tiny_config() {
    TransformerConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.ff_dim = 32;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.src_vocab = 8;
    cfg.tgt_vocab = 9;
    cfg.feature_dim = 4;
    cfg.max_len = 64;
    return cfg;
}

Tensor random_feats(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols});
    for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

}  // namespace

TEST_CASE("beam search matches exhaustive enumeration on tiny instances") {
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        HashScorer scorer(4, seed);
        for (double beta : {1.0, 1e9}) {
            DecodeConfig cfg;
            cfg.beam_size = 64;
            cfg.n_best = 1;
            cfg.length_ratio = 1.0;
            cfg.eos_factor = beta;
            std::vector<BeamHypothesis> out = beam_search(scorer, 3, cfg);
            REQUIRE(out.size() == 1);

            std::vector<int> prefix = {scorer.bos()};
            std::vector<Enumerated> terminated, open;
            enumerate_all(scorer, beta, 3, prefix, 0.0, 0, terminated, open);

            if (!terminated.empty()) {
                const Enumerated& best = best_of(terminated);
                CHECK(out[0].finished);
                CHECK(out[0].tokens == best.tokens);
                CHECK(out[0].log_prob == doctest::Approx(best.log_prob).epsilon(1e-12));
            } else {
                const Enumerated& best = best_of(open);
                CHECK_FALSE(out[0].finished);
                CHECK(out[0].tokens == best.tokens);
                CHECK(out[0].log_prob == doctest::Approx(best.log_prob).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("beam of one reproduces gate-aware greedy token for token") {
    for (std::uint64_t seed = 200; seed < 220; ++seed) {
        for (double beta : {0.0, 1.0, 1e9}) {
            HashScorer scorer(4, seed);
            DecodeConfig cfg;
            cfg.beam_size = 1;
            cfg.n_best = 1;
            cfg.length_ratio = 1.0;
            cfg.eos_factor = beta;
            std::vector<BeamHypothesis> out = beam_search(scorer, 4, cfg);
            REQUIRE(out.size() == 1);

            std::vector<int> greedy = {scorer.bos()};
            double greedy_lp = 0.0;
            bool greedy_done = false;
            for (int t = 0; t < 4 && !greedy_done; ++t) {
                std::vector<double> row = scorer.row(greedy);
                double best_other = -std::numeric_limits<double>::infinity();
                for (int v = 0; v < scorer.vocab(); ++v)
                    if (v != scorer.eos()) best_other = std::max(best_other, row[v]);
                int pick = -1;
                for (int v = 0; v < scorer.vocab(); ++v) {
                    if (v == scorer.eos() && !(row[v] >= beta * best_other)) continue;
                    if (pick < 0 || row[v] > row[pick]) pick = v;
                }
                greedy.push_back(pick);
                greedy_lp += row[pick];
                greedy_done = pick == scorer.eos();
            }
            CHECK(out[0].tokens == greedy);
            CHECK(out[0].log_prob == doctest::Approx(greedy_lp).epsilon(1e-12));
            CHECK(out[0].finished == greedy_done);
        }
    }
}

TEST_CASE("eos gate admits by the multiplicative threshold") {
    // lp(eos) = -2, best alternative 0.6065 -> gate passes only when
    // eos_factor * log(0.6065...) <= -2.
    std::vector<double> probs = {0.05, 0.05, std::exp(-2.0), 0.0, 0.0};
    probs[3] = 1.0 - probs[0] - probs[1] - probs[2];
    probs[4] = 1e-9;
    probs[3] -= probs[4];
    std::vector<double> row(5);
    for (int v = 0; v < 5; ++v) row[v] = std::log(probs[v]);
    FixedScorer scorer(row);

    DecodeConfig cfg;
    cfg.beam_size = 2;
    cfg.n_best = 1;
    cfg.length_ratio = 1.0;

    cfg.eos_factor = 1.0;  // threshold log(0.497) = -0.70 > -2: blocked
    std::vector<BeamHypothesis> blocked = beam_search(scorer, 3, cfg);
    CHECK_FALSE(blocked[0].finished);
    CHECK(blocked[0].tokens == std::vector<int>{1, 3, 3, 3});

    double ratio = row[2] / row[3];  // exact boundary factor
    cfg.eos_factor = ratio;
    std::vector<BeamHypothesis> boundary = beam_search(scorer, 3, cfg);
    CHECK(boundary[0].finished);

    cfg.eos_factor = ratio + 0.01;  // just past the boundary, still admitted
    CHECK(beam_search(scorer, 3, cfg)[0].finished);

    cfg.eos_factor = ratio - 0.01;  // tightened below the boundary: blocked
    CHECK_FALSE(beam_search(scorer, 3, cfg)[0].finished);
}

TEST_CASE("insertion reward never shortens the winner") {
    for (std::uint64_t seed = 300; seed < 310; ++seed) {
        HashScorer scorer(4, seed);
        DecodeConfig cfg;
        cfg.beam_size = 8;
        cfg.n_best = 1;
        cfg.length_ratio = 1.0;
        cfg.eos_factor = 1e9;
        cfg.alpha = 0.0;
        std::size_t len_plain = beam_search(scorer, 4, cfg)[0].tokens.size();
        cfg.alpha = 2.0;
        std::size_t len_reward = beam_search(scorer, 4, cfg)[0].tokens.size();
        CHECK(len_reward >= len_plain);
    }
}

TEST_CASE("n-best lists extend by suffix") {
    HashScorer scorer(4, 42);
    DecodeConfig cfg;
    cfg.beam_size = 8;
    cfg.length_ratio = 1.0;
    cfg.eos_factor = 1e9;
    cfg.n_best = 2;
    std::vector<BeamHypothesis> two = beam_search(scorer, 4, cfg);
    cfg.n_best = 3;
    std::vector<BeamHypothesis> three = beam_search(scorer, 4, cfg);
    REQUIRE(two.size() == 2);
    REQUIRE(three.size() == 3);
    for (std::size_t i = 0; i < two.size(); ++i) {
        CHECK(two[i].tokens == three[i].tokens);
        CHECK(two[i].log_prob == three[i].log_prob);
    }
    CHECK(three[0].log_prob + cfg.alpha >= three[1].log_prob + cfg.alpha);
}

TEST_CASE("beam search validates its inputs") {
    HashScorer scorer(4, 1);
    DecodeConfig cfg;
    CHECK_THROWS_AS(beam_search(scorer, 0, cfg), ValueError);

    DecodeConfig bad = cfg;
    bad.n_best = 0;
    CHECK_THROWS_AS(beam_search(scorer, 3, bad), ValueError);
    bad = cfg;
    bad.beam_size = 1;
    bad.n_best = 2;
    CHECK_THROWS_AS(beam_search(scorer, 3, bad), ValueError);
    bad = cfg;
    bad.length_ratio = 0.0;
    CHECK_THROWS_AS(beam_search(scorer, 3, bad), ValueError);

    HashScorer tiny(1, 1);
    CHECK_THROWS_AS(beam_search(tiny, 3, cfg), ValueError);
}

TEST_CASE("ensemble weights normalize and degenerate weights skip members") {
    HashScorer a(4, 5), b(4, 6);
    EnsembleScorer norm({&a, &b}, {2.0, 6.0});
    CHECK(norm.weights() == std::vector<double>{0.25, 0.75});

    EnsembleScorer only_a({&a, &b}, {1.0, 0.0});
    std::vector<std::vector<int>> prefixes = {{1}, {1, 3}};
    std::vector<std::vector<double>> out = only_a.step(prefixes);
    int b_calls = b.calls;
    CHECK(b_calls == 0);
    for (std::size_t p = 0; p < prefixes.size(); ++p) {
        std::vector<double> expect = a.row(prefixes[p]);
        REQUIRE(out[p].size() == expect.size());
        for (std::size_t v = 0; v < expect.size(); ++v) CHECK(out[p][v] == expect[v]);
    }

    // Two identical members agree with a single member for any weights.
    HashScorer a2(4, 5);
    EnsembleScorer pair({&a, &a2}, {0.3, 0.7});
    std::vector<std::vector<double>> mixed = pair.step(prefixes);
    for (std::size_t p = 0; p < prefixes.size(); ++p) {
        std::vector<double> expect = a.row(prefixes[p]);
        for (std::size_t v = 0; v < expect.size(); ++v)
            CHECK(mixed[p][v] == doctest::Approx(expect[v]).epsilon(1e-12));
    }

    // Members that agree on the argmax keep it under equal weights.
    FixedScorer fa({-3.0, -0.5, -2.0, -4.0});
    FixedScorer fb({-2.5, -0.7, -3.0, -1.5});
    EnsembleScorer agree({&fa, &fb}, {0.5, 0.5});
    std::vector<std::vector<double>> agreed = agree.step({{1}});
    auto argmax = [](const std::vector<double>& r) {
        return std::distance(r.begin(), std::max_element(r.begin(), r.end()));
    };
    CHECK(argmax(agreed[0]) == 1);

    HashScorer wide(5, 7);
    CHECK_THROWS_AS(EnsembleScorer({&a, &wide}, {0.5, 0.5}), ValueError);
    CHECK_THROWS_AS(EnsembleScorer({}, {}), ValueError);
    CHECK_THROWS_AS(EnsembleScorer({&a, &b}, {0.5}), ValueError);
    CHECK_THROWS_AS(EnsembleScorer({&a, &b}, {0.5, -0.1}), ValueError);
    CHECK_THROWS_AS(EnsembleScorer({&a, &b}, {0.0, 0.0}), ValueError);
}

TEST_CASE("shallow fusion arithmetic") {
    std::vector<double> fused = fuse_lm({-1.0, -2.0}, {-2.0, -1.0}, 1.0);
    CHECK(fused == std::vector<double>{-3.0, -3.0});

    std::vector<double> model = {-0.3, -1.7, -2.4};
    CHECK(fuse_lm(model, {-1.0, -1.0, -1.0}, 0.0) == model);

    // A uniform language model shifts every entry equally.
    std::vector<double> uniform(3, std::log(1.0 / 3.0));
    std::vector<double> shifted = fuse_lm(model, uniform, 0.7);
    auto argmax = [](const std::vector<double>& r) {
        return std::distance(r.begin(), std::max_element(r.begin(), r.end()));
    };
    CHECK(argmax(shifted) == argmax(model));
    for (std::size_t i = 0; i < model.size(); ++i)
        CHECK(shifted[i] == doctest::Approx(model[i] + 0.7 * uniform[0]).epsilon(1e-12));

    CHECK_THROWS_AS(fuse_lm({-1.0}, {-1.0, -2.0}, 0.5), ValueError);

    HashScorer main_scorer(4, 9), lm_scorer(4, 10);
    FusedScorer off(main_scorer, lm_scorer, 0.0);
    std::vector<std::vector<double>> plain = off.step({{1, 3}});
    CHECK(lm_scorer.calls == 0);
    CHECK(plain[0] == main_scorer.row({1, 3}));

    FusedScorer on(main_scorer, lm_scorer, 0.5);
    std::vector<std::vector<double>> mixed = on.step({{1, 3}});
    std::vector<double> expect = fuse_lm(main_scorer.row({1, 3}), lm_scorer.row({1, 3}), 0.5);
    CHECK(mixed[0] == expect);

    HashScorer wide(5, 11);
    CHECK_THROWS_AS(FusedScorer(main_scorer, wide, 0.5), ValueError);
}

TEST_CASE("forced rescore agrees with beam scores on a real model") {
    TransformerConfig cfg = tiny_config();
    JointModel m(cfg, 3);
    Rng rng(12);
    Tensor feats = random_feats(12, 4, rng);

    Tensor enc = encode_features(m.asr(), feats);
    AsrScorer scorer(m.asr(), enc);
    DecodeConfig dc;
    dc.beam_size = 4;
    dc.n_best = 4;
    dc.length_ratio = 1.2;
    dc.eos_factor = 1e9;  // always admit eos so the pool fills
    std::vector<BeamHypothesis> nbest = beam_search(scorer, enc.dim(0), dc);
    REQUIRE_FALSE(nbest.empty());

    int checked = 0;
    for (const auto& h : nbest) {
        if (!h.finished) continue;
        BeamHypothesis r = forced_rescore(m.asr(), feats, h.tokens);
        CHECK(r.tokens == h.tokens);
        CHECK(std::abs(r.log_prob - h.log_prob) <= 1e-5);
        CHECK(r.finished);
        REQUIRE(r.context.defined());
        CHECK(r.context.dim(0) == static_cast<int>(h.tokens.size()) - 1);
        CHECK(r.context.dim(1) == cfg.d_model);

        ForcedResult<float> forced = forced_decode(m.asr(), h.tokens, enc);
        REQUIRE(forced.states.size() == r.context.size());
        for (std::size_t i = 0; i < r.context.values().size(); ++i)
            CHECK(r.context.values()[i] == forced.states.values()[i]);
        ++checked;
    }
    CHECK(checked > 0);

    CHECK_THROWS_AS(forced_rescore(m.asr(), feats, {4, 5, 2}), ValueError);
    std::vector<int> too_long(cfg.max_len + 2, 4);
    too_long.front() = 1;
    too_long.back() = 2;
    CHECK_THROWS_AS(forced_rescore(m.asr(), feats, too_long), ValueError);
}

TEST_CASE("coupled search maximizes the pair total") {
    std::vector<BeamHypothesis> nbest(2);
    nbest[0].tokens = {1, 4, 2};
    nbest[0].log_prob = -1.0;
    nbest[1].tokens = {1, 5, 2};
    nbest[1].log_prob = -2.0;

    std::map<int, std::vector<std::pair<std::vector<int>, double>>> table = {
        {4, {{{1, 6, 2}, -3.0}, {{1, 7, 2}, -3.5}}},
        {5, {{{1, 8, 2}, -1.2}, {{1, 6, 2}, -4.0}}},
    };
    auto mt_fn = [&](const BeamHypothesis& z) {
        std::vector<BeamHypothesis> out;
        for (const auto& [tokens, lp] : table.at(z.tokens[1])) {
            BeamHypothesis h;
            h.tokens = tokens;
            h.log_prob = lp;
            h.finished = true;
            out.push_back(h);
        }
        return out;
    };

    CoupledResult r = coupled_translate(nbest, mt_fn);
    CHECK(r.asr_index == 1);
    CHECK(r.asr.tokens == std::vector<int>{1, 5, 2});
    CHECK(r.mt.tokens == std::vector<int>{1, 8, 2});
    CHECK(r.total == doctest::Approx(-3.2).epsilon(1e-12));
    CHECK(r.explored.size() == 4);
    for (const auto& [zi, total] : r.explored) CHECK(r.total >= total);

    // Brute force over the same table agrees.
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& z : nbest)
        for (const auto& [tokens, lp] : table.at(z.tokens[1])) best = std::max(best, z.log_prob + lp);
    CHECK(r.total == doctest::Approx(best).epsilon(1e-12));

    // Duplicating a source hypothesis changes nothing.
    std::vector<BeamHypothesis> dup = nbest;
    dup.push_back(nbest[1]);
    CoupledResult rd = coupled_translate(dup, mt_fn);
    CHECK(rd.asr_index == 1);
    CHECK(rd.mt.tokens == r.mt.tokens);
    CHECK(rd.total == r.total);
    CHECK(rd.explored.size() == 6);

    // A single-entry list degenerates to that hypothesis's best candidate.
    CoupledResult one = coupled_translate({nbest[0]}, mt_fn);
    CHECK(one.asr_index == 0);
    CHECK(one.mt.tokens == std::vector<int>{1, 6, 2});
    CHECK(one.total == doctest::Approx(-4.0).epsilon(1e-12));

    CHECK_THROWS_AS(coupled_translate({}, mt_fn), ValueError);
    auto empty_fn = [](const BeamHypothesis&) { return std::vector<BeamHypothesis>(); };
    CHECK_THROWS_AS(coupled_translate(nbest, empty_fn), ValueError);
}

TEST_CASE("larger n-best explores a superset of pairs") {
    TransformerConfig cfg = tiny_config();
    JointModel m(cfg, 4);
    Rng rng(13);
    Tensor feats = random_feats(12, 4, rng);
    CascadeModels models;
    models.joint = &m;

    auto run = [&](int n_best) {
        DecodeConfig dc;
        dc.beam_size = 4;
        dc.n_best = n_best;
        dc.eos_factor = 1e9;
        Tensor enc = encode_features(m.asr(), feats);
        AsrScorer scorer(m.asr(), enc);
        return beam_search(scorer, enc.dim(0), dc);
    };
    std::vector<BeamHypothesis> two = run(2);
    std::vector<BeamHypothesis> three = run(3);
    REQUIRE(two.size() == 2);
    REQUIRE(three.size() >= two.size());
    for (std::size_t i = 0; i < two.size(); ++i) CHECK(two[i].tokens == three[i].tokens);
}

TEST_CASE("cascade modes run end to end and degenerate ensembles collapse") {
    TransformerConfig cfg = tiny_config();
    JointModel joint(cfg, 5);
    AsrModel ext_asr(cfg, 6);
    MtModel ext_mt(cfg, 7);
    LanguageModel lm(cfg, 8);
    Rng rng(14);
    Tensor feats = random_feats(16, 4, rng);

    CascadeModels models;
    models.joint = &joint;
    models.ext_asr = &ext_asr;
    models.ext_mt = &ext_mt;

    DecodeConfig dc;
    dc.beam_size = 3;
    dc.n_best = 2;
    dc.eos_factor = 1e9;

    std::map<std::string, CascadeOutput> outs;
    for (CascadeMode mode : {CascadeMode::ext_ext, CascadeMode::ext_joint, CascadeMode::joint_ext,
                             CascadeMode::joint_joint, CascadeMode::ensemble}) {
        CascadeOutput out = cascade_pipeline(mode, models, feats, dc);
        CHECK(std::isfinite(out.log_p_z));
        CHECK(std::isfinite(out.log_p_y));
        CHECK(out.log_p_z < 0.0);
        REQUIRE_FALSE(out.asr_best_tokens.empty());
        REQUIRE_FALSE(out.tgt_tokens.empty());
        CHECK(out.asr_best_tokens.front() == BpeModel::bos_id);
        CHECK(out.tgt_tokens.front() == BpeModel::bos_id);
        CHECK(out.src_tokens.back() == BpeModel::eos_id);
        outs[cascade_mode_name(mode)] = out;
    }

    // Degenerate ensemble weights reproduce the single-model modes exactly.
    CascadeModels joint_only = models;
    joint_only.asr_ensemble_weights = {0.0, 1.0};
    joint_only.mt_ensemble_weights = {0.0, 1.0};
    CascadeOutput ens_joint = cascade_pipeline(CascadeMode::ensemble, joint_only, feats, dc);
    CHECK(ens_joint.asr_best_tokens == outs["joint-joint"].asr_best_tokens);
    CHECK(ens_joint.src_tokens == outs["joint-joint"].src_tokens);
    CHECK(ens_joint.tgt_tokens == outs["joint-joint"].tgt_tokens);
    CHECK(ens_joint.log_p_z == outs["joint-joint"].log_p_z);
    CHECK(ens_joint.log_p_y == outs["joint-joint"].log_p_y);

    CascadeModels ext_only = models;
    ext_only.asr_ensemble_weights = {1.0, 0.0};
    ext_only.mt_ensemble_weights = {1.0, 0.0};
    CascadeOutput ens_ext = cascade_pipeline(CascadeMode::ensemble, ext_only, feats, dc);
    CHECK(ens_ext.asr_best_tokens == outs["ext-ext"].asr_best_tokens);
    CHECK(ens_ext.src_tokens == outs["ext-ext"].src_tokens);
    CHECK(ens_ext.tgt_tokens == outs["ext-ext"].tgt_tokens);
    CHECK(ens_ext.log_p_z == outs["ext-ext"].log_p_z);
    CHECK(ens_ext.log_p_y == outs["ext-ext"].log_p_y);

    // Fusion with the language model still decodes.
    CascadeModels with_lm = models;
    with_lm.asr_lm = &lm;
    DecodeConfig fused = dc;
    fused.lm_weight = 0.3;
    CascadeOutput lm_out = cascade_pipeline(CascadeMode::joint_joint, with_lm, feats, fused);
    CHECK(std::isfinite(lm_out.log_p_z));

    // With zero lm weight the language model changes nothing.
    fused.lm_weight = 0.0;
    CascadeOutput lm_off = cascade_pipeline(CascadeMode::joint_joint, with_lm, feats, fused);
    CHECK(lm_off.tgt_tokens == outs["joint-joint"].tgt_tokens);
    CHECK(lm_off.log_p_y == outs["joint-joint"].log_p_y);

    // Missing models are rejected per mode.
    CascadeModels no_ext;
    no_ext.joint = &joint;
    CHECK_THROWS_AS(cascade_pipeline(CascadeMode::ext_ext, no_ext, feats, dc), ValueError);
    CHECK_THROWS_AS(cascade_pipeline(CascadeMode::joint_ext, no_ext, feats, dc), ValueError);
    CascadeModels no_joint;
    no_joint.ext_asr = &ext_asr;
    no_joint.ext_mt = &ext_mt;
    CHECK_THROWS_AS(cascade_pipeline(CascadeMode::joint_joint, no_joint, feats, dc), ValueError);
    CHECK_THROWS_AS(cascade_pipeline(CascadeMode::ext_joint, no_joint, feats, dc), ValueError);

    CHECK(parse_cascade_mode("joint-joint") == CascadeMode::joint_joint);
    CHECK(cascade_mode_name(CascadeMode::ext_joint) == "ext-joint");
    CHECK_THROWS_AS(parse_cascade_mode("bogus"), ValueError);
}
