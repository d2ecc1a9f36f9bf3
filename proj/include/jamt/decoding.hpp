#pragma once

#include <functional>
#include <string>
#include <vector>

#include "jamt/error.hpp"
#include "jamt/model.hpp"
#include "jamt/tensor.hpp"

namespace jamt {

struct BeamHypothesis {
    std::vector<int> tokens;   // bos first; eos last iff finished
    double log_prob = 0.0;     // sum of the per-token scores as ranked
    Tensor context;            // decoder states, one row per token after bos
    bool finished = false;
};

struct DecodeConfig {
    int beam_size = 4;
    double length_ratio = 1.2;
    double alpha = 0.0;       // per-token insertion reward on the final ranking
    double eos_factor = 1.0;  // eos admitted iff lp(eos) >= eos_factor * best other lp
    double lm_weight = 0.0;
    int n_best = 1;

    void validate() const {
        if (n_best < 1) throw ValueError("n_best must be >= 1");
        if (beam_size < n_best) throw ValueError("beam_size must be >= n_best");
        if (!(length_ratio > 0.0)) throw ValueError("length_ratio must be > 0");
    }
};

// Next-token scoring over prefixes that all start with bos. One step() call
// covers every live beam of a search step.
class SequenceScorer {
public:
    virtual ~SequenceScorer() = default;
    virtual int vocab() const = 0;
    virtual int bos() const { return BpeModel::bos_id; }
    virtual int eos() const { return BpeModel::eos_id; }
    virtual std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) = 0;
};

class AsrScorer : public SequenceScorer {
public:
    AsrScorer(const AsrModel& m, Tensor enc) : m_(m), enc_(std::move(enc)) {}
    int vocab() const override { return m_.config().src_vocab; }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override {
        NoGrad guard;
        std::vector<std::vector<double>> out;
        for (const auto& p : prefixes) out.push_back(decode_step(m_, p, enc_).log_probs);
        return out;
    }

private:
    const AsrModel& m_;
    Tensor enc_;
};

class MtScorer : public SequenceScorer {
public:
    MtScorer(const MtModel& m, Tensor enc) : m_(m), enc_(std::move(enc)) {}
    int vocab() const override { return m_.config().tgt_vocab; }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override {
        NoGrad guard;
        std::vector<std::vector<double>> out;
        for (const auto& p : prefixes) out.push_back(decode_step(m_, p, enc_).log_probs);
        return out;
    }

private:
    const MtModel& m_;
    Tensor enc_;
};

class LmScorer : public SequenceScorer {
public:
    explicit LmScorer(const LanguageModel& lm) : lm_(lm) {}
    int vocab() const override { return lm_.config().src_vocab; }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override {
        NoGrad guard;
        std::vector<std::vector<double>> out;
        for (const auto& p : prefixes) out.push_back(lm_log_probs(lm_, p));
        return out;
    }

private:
    const LanguageModel& lm_;
};

// Weighted sum of member log-softmax scores. Weights are normalized at
// construction; zero-weight members are never evaluated, so degenerate
// weights reproduce the surviving member bitwise.
class EnsembleScorer : public SequenceScorer {
public:
    EnsembleScorer(std::vector<SequenceScorer*> members, std::vector<double> weights);
    int vocab() const override { return members_[0]->vocab(); }
    const std::vector<double>& weights() const { return weights_; }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override;

private:
    std::vector<SequenceScorer*> members_;
    std::vector<double> weights_;
};

// Shallow fusion: main scores plus lm_weight times language-model scores.
// A zero weight skips the language model entirely.
class FusedScorer : public SequenceScorer {
public:
    FusedScorer(SequenceScorer& main, SequenceScorer& lm, double lm_weight);
    int vocab() const override { return main_.vocab(); }
    std::vector<std::vector<double>> step(const std::vector<std::vector<int>>& prefixes) override;

private:
    SequenceScorer& main_;
    SequenceScorer& lm_;
    double lm_weight_;
};

std::vector<double> fuse_lm(const std::vector<double>& model_log_probs,
                            const std::vector<double>& lm_log_probs, double lm_weight);

// Length-synchronous beam search. The output length cap is
// ceil(length_ratio * input_len) appended tokens including eos; candidates
// are ranked per step by accumulated log-prob and finally by
// log_prob + alpha * appended-token count. When nothing finishes, the best
// unfinished hypotheses fill the list with finished == false.
std::vector<BeamHypothesis> beam_search(SequenceScorer& scorer, int input_len, const DecodeConfig& cfg);

// Teacher-forced pass over a complete hypothesis: exact log-prob under the
// model plus the context vectors, tokens unchanged.
BeamHypothesis forced_rescore(const AsrModel& m, const Tensor& feats, const std::vector<int>& tokens);

struct CoupledResult {
    std::size_t asr_index = 0;  // index into the n-best list
    BeamHypothesis asr;
    BeamHypothesis mt;
    double total = 0.0;  // asr.log_prob + mt.log_prob
    std::vector<std::pair<std::size_t, double>> explored;  // (z index, pair total) per scored pair
};

// Joint argmax of asr.log_prob + mt.log_prob over every source hypothesis
// and every target candidate the decode function returns for it.
CoupledResult coupled_translate(
    const std::vector<BeamHypothesis>& asr_nbest,
    const std::function<std::vector<BeamHypothesis>(const BeamHypothesis&)>& mt_decode_fn);

enum class CascadeMode { ext_ext, ext_joint, joint_ext, joint_joint, ensemble };

CascadeMode parse_cascade_mode(const std::string& name);
std::string cascade_mode_name(CascadeMode mode);

// Model bundle for the cascade. Ensemble weight vectors follow {ext, joint}
// order on both sides.
struct CascadeModels {
    AsrModel* ext_asr = nullptr;
    MtModel* ext_mt = nullptr;
    JointModel* joint = nullptr;
    LanguageModel* asr_lm = nullptr;
    std::vector<double> asr_ensemble_weights = {0.5, 0.5};
    std::vector<double> mt_ensemble_weights = {0.5, 0.5};
};

struct CascadeOutput {
    std::vector<int> asr_best_tokens;  // rank-1 ASR hypothesis, reported for WER
    std::vector<int> src_tokens;       // source hypothesis of the coupled winner
    std::vector<int> tgt_tokens;       // chosen translation
    double log_p_z = 0.0;              // exact model log-prob of the chosen source hypothesis
    double log_p_y = 0.0;              // score of the chosen translation as ranked
    bool asr_finished = false;
    bool mt_finished = false;
};

// Runs the two-stage cascade for one utterance. The source hypothesis
// log-prob is taken from a teacher-forced rescore under the ASR model whose
// output feeds the MT side (the joint ASR whenever its context vectors do).
CascadeOutput cascade_pipeline(CascadeMode mode, const CascadeModels& models, const Tensor& feats,
                               const DecodeConfig& cfg);

}  // namespace jamt
