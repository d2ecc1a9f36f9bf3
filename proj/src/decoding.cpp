#include "jamt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace jamt {

namespace {

int appended_len(const BeamHypothesis& h) { return static_cast<int>(h.tokens.size()) - 1; }

// Final ordering: ranking score, then shorter, then lexicographic tokens.
void sort_hypotheses(std::vector<BeamHypothesis>& hyps, double alpha) {
    std::stable_sort(hyps.begin(), hyps.end(), [&](const BeamHypothesis& a, const BeamHypothesis& b) {
        double sa = a.log_prob + alpha * appended_len(a);
        double sb = b.log_prob + alpha * appended_len(b);
        if (sa != sb) return sa > sb;
        if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
        return a.tokens < b.tokens;
    });
}

void check_step_output(const std::vector<std::vector<double>>& scores, std::size_t beams, int vocab) {
    if (scores.size() != beams) throw ValueError("scorer returned the wrong number of rows");
    for (const auto& row : scores)
        if (static_cast<int>(row.size()) != vocab) throw ValueError("scorer returned the wrong vocab width");
}

std::vector<int> completed_tokens(const BeamHypothesis& h, int eos) {
    std::vector<int> tokens = h.tokens;
    if (tokens.empty() || tokens.back() != eos) tokens.push_back(eos);
    return tokens;
}

}  // namespace

EnsembleScorer::EnsembleScorer(std::vector<SequenceScorer*> members, std::vector<double> weights)
    : members_(std::move(members)), weights_(std::move(weights)) {
    if (members_.empty()) throw ValueError("ensemble needs at least one member");
    if (members_.size() != weights_.size()) throw ValueError("one weight per ensemble member");
    double sum = 0.0;
    for (double w : weights_) {
        if (w < 0.0) throw ValueError("ensemble weights must be nonnegative");
        sum += w;
    }
    if (!(sum > 0.0)) throw ValueError("ensemble weights must sum to a positive value");
    for (SequenceScorer* m : members_) {
        if (m == nullptr) throw ValueError("ensemble member is null");
        if (m->vocab() != members_[0]->vocab() || m->bos() != members_[0]->bos() ||
            m->eos() != members_[0]->eos())
            throw ValueError("ensemble members must share a vocabulary");
    }
    for (double& w : weights_) w /= sum;
}

std::vector<std::vector<double>> EnsembleScorer::step(const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out;
    bool first = true;
    for (std::size_t i = 0; i < members_.size(); ++i) {
        if (weights_[i] == 0.0) continue;
        std::vector<std::vector<double>> part = members_[i]->step(prefixes);
        check_step_output(part, prefixes.size(), vocab());
        if (first) {
            out = std::move(part);
            for (auto& row : out)
                for (double& v : row) v *= weights_[i];
            first = false;
        } else {
            for (std::size_t p = 0; p < out.size(); ++p)
                for (std::size_t v = 0; v < out[p].size(); ++v) out[p][v] += weights_[i] * part[p][v];
        }
    }
    return out;
}

FusedScorer::FusedScorer(SequenceScorer& main, SequenceScorer& lm, double lm_weight)
    : main_(main), lm_(lm), lm_weight_(lm_weight) {
    if (main_.vocab() != lm_.vocab()) throw ValueError("fusion needs matching vocabularies");
}

std::vector<std::vector<double>> FusedScorer::step(const std::vector<std::vector<int>>& prefixes) {
    std::vector<std::vector<double>> out = main_.step(prefixes);
    if (lm_weight_ == 0.0) return out;
    std::vector<std::vector<double>> lm = lm_.step(prefixes);
    check_step_output(lm, prefixes.size(), vocab());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = fuse_lm(out[p], lm[p], lm_weight_);
    return out;
}

std::vector<double> fuse_lm(const std::vector<double>& model_log_probs,
                            const std::vector<double>& lm_log_probs, double lm_weight) {
    if (model_log_probs.size() != lm_log_probs.size())
        throw ValueError("fusion needs equal-length score vectors");
    if (lm_weight == 0.0) return model_log_probs;
    std::vector<double> out(model_log_probs.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = model_log_probs[i] + lm_weight * lm_log_probs[i];
    return out;
}

std::vector<BeamHypothesis> beam_search(SequenceScorer& scorer, int input_len, const DecodeConfig& cfg) {
    cfg.validate();
    if (input_len < 1) throw ValueError("beam_search needs a nonempty input");
    int vocab = scorer.vocab();
    if (vocab < 2) throw ValueError("beam_search needs a vocabulary of at least two tokens");
    int eos = scorer.eos();
    int max_tokens = static_cast<int>(std::ceil(cfg.length_ratio * input_len));

    struct Candidate {
        double log_prob;
        int token;
        std::size_t beam;
    };

    std::vector<BeamHypothesis> live(1);
    live[0].tokens = {scorer.bos()};
    std::vector<BeamHypothesis> finished;

    for (int t = 1; t <= max_tokens && !live.empty(); ++t) {
        std::vector<std::vector<int>> prefixes;
        prefixes.reserve(live.size());
        for (const auto& h : live) prefixes.push_back(h.tokens);
        std::vector<std::vector<double>> scores = scorer.step(prefixes);
        check_step_output(scores, live.size(), vocab);

        std::vector<Candidate> cands;
        cands.reserve(live.size() * vocab);
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto& lp = scores[b];
            double best_other = -std::numeric_limits<double>::infinity();
            for (int v = 0; v < vocab; ++v)
                if (v != eos) best_other = std::max(best_other, lp[v]);
            for (int v = 0; v < vocab; ++v) {
                if (v == eos && !(lp[eos] >= cfg.eos_factor * best_other)) continue;
                cands.push_back({live[b].log_prob + lp[v], v, b});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
            if (a.token != b.token) return a.token < b.token;
            return a.beam < b.beam;
        });

        std::vector<BeamHypothesis> next;
        std::size_t limit = std::min<std::size_t>(cands.size(), cfg.beam_size);
        for (std::size_t i = 0; i < limit; ++i) {
            const Candidate& c = cands[i];
            BeamHypothesis h;
            h.tokens = live[c.beam].tokens;
            h.tokens.push_back(c.token);
            h.log_prob = c.log_prob;
            if (c.token == eos) {
                h.finished = true;
                finished.push_back(std::move(h));
            } else {
                next.push_back(std::move(h));
            }
        }
        live = std::move(next);
    }

    sort_hypotheses(finished, cfg.alpha);
    std::vector<BeamHypothesis> out;
    for (std::size_t i = 0; i < finished.size() && static_cast<int>(out.size()) < cfg.n_best; ++i)
        out.push_back(finished[i]);
    if (static_cast<int>(out.size()) < cfg.n_best) {
        sort_hypotheses(live, cfg.alpha);
        for (std::size_t i = 0; i < live.size() && static_cast<int>(out.size()) < cfg.n_best; ++i)
            out.push_back(live[i]);
    }
    return out;
}

BeamHypothesis forced_rescore(const AsrModel& m, const Tensor& feats, const std::vector<int>& tokens) {
    NoGrad guard;
    Tensor enc = encode_features(m, feats);
    ForcedResult<float> forced = forced_decode(m, tokens, enc);
    BeamHypothesis h;
    h.tokens = tokens;
    h.log_prob = forced.total_log_prob;
    h.context = forced.states;
    h.finished = true;
    return h;
}

CoupledResult coupled_translate(
    const std::vector<BeamHypothesis>& asr_nbest,
    const std::function<std::vector<BeamHypothesis>(const BeamHypothesis&)>& mt_decode_fn) {
    if (asr_nbest.empty()) throw ValueError("coupled search needs a nonempty n-best list");
    if (!mt_decode_fn) throw ValueError("coupled search needs an mt decode function");
    CoupledResult best;
    bool have = false;
    for (std::size_t zi = 0; zi < asr_nbest.size(); ++zi) {
        std::vector<BeamHypothesis> candidates = mt_decode_fn(asr_nbest[zi]);
        for (const auto& y : candidates) {
            double total = asr_nbest[zi].log_prob + y.log_prob;
            best.explored.emplace_back(zi, total);
            if (!have || total > best.total) {
                best.asr_index = zi;
                best.asr = asr_nbest[zi];
                best.mt = y;
                best.total = total;
                have = true;
            }
        }
    }
    if (!have) throw ValueError("mt decode produced no candidates");
    return best;
}

CascadeMode parse_cascade_mode(const std::string& name) {
    if (name == "ext-ext") return CascadeMode::ext_ext;
    if (name == "ext-joint") return CascadeMode::ext_joint;
    if (name == "joint-ext") return CascadeMode::joint_ext;
    if (name == "joint-joint") return CascadeMode::joint_joint;
    if (name == "ensemble") return CascadeMode::ensemble;
    throw ValueError("unknown cascade mode: " + name);
}

std::string cascade_mode_name(CascadeMode mode) {
    switch (mode) {
        case CascadeMode::ext_ext: return "ext-ext";
        case CascadeMode::ext_joint: return "ext-joint";
        case CascadeMode::joint_ext: return "joint-ext";
        case CascadeMode::joint_joint: return "joint-joint";
        case CascadeMode::ensemble: return "ensemble";
    }
    throw ValueError("unknown cascade mode");
}

CascadeOutput cascade_pipeline(CascadeMode mode, const CascadeModels& models, const Tensor& feats,
                               const DecodeConfig& cfg) {
    cfg.validate();
    // Active sides per mode; ensemble mode activates by nonzero weight so a
    // degenerate weight vector collapses to the matching single-model mode.
    bool asr_ext_on = mode == CascadeMode::ext_ext || mode == CascadeMode::ext_joint;
    bool asr_joint_on = mode == CascadeMode::joint_ext || mode == CascadeMode::joint_joint;
    bool mt_ext_on = mode == CascadeMode::ext_ext || mode == CascadeMode::joint_ext;
    bool mt_joint_on = mode == CascadeMode::ext_joint || mode == CascadeMode::joint_joint;
    if (mode == CascadeMode::ensemble) {
        if (models.asr_ensemble_weights.size() != 2 || models.mt_ensemble_weights.size() != 2)
            throw ValueError("ensemble mode needs {ext, joint} weight pairs on both sides");
        asr_ext_on = models.asr_ensemble_weights[0] > 0.0;
        asr_joint_on = models.asr_ensemble_weights[1] > 0.0;
        mt_ext_on = models.mt_ensemble_weights[0] > 0.0;
        mt_joint_on = models.mt_ensemble_weights[1] > 0.0;
        if (!(asr_ext_on || asr_joint_on) || !(mt_ext_on || mt_joint_on))
            throw ValueError("ensemble mode needs a positive weight on each side");
    }

    if (asr_ext_on && models.ext_asr == nullptr)
        throw ValueError(cascade_mode_name(mode) + " needs an external asr model");
    if (mt_ext_on && models.ext_mt == nullptr)
        throw ValueError(cascade_mode_name(mode) + " needs an external mt model");
    if ((asr_joint_on || mt_joint_on) && models.joint == nullptr)
        throw ValueError(cascade_mode_name(mode) + " needs a joint model");

    NoGrad guard;
    Tensor ext_enc, joint_enc;
    if (asr_ext_on) ext_enc = encode_features(*models.ext_asr, feats);
    if (asr_joint_on || mt_joint_on) joint_enc = encode_features(models.joint->asr(), feats);

    std::vector<BeamHypothesis> nbest;
    {
        const AsrModel& ext_model = models.ext_asr != nullptr ? *models.ext_asr : models.joint->asr();
        const AsrModel& joint_model = models.joint != nullptr ? models.joint->asr() : *models.ext_asr;
        AsrScorer ext_scorer(ext_model, ext_enc);
        AsrScorer joint_scorer(joint_model, joint_enc);
        SequenceScorer* base = nullptr;
        EnsembleScorer both({&ext_scorer, &joint_scorer},
                            mode == CascadeMode::ensemble ? models.asr_ensemble_weights
                                                          : std::vector<double>{1.0, 0.0});
        if (asr_ext_on && asr_joint_on) {
            if (ext_enc.dim(0) != joint_enc.dim(0))
                throw ShapeError("asr encoders disagree on the subsampled length");
            base = &both;
        } else if (asr_joint_on) {
            base = mode == CascadeMode::ensemble ? static_cast<SequenceScorer*>(&both) : &joint_scorer;
        } else {
            base = mode == CascadeMode::ensemble ? static_cast<SequenceScorer*>(&both) : &ext_scorer;
        }
        int input_len = asr_ext_on ? ext_enc.dim(0) : joint_enc.dim(0);
        if (models.asr_lm != nullptr && cfg.lm_weight != 0.0) {
            LmScorer lm(*models.asr_lm);
            FusedScorer fused(*base, lm, cfg.lm_weight);
            nbest = beam_search(fused, input_len, cfg);
        } else {
            nbest = beam_search(*base, input_len, cfg);
        }
    }

    // The source log-prob and the context vectors come from the ASR model
    // whose output feeds MT: the joint ASR whenever its context vectors do,
    // otherwise the model that decoded the tokens (ext first when both did).
    const AsrModel& scoring_asr = mt_joint_on ? models.joint->asr()
                                  : asr_ext_on ? *models.ext_asr
                                               : models.joint->asr();
    std::vector<BeamHypothesis> rescored;
    for (const auto& h : nbest) {
        BeamHypothesis r = forced_rescore(scoring_asr, feats, completed_tokens(h, BpeModel::eos_id));
        r.finished = h.finished;
        rescored.push_back(std::move(r));
    }

    DecodeConfig mt_cfg = cfg;
    mt_cfg.n_best = cfg.beam_size;
    auto mt_decode = [&](const BeamHypothesis& z) {
        Tensor tok_enc, ctx_enc;
        if (mt_ext_on) tok_enc = mt_encode(*models.ext_mt, z.tokens);
        if (mt_joint_on) ctx_enc = mt_encode(models.joint->mt(), z.context);
        int input_len = mt_ext_on ? tok_enc.dim(0) : ctx_enc.dim(0);
        if (mode == CascadeMode::ensemble) {
            const MtModel& ext_model = models.ext_mt != nullptr ? *models.ext_mt : models.joint->mt();
            const MtModel& joint_model = models.joint != nullptr ? models.joint->mt() : *models.ext_mt;
            MtScorer ext_scorer(ext_model, tok_enc);
            MtScorer joint_scorer(joint_model, ctx_enc);
            EnsembleScorer ens({&ext_scorer, &joint_scorer}, models.mt_ensemble_weights);
            return beam_search(ens, input_len, mt_cfg);
        }
        if (mt_joint_on) {
            MtScorer scorer(models.joint->mt(), ctx_enc);
            return beam_search(scorer, input_len, mt_cfg);
        }
        MtScorer scorer(*models.ext_mt, tok_enc);
        return beam_search(scorer, input_len, mt_cfg);
    };

    CoupledResult coupled = coupled_translate(rescored, mt_decode);

    CascadeOutput out;
    out.asr_best_tokens = rescored[0].tokens;
    out.src_tokens = coupled.asr.tokens;
    out.tgt_tokens = coupled.mt.tokens;
    out.log_p_z = coupled.asr.log_prob;
    out.log_p_y = coupled.mt.log_prob;
    out.asr_finished = rescored[0].finished;
    out.mt_finished = coupled.mt.finished;
    return out;
}

}  // namespace jamt
