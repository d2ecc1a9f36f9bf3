#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "jamt/error.hpp"
#include "jamt/metrics.hpp"
#include "jamt/model.hpp"
#include "jamt/rng.hpp"
#include "jamt/tensor.hpp"

namespace jamt {

// Noam schedule: warmup ramp to the peak at step == warmup, then inverse
// square-root decay.
inline double lr_at(long long step, int d_model, int warmup, double scale) {
    if (step < 1) throw ValueError("lr_at requires step >= 1");
    if (d_model < 1 || warmup < 1) throw ValueError("lr_at requires positive d_model and warmup");
    double s = static_cast<double>(step);
    double w = static_cast<double>(warmup);
    return scale * std::pow(static_cast<double>(d_model), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

// Adam over a fixed parameter list with the Noam schedule. Moments are kept
// in double; a step may be restricted to a subset of parameters, and
// untouched parameters keep their values and moments unchanged.
class Optimizer {
public:
    Optimizer(std::vector<std::pair<std::string, Tensor>> params, int d_model, int warmup = 400,
              double scale = 1.0, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9)
        : d_model_(d_model), warmup_(warmup), scale_(scale), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (params.empty()) throw ValueError("optimizer needs at least one parameter");
        for (auto& [name, p] : params) {
            Slot slot;
            slot.name = name;
            slot.param = p;
            slot.m.assign(p.values().size(), 0.0);
            slot.v.assign(p.values().size(), 0.0);
            slots_.push_back(std::move(slot));
        }
    }

    std::size_t size() const { return slots_.size(); }
    long long step_count() const { return step_; }
    double last_lr() const { return last_lr_; }

    // Indices of parameters whose name starts with any of the prefixes.
    std::vector<std::size_t> group(const std::vector<std::string>& prefixes) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < slots_.size(); ++i)
            for (const auto& pre : prefixes)
                if (slots_[i].name.rfind(pre, 0) == 0) {
                    out.push_back(i);
                    break;
                }
        return out;
    }

    std::vector<std::size_t> all_indices() const {
        std::vector<std::size_t> out(slots_.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
        return out;
    }

    void zero_grads() {
        for (auto& slot : slots_) {
            slot.param.grad();
            slot.param.zero_grad();
        }
    }

    void step() { step(all_indices()); }

    void step(const std::vector<std::size_t>& active) {
        ++step_;
        last_lr_ = lr_at(step_, d_model_, warmup_, scale_);
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t idx : active) {
            Slot& slot = slots_[idx];
            auto& values = slot.param.values();
            const auto& grads = slot.param.grad();
            for (std::size_t i = 0; i < values.size(); ++i) {
                double g = static_cast<double>(grads[i]);
                slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
                slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
                double mhat = slot.m[i] / bc1;
                double vhat = slot.v[i] / bc2;
                values[i] = static_cast<float>(static_cast<double>(values[i]) -
                                               last_lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };

    std::vector<Slot> slots_;
    int d_model_;
    int warmup_;
    double scale_;
    double beta1_, beta2_, eps_;
    long long step_ = 0;
    double last_lr_ = 0.0;
};

enum class BatchKind { asr_pair, mt_pair, st_triplet, text_only };

// One training example: features plus bos..eos token sequences. Unused
// fields stay empty for the kinds that do not carry them.
struct TrainItem {
    std::string id;
    Tensor feats;
    std::vector<int> src;
    std::vector<int> tgt;
};

struct TrainBatch {
    BatchKind kind = BatchKind::st_triplet;
    std::vector<TrainItem> items;
};

// Deterministic batch source: seeded shuffle each epoch, fixed batch size.
class Batcher {
public:
    Batcher(std::vector<TrainItem> items, BatchKind kind, int batch_size, std::uint64_t seed)
        : items_(std::move(items)), kind_(kind), batch_size_(batch_size), rng_(seed) {
        if (items_.empty()) throw ValueError("batcher needs a nonempty corpus");
        if (batch_size_ < 1) throw ValueError("batch size must be >= 1");
        order_.resize(items_.size());
        for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
        rng_.shuffle(order_);
    }

    TrainBatch next() {
        TrainBatch batch;
        batch.kind = kind_;
        for (int i = 0; i < batch_size_; ++i) {
            if (pos_ == order_.size()) {
                pos_ = 0;
                rng_.shuffle(order_);
            }
            batch.items.push_back(items_[order_[pos_++]]);
        }
        return batch;
    }

private:
    std::vector<TrainItem> items_;
    BatchKind kind_;
    int batch_size_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

namespace detail {

inline std::vector<int> shifted_targets(const std::vector<int>& seq) {
    return std::vector<int>(seq.begin() + 1, seq.end());
}

inline void check_seq(const std::vector<int>& seq, const char* what) {
    if (seq.size() < 2 || seq.front() != BpeModel::bos_id || seq.back() != BpeModel::eos_id)
        throw ValueError(std::string(what) + " sequence must run bos..eos");
}

// Combines per-item mean losses into a flat mean over all valid positions.
inline Tensor weighted_mean(const std::vector<std::pair<Tensor, int>>& parts) {
    long long total = 0;
    for (const auto& [loss, n] : parts) total += n;
    Tensor out;
    for (const auto& [loss, n] : parts) {
        Tensor term = scale(loss, static_cast<float>(static_cast<double>(n) / static_cast<double>(total)));
        out = out.defined() ? add(out, term) : term;
    }
    return out;
}

inline void check_finite_loss(double v) {
    if (!std::isfinite(v)) throw DivergenceError("training loss is not finite");
}

}  // namespace detail

// ASR branch loss over a batch: encode features, teacher-force the source
// transcript, cross-entropy averaged over target positions.
inline Tensor asr_batch_loss(JointModel& m, const TrainBatch& batch, Rng* drop_rng = nullptr,
                             float smoothing = 0.0f) {
    if (batch.items.empty()) throw ValueError("empty batch");
    std::vector<std::pair<Tensor, int>> parts;
    for (const auto& item : batch.items) {
        detail::check_seq(item.src, "source");
        Tensor enc = encode_features(m.asr(), item.feats, drop_rng);
        ForcedResult<float> forced = forced_decode(m.asr(), item.src, enc, drop_rng);
        Tensor ce = cross_entropy(forced.logits, detail::shifted_targets(item.src), smoothing,
                                  BpeModel::pad_id);
        parts.emplace_back(ce, static_cast<int>(item.src.size()) - 1);
    }
    return detail::weighted_mean(parts);
}

// MT branch loss over discrete source tokens (text-to-text pairs).
inline Tensor mt_batch_loss(JointModel& m, const TrainBatch& batch, Rng* drop_rng = nullptr,
                            float smoothing = 0.0f) {
    if (batch.items.empty()) throw ValueError("empty batch");
    std::vector<std::pair<Tensor, int>> parts;
    for (const auto& item : batch.items) {
        detail::check_seq(item.src, "source");
        detail::check_seq(item.tgt, "target");
        Tensor enc = mt_encode(m.mt(), item.src, drop_rng);
        ForcedResult<float> forced = forced_decode(m.mt(), item.tgt, enc, drop_rng);
        Tensor ce = cross_entropy(forced.logits, detail::shifted_targets(item.tgt), smoothing,
                                  BpeModel::pad_id);
        parts.emplace_back(ce, static_cast<int>(item.tgt.size()) - 1);
    }
    return detail::weighted_mean(parts);
}

struct MultitaskLosses {
    double asr = 0.0;
    double mt = 0.0;
    double total = 0.0;
};

// Builds the joint graph without updating: ASR forced decode over features,
// context vectors into the MT encoder, both cross-entropies combined as
// lambda * L_asr + (1 - lambda) * L_mt.
inline std::pair<Tensor, MultitaskLosses> multitask_loss(JointModel& m, const TrainBatch& batch,
                                                         double lambda, Rng* drop_rng = nullptr,
                                                         float smoothing = 0.0f) {
    if (lambda < 0.0 || lambda > 1.0) throw ValueError("lambda must be in [0, 1]");
    if (batch.kind != BatchKind::st_triplet) throw ValueError("multitask step needs st-triplet batches");
    if (batch.items.empty()) throw ValueError("empty batch");
    std::vector<std::pair<Tensor, int>> asr_parts, mt_parts;
    for (const auto& item : batch.items) {
        detail::check_seq(item.src, "source");
        detail::check_seq(item.tgt, "target");
        Tensor enc = encode_features(m.asr(), item.feats, drop_rng);
        ForcedResult<float> asr = forced_decode(m.asr(), item.src, enc, drop_rng);
        Tensor asr_ce = cross_entropy(asr.logits, detail::shifted_targets(item.src), smoothing,
                                      BpeModel::pad_id);
        asr_parts.emplace_back(asr_ce, static_cast<int>(item.src.size()) - 1);
        Tensor mt_enc = mt_encode(m.mt(), asr.states, drop_rng);
        ForcedResult<float> mt = forced_decode(m.mt(), item.tgt, mt_enc, drop_rng);
        Tensor mt_ce = cross_entropy(mt.logits, detail::shifted_targets(item.tgt), smoothing,
                                     BpeModel::pad_id);
        mt_parts.emplace_back(mt_ce, static_cast<int>(item.tgt.size()) - 1);
    }
    Tensor asr_loss = detail::weighted_mean(asr_parts);
    Tensor mt_loss = detail::weighted_mean(mt_parts);
    Tensor total = add(scale(asr_loss, static_cast<float>(lambda)),
                       scale(mt_loss, static_cast<float>(1.0 - lambda)));
    MultitaskLosses losses{asr_loss.item(), mt_loss.item(), total.item()};
    detail::check_finite_loss(losses.total);
    return {total, losses};
}

inline MultitaskLosses multitask_step(JointModel& m, Optimizer& opt, const TrainBatch& batch,
                                      double lambda, Rng* drop_rng = nullptr, float smoothing = 0.0f) {
    Tape tape;
    MultitaskLosses losses;
    {
        TapeScope scope(tape);
        auto [total, l] = multitask_loss(m, batch, lambda, drop_rng, smoothing);
        losses = l;
        opt.zero_grads();
        tape.backward(total);
    }
    opt.step();
    return losses;
}

// Text-only adaptation: the ASR decoder forced-decodes the source tokens
// against all-zero encoder states; the resulting context vectors drive the
// MT branch. Only the ASR decoder stack and the MT module are updated.
inline double adaptation_step(JointModel& m, Optimizer& opt, const TrainBatch& batch,
                              Rng* drop_rng = nullptr, float smoothing = 0.0f) {
    if (batch.kind != BatchKind::text_only) throw ValueError("adaptation step needs text-only batches");
    if (batch.items.empty()) throw ValueError("empty batch");
    Tape tape;
    double loss_value = 0.0;
    {
        TapeScope scope(tape);
        std::vector<std::pair<Tensor, int>> parts;
        for (const auto& item : batch.items) {
            detail::check_seq(item.src, "source");
            detail::check_seq(item.tgt, "target");
            int src_tokens = static_cast<int>(item.src.size()) - 1;
            Tensor zero_enc = zero_states<float>(src_tokens, m.config().d_model);
            ForcedResult<float> asr = forced_decode(m.asr(), item.src, zero_enc, drop_rng);
            Tensor mt_enc = mt_encode(m.mt(), asr.states, drop_rng);
            ForcedResult<float> mt = forced_decode(m.mt(), item.tgt, mt_enc, drop_rng);
            Tensor ce = cross_entropy(mt.logits, detail::shifted_targets(item.tgt), smoothing,
                                      BpeModel::pad_id);
            parts.emplace_back(ce, static_cast<int>(item.tgt.size()) - 1);
        }
        Tensor total = detail::weighted_mean(parts);
        loss_value = total.item();
        detail::check_finite_loss(loss_value);
        opt.zero_grads();
        tape.backward(total);
    }
    opt.step(opt.group({"asr/dec", "mt/"}));
    return loss_value;
}

// Pre-training steps for the two halves; each updates only its own group.
inline double pretrain_asr_step(JointModel& m, Optimizer& opt, const TrainBatch& batch,
                                Rng* drop_rng = nullptr, float smoothing = 0.0f) {
    Tape tape;
    double loss_value = 0.0;
    {
        TapeScope scope(tape);
        Tensor loss = asr_batch_loss(m, batch, drop_rng, smoothing);
        loss_value = loss.item();
        detail::check_finite_loss(loss_value);
        opt.zero_grads();
        tape.backward(loss);
    }
    opt.step(opt.group({"asr/"}));
    return loss_value;
}

inline double pretrain_mt_step(JointModel& m, Optimizer& opt, const TrainBatch& batch,
                               Rng* drop_rng = nullptr, float smoothing = 0.0f) {
    Tape tape;
    double loss_value = 0.0;
    {
        TapeScope scope(tape);
        Tensor loss = mt_batch_loss(m, batch, drop_rng, smoothing);
        loss_value = loss.item();
        detail::check_finite_loss(loss_value);
        opt.zero_grads();
        tape.backward(loss);
    }
    opt.step(opt.group({"mt/"}));
    return loss_value;
}

// Causal language-model step over the items' src sequences.
inline double lm_step(LanguageModel& lm, Optimizer& opt, const TrainBatch& batch,
                      Rng* drop_rng = nullptr, float smoothing = 0.0f) {
    if (batch.items.empty()) throw ValueError("empty batch");
    Tape tape;
    double loss_value = 0.0;
    {
        TapeScope scope(tape);
        std::vector<std::pair<Tensor, int>> parts;
        for (const auto& item : batch.items) {
            detail::check_seq(item.src, "source");
            ForcedResult<float> forced = lm_forced(lm, item.src, drop_rng);
            Tensor ce = cross_entropy(forced.logits, detail::shifted_targets(item.src), smoothing,
                                      BpeModel::pad_id);
            parts.emplace_back(ce, static_cast<int>(item.src.size()) - 1);
        }
        Tensor total = detail::weighted_mean(parts);
        loss_value = total.item();
        detail::check_finite_loss(loss_value);
        opt.zero_grads();
        tape.backward(total);
    }
    opt.step();
    return loss_value;
}

// Validation loss without parameter updates.
inline double evaluate_multitask(JointModel& m, const std::vector<TrainBatch>& batches, double lambda) {
    if (batches.empty()) throw ValueError("evaluate needs at least one batch");
    NoGrad guard;
    double total = 0.0;
    for (const auto& batch : batches) total += multitask_loss(m, batch, lambda).second.total;
    return total / static_cast<double>(batches.size());
}

struct AlternateResult {
    std::string pattern;          // 'S' for a multitask step, 'T' for a text step
    std::vector<double> losses;   // total loss per step
};

// Interleaves multitask and text-only adaptation steps: each round runs one
// ST step followed by `ratio` text steps; ratio 0 is pure multitask.
inline AlternateResult alternate_train(JointModel& m, Optimizer& opt,
                                       const std::function<TrainBatch()>& st_source,
                                       const std::function<TrainBatch()>& text_source, int ratio,
                                       int total_steps, double lambda, Rng* drop_rng = nullptr,
                                       float smoothing = 0.0f) {
    if (ratio < 0) throw ValueError("ratio must be >= 0");
    if (!st_source) throw ValueError("alternate_train needs an st stream");
    if (ratio > 0 && !text_source) throw ValueError("alternate_train needs a text stream when ratio > 0");
    AlternateResult result;
    int in_round = 0;
    for (int step = 0; step < total_steps; ++step) {
        if (in_round == 0) {
            result.pattern.push_back('S');
            result.losses.push_back(multitask_step(m, opt, st_source(), lambda, drop_rng, smoothing).total);
        } else {
            result.pattern.push_back('T');
            result.losses.push_back(adaptation_step(m, opt, text_source(), drop_rng, smoothing));
        }
        in_round = (in_round + 1) % (ratio + 1);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Corpus pruning
// ---------------------------------------------------------------------------

struct PruneItem {
    std::string id;
    Tensor feats;
    std::string transcript;
};

struct PruneDrop {
    std::string id;
    double wer = 0.0;
};

struct PruneResult {
    std::vector<std::size_t> kept;
    std::vector<PruneDrop> dropped;
};

// Recognizes each utterance, scores word error rate against the transcript,
// and drops utterances strictly above the threshold.
template <class RecognizeFn>
PruneResult prune_corpus(RecognizeFn&& recognize, const std::vector<PruneItem>& corpus, double threshold) {
    if (corpus.empty()) throw ValueError("prune_corpus needs a nonempty corpus");
    if (threshold < 0.0 || threshold > 1.0) throw ValueError("prune threshold must be in [0, 1]");
    PruneResult result;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::string hyp = recognize(corpus[i]);
        double rate = wer(corpus[i].transcript, hyp).rate;
        if (rate > threshold)
            result.dropped.push_back({corpus[i].id, rate});
        else
            result.kept.push_back(i);
    }
    return result;
}

}  // namespace jamt
