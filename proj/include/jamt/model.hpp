#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "jamt/checkpoint.hpp"
#include "jamt/error.hpp"
#include "jamt/rng.hpp"
#include "jamt/tensor.hpp"
#include "jamt/text.hpp"

namespace jamt {

struct TransformerConfig {
    int d_model = 64;
    int n_heads = 4;
    int ff_dim = 256;
    int enc_layers = 2;
    int dec_layers = 2;
    int src_vocab = 0;
    int tgt_vocab = 0;
    int feature_dim = 8;
    float dropout = 0.0f;
    int max_len = 256;

    void validate() const {
        if (d_model < 1 || n_heads < 1 || ff_dim < 1 || enc_layers < 1 || dec_layers < 1 ||
            feature_dim < 1 || max_len < 1)
            throw ValueError("transformer config dims must be >= 1");
        if (d_model % n_heads != 0) throw ValueError("d_model must be divisible by n_heads");
        if (dropout < 0.0f || dropout >= 1.0f) throw ValueError("dropout must be in [0, 1)");
    }
};

enum class ModelKind : int { asr = 0, mt = 1, lm = 2, joint = 3 };

namespace detail {

// Collects named parameters in registration order; the order defines the
// checkpoint layout.
template <class T>
struct ParamBuilderT {
    std::vector<std::pair<std::string, TensorT<T>>>& out;
    Rng& rng;
    std::string prefix;

    TensorT<T> uniform(const std::string& name, std::vector<int> shape, int fan_in) {
        TensorT<T> t = TensorT<T>::zeros(std::move(shape), true);
        double a = std::sqrt(3.0 / static_cast<double>(fan_in));
        for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-a, a));
        out.emplace_back(prefix + name, t);
        return t;
    }

    TensorT<T> constant(const std::string& name, std::vector<int> shape, T fill) {
        TensorT<T> t = TensorT<T>::zeros(std::move(shape), true);
        for (auto& v : t.values()) v = fill;
        out.emplace_back(prefix + name, t);
        return t;
    }
};

// Sinusoidal position table, computed in double and cast on use.
inline std::vector<double> make_pe_table(int max_len, int d_model) {
    std::vector<double> pe(static_cast<std::size_t>(max_len) * d_model);
    for (int pos = 0; pos < max_len; ++pos) {
        for (int j = 0; j < d_model; ++j) {
            int pair = j / 2;
            double angle = pos * std::exp(-std::log(10000.0) * (2.0 * pair) / d_model);
            pe[static_cast<std::size_t>(pos) * d_model + j] = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

template <class T>
TensorT<T> pe_rows(const std::vector<double>& table, int rows, int d_model) {
    std::vector<T> v(static_cast<std::size_t>(rows) * d_model);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(table[i]);
    return TensorT<T>::from_data({rows, d_model}, std::move(v));
}

template <class T>
std::vector<double> row_log_probs(const T* row, int n) {
    double m = static_cast<double>(row[0]);
    for (int i = 1; i < n; ++i) m = std::max(m, static_cast<double>(row[i]));
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::exp(static_cast<double>(row[i]) - m);
    double lse = m + std::log(s);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out[i] = static_cast<double>(row[i]) - lse;
    return out;
}

}  // namespace detail

template <class T>
struct LinearT {
    TensorT<T> w;  // [in, out]
    TensorT<T> b;  // [out]
};

template <class T>
LinearT<T> make_linear(detail::ParamBuilderT<T>& pb, const std::string& name, int in, int out) {
    return {pb.uniform(name + "/w", {in, out}, in), pb.constant(name + "/b", {out}, T(0))};
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const LinearT<T>& lin) {
    return add_rowvec(matmul(x, lin.w), lin.b);
}

template <class T>
struct LayerNormT {
    TensorT<T> gain;
    TensorT<T> bias;
};

template <class T>
LayerNormT<T> make_layer_norm(detail::ParamBuilderT<T>& pb, const std::string& name, int d) {
    return {pb.constant(name + "/g", {d}, T(1)), pb.constant(name + "/b", {d}, T(0))};
}

template <class T>
TensorT<T> norm(const TensorT<T>& x, const LayerNormT<T>& ln) {
    return layer_norm(x, ln.gain, ln.bias, T(1e-5));
}

template <class T>
struct AttentionT {
    LinearT<T> q, k, v, o;
};

template <class T>
AttentionT<T> make_attention(detail::ParamBuilderT<T>& pb, const std::string& name, int d) {
    return {make_linear(pb, name + "/q", d, d), make_linear(pb, name + "/k", d, d),
            make_linear(pb, name + "/v", d, d), make_linear(pb, name + "/o", d, d)};
}

template <class T>
TensorT<T> attend(const TensorT<T>& x_q, const TensorT<T>& x_kv, const AttentionT<T>& attn, int n_heads,
                  const std::vector<int>& limits) {
    TensorT<T> q = linear(x_q, attn.q);
    TensorT<T> k = linear(x_kv, attn.k);
    TensorT<T> v = linear(x_kv, attn.v);
    return linear(multi_head_attention(q, k, v, n_heads, limits), attn.o);
}

template <class T>
struct FeedForwardT {
    LinearT<T> w1, w2;
};

template <class T>
FeedForwardT<T> make_feed_forward(detail::ParamBuilderT<T>& pb, const std::string& name, int d, int ff) {
    return {make_linear(pb, name + "/w1", d, ff), make_linear(pb, name + "/w2", ff, d)};
}

template <class T>
TensorT<T> feed_forward(const TensorT<T>& x, const FeedForwardT<T>& ff) {
    return linear(relu(linear(x, ff.w1)), ff.w2);
}

// Pre-norm block with self-attention and feed-forward sublayers. Also serves
// as the causal block of the decoder-only language model.
template <class T>
struct EncoderLayerT {
    LayerNormT<T> ln1, ln2;
    AttentionT<T> attn;
    FeedForwardT<T> ff;
};

template <class T>
EncoderLayerT<T> make_encoder_layer(detail::ParamBuilderT<T>& pb, const std::string& name, int d, int ff) {
    return {make_layer_norm(pb, name + "/ln1", d), make_layer_norm(pb, name + "/ln2", d),
            make_attention(pb, name + "/attn", d), make_feed_forward(pb, name + "/ff", d, ff)};
}

template <class T>
TensorT<T> encoder_layer_forward(TensorT<T> x, const EncoderLayerT<T>& layer, int n_heads,
                                 const std::vector<int>& limits, T drop_p, Rng* drop_rng) {
    TensorT<T> n1 = norm(x, layer.ln1);
    TensorT<T> h = attend(n1, n1, layer.attn, n_heads, limits);
    if (drop_rng && drop_p > T(0)) h = dropout(h, drop_p, *drop_rng);
    x = add(x, h);
    h = feed_forward(norm(x, layer.ln2), layer.ff);
    if (drop_rng && drop_p > T(0)) h = dropout(h, drop_p, *drop_rng);
    return add(x, h);
}

template <class T>
struct DecoderLayerT {
    LayerNormT<T> ln1, ln2, ln3;
    AttentionT<T> self_attn, cross_attn;
    FeedForwardT<T> ff;
};

template <class T>
DecoderLayerT<T> make_decoder_layer(detail::ParamBuilderT<T>& pb, const std::string& name, int d, int ff) {
    return {make_layer_norm(pb, name + "/ln1", d), make_layer_norm(pb, name + "/ln2", d),
            make_layer_norm(pb, name + "/ln3", d), make_attention(pb, name + "/self", d),
            make_attention(pb, name + "/cross", d), make_feed_forward(pb, name + "/ff", d, ff)};
}

template <class T>
TensorT<T> decoder_layer_forward(TensorT<T> x, const DecoderLayerT<T>& layer, const TensorT<T>& enc,
                                 int n_heads, T drop_p, Rng* drop_rng, bool zero_cross) {
    int len = x.dim(0);
    std::vector<int> causal(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) causal[static_cast<std::size_t>(i)] = i + 1;
    TensorT<T> n1 = norm(x, layer.ln1);
    TensorT<T> h = attend(n1, n1, layer.self_attn, n_heads, causal);
    if (drop_rng && drop_p > T(0)) h = dropout(h, drop_p, *drop_rng);
    x = add(x, h);
    if (!zero_cross) {
        std::vector<int> full(static_cast<std::size_t>(len), enc.dim(0));
        h = attend(norm(x, layer.ln2), enc, layer.cross_attn, n_heads, full);
        if (drop_rng && drop_p > T(0)) h = dropout(h, drop_p, *drop_rng);
        x = add(x, h);
    }
    h = feed_forward(norm(x, layer.ln3), layer.ff);
    if (drop_rng && drop_p > T(0)) h = dropout(h, drop_p, *drop_rng);
    return add(x, h);
}

template <class T>
struct EncoderStackT {
    std::vector<EncoderLayerT<T>> layers;
    LayerNormT<T> final_ln;
};

template <class T>
EncoderStackT<T> make_encoder_stack(detail::ParamBuilderT<T>& pb, const std::string& name, int n_layers,
                                    int d, int ff) {
    EncoderStackT<T> stack;
    for (int i = 0; i < n_layers; ++i)
        stack.layers.push_back(make_encoder_layer(pb, name + "/" + std::to_string(i), d, ff));
    stack.final_ln = make_layer_norm(pb, name + "/ln", d);
    return stack;
}

template <class T>
TensorT<T> encoder_stack_forward(TensorT<T> x, const EncoderStackT<T>& stack, int n_heads, bool causal,
                                 T drop_p, Rng* drop_rng) {
    int len = x.dim(0);
    std::vector<int> limits(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) limits[static_cast<std::size_t>(i)] = causal ? i + 1 : len;
    for (const auto& layer : stack.layers)
        x = encoder_layer_forward(x, layer, n_heads, limits, drop_p, drop_rng);
    return norm(x, stack.final_ln);
}

template <class T>
struct DecoderStackT {
    TensorT<T> embed;  // [vocab, d]
    std::vector<DecoderLayerT<T>> layers;
    LayerNormT<T> final_ln;
};

template <class T>
DecoderStackT<T> make_decoder_stack(detail::ParamBuilderT<T>& pb, const std::string& name, int vocab,
                                    int n_layers, int d, int ff) {
    DecoderStackT<T> stack;
    stack.embed = pb.uniform(name + "/embed", {vocab, d}, d);
    for (int i = 0; i < n_layers; ++i)
        stack.layers.push_back(make_decoder_layer(pb, name + "/" + std::to_string(i), d, ff));
    stack.final_ln = make_layer_norm(pb, name + "/ln", d);
    return stack;
}

// Feature subsampler: two stride-2 convolutions with relu, factor-4 in time.
template <class T>
struct FrontendT {
    TensorT<T> conv1_w, conv1_b, conv2_w, conv2_b;
};

template <class T>
FrontendT<T> make_frontend(detail::ParamBuilderT<T>& pb, const std::string& name, int feat_dim, int d) {
    return {pb.uniform(name + "/conv1/w", {d, 3 * feat_dim}, 3 * feat_dim),
            pb.constant(name + "/conv1/b", {d}, T(0)),
            pb.uniform(name + "/conv2/w", {d, 3 * d}, 3 * d),
            pb.constant(name + "/conv2/b", {d}, T(0))};
}

template <class T>
TensorT<T> frontend_forward(const TensorT<T>& feats, const FrontendT<T>& front) {
    TensorT<T> x = relu(conv1d_s2(feats, front.conv1_w, front.conv1_b));
    return relu(conv1d_s2(x, front.conv2_w, front.conv2_b));
}

template <class T>
class AsrModelT {
public:
    AsrModelT(TransformerConfig cfg, Rng& rng, const std::string& prefix = "") : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.src_vocab < 2) throw ValueError("asr model needs src_vocab >= 2");
        detail::ParamBuilderT<T> pb{params_, rng, prefix};
        front_ = make_frontend(pb, "front", cfg_.feature_dim, cfg_.d_model);
        enc_ = make_encoder_stack(pb, "enc", cfg_.enc_layers, cfg_.d_model, cfg_.ff_dim);
        dec_ = make_decoder_stack(pb, "dec", cfg_.src_vocab, cfg_.dec_layers, cfg_.d_model, cfg_.ff_dim);
        out_ = make_linear(pb, "out", cfg_.d_model, cfg_.src_vocab);
        pe_ = detail::make_pe_table(cfg_.max_len, cfg_.d_model);
    }

    AsrModelT(TransformerConfig cfg, std::uint64_t seed) : AsrModelT(cfg, *make_seed_rng(seed)) {}

    const TransformerConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& named_parameters() const { return params_; }
    const FrontendT<T>& frontend() const { return front_; }
    const EncoderStackT<T>& encoder() const { return enc_; }
    const DecoderStackT<T>& decoder() const { return dec_; }
    const LinearT<T>& out_proj() const { return out_; }
    const std::vector<double>& pe_table() const { return pe_; }

    // Diagnostic switch that removes the cross-attention branch entirely.
    bool diag_zero_cross = false;

private:
    static Rng* make_seed_rng(std::uint64_t seed) {
        thread_local Rng rng(0);
        rng = Rng(seed);
        return &rng;
    }

    TransformerConfig cfg_;
    std::vector<std::pair<std::string, TensorT<T>>> params_;
    FrontendT<T> front_;
    EncoderStackT<T> enc_;
    DecoderStackT<T> dec_;
    LinearT<T> out_;
    std::vector<double> pe_;
};

template <class T>
class MtModelT {
public:
    MtModelT(TransformerConfig cfg, Rng& rng, const std::string& prefix = "") : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.src_vocab < 2 || cfg_.tgt_vocab < 2) throw ValueError("mt model needs both vocabs >= 2");
        detail::ParamBuilderT<T> pb{params_, rng, prefix};
        src_embed_ = pb.uniform("src_embed", {cfg_.src_vocab, cfg_.d_model}, cfg_.d_model);
        enc_ = make_encoder_stack(pb, "enc", cfg_.enc_layers, cfg_.d_model, cfg_.ff_dim);
        dec_ = make_decoder_stack(pb, "dec", cfg_.tgt_vocab, cfg_.dec_layers, cfg_.d_model, cfg_.ff_dim);
        out_ = make_linear(pb, "out", cfg_.d_model, cfg_.tgt_vocab);
        pe_ = detail::make_pe_table(cfg_.max_len, cfg_.d_model);
    }

    MtModelT(TransformerConfig cfg, std::uint64_t seed) : MtModelT(cfg, *make_seed_rng(seed)) {}

    const TransformerConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& named_parameters() const { return params_; }
    const TensorT<T>& src_embed() const { return src_embed_; }
    const EncoderStackT<T>& encoder() const { return enc_; }
    const DecoderStackT<T>& decoder() const { return dec_; }
    const LinearT<T>& out_proj() const { return out_; }
    const std::vector<double>& pe_table() const { return pe_; }

    bool diag_zero_cross = false;

private:
    static Rng* make_seed_rng(std::uint64_t seed) {
        thread_local Rng rng(0);
        rng = Rng(seed);
        return &rng;
    }

    TransformerConfig cfg_;
    std::vector<std::pair<std::string, TensorT<T>>> params_;
    TensorT<T> src_embed_;
    EncoderStackT<T> enc_;
    DecoderStackT<T> dec_;
    LinearT<T> out_;
    std::vector<double> pe_;
};

// Decoder-only transformer over cfg.src_vocab.
template <class T>
class LanguageModelT {
public:
    LanguageModelT(TransformerConfig cfg, Rng& rng, const std::string& prefix = "") : cfg_(cfg) {
        cfg_.validate();
        if (cfg_.src_vocab < 2) throw ValueError("language model needs src_vocab >= 2");
        detail::ParamBuilderT<T> pb{params_, rng, prefix};
        embed_ = pb.uniform("embed", {cfg_.src_vocab, cfg_.d_model}, cfg_.d_model);
        stack_ = make_encoder_stack(pb, "blocks", cfg_.dec_layers, cfg_.d_model, cfg_.ff_dim);
        out_ = make_linear(pb, "out", cfg_.d_model, cfg_.src_vocab);
        pe_ = detail::make_pe_table(cfg_.max_len, cfg_.d_model);
    }

    LanguageModelT(TransformerConfig cfg, std::uint64_t seed) : LanguageModelT(cfg, *make_seed_rng(seed)) {}

    const TransformerConfig& config() const { return cfg_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& named_parameters() const { return params_; }
    const TensorT<T>& embed() const { return embed_; }
    const EncoderStackT<T>& stack() const { return stack_; }
    const LinearT<T>& out_proj() const { return out_; }
    const std::vector<double>& pe_table() const { return pe_; }

private:
    static Rng* make_seed_rng(std::uint64_t seed) {
        thread_local Rng rng(0);
        rng = Rng(seed);
        return &rng;
    }

    TransformerConfig cfg_;
    std::vector<std::pair<std::string, TensorT<T>>> params_;
    TensorT<T> embed_;
    EncoderStackT<T> stack_;
    LinearT<T> out_;
    std::vector<double> pe_;
};

// ASR and MT halves trained jointly; parameter names carry asr/ and mt/
// prefixes so optimizer groups can address either half.
template <class T>
class JointModelT {
public:
    JointModelT(TransformerConfig cfg, std::uint64_t seed) : rng_(seed), asr_(cfg, rng_, "asr/"), mt_(cfg, rng_, "mt/") {
        params_ = asr_.named_parameters();
        params_.insert(params_.end(), mt_.named_parameters().begin(), mt_.named_parameters().end());
    }

    const TransformerConfig& config() const { return asr_.config(); }
    AsrModelT<T>& asr() { return asr_; }
    const AsrModelT<T>& asr() const { return asr_; }
    MtModelT<T>& mt() { return mt_; }
    const MtModelT<T>& mt() const { return mt_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& named_parameters() const { return params_; }

private:
    Rng rng_;
    AsrModelT<T> asr_;
    MtModelT<T> mt_;
    std::vector<std::pair<std::string, TensorT<T>>> params_;
};

using AsrModel = AsrModelT<float>;
using MtModel = MtModelT<float>;
using LanguageModel = LanguageModelT<float>;
using JointModel = JointModelT<float>;

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> zero_states(int rows, int d_model) {
    return TensorT<T>::zeros({rows, d_model});
}

template <class T>
TensorT<T> encode_features(const AsrModelT<T>& m, const TensorT<T>& feats, Rng* drop_rng = nullptr) {
    const auto& cfg = m.config();
    if (!feats.defined() || feats.rank() != 2) throw ShapeError("features must be a rank-2 matrix");
    if (feats.dim(1) != cfg.feature_dim) throw ShapeError("feature width does not match feature_dim");
    if (feats.dim(0) < 4) throw ValueError("need at least 4 feature frames");
    TensorT<T> x = frontend_forward(feats, m.frontend());
    if (x.dim(0) > cfg.max_len) throw ValueError("subsampled length exceeds max_len");
    x = add(x, detail::pe_rows<T>(m.pe_table(), x.dim(0), cfg.d_model));
    T p = static_cast<T>(cfg.dropout);
    if (drop_rng && p > T(0)) x = dropout(x, p, *drop_rng);
    return encoder_stack_forward(x, m.encoder(), cfg.n_heads, false, p, drop_rng);
}

namespace detail {

// Shared decoder forward: embeds the prefix, runs the causal stack with
// cross-attention into enc, and returns the post-norm states [L, d].
template <class T>
TensorT<T> decoder_states(const DecoderStackT<T>& dec, const std::vector<int>& input_ids,
                          const TensorT<T>& enc, const TransformerConfig& cfg,
                          const std::vector<double>& pe, T drop_p, Rng* drop_rng, bool zero_cross) {
    if (input_ids.empty()) throw ValueError("decoder input must be nonempty");
    if (static_cast<int>(input_ids.size()) > cfg.max_len) throw ValueError("prefix exceeds max_len");
    if (!zero_cross && (!enc.defined() || enc.rank() != 2 || enc.dim(1) != cfg.d_model))
        throw ShapeError("encoder states must be [len, d_model]");
    TensorT<T> x = scale(embedding(dec.embed, input_ids), static_cast<T>(std::sqrt(double(cfg.d_model))));
    x = add(x, pe_rows<T>(pe, static_cast<int>(input_ids.size()), cfg.d_model));
    if (drop_rng && drop_p > T(0)) x = dropout(x, drop_p, *drop_rng);
    for (const auto& layer : dec.layers)
        x = decoder_layer_forward(x, layer, enc, cfg.n_heads, drop_p, drop_rng, zero_cross);
    return norm(x, dec.final_ln);
}

template <class T>
void check_prefix(const std::vector<int>& prefix) {
    if (prefix.empty() || prefix[0] != BpeModel::bos_id) throw ValueError("prefix must start with bos");
}

template <class T>
void check_target(const std::vector<int>& target) {
    if (target.size() < 2 || target.front() != BpeModel::bos_id || target.back() != BpeModel::eos_id)
        throw ValueError("target must start with bos and end with eos");
}

}  // namespace detail

template <class T>
struct StepResultT {
    std::vector<double> log_probs;  // normalized next-token log-probs
    TensorT<T> context;             // final decoder layer output at the last position
};

template <class T>
struct ForcedResultT {
    TensorT<T> states;                          // [L, d_model] context vector sequence
    TensorT<T> logits;                          // [L, V]
    std::vector<std::vector<double>> log_probs; // normalized per-row log-probs
    double total_log_prob = 0.0;                // sum over the L target tokens
};

namespace detail {

template <class T>
StepResultT<T> step_from_states(const TensorT<T>& states, const LinearT<T>& out, int d_model) {
    int last = states.dim(0) - 1;
    std::vector<T> row(states.values().begin() + static_cast<std::size_t>(last) * d_model,
                       states.values().begin() + static_cast<std::size_t>(last + 1) * d_model);
    TensorT<T> context = TensorT<T>::from_data({d_model}, row);
    TensorT<T> row_mat = TensorT<T>::from_data({1, d_model}, std::move(row));
    TensorT<T> logits = linear(row_mat, out);
    StepResultT<T> r;
    r.log_probs = row_log_probs(logits.values().data(), logits.dim(1));
    r.context = std::move(context);
    return r;
}

template <class T>
ForcedResultT<T> forced_from_states(TensorT<T> states, const LinearT<T>& out,
                                    const std::vector<int>& target) {
    ForcedResultT<T> r;
    r.logits = linear(states, out);
    r.states = std::move(states);
    int L = r.logits.dim(0);
    int V = r.logits.dim(1);
    r.log_probs.reserve(static_cast<std::size_t>(L));
    for (int t = 0; t < L; ++t) {
        r.log_probs.push_back(row_log_probs(r.logits.values().data() + static_cast<std::size_t>(t) * V, V));
        int tok = target[static_cast<std::size_t>(t) + 1];
        if (tok < 0 || tok >= V) throw ValueError("target token out of vocabulary range");
        r.total_log_prob += r.log_probs.back()[static_cast<std::size_t>(tok)];
    }
    return r;
}

}  // namespace detail

template <class T>
using StepResult = StepResultT<T>;
template <class T>
using ForcedResult = ForcedResultT<T>;

template <class T>
StepResultT<T> decode_step(const AsrModelT<T>& m, const std::vector<int>& prefix, const TensorT<T>& enc) {
    detail::check_prefix<T>(prefix);
    TensorT<T> states = detail::decoder_states(m.decoder(), prefix, enc, m.config(), m.pe_table(), T(0),
                                               nullptr, m.diag_zero_cross);
    return detail::step_from_states(states, m.out_proj(), m.config().d_model);
}

template <class T>
StepResultT<T> decode_step(const MtModelT<T>& m, const std::vector<int>& prefix, const TensorT<T>& enc) {
    detail::check_prefix<T>(prefix);
    TensorT<T> states = detail::decoder_states(m.decoder(), prefix, enc, m.config(), m.pe_table(), T(0),
                                               nullptr, m.diag_zero_cross);
    return detail::step_from_states(states, m.out_proj(), m.config().d_model);
}

// Teacher-forced pass over the whole target. Row t of the result equals
// decode_step on the length-(t+1) prefix, exactly.
template <class T>
ForcedResultT<T> forced_decode(const AsrModelT<T>& m, const std::vector<int>& target, const TensorT<T>& enc,
                               Rng* drop_rng = nullptr) {
    detail::check_target<T>(target);
    std::vector<int> input(target.begin(), target.end() - 1);
    TensorT<T> states = detail::decoder_states(m.decoder(), input, enc, m.config(), m.pe_table(),
                                               static_cast<T>(m.config().dropout), drop_rng, m.diag_zero_cross);
    return detail::forced_from_states(states, m.out_proj(), target);
}

template <class T>
ForcedResultT<T> forced_decode(const MtModelT<T>& m, const std::vector<int>& target, const TensorT<T>& enc,
                               Rng* drop_rng = nullptr) {
    detail::check_target<T>(target);
    std::vector<int> input(target.begin(), target.end() - 1);
    TensorT<T> states = detail::decoder_states(m.decoder(), input, enc, m.config(), m.pe_table(),
                                               static_cast<T>(m.config().dropout), drop_rng, m.diag_zero_cross);
    return detail::forced_from_states(states, m.out_proj(), target);
}

// Discrete port: embedding with sqrt(d) scaling plus positional encoding.
template <class T>
TensorT<T> mt_encode(const MtModelT<T>& m, const std::vector<int>& src_ids, Rng* drop_rng = nullptr) {
    const auto& cfg = m.config();
    if (src_ids.empty()) throw ValueError("mt_encode input must be nonempty");
    if (static_cast<int>(src_ids.size()) > cfg.max_len) throw ValueError("input exceeds max_len");
    TensorT<T> x = scale(embedding(m.src_embed(), src_ids), static_cast<T>(std::sqrt(double(cfg.d_model))));
    x = add(x, detail::pe_rows<T>(m.pe_table(), static_cast<int>(src_ids.size()), cfg.d_model));
    T p = static_cast<T>(cfg.dropout);
    if (drop_rng && p > T(0)) x = dropout(x, p, *drop_rng);
    return encoder_stack_forward(x, m.encoder(), cfg.n_heads, false, p, drop_rng);
}

// Continuous port: positional encoding added to the raw vectors, no scaling.
template <class T>
TensorT<T> mt_encode(const MtModelT<T>& m, const TensorT<T>& vectors, Rng* drop_rng = nullptr) {
    const auto& cfg = m.config();
    if (!vectors.defined() || vectors.rank() != 2) throw ShapeError("continuous input must be rank-2");
    if (vectors.dim(1) != cfg.d_model) throw ShapeError("continuous input width must equal d_model");
    if (vectors.dim(0) > cfg.max_len) throw ValueError("input exceeds max_len");
    TensorT<T> x = add(vectors, detail::pe_rows<T>(m.pe_table(), vectors.dim(0), cfg.d_model));
    T p = static_cast<T>(cfg.dropout);
    if (drop_rng && p > T(0)) x = dropout(x, p, *drop_rng);
    return encoder_stack_forward(x, m.encoder(), cfg.n_heads, false, p, drop_rng);
}

template <class T>
std::vector<double> lm_log_probs(const LanguageModelT<T>& lm, const std::vector<int>& prefix) {
    detail::check_prefix<T>(prefix);
    const auto& cfg = lm.config();
    if (static_cast<int>(prefix.size()) > cfg.max_len) throw ValueError("prefix exceeds max_len");
    TensorT<T> x = scale(embedding(lm.embed(), prefix), static_cast<T>(std::sqrt(double(cfg.d_model))));
    x = add(x, detail::pe_rows<T>(lm.pe_table(), static_cast<int>(prefix.size()), cfg.d_model));
    TensorT<T> states = encoder_stack_forward(x, lm.stack(), cfg.n_heads, true, T(0), nullptr);
    StepResultT<T> r = detail::step_from_states(states, lm.out_proj(), cfg.d_model);
    return r.log_probs;
}

// Teacher-forced LM pass: logits [L, V] for targets prefix[1..] given the
// causal prefix, used for LM training.
template <class T>
ForcedResultT<T> lm_forced(const LanguageModelT<T>& lm, const std::vector<int>& target, Rng* drop_rng = nullptr) {
    detail::check_target<T>(target);
    const auto& cfg = lm.config();
    std::vector<int> input(target.begin(), target.end() - 1);
    if (static_cast<int>(input.size()) > cfg.max_len) throw ValueError("prefix exceeds max_len");
    TensorT<T> x = scale(embedding(lm.embed(), input), static_cast<T>(std::sqrt(double(cfg.d_model))));
    x = add(x, detail::pe_rows<T>(lm.pe_table(), static_cast<int>(input.size()), cfg.d_model));
    T p = static_cast<T>(cfg.dropout);
    if (drop_rng && p > T(0)) x = dropout(x, p, *drop_rng);
    TensorT<T> states = encoder_stack_forward(x, lm.stack(), cfg.n_heads, true, p, drop_rng);
    return detail::forced_from_states(states, lm.out_proj(), target);
}

// ---------------------------------------------------------------------------
// Model checkpoint I/O (float models)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor config_meta(ModelKind kind, const TransformerConfig& cfg) {
    return Tensor::from_data({11}, {static_cast<float>(static_cast<int>(kind)),
                                    static_cast<float>(cfg.d_model), static_cast<float>(cfg.n_heads),
                                    static_cast<float>(cfg.ff_dim), static_cast<float>(cfg.enc_layers),
                                    static_cast<float>(cfg.dec_layers), static_cast<float>(cfg.src_vocab),
                                    static_cast<float>(cfg.tgt_vocab), static_cast<float>(cfg.feature_dim),
                                    cfg.dropout, static_cast<float>(cfg.max_len)});
}

inline std::pair<ModelKind, TransformerConfig> parse_config_meta(const Tensor& meta) {
    if (meta.rank() != 1 || meta.dim(0) != 11) throw IoError("malformed model config record");
    const auto& v = meta.values();
    TransformerConfig cfg;
    cfg.d_model = static_cast<int>(v[1]);
    cfg.n_heads = static_cast<int>(v[2]);
    cfg.ff_dim = static_cast<int>(v[3]);
    cfg.enc_layers = static_cast<int>(v[4]);
    cfg.dec_layers = static_cast<int>(v[5]);
    cfg.src_vocab = static_cast<int>(v[6]);
    cfg.tgt_vocab = static_cast<int>(v[7]);
    cfg.feature_dim = static_cast<int>(v[8]);
    cfg.dropout = v[9];
    cfg.max_len = static_cast<int>(v[10]);
    return {static_cast<ModelKind>(static_cast<int>(v[0])), cfg};
}

inline void assign_params(const std::vector<std::pair<std::string, Tensor>>& params, const Snapshot& snap) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : snap)
        if (name != "meta/config") by_name[name] = &tensor;
    if (by_name.size() != params.size()) throw IoError("checkpoint parameter count does not match model");
    for (const auto& [name, tensor] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint missing parameter: " + name);
        if (it->second->shape() != tensor.shape()) throw IoError("checkpoint shape mismatch for " + name);
        const_cast<Tensor&>(tensor).values() = it->second->values();
    }
}

}  // namespace detail

inline Snapshot model_snapshot(ModelKind kind, const TransformerConfig& cfg,
                               const std::vector<std::pair<std::string, Tensor>>& params) {
    Snapshot snap;
    snap.emplace_back("meta/config", detail::config_meta(kind, cfg));
    snap.insert(snap.end(), params.begin(), params.end());
    return snap;
}

inline void save_model(const std::string& path, const JointModel& m) {
    save_checkpoint(path, model_snapshot(ModelKind::joint, m.config(), m.named_parameters()));
}

inline void save_model(const std::string& path, const LanguageModel& m) {
    save_checkpoint(path, model_snapshot(ModelKind::lm, m.config(), m.named_parameters()));
}

inline std::pair<ModelKind, TransformerConfig> peek_model_config(const Snapshot& snap) {
    for (const auto& [name, tensor] : snap)
        if (name == "meta/config") return detail::parse_config_meta(tensor);
    throw IoError("checkpoint has no model config record");
}

inline JointModel load_joint_model(const std::string& path) {
    Snapshot snap = load_checkpoint(path);
    auto [kind, cfg] = peek_model_config(snap);
    if (kind != ModelKind::joint) throw IoError("checkpoint does not hold a joint model");
    JointModel m(cfg, 0);
    detail::assign_params(m.named_parameters(), snap);
    return m;
}

inline LanguageModel load_lm_model(const std::string& path) {
    Snapshot snap = load_checkpoint(path);
    auto [kind, cfg] = peek_model_config(snap);
    if (kind != ModelKind::lm) throw IoError("checkpoint does not hold a language model");
    LanguageModel m(cfg, 0);
    detail::assign_params(m.named_parameters(), snap);
    return m;
}

}  // namespace jamt
