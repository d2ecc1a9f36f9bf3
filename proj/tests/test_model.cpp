#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "jamt/grad_check.hpp"
#include "jamt/model.hpp"

using namespace jamt;

namespace {

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

template <class T>
TensorT<T> random_feats(int rows, int cols, Rng& rng) {
    TensorT<T> t = TensorT<T>::zeros({rows, cols});
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return t;
}

bool bits_equal(float a, float b) {
    std::uint32_t x, y;
    std::memcpy(&x, &a, 4);
    std::memcpy(&y, &b, 4);
    return x == y;
}

bool tensors_bitwise(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.values().size(); ++i)
        if (!bits_equal(a.values()[i], b.values()[i])) return false;
    return true;
}

double logsumexp(const std::vector<double>& v) {
    double m = v[0];
    for (double x : v) m = std::max(m, x);
    double s = 0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

std::vector<int> shifted_targets(const std::vector<int>& seq) {
    return std::vector<int>(seq.begin() + 1, seq.end());
}

template <class T>
TensorT<T> joint_loss(JointModelT<T>& m, const TensorT<T>& feats, const std::vector<int>& z,
                      const std::vector<int>& y) {
    TensorT<T> enc = encode_features(m.asr(), feats);
    ForcedResultT<T> asr = forced_decode(m.asr(), z, enc);
    TensorT<T> asr_loss = cross_entropy(asr.logits, shifted_targets(z), T(0.1), BpeModel::pad_id);
    TensorT<T> mt_enc = mt_encode(m.mt(), asr.states);
    ForcedResultT<T> mt = forced_decode(m.mt(), y, mt_enc);
    TensorT<T> mt_loss = cross_entropy(mt.logits, shifted_targets(y), T(0.1), BpeModel::pad_id);
    return add(scale(asr_loss, T(0.5)), scale(mt_loss, T(0.5)));
}

}  // namespace

TEST_CASE("config validation") {
    TransformerConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.n_heads = 3;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.d_model = 0;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    cfg = tiny_config();
    cfg.dropout = 1.0f;
    CHECK_THROWS_AS(cfg.validate(), ValueError);
    CHECK_THROWS_AS(AsrModel(TransformerConfig{}, 1), ValueError);
}

TEST_CASE("encode_features shapes and errors") {
    TransformerConfig cfg = tiny_config();
    AsrModel m(cfg, 11);
    Rng rng(5);
    Tensor feats = random_feats<float>(40, 4, rng);
    Tensor enc = encode_features(m, feats);
    CHECK(enc.dim(0) == 10);
    CHECK(enc.dim(1) == cfg.d_model);

    Tensor f5 = random_feats<float>(5, 4, rng);
    CHECK(encode_features(m, f5).dim(0) == 2);

    Tensor zeros = Tensor::zeros({8, 4});
    Tensor enc0 = encode_features(m, zeros);
    for (float v : enc0.values()) CHECK(std::isfinite(v));

    CHECK_THROWS_AS(encode_features(m, Tensor::zeros({3, 4})), ValueError);
    CHECK_THROWS_AS(encode_features(m, Tensor::zeros({8, 5})), ShapeError);

    AsrModel m2(cfg, 11);
    Tensor enc2 = encode_features(m2, feats);
    CHECK(tensors_bitwise(enc, enc2));
    AsrModel m3(cfg, 12);
    Tensor enc3 = encode_features(m3, feats);
    CHECK(!tensors_bitwise(enc, enc3));
}

TEST_CASE("decode_step normalization and cross-attention ablation") {
    TransformerConfig cfg = tiny_config();
    AsrModel m(cfg, 21);
    Rng rng(6);
    Tensor enc = encode_features(m, random_feats<float>(12, 4, rng));
    std::vector<int> prefix{BpeModel::bos_id, 4, 5};
    StepResult<float> r = decode_step(m, prefix, enc);
    CHECK(static_cast<int>(r.log_probs.size()) == cfg.src_vocab);
    CHECK(std::abs(logsumexp(r.log_probs)) < 1e-5);
    CHECK(r.context.dim(0) == cfg.d_model);

    m.diag_zero_cross = true;
    StepResult<float> a = decode_step(m, prefix, enc);
    Tensor enc_perturbed = encode_features(m, random_feats<float>(12, 4, rng));
    StepResult<float> b = decode_step(m, prefix, enc_perturbed);
    for (std::size_t i = 0; i < a.log_probs.size(); ++i) CHECK(a.log_probs[i] == b.log_probs[i]);
    CHECK(tensors_bitwise(a.context, b.context));
    m.diag_zero_cross = false;
    StepResult<float> c = decode_step(m, prefix, enc_perturbed);
    bool differs = false;
    for (std::size_t i = 0; i < c.log_probs.size(); ++i)
        if (c.log_probs[i] != a.log_probs[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("forced_decode equals stacked decode_step exactly") {
    TransformerConfig cfg = tiny_config();
    AsrModel m(cfg, 31);
    Rng rng(7);
    Tensor enc = encode_features(m, random_feats<float>(16, 4, rng));
    std::vector<int> target{BpeModel::bos_id, 4, 6, 3, 5, BpeModel::eos_id};
    ForcedResult<float> forced = forced_decode(m, target, enc);
    int L = static_cast<int>(target.size()) - 1;
    REQUIRE(forced.states.dim(0) == L);
    REQUIRE(forced.logits.dim(0) == L);
    REQUIRE(static_cast<int>(forced.log_probs.size()) == L);

    double total = 0.0;
    for (int t = 0; t < L; ++t) {
        std::vector<int> prefix(target.begin(), target.begin() + t + 1);
        StepResult<float> step = decode_step(m, prefix, enc);
        for (int v = 0; v < cfg.src_vocab; ++v)
            CHECK(step.log_probs[static_cast<std::size_t>(v)] ==
                  forced.log_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)]);
        for (int j = 0; j < cfg.d_model; ++j)
            CHECK(bits_equal(step.context.values()[static_cast<std::size_t>(j)],
                             forced.states.values()[static_cast<std::size_t>(t * cfg.d_model + j)]));
        total += forced.log_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(target[static_cast<std::size_t>(t) + 1])];
    }
    CHECK(forced.total_log_prob == doctest::Approx(total).epsilon(1e-12));
}

TEST_CASE("decoder causality is exact") {
    TransformerConfig cfg = tiny_config();
    AsrModel m(cfg, 41);
    Rng rng(8);
    Tensor enc = encode_features(m, random_feats<float>(12, 4, rng));
    std::vector<int> t1{BpeModel::bos_id, 4, 5, 6, 7, BpeModel::eos_id};
    std::vector<int> t2{BpeModel::bos_id, 4, 5, 3, 7, BpeModel::eos_id};
    ForcedResult<float> f1 = forced_decode(m, t1, enc);
    ForcedResult<float> f2 = forced_decode(m, t2, enc);
    for (int t = 0; t < 3; ++t)
        for (int v = 0; v < cfg.src_vocab; ++v)
            CHECK(f1.log_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)] ==
                  f2.log_probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(v)]);
    bool later_differs = false;
    for (int v = 0; v < cfg.src_vocab; ++v)
        if (f1.log_probs[3][static_cast<std::size_t>(v)] != f2.log_probs[3][static_cast<std::size_t>(v)])
            later_differs = true;
    CHECK(later_differs);
}

TEST_CASE("zero encoder states keep prefix dependence") {
    TransformerConfig cfg = tiny_config();
    AsrModel m(cfg, 51);
    Tensor zero_enc = zero_states<float>(5, cfg.d_model);
    StepResult<float> a = decode_step(m, {BpeModel::bos_id, 4}, zero_enc);
    StepResult<float> b = decode_step(m, {BpeModel::bos_id, 5}, zero_enc);
    bool differs = false;
    for (int j = 0; j < cfg.d_model; ++j)
        if (!bits_equal(a.context.values()[static_cast<std::size_t>(j)],
                        b.context.values()[static_cast<std::size_t>(j)]))
            differs = true;
    CHECK(differs);
    for (float v : a.context.values()) CHECK(std::isfinite(v));
}

TEST_CASE("mt_encode ports") {
    TransformerConfig cfg = tiny_config();
    MtModel m(cfg, 61);
    std::vector<int> ids{BpeModel::bos_id, 4, 5, BpeModel::eos_id};
    Tensor disc = mt_encode(m, ids);
    CHECK(disc.dim(0) == 4);
    CHECK(disc.dim(1) == cfg.d_model);

    Rng rng(9);
    Tensor vecs = random_feats<float>(4, cfg.d_model, rng);
    Tensor cont = mt_encode(m, vecs);
    CHECK(cont.shape() == disc.shape());

    Tensor zeros_out = mt_encode(m, Tensor::zeros({4, cfg.d_model}));
    for (float v : zeros_out.values()) CHECK(std::isfinite(v));

    Tensor swapped = Tensor::zeros({4, cfg.d_model});
    for (int j = 0; j < cfg.d_model; ++j) {
        swapped.values()[static_cast<std::size_t>(j)] = vecs.values()[static_cast<std::size_t>(cfg.d_model + j)];
        swapped.values()[static_cast<std::size_t>(cfg.d_model + j)] = vecs.values()[static_cast<std::size_t>(j)];
        swapped.values()[static_cast<std::size_t>(2 * cfg.d_model + j)] = vecs.values()[static_cast<std::size_t>(2 * cfg.d_model + j)];
        swapped.values()[static_cast<std::size_t>(3 * cfg.d_model + j)] = vecs.values()[static_cast<std::size_t>(3 * cfg.d_model + j)];
    }
    Tensor cont_swapped = mt_encode(m, swapped);
    CHECK(!tensors_bitwise(cont, cont_swapped));

    CHECK_THROWS_AS(mt_encode(m, Tensor::zeros({4, cfg.d_model + 1})), ShapeError);
    CHECK_THROWS_AS(mt_encode(m, std::vector<int>{}), ValueError);
}

TEST_CASE("lm log probs") {
    TransformerConfig cfg = tiny_config();
    LanguageModel lm(cfg, 71);
    std::vector<int> prefix{BpeModel::bos_id, 4, 5};
    std::vector<double> lp = lm_log_probs(lm, prefix);
    CHECK(static_cast<int>(lp.size()) == cfg.src_vocab);
    CHECK(std::abs(logsumexp(lp)) < 1e-5);

    for (const auto& [name, p] : lm.named_parameters())
        std::fill(const_cast<Tensor&>(p).values().begin(), const_cast<Tensor&>(p).values().end(), 0.0f);
    std::vector<double> uniform = lm_log_probs(lm, prefix);
    double expected = -std::log(static_cast<double>(cfg.src_vocab));
    for (double v : uniform) {
        CHECK(v == uniform[0]);
        CHECK(v == doctest::Approx(expected).epsilon(1e-12));
    }

    CHECK_THROWS_AS(lm_log_probs(lm, {4, 5}), ValueError);
}

TEST_CASE("prefix and target validation") {
    TransformerConfig cfg = tiny_config();
    cfg.max_len = 6;
    AsrModel m(cfg, 81);
    Tensor enc = zero_states<float>(3, cfg.d_model);
    CHECK_THROWS_AS(decode_step(m, {4, 5}, enc), ValueError);
    CHECK_THROWS_AS(decode_step(m, {}, enc), ValueError);
    CHECK_THROWS_AS(forced_decode(m, {BpeModel::bos_id, 4}, enc), ValueError);
    CHECK_THROWS_AS(forced_decode(m, {4, BpeModel::eos_id}, enc), ValueError);
    std::vector<int> long_prefix{BpeModel::bos_id, 4, 4, 4, 4, 4, 4};
    CHECK_THROWS_AS(decode_step(m, long_prefix, enc), ValueError);
}

TEST_CASE("model checkpoint round trip") {
    TransformerConfig cfg = tiny_config();
    JointModel m(cfg, 91);
    CHECK(m.named_parameters().size() ==
          m.asr().named_parameters().size() + m.mt().named_parameters().size());

    Rng rng(10);
    Tensor feats = random_feats<float>(12, 4, rng);
    std::vector<int> z{BpeModel::bos_id, 4, 5, BpeModel::eos_id};
    Tensor enc = encode_features(m.asr(), feats);
    ForcedResult<float> before = forced_decode(m.asr(), z, enc);

    const std::string path = "/tmp/jamt_test_model.ckpt";
    save_model(path, m);
    JointModel loaded = load_joint_model(path);
    REQUIRE(loaded.named_parameters().size() == m.named_parameters().size());
    for (std::size_t i = 0; i < m.named_parameters().size(); ++i) {
        CHECK(loaded.named_parameters()[i].first == m.named_parameters()[i].first);
        CHECK(tensors_bitwise(loaded.named_parameters()[i].second, m.named_parameters()[i].second));
    }
    Tensor enc2 = encode_features(loaded.asr(), feats);
    ForcedResult<float> after = forced_decode(loaded.asr(), z, enc2);
    CHECK(tensors_bitwise(before.logits, after.logits));

    CHECK_THROWS_AS(load_lm_model(path), IoError);

    LanguageModel lm(cfg, 92);
    const std::string lm_path = "/tmp/jamt_test_lm.ckpt";
    save_model(lm_path, lm);
    LanguageModel lm2 = load_lm_model(lm_path);
    std::vector<double> lp1 = lm_log_probs(lm, {BpeModel::bos_id, 4});
    std::vector<double> lp2 = lm_log_probs(lm2, {BpeModel::bos_id, 4});
    for (std::size_t i = 0; i < lp1.size(); ++i) CHECK(lp1[i] == lp2[i]);
}

TEST_CASE("composite gradient check in double") {
    TransformerConfig cfg = tiny_config();
    JointModelT<double> m(cfg, 104);
    Rng rng(11);
    TensorD feats = random_feats<double>(8, 4, rng);
    std::vector<int> z{BpeModel::bos_id, 4, 6, BpeModel::eos_id};
    std::vector<int> y{BpeModel::bos_id, 5, 7, 4, BpeModel::eos_id};

    auto fn = [&](TensorD&) { return joint_loss(m, feats, z, y); };

    const std::vector<std::string> probes{
        "asr/front/conv1/w", "asr/front/conv2/b", "asr/enc/0/attn/q/w", "asr/enc/0/ln1/g",
        "asr/dec/embed",     "asr/dec/0/cross/v/w", "asr/dec/0/self/k/w", "asr/out/w",
        "mt/enc/0/ff/w1/w",  "mt/dec/0/cross/q/w",  "mt/dec/embed",       "mt/out/b"};
    for (const auto& want : probes) {
        bool found = false;
        for (const auto& [name, p] : m.named_parameters()) {
            if (name != want) continue;
            found = true;
            double err = grad_check(fn, p, 1e-4);
            INFO(want);
            CHECK(err < 1e-6);
        }
        CHECK(found);
    }
}
