#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "jamt/error.hpp"
#include "jamt/rng.hpp"

namespace jamt {

// Dense row-major tensor of rank 1..3 with optional gradient storage.
// Handles share their payload; copying a TensorT copies the handle, not the
// data. Values are immutable after an op produced them except for gradient
// accumulation driven by TapeT::backward.
template <class T>
class TensorT {
public:
    struct Data {
        std::vector<int> shape;
        std::vector<T> value;
        std::vector<T> grad;  // sized on first accumulation
        bool requires_grad = false;
    };

    TensorT() = default;

    static TensorT zeros(std::vector<int> shape, bool requires_grad = false) {
        return TensorT(std::move(shape), std::vector<T>(), requires_grad, true);
    }

    static TensorT from_data(std::vector<int> shape, std::vector<T> value, bool requires_grad = false) {
        return TensorT(std::move(shape), std::move(value), requires_grad, false);
    }

    static TensorT scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return d_ != nullptr; }
    int rank() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
    const std::vector<int>& shape() const { return d_->shape; }
    std::int64_t size() const { return static_cast<std::int64_t>(d_->value.size()); }

    T* data() { return d_->value.data(); }
    const T* data() const { return d_->value.data(); }
    std::vector<T>& values() { return d_->value; }
    const std::vector<T>& values() const { return d_->value; }

    T item() const {
        if (size() != 1) throw ShapeError("item() requires a single-element tensor");
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    // Gradient buffer, allocated zero-filled on first access.
    std::vector<T>& grad() {
        if (d_->grad.empty()) d_->grad.assign(d_->value.size(), T(0));
        return d_->grad;
    }
    const std::vector<T>& grad() const {
        if (d_->grad.empty()) d_->grad.assign(d_->value.size(), T(0));
        return d_->grad;
    }
    void zero_grad() { std::fill(d_->grad.begin(), d_->grad.end(), T(0)); }

    bool same_storage(const TensorT& o) const { return d_ == o.d_; }

private:
    TensorT(std::vector<int> shape, std::vector<T> value, bool requires_grad, bool fill_zero) {
        std::int64_t n = 1;
        if (shape.empty() || shape.size() > 3) throw ShapeError("tensor rank must be 1..3");
        for (int s : shape) {
            if (s < 1) throw ShapeError("tensor dims must be >= 1");
            n *= s;
        }
        if (fill_zero) {
            value.assign(static_cast<std::size_t>(n), T(0));
        } else if (static_cast<std::int64_t>(value.size()) != n) {
            throw ShapeError("data length does not match shape");
        }
        d_ = std::make_shared<Data>();
        d_->shape = std::move(shape);
        d_->value = std::move(value);
        d_->requires_grad = requires_grad;
    }

    std::shared_ptr<Data> d_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// Ordered record of executed ops. backward() replays the closures in reverse,
// visiting each recorded node exactly once.
template <class T>
class TapeT {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(TensorT<T>& loss) {
        if (loss.size() != 1) throw ShapeError("backward requires a scalar loss");
        loss.grad()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

namespace detail {

template <class T>
inline TapeT<T>*& active_tape_slot() {
    thread_local TapeT<T>* tape = nullptr;
    return tape;
}

inline bool& strict_finite_slot() {
    thread_local bool strict = false;
    return strict;
}

}  // namespace detail

template <class T>
TapeT<T>* active_tape() {
    return detail::active_tape_slot<T>();
}

// Activates a tape for the current thread while in scope.
template <class T>
class TapeScopeT {
public:
    explicit TapeScopeT(TapeT<T>& tape) : prev_(detail::active_tape_slot<T>()) {
        detail::active_tape_slot<T>() = &tape;
    }
    ~TapeScopeT() { detail::active_tape_slot<T>() = prev_; }
    TapeScopeT(const TapeScopeT&) = delete;
    TapeScopeT& operator=(const TapeScopeT&) = delete;

private:
    TapeT<T>* prev_;
};

using TapeScope = TapeScopeT<float>;
using TapeScopeD = TapeScopeT<double>;

// Suspends tape recording (inference paths).
template <class T>
class NoGradT {
public:
    NoGradT() : prev_(detail::active_tape_slot<T>()) { detail::active_tape_slot<T>() = nullptr; }
    ~NoGradT() { detail::active_tape_slot<T>() = prev_; }
    NoGradT(const NoGradT&) = delete;
    NoGradT& operator=(const NoGradT&) = delete;

private:
    TapeT<T>* prev_;
};

using NoGrad = NoGradT<float>;
using NoGradD = NoGradT<double>;

// When enabled, every op validates that its output is finite.
inline void set_strict_finite(bool on) { detail::strict_finite_slot() = on; }
inline bool strict_finite() { return detail::strict_finite_slot(); }

namespace detail {

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
    if (!strict_finite()) return;
    for (T v : t.values()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

template <class T>
bool grads_wanted(std::initializer_list<const TensorT<T>*> inputs) {
    if (active_tape<T>() == nullptr) return false;
    for (const TensorT<T>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// ---- raw kernels -------------------------------------------------------

// c[m,n] (+)= a[m,k] * b[k,n]
template <class T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * n;
        if (!accumulate) std::fill(crow, crow + n, T(0));
        const T* arow = a + static_cast<std::ptrdiff_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T aip = arow[p];
            const T* brow = b + static_cast<std::ptrdiff_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// c[m,n] (+)= a[m,k] * b[n,k]^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<std::ptrdiff_t>(i) * k;
        T* crow = c + static_cast<std::ptrdiff_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* brow = b + static_cast<std::ptrdiff_t>(j) * k;
            T acc = 0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

// c[k,n] (+)= a[m,k]^T * b[m,n]
template <class T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::ptrdiff_t>(k) * n, T(0));
    for (int p = 0; p < m; ++p) {
        const T* arow = a + static_cast<std::ptrdiff_t>(p) * k;
        const T* brow = b + static_cast<std::ptrdiff_t>(p) * n;
        for (int i = 0; i < k; ++i) {
            const T api = arow[i];
            T* crow = c + static_cast<std::ptrdiff_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace detail

// ---- ops ---------------------------------------------------------------

// 2-D matrix product. Gradients: da = g * b^T, db = a^T * g.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul expects rank-2 tensors");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul inner dimension mismatch");
    TensorT<T> out = TensorT<T>::zeros({m, n});
    detail::mm_nn(a.data(), b.data(), out.data(), m, k, n, false);
    detail::check_finite(out, "matmul");
    if (detail::grads_wanted<T>({&a, &b})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, bv = b, ov = out;
        active_tape<T>()->record([av, bv, ov, m, k, n]() mutable {
            const std::vector<T>& g = ov.grad();
            if (av.requires_grad()) detail::mm_nt(g.data(), bv.data(), av.grad().data(), m, n, k, true);
            if (bv.requires_grad()) detail::mm_tn(av.data(), g.data(), bv.grad().data(), m, k, n, true);
        });
    }
    return out;
}

// a * b^T for rank-2 inputs sharing the inner dimension.
template <class T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul_nt expects rank-2 tensors");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) throw ShapeError("matmul_nt inner dimension mismatch");
    TensorT<T> out = TensorT<T>::zeros({m, n});
    detail::mm_nt(a.data(), b.data(), out.data(), m, k, n, false);
    detail::check_finite(out, "matmul_nt");
    if (detail::grads_wanted<T>({&a, &b})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, bv = b, ov = out;
        active_tape<T>()->record([av, bv, ov, m, k, n]() mutable {
            const std::vector<T>& g = ov.grad();
            if (av.requires_grad()) detail::mm_nn(g.data(), bv.data(), av.grad().data(), m, n, k, true);
            if (bv.requires_grad()) detail::mm_tn(g.data(), av.data(), bv.grad().data(), m, n, k, true);
        });
    }
    return out;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add shape mismatch");
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    detail::check_finite(out, "add");
    if (detail::grads_wanted<T>({&a, &b})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, bv = b, ov = out;
        active_tape<T>()->record([av, bv, ov]() mutable {
            const std::vector<T>& g = ov.grad();
            if (av.requires_grad()) {
                std::vector<T>& ga = av.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (bv.requires_grad()) {
                std::vector<T>& gb = bv.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

// x[m,n] + v[n], broadcasting v over rows.
template <class T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
    if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) throw ShapeError("add_rowvec shape mismatch");
    const int m = x.dim(0), n = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros({m, n});
    for (int i = 0; i < m; ++i) {
        const T* xr = x.data() + static_cast<std::ptrdiff_t>(i) * n;
        T* po = out.data() + static_cast<std::ptrdiff_t>(i) * n;
        const T* pv = v.data();
        for (int j = 0; j < n; ++j) po[j] = xr[j] + pv[j];
    }
    detail::check_finite(out, "add_rowvec");
    if (detail::grads_wanted<T>({&x, &v})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, vv = v, ov = out;
        active_tape<T>()->record([xv, vv, ov, m, n]() mutable {
            const std::vector<T>& g = ov.grad();
            if (xv.requires_grad()) {
                std::vector<T>& gx = xv.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (vv.requires_grad()) {
                std::vector<T>& gv = vv.grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * n + j];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch");
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::check_finite(out, "mul");
    if (detail::grads_wanted<T>({&a, &b})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, bv = b, ov = out;
        active_tape<T>()->record([av, bv, ov]() mutable {
            const std::vector<T>& g = ov.grad();
            if (av.requires_grad()) {
                std::vector<T>& ga = av.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv.data()[i];
            }
            if (bv.requires_grad()) {
                std::vector<T>& gb = bv.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av.data()[i];
            }
        });
    }
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    detail::check_finite(out, "scale");
    if (detail::grads_wanted<T>({&a})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, ov = out;
        active_tape<T>()->record([av, ov, c]() mutable {
            const std::vector<T>& g = ov.grad();
            std::vector<T>& ga = av.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    detail::check_finite(out, "relu");
    if (detail::grads_wanted<T>({&a})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, ov = out;
        active_tape<T>()->record([av, ov]() mutable {
            const std::vector<T>& g = ov.grad();
            std::vector<T>& ga = av.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (av.data()[i] > T(0)) ga[i] += g[i];
        });
    }
    return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
    T acc = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    TensorT<T> out = TensorT<T>::scalar(acc);
    detail::check_finite(out, "sum");
    if (detail::grads_wanted<T>({&a})) {
        out.set_requires_grad(true);
        TensorT<T> av = a, ov = out;
        active_tape<T>()->record([av, ov]() mutable {
            const T g = ov.grad()[0];
            std::vector<T>& ga = av.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

namespace detail {

// Softmax over x[0..limit) written into out; entries beyond limit are 0.
// Max-subtraction keeps large magnitudes from overflowing.
template <class T>
void softmax_span(const T* x, T* out, int n, int limit) {
    T mx = x[0];
    for (int j = 1; j < limit; ++j) mx = std::max(mx, x[j]);
    T denom = 0;
    for (int j = 0; j < limit; ++j) {
        out[j] = std::exp(x[j] - mx);
        denom += out[j];
    }
    for (int j = 0; j < limit; ++j) out[j] /= denom;
    for (int j = limit; j < n; ++j) out[j] = T(0);
}

// d/dx of softmax given output p and upstream g, restricted to [0, limit).
template <class T>
void softmax_backward_span(const T* p, const T* g, T* gx, int limit) {
    T dot = 0;
    for (int j = 0; j < limit; ++j) dot += g[j] * p[j];
    for (int j = 0; j < limit; ++j) gx[j] += p[j] * (g[j] - dot);
}

}  // namespace detail

// Row-wise softmax; rank-1 input treated as a single row. Rows with a
// per-row limit are supported through softmax_rows_limited.
template <class T>
TensorT<T> softmax(const TensorT<T>& x) {
    if (!x.defined() || x.size() == 0) throw ValueError("softmax of empty input");
    const int n = x.rank() == 1 ? x.dim(0) : x.dim(x.rank() - 1);
    const int rows = static_cast<int>(x.size() / n);
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (int i = 0; i < rows; ++i)
        detail::softmax_span(x.data() + static_cast<std::ptrdiff_t>(i) * n, out.data() + static_cast<std::ptrdiff_t>(i) * n, n, n);
    detail::check_finite(out, "softmax");
    if (detail::grads_wanted<T>({&x})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, ov = out;
        active_tape<T>()->record([xv, ov, rows, n]() mutable {
            for (int i = 0; i < rows; ++i) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(i) * n;
                detail::softmax_backward_span(ov.data() + off, ov.grad().data() + off, xv.grad().data() + off, n);
            }
        });
    }
    return out;
}

// Row-wise softmax where row i is normalized over columns [0, limits[i]) and
// the remaining columns are exactly zero. limits[i] must be in [1, n].
template <class T>
TensorT<T> softmax_rows_limited(const TensorT<T>& x, const std::vector<int>& limits) {
    if (x.rank() != 2) throw ShapeError("softmax_rows_limited expects rank-2 input");
    const int rows = x.dim(0), n = x.dim(1);
    if (static_cast<int>(limits.size()) != rows) throw ShapeError("limits length mismatch");
    TensorT<T> out = TensorT<T>::zeros({rows, n});
    for (int i = 0; i < rows; ++i) {
        const int lim = limits[static_cast<std::size_t>(i)];
        if (lim < 1 || lim > n) throw ValueError("softmax row limit out of range");
        detail::softmax_span(x.data() + static_cast<std::ptrdiff_t>(i) * n, out.data() + static_cast<std::ptrdiff_t>(i) * n, n, lim);
    }
    detail::check_finite(out, "softmax_rows_limited");
    if (detail::grads_wanted<T>({&x})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, ov = out;
        std::vector<int> lims = limits;
        active_tape<T>()->record([xv, ov, lims, rows, n]() mutable {
            for (int i = 0; i < rows; ++i) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(i) * n;
                detail::softmax_backward_span(ov.data() + off, ov.grad().data() + off, xv.grad().data() + off,
                                              lims[static_cast<std::size_t>(i)]);
            }
        });
    }
    return out;
}

// (x - mean) / sqrt(var + eps) * gain + bias, row-wise.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias, T eps) {
    if (eps <= T(0)) throw ValueError("layer_norm eps must be > 0");
    const int n = x.rank() == 1 ? x.dim(0) : x.dim(x.rank() - 1);
    const int rows = static_cast<int>(x.size() / n);
    if (gain.size() != n || bias.size() != n) throw ShapeError("layer_norm gain/bias shape mismatch");
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    // xhat is stashed for the backward pass
    std::vector<T> xhat(static_cast<std::size_t>(x.size()));
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (int i = 0; i < rows; ++i) {
        const T* xr = x.data() + static_cast<std::ptrdiff_t>(i) * n;
        T mean = 0;
        for (int j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (int j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<T>(n);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = istd;
        T* xh = xhat.data() + static_cast<std::ptrdiff_t>(i) * n;
        T* po = out.data() + static_cast<std::ptrdiff_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            xh[j] = (xr[j] - mean) * istd;
            po[j] = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    detail::check_finite(out, "layer_norm");
    if (detail::grads_wanted<T>({&x, &gain, &bias})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, gv = gain, bv = bias, ov = out;
        active_tape<T>()->record([xv, gv, bv, ov, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, n]() mutable {
            const std::vector<T>& g = ov.grad();
            for (int i = 0; i < rows; ++i) {
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(i) * n;
                const T* gr = g.data() + off;
                const T* xh = xhat.data() + off;
                if (gv.requires_grad()) {
                    std::vector<T>& gg = gv.grad();
                    for (int j = 0; j < n; ++j) gg[static_cast<std::size_t>(j)] += gr[j] * xh[j];
                }
                if (bv.requires_grad()) {
                    std::vector<T>& gb = bv.grad();
                    for (int j = 0; j < n; ++j) gb[static_cast<std::size_t>(j)] += gr[j];
                }
                if (xv.requires_grad()) {
                    // dL/dx = istd/n * (n*dy*gain - sum(dy*gain) - xhat*sum(dy*gain*xhat))
                    T s1 = 0, s2 = 0;
                    for (int j = 0; j < n; ++j) {
                        const T dg = gr[j] * gv.data()[j];
                        s1 += dg;
                        s2 += dg * xh[j];
                    }
                    std::vector<T>& gx = xv.grad();
                    const T istd = inv_std[static_cast<std::size_t>(i)];
                    for (int j = 0; j < n; ++j) {
                        const T dg = gr[j] * gv.data()[j];
                        gx[static_cast<std::size_t>(off) + j] +=
                            istd * (dg - s1 / static_cast<T>(n) - xh[j] * s2 / static_cast<T>(n));
                    }
                }
            }
        });
    }
    return out;
}

// Embedding lookup: rows of table indexed by ids. Gradient scatters back.
template <class T>
TensorT<T> embedding(const TensorT<T>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw ShapeError("embedding table must be rank-2");
    if (ids.empty()) throw ValueError("embedding of empty id list");
    const int v = table.dim(0), d = table.dim(1);
    const int L = static_cast<int>(ids.size());
    TensorT<T> out = TensorT<T>::zeros({L, d});
    for (int t = 0; t < L; ++t) {
        const int id = ids[static_cast<std::size_t>(t)];
        if (id < 0 || id >= v) throw ValueError("embedding id out of range");
        std::copy_n(table.data() + static_cast<std::ptrdiff_t>(id) * d, d, out.data() + static_cast<std::ptrdiff_t>(t) * d);
    }
    if (detail::grads_wanted<T>({&table})) {
        out.set_requires_grad(true);
        TensorT<T> tv = table, ov = out;
        std::vector<int> idv = ids;
        active_tape<T>()->record([tv, ov, idv, d]() mutable {
            const std::vector<T>& g = ov.grad();
            std::vector<T>& gt = tv.grad();
            for (std::size_t t = 0; t < idv.size(); ++t) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) * d;
                const std::ptrdiff_t dst = static_cast<std::ptrdiff_t>(idv[t]) * d;
                for (int j = 0; j < d; ++j) gt[static_cast<std::size_t>(dst + j)] += g[static_cast<std::size_t>(src + j)];
            }
        });
    }
    return out;
}

// Concatenate rank-2 tensors along columns.
template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ValueError("concat_cols of empty list");
    const int m = parts[0].dim(0);
    int n = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) throw ShapeError("concat_cols row mismatch");
        n += p.dim(1);
    }
    TensorT<T> out = TensorT<T>::zeros({m, n});
    int col = 0;
    for (const auto& p : parts) {
        const int pn = p.dim(1);
        for (int i = 0; i < m; ++i)
            std::copy_n(p.data() + static_cast<std::ptrdiff_t>(i) * pn, pn,
                        out.data() + static_cast<std::ptrdiff_t>(i) * n + col);
        col += pn;
    }
    bool wants = false;
    for (const auto& p : parts) wants = wants || p.requires_grad();
    if (active_tape<T>() != nullptr && wants) {
        out.set_requires_grad(true);
        std::vector<TensorT<T>> pv = parts;
        TensorT<T> ov = out;
        active_tape<T>()->record([pv, ov, m, n]() mutable {
            const std::vector<T>& g = ov.grad();
            int col = 0;
            for (auto& p : pv) {
                const int pn = p.dim(1);
                if (p.requires_grad()) {
                    std::vector<T>& gp = p.grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < pn; ++j)
                            gp[static_cast<std::size_t>(i) * pn + j] += g[static_cast<std::size_t>(i) * n + col + j];
                }
                col += pn;
            }
        });
    }
    return out;
}

// Mean cross-entropy of logits[L,V] against smoothed one-hot targets.
// Target mass 1-eps, eps spread uniformly over the other V-1 tokens.
// Positions whose target equals pad_id are excluded from the mean.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& targets, T eps, int pad_id = -1) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects rank-2 logits");
    const int L = logits.dim(0), V = logits.dim(1);
    if (static_cast<int>(targets.size()) != L) throw ShapeError("cross_entropy targets length mismatch");
    if (eps < T(0) || eps >= T(1)) throw ValueError("smoothing must be in [0, 1)");
    if (eps > T(0) && V < 2) throw ValueError("smoothing requires V >= 2");
    std::vector<char> valid(static_cast<std::size_t>(L));
    int n_valid = 0;
    for (int t = 0; t < L; ++t) {
        const int id = targets[static_cast<std::size_t>(t)];
        if (id == pad_id) {
            valid[static_cast<std::size_t>(t)] = 0;
            continue;
        }
        if (id < 0 || id >= V) throw ValueError("cross_entropy target id out of range");
        valid[static_cast<std::size_t>(t)] = 1;
        ++n_valid;
    }
    if (n_valid == 0) throw ValueError("cross_entropy has no unpadded positions");
    // probs are kept for the backward pass
    std::vector<T> probs(static_cast<std::size_t>(L) * V);
    T total = 0;
    const T off_mass = eps > T(0) ? eps / static_cast<T>(V - 1) : T(0);
    for (int t = 0; t < L; ++t) {
        if (!valid[static_cast<std::size_t>(t)]) continue;
        const T* row = logits.data() + static_cast<std::ptrdiff_t>(t) * V;
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
        const T log_denom = std::log(denom);
        T* prow = probs.data() + static_cast<std::ptrdiff_t>(t) * V;
        const int tgt = targets[static_cast<std::size_t>(t)];
        T pos_loss = 0;
        for (int j = 0; j < V; ++j) {
            const T lsm = row[j] - mx - log_denom;
            prow[j] = std::exp(lsm);
            const T q = j == tgt ? T(1) - eps : off_mass;
            if (q != T(0)) pos_loss -= q * lsm;
        }
        total += pos_loss;
    }
    TensorT<T> out = TensorT<T>::scalar(total / static_cast<T>(n_valid));
    detail::check_finite(out, "cross_entropy");
    if (detail::grads_wanted<T>({&logits})) {
        out.set_requires_grad(true);
        TensorT<T> lv = logits, ov = out;
        std::vector<int> tg = targets;
        active_tape<T>()->record([lv, ov, tg, valid = std::move(valid), probs = std::move(probs), L, V, eps, off_mass,
                                  n_valid]() mutable {
            const T g = ov.grad()[0] / static_cast<T>(n_valid);
            std::vector<T>& gl = lv.grad();
            for (int t = 0; t < L; ++t) {
                if (!valid[static_cast<std::size_t>(t)]) continue;
                const T* prow = probs.data() + static_cast<std::ptrdiff_t>(t) * V;
                const int tgt = tg[static_cast<std::size_t>(t)];
                for (int j = 0; j < V; ++j) {
                    const T q = j == tgt ? T(1) - eps : off_mass;
                    gl[static_cast<std::size_t>(t) * V + j] += g * (prow[j] - q);
                }
            }
        });
    }
    return out;
}

// Fused multi-head scaled-dot-product attention on pre-projected q,k,v.
// Row i of q attends to k/v rows [0, limits[i]); scores are scaled by
// 1/sqrt(d/n_heads). Row i of the output depends only on q row i and the
// first limits[i] rows of k and v, so incremental and batched evaluation
// agree bitwise.
template <class T>
TensorT<T> multi_head_attention(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v, int n_heads,
                                const std::vector<int>& limits) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("attention expects rank-2 inputs");
    const int Lq = q.dim(0), d = q.dim(1), Lk = k.dim(0);
    if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != Lk) throw ShapeError("attention q/k/v shape mismatch");
    if (n_heads < 1 || d % n_heads != 0) throw ShapeError("d_model must be divisible by n_heads");
    if (static_cast<int>(limits.size()) != Lq) throw ShapeError("attention limits length mismatch");
    for (int lim : limits)
        if (lim < 1 || lim > Lk) throw ValueError("attention limit out of range");
    const int dh = d / n_heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    TensorT<T> out = TensorT<T>::zeros({Lq, d});
    // probs[h][i*Lk + j], kept for the backward pass
    std::vector<T> probs(static_cast<std::size_t>(n_heads) * Lq * Lk, T(0));
    std::vector<T> scores(static_cast<std::size_t>(Lk));
    for (int h = 0; h < n_heads; ++h) {
        const int hoff = h * dh;
        T* hp = probs.data() + static_cast<std::size_t>(h) * Lq * Lk;
        for (int i = 0; i < Lq; ++i) {
            const int lim = limits[static_cast<std::size_t>(i)];
            const T* qr = q.data() + static_cast<std::ptrdiff_t>(i) * d + hoff;
            for (int j = 0; j < lim; ++j) {
                const T* kr = k.data() + static_cast<std::ptrdiff_t>(j) * d + hoff;
                T acc = 0;
                for (int c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                scores[static_cast<std::size_t>(j)] = acc * sc;
            }
            T* prow = hp + static_cast<std::size_t>(i) * Lk;
            detail::softmax_span(scores.data(), prow, lim, lim);
            T* orow = out.data() + static_cast<std::ptrdiff_t>(i) * d + hoff;
            for (int j = 0; j < lim; ++j) {
                const T p = prow[j];
                const T* vr = v.data() + static_cast<std::ptrdiff_t>(j) * d + hoff;
                for (int c = 0; c < dh; ++c) orow[c] += p * vr[c];
            }
        }
    }
    detail::check_finite(out, "multi_head_attention");
    if (detail::grads_wanted<T>({&q, &k, &v})) {
        out.set_requires_grad(true);
        TensorT<T> qv = q, kv = k, vv = v, ov = out;
        std::vector<int> lims = limits;
        active_tape<T>()->record([qv, kv, vv, ov, lims, probs = std::move(probs), n_heads, Lq, Lk, d, dh, sc]() mutable {
            const std::vector<T>& g = ov.grad();
            std::vector<T> dprob(static_cast<std::size_t>(Lk));
            std::vector<T> dscore(static_cast<std::size_t>(Lk));
            for (int h = 0; h < n_heads; ++h) {
                const int hoff = h * dh;
                const T* hp = probs.data() + static_cast<std::size_t>(h) * Lq * Lk;
                for (int i = 0; i < Lq; ++i) {
                    const int lim = lims[static_cast<std::size_t>(i)];
                    const T* prow = hp + static_cast<std::size_t>(i) * Lk;
                    const T* grow = g.data() + static_cast<std::size_t>(i) * d + hoff;
                    for (int j = 0; j < lim; ++j) {
                        const T* vr = vv.data() + static_cast<std::ptrdiff_t>(j) * d + hoff;
                        T acc = 0;
                        for (int c = 0; c < dh; ++c) acc += grow[c] * vr[c];
                        dprob[static_cast<std::size_t>(j)] = acc;
                        if (vv.requires_grad()) {
                            std::vector<T>& gv2 = vv.grad();
                            const T p = prow[j];
                            for (int c = 0; c < dh; ++c)
                                gv2[static_cast<std::size_t>(j) * d + hoff + c] += p * grow[c];
                        }
                    }
                    std::fill(dscore.begin(), dscore.begin() + lim, T(0));
                    detail::softmax_backward_span(prow, dprob.data(), dscore.data(), lim);
                    for (int j = 0; j < lim; ++j) {
                        const T ds = dscore[static_cast<std::size_t>(j)] * sc;
                        const T* kr = kv.data() + static_cast<std::ptrdiff_t>(j) * d + hoff;
                        const T* qr = qv.data() + static_cast<std::ptrdiff_t>(i) * d + hoff;
                        if (qv.requires_grad()) {
                            std::vector<T>& gq = qv.grad();
                            for (int c = 0; c < dh; ++c)
                                gq[static_cast<std::size_t>(i) * d + hoff + c] += ds * kr[c];
                        }
                        if (kv.requires_grad()) {
                            std::vector<T>& gk = kv.grad();
                            for (int c = 0; c < dh; ++c)
                                gk[static_cast<std::size_t>(j) * d + hoff + c] += ds * qr[c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// 1-D convolution over time: kernel 3, stride 2, zero padding 1.
// x[T, F_in], w[F_out, 3*F_in], bias[F_out] -> out[ceil(T/2), F_out].
template <class T>
TensorT<T> conv1d_s2(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || bias.rank() != 1) throw ShapeError("conv1d_s2 expects x[T,F], w[O,3F], b[O]");
    const int Tn = x.dim(0), Fi = x.dim(1), Fo = w.dim(0);
    if (w.dim(1) != 3 * Fi || bias.dim(0) != Fo) throw ShapeError("conv1d_s2 weight shape mismatch");
    const int To = (Tn + 1) / 2;
    TensorT<T> out = TensorT<T>::zeros({To, Fo});
    for (int to = 0; to < To; ++to) {
        T* orow = out.data() + static_cast<std::ptrdiff_t>(to) * Fo;
        for (int fo = 0; fo < Fo; ++fo) {
            T acc = bias.data()[fo];
            const T* wrow = w.data() + static_cast<std::ptrdiff_t>(fo) * 3 * Fi;
            for (int kt = 0; kt < 3; ++kt) {
                const int ti = 2 * to + kt - 1;
                if (ti < 0 || ti >= Tn) continue;
                const T* xr = x.data() + static_cast<std::ptrdiff_t>(ti) * Fi;
                const T* wk = wrow + static_cast<std::ptrdiff_t>(kt) * Fi;
                for (int fi = 0; fi < Fi; ++fi) acc += wk[fi] * xr[fi];
            }
            orow[fo] = acc;
        }
    }
    detail::check_finite(out, "conv1d_s2");
    if (detail::grads_wanted<T>({&x, &w, &bias})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, wv = w, bv = bias, ov = out;
        active_tape<T>()->record([xv, wv, bv, ov, Tn, Fi, Fo, To]() mutable {
            const std::vector<T>& g = ov.grad();
            for (int to = 0; to < To; ++to) {
                const T* grow = g.data() + static_cast<std::ptrdiff_t>(to) * Fo;
                for (int fo = 0; fo < Fo; ++fo) {
                    const T gv = grow[fo];
                    if (bv.requires_grad()) bv.grad()[static_cast<std::size_t>(fo)] += gv;
                    for (int kt = 0; kt < 3; ++kt) {
                        const int ti = 2 * to + kt - 1;
                        if (ti < 0 || ti >= Tn) continue;
                        for (int fi = 0; fi < Fi; ++fi) {
                            const std::size_t wi = static_cast<std::size_t>(fo) * 3 * Fi + kt * Fi + fi;
                            const std::size_t xi = static_cast<std::size_t>(ti) * Fi + fi;
                            if (wv.requires_grad()) wv.grad()[wi] += gv * xv.data()[xi];
                            if (xv.requires_grad()) xv.grad()[xi] += gv * wv.data()[wi];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Inverted dropout; identity when p == 0. Training-time only.
template <class T>
TensorT<T> dropout(const TensorT<T>& x, T p, Rng& rng) {
    if (p < T(0) || p >= T(1)) throw ValueError("dropout rate must be in [0, 1)");
    if (p == T(0)) return x;
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    std::vector<T> mask(static_cast<std::size_t>(x.size()));
    const T keep = T(1) - p;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        mask[static_cast<std::size_t>(i)] = rng.uniform() < static_cast<double>(p) ? T(0) : T(1) / keep;
        out.data()[i] = x.data()[i] * mask[static_cast<std::size_t>(i)];
    }
    if (detail::grads_wanted<T>({&x})) {
        out.set_requires_grad(true);
        TensorT<T> xv = x, ov = out;
        active_tape<T>()->record([xv, ov, mask = std::move(mask)]() mutable {
            const std::vector<T>& g = ov.grad();
            std::vector<T>& gx = xv.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
        });
    }
    return out;
}

}  // namespace jamt
