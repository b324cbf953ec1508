#pragma once

// Trainable parameters, the Adam optimizer, spectral normalization, and
// weight initialization.

#include <map>
#include <string>
#include <vector>

#include "vsyn/tensor.hpp"

namespace vsyn {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.0;
    double beta2 = 0.9;
    double eps = 1e-8;

    void validate() const {
        require(lr > 0, "adam: lr must be positive");
        require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1,
                "adam: betas must lie in [0, 1)");
    }
};

template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    std::vector<T> m, v;       // Adam first/second moment accumulators
    std::vector<T> sn_u;       // left singular-vector estimate, spectral-norm layers only
    bool trainable = true;

    void init_state() {
        m.assign(value.numel(), T(0));
        v.assign(value.numel(), T(0));
    }
};

template <typename T>
using ParamRefs = std::vector<ParameterT<T>*>;

// Truncated normal (resample beyond 2 sigma), std 0.02 for conv/linear weights.
template <typename T>
void init_trunc_normal(ParameterT<T>& p, std::mt19937_64& rng, double stddev = 0.02) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : p.value.data()) {
        double v = dist(rng);
        while (std::abs(v) > 2 * stddev) v = dist(rng);
        x = static_cast<T>(v);
    }
}

template <typename T>
ParameterT<T> make_param(std::string name, Shape4 shape) {
    ParameterT<T> p;
    p.name = std::move(name);
    p.value = TensorT<T>::zeros(shape, true);
    // keep the leaf in the graph even when constructed inside a NoGrad scope
    p.value.node()->requires_grad = true;
    p.init_state();
    return p;
}

// One bias-corrected Adam update over a parameter group; t is the 1-based step.
template <typename T>
void adam_step(const ParamRefs<T>& params, const AdamConfig& cfg, int64_t t) {
    require(t >= 1, "adam: step index starts at 1");
    cfg.validate();
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T corr1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
    const T corr2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
    for (auto* p : params) {
        if (!p->trainable) continue;
        auto& node = *p->value.node();
        if (node.grad.empty()) continue;  // parameter unused this step
        T* w = node.value.data();
        const T* g = node.grad.data();
        for (size_t i = 0; i < node.value.size(); i++) {
            p->m[i] = b1 * p->m[i] + (T(1) - b1) * g[i];
            p->v[i] = b2 * p->v[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = p->m[i] / corr1;
            const T vhat = p->v[i] / corr2;
            w[i] -= static_cast<T>(cfg.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg.eps));
        }
    }
}

template <typename T>
void zero_grads(const ParamRefs<T>& params) {
    for (auto* p : params) p->value.zero_grad();
}

// ---------------------------------------------------------------------------
// spectral normalization

// One power-iteration refinement of the left singular-vector estimate u for
// the weight viewed as a (rows, cols) = (out, rest) matrix. No graph is built.
template <typename T>
void sn_power_iterate(ParameterT<T>& p) {
    const Shape4 s = p.value.shape();
    const int64_t rows = s.b, cols = s.numel() / s.b;
    if (p.sn_u.empty()) {
        auto rng = make_rng(0x5eed5eedULL, std::hash<std::string>{}(p.name));
        std::normal_distribution<double> dist(0.0, 1.0);
        p.sn_u.resize(rows);
        for (auto& x : p.sn_u) x = static_cast<T>(dist(rng));
    }
    const T* w = p.value.data().data();
    std::vector<T> v(cols, T(0));
    // v = normalize(W^T u); u = normalize(W v)
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < cols; c++) v[c] += w[r * cols + c] * p.sn_u[r];
    T nv = 0;
    for (T x : v) nv += x * x;
    nv = std::sqrt(nv) + static_cast<T>(1e-12);
    for (auto& x : v) x /= nv;
    std::vector<T> u(rows, T(0));
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < cols; c++) u[r] += w[r * cols + c] * v[c];
    T nu = 0;
    for (T x : u) nu += x * x;
    nu = std::sqrt(nu) + static_cast<T>(1e-12);
    for (auto& x : u) x /= nu;
    p.sn_u = std::move(u);
}

// Weight divided by its estimated top singular value sigma = u^T W v, with
// u fixed from the power-iteration state and v derived from it. u and v are
// treated as constants; gradient flows through both W/sigma terms.
template <typename T>
TensorT<T> spectral_normalize(ParameterT<T>& p) {
    if (p.sn_u.empty()) sn_power_iterate(p);
    const Shape4 s = p.value.shape();
    const int64_t rows = s.b, cols = s.numel() / s.b;
    const T* w = p.value.data().data();

    std::vector<T> v(cols, T(0));
    for (int64_t r = 0; r < rows; r++)
        for (int64_t c = 0; c < cols; c++) v[c] += w[r * cols + c] * p.sn_u[r];
    T nv = 0;
    for (T x : v) nv += x * x;
    nv = std::sqrt(nv) + static_cast<T>(1e-12);
    for (auto& x : v) x /= nv;
    T sigma = 0;
    for (int64_t r = 0; r < rows; r++) {
        T acc = 0;
        for (int64_t c = 0; c < cols; c++) acc += w[r * cols + c] * v[c];
        sigma += acc * p.sn_u[r];
    }
    if (std::abs(sigma) < static_cast<T>(1e-12)) sigma = static_cast<T>(1e-12);

    auto out = detail::make_node<T>(s, {p.value.node()}, "sn_scale");
    const T inv = T(1) / sigma;
    for (int64_t i = 0; i < s.numel(); i++) out->value[i] = w[i] * inv;
    if (out->requires_grad) {
        auto nw = p.value.node();
        std::vector<T> u = p.sn_u;
        out->backward_fn = [nw, u, v, sigma, rows, cols](NodeT<T>& n) {
            // d(W/sigma)/dW = I/sigma - (u v^T) W / sigma^2 contracted with g
            const T* g = n.grad.data();
            const T* w = nw->value.data();
            T gw_dot = 0;
            for (size_t i = 0; i < n.grad.size(); i++) gw_dot += g[i] * w[i];
            T* gw = nw->grad_buf().data();
            const T c2 = gw_dot / (sigma * sigma);
            for (int64_t r = 0; r < rows; r++)
                for (int64_t c = 0; c < cols; c++)
                    gw[r * cols + c] += g[r * cols + c] / sigma - c2 * u[r] * v[c];
        };
    }
    return TensorT<T>(out);
}

// Largest singular value via repeated power iteration on a fixed matrix
// (verification oracle for the spectral-norm contract).
template <typename T>
double top_singular_value(const TensorT<T>& w, int iters = 50) {
    const Shape4 s = w.shape();
    const int64_t rows = s.b, cols = s.numel() / s.b;
    std::vector<double> u(rows, 1.0 / std::sqrt(static_cast<double>(rows)));
    std::vector<double> v(cols);
    const T* pw = w.data().data();
    double sigma = 0;
    for (int it = 0; it < iters; it++) {
        std::fill(v.begin(), v.end(), 0.0);
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < cols; c++) v[c] += pw[r * cols + c] * u[r];
        double nv = 0;
        for (double x : v) nv += x * x;
        nv = std::sqrt(nv) + 1e-300;
        for (auto& x : v) x /= nv;
        std::fill(u.begin(), u.end(), 0.0);
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < cols; c++) u[r] += pw[r * cols + c] * v[c];
        double nu = 0;
        for (double x : u) nu += x * x;
        nu = std::sqrt(nu) + 1e-300;
        for (auto& x : u) x /= nu;
        sigma = nu;
    }
    return sigma;
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
struct Conv2dT {
    ParameterT<T> weight;  // (out, in, k, k)
    ParameterT<T> bias;    // (1, out, 1, 1)
    int64_t stride = 1, pad = 0;
    bool use_sn = false;

    Conv2dT() = default;
    Conv2dT(const std::string& name, int64_t in, int64_t out, int64_t k, int64_t stride_,
            int64_t pad_, std::mt19937_64& rng, bool sn = false)
        : stride(stride_), pad(pad_), use_sn(sn) {
        weight = make_param<T>(name + ".w", Shape4{out, in, k, k});
        bias = make_param<T>(name + ".b", Shape4{1, out, 1, 1});
        init_trunc_normal(weight, rng);
    }

    TensorT<T> forward(const TensorT<T>& x) {
        TensorT<T> w = use_sn ? spectral_normalize(weight) : weight.value;
        return add(conv2d(x, w, stride, pad), bias.value);
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

template <typename T>
struct LinearT {
    ParameterT<T> weight;  // (out, in, 1, 1)
    ParameterT<T> bias;    // (1, out, 1, 1)
    bool use_sn = false;
    bool has_bias = true;

    LinearT() = default;
    LinearT(const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng,
            bool sn = false, bool with_bias = true)
        : use_sn(sn), has_bias(with_bias) {
        weight = make_param<T>(name + ".w", Shape4{out, in, 1, 1});
        if (with_bias) bias = make_param<T>(name + ".b", Shape4{1, out, 1, 1});
        init_trunc_normal(weight, rng);
    }

    TensorT<T> forward(const TensorT<T>& x) {
        TensorT<T> w = use_sn ? spectral_normalize(weight) : weight.value;
        TensorT<T> y = linear(x, w);
        return has_bias ? add(y, bias.value) : y;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&weight);
        if (has_bias) out.push_back(&bias);
    }
};

}  // namespace vsyn
