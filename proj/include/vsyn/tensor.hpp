#pragma once

// Reverse-mode autodiff over dense 4-D tensors (batch, channel, height, width).
// The graph is built dynamically; backward() walks nodes in reverse creation
// order, which is a valid topological order because every op creates its
// output after its inputs exist. Training instantiates T = float, the
// finite-difference gradient oracle instantiates T = double.

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <unordered_set>
#include <vector>

#include "vsyn/blas.hpp"
#include "vsyn/common.hpp"

namespace vsyn {

// Recycles node buffers across steps: graphs allocate and free the same sizes
// every iteration, so exact-size buckets keep pages warm and skip the
// zero-fill when the producing op overwrites the whole buffer anyway.
template <typename T>
class BufferPoolT {
  public:
    static BufferPoolT& instance() {
        thread_local BufferPoolT pool;
        return pool;
    }

    // contents are unspecified; every op must fully write its output
    std::vector<T> acquire(size_t n) {
        auto it = free_.find(n);
        if (it != free_.end() && !it->second.empty()) {
            std::vector<T> v = std::move(it->second.back());
            it->second.pop_back();
            return v;
        }
        return std::vector<T>(n);
    }

    std::vector<T> acquire_zero(size_t n) {
        std::vector<T> v = acquire(n);
        std::fill(v.begin(), v.end(), T(0));
        return v;
    }

    void release(std::vector<T>&& v) {
        if (v.size() >= 256 && v.capacity() == v.size())
            free_[v.size()].push_back(std::move(v));
    }

  private:
    std::unordered_map<size_t, std::vector<std::vector<T>>> free_;
};

template <typename T>
struct NodeT {
    Shape4 shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    uint64_t seq = 0;
    const char* op = "";
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backward_fn;

    std::vector<T>& grad_buf() {
        if (grad.empty()) grad = BufferPoolT<T>::instance().acquire_zero(value.size());
        return grad;
    }

    ~NodeT() {
        auto& pool = BufferPoolT<T>::instance();
        pool.release(std::move(value));
        pool.release(std::move(grad));
    }
};

namespace detail {
#ifdef VSYN_PROFILE
inline std::map<std::string, double>& profile_times() {
    static std::map<std::string, double> t;
    return t;
}
inline void profile_add(const char* op, double dt) { profile_times()[op] += dt; }
#endif
template <typename T>
inline uint64_t next_seq() {
    static uint64_t counter = 0;
    return ++counter;
}
inline thread_local bool g_grad_enabled = true;
}  // namespace detail

// Disables graph recording in a scope (forward passes that never backprop).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
};

inline bool grad_enabled() { return detail::g_grad_enabled; }

template <typename T>
class TensorT {
  public:
    using Node = NodeT<T>;
    using NodePtr = std::shared_ptr<Node>;

    TensorT() = default;
    explicit TensorT(NodePtr n) : node_(std::move(n)) {}

    static TensorT zeros(Shape4 s, bool requires_grad = false) {
        return filled(s, T(0), requires_grad);
    }

    static TensorT filled(Shape4 s, T v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->value.assign(static_cast<size_t>(s.numel()), v);
        n->requires_grad = requires_grad && detail::g_grad_enabled;
        n->seq = detail::next_seq<T>();
        return TensorT(std::move(n));
    }

    static TensorT from_data(Shape4 s, std::vector<T> data, bool requires_grad = false) {
        require(static_cast<int64_t>(data.size()) == s.numel(),
                "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                    s.str());
        auto n = std::make_shared<Node>();
        n->shape = s;
        n->value = std::move(data);
        n->requires_grad = requires_grad && detail::g_grad_enabled;
        n->seq = detail::next_seq<T>();
        return TensorT(std::move(n));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape4& shape() const { return node_->shape; }
    int64_t numel() const { return node_->shape.numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    const std::vector<T>& grad() const { return node_->grad; }

    T item() const {
        require(numel() == 1, "item() on non-scalar tensor " + shape().str());
        return node_->value[0];
    }

    T at(int64_t b, int64_t c, int64_t y, int64_t x) const {
        const Shape4& s = node_->shape;
        return node_->value[((b * s.c + c) * s.h + y) * s.w + x];
    }

    NodePtr node() const { return node_; }

    void zero_grad() {
        if (node_) node_->grad.clear();
    }

    // Reverse-mode sweep from a scalar root. With release_buffers the sweep
    // recycles interior values and gradients as soon as they are dead; only
    // leaves (parameters, inputs) and the root keep their storage, so tensors
    // referencing interior nodes must not be read afterwards.
    void backward(bool release_buffers = false) const {
        require(numel() == 1, "backward() requires a scalar, got " + shape().str());
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<Node*> stack{node_.get()};
        seen.insert(node_.get());
        while (!stack.empty()) {
            Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (auto& p : n->parents) {
                if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const Node* a, const Node* b) { return a->seq > b->seq; });
        node_->grad_buf()[0] = T(1);
        auto& pool = BufferPoolT<T>::instance();
        for (Node* n : order) {
            if (n->backward_fn && !n->grad.empty()) {
                // grads fully accumulated here; flush subnormals once so the
                // BLAS consumers never touch them (worker threads keep the
                // default FP environment)
                for (T& v : n->grad)
                    if (v < T(1e-30) && v > T(-1e-30)) v = T(0);
#ifdef VSYN_PROFILE
                auto prof_t0 = std::chrono::steady_clock::now();
#endif
                n->backward_fn(*n);
#ifdef VSYN_PROFILE
                detail::profile_add(n->op, std::chrono::duration<double>(
                                               std::chrono::steady_clock::now() - prof_t0)
                                               .count());
#endif
                if (release_buffers) {
                    // children ran first, so this interior node's buffers are dead
                    pool.release(std::move(n->grad));
                    n->grad.clear();
                    if (n != node_.get()) {
                        pool.release(std::move(n->value));
                        n->value.clear();
                    }
                }
            }
        }
    }

  private:
    NodePtr node_;
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

// ---------------------------------------------------------------------------
// op construction helpers

namespace detail {

// Every op must write the whole output buffer: pooled storage is stale.
template <typename T>
std::shared_ptr<NodeT<T>> make_node(Shape4 s, std::vector<std::shared_ptr<NodeT<T>>> parents,
                                    const char* op = "") {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = s;
    n->op = op;
    n->value = BufferPoolT<T>::instance().acquire(static_cast<size_t>(s.numel()));
    bool rg = false;
    for (auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg && g_grad_enabled;
    if (n->requires_grad) n->parents = std::move(parents);
    n->seq = next_seq<T>();
    return n;
}

template <typename T>
void check_finite(const NodeT<T>& n, const char* op) {
#ifndef NDEBUG
    for (T v : n.value) {
        if (!std::isfinite(static_cast<double>(v))) fail(std::string("non-finite value after ") + op);
    }
#else
    (void)n;
    (void)op;
#endif
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise & broadcast ops

namespace detail {

// Planewise broadcast addressing: an operand either carries the full (H, W)
// plane or a single value per (batch, channel); batch/channel extents are
// full or 1. This covers every broadcast the model uses with a tight inner
// loop; anything else falls back to the generic path.
struct BcOperand {
    Shape4 s;
    bool plane;  // spatial extents equal the output's

    bool compatible(const Shape4& so) const {
        const bool bc_ok = (s.b == so.b || s.b == 1) && (s.c == so.c || s.c == 1);
        const bool sp_full = (s.h == so.h && s.w == so.w);
        const bool sp_one = (s.h == 1 && s.w == 1);
        return bc_ok && (sp_full || sp_one);
    }

    int64_t base(int64_t ib, int64_t ic) const {
        return ((std::min(ib, s.b - 1) * s.c + std::min(ic, s.c - 1))) * s.h * s.w;
    }
};

}  // namespace detail

// Broadcast-compatible binary op: each extent of `a` and `b` must match or be 1.
// kind: 0 add, 1 sub, 2 mul.
template <typename T>
TensorT<T> broadcast_binary(const TensorT<T>& a, const TensorT<T>& b, int kind) {
    const Shape4 sa = a.shape(), sb = b.shape();
    auto dim = [](int64_t x, int64_t y, const Shape4& s0, const Shape4& s1) {
        require(x == y || x == 1 || y == 1,
                "broadcast mismatch between " + s0.str() + " and " + s1.str());
        return std::max(x, y);
    };
    Shape4 so{dim(sa.b, sb.b, sa, sb), dim(sa.c, sb.c, sa, sb), dim(sa.h, sb.h, sa, sb),
              dim(sa.w, sb.w, sa, sb)};
    auto out = detail::make_node<T>(so, {a.node(), b.node()}, "broadcast");

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out->value.data();
    const int64_t hw = so.hw();
    detail::BcOperand oa{sa, sa.h == so.h && sa.w == so.w};
    detail::BcOperand ob{sb, sb.h == so.h && sb.w == so.w};

    if (sa == so && sb == so) {
        const int64_t n = so.numel();
        switch (kind) {
            case 0:
                for (int64_t i = 0; i < n; i++) po[i] = pa[i] + pb[i];
                break;
            case 1:
                for (int64_t i = 0; i < n; i++) po[i] = pa[i] - pb[i];
                break;
            default:
                for (int64_t i = 0; i < n; i++) po[i] = pa[i] * pb[i];
        }
    } else {
        require(oa.compatible(so) && ob.compatible(so),
                "unsupported broadcast between " + sa.str() + " and " + sb.str());
        for (int64_t ib = 0; ib < so.b; ib++)
            for (int64_t ic = 0; ic < so.c; ic++) {
                const T* va = pa + oa.base(ib, ic);
                const T* vb = pb + ob.base(ib, ic);
                T* dst = po + (ib * so.c + ic) * hw;
                switch (kind * 4 + (oa.plane ? 2 : 0) + (ob.plane ? 1 : 0)) {
                    case 0 * 4 + 3:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] + vb[i];
                        break;
                    case 0 * 4 + 2:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] + vb[0];
                        break;
                    case 0 * 4 + 1:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[0] + vb[i];
                        break;
                    case 0 * 4 + 0:
                        std::fill(dst, dst + hw, va[0] + vb[0]);
                        break;
                    case 1 * 4 + 3:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] - vb[i];
                        break;
                    case 1 * 4 + 2:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] - vb[0];
                        break;
                    case 1 * 4 + 1:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[0] - vb[i];
                        break;
                    case 1 * 4 + 0:
                        std::fill(dst, dst + hw, va[0] - vb[0]);
                        break;
                    case 2 * 4 + 3:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] * vb[i];
                        break;
                    case 2 * 4 + 2:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[i] * vb[0];
                        break;
                    case 2 * 4 + 1:
                        for (int64_t i = 0; i < hw; i++) dst[i] = va[0] * vb[i];
                        break;
                    default:
                        std::fill(dst, dst + hw, va[0] * vb[0]);
                }
            }
    }

    if (out->requires_grad) {
        auto na = a.node();
        auto nb = b.node();
        out->backward_fn = [na, nb, so, oa, ob, kind, hw](NodeT<T>& n) {
            const T* g = n.grad.data();
            const T* pa2 = na->value.data();
            const T* pb2 = nb->value.data();
            T* ga = na->requires_grad ? na->grad_buf().data() : nullptr;
            T* gb = nb->requires_grad ? nb->grad_buf().data() : nullptr;
            for (int64_t ib = 0; ib < so.b; ib++)
                for (int64_t ic = 0; ic < so.c; ic++) {
                    const T* gp = g + (ib * so.c + ic) * hw;
                    const int64_t base_a = oa.base(ib, ic), base_b = ob.base(ib, ic);
                    if (ga) {
                        if (kind != 2) {
                            if (oa.plane)
                                for (int64_t i = 0; i < hw; i++) ga[base_a + i] += gp[i];
                            else {
                                T acc = 0;
                                for (int64_t i = 0; i < hw; i++) acc += gp[i];
                                ga[base_a] += acc;
                            }
                        } else {
                            const T* vb = pb2 + base_b;
                            if (oa.plane) {
                                if (ob.plane)
                                    for (int64_t i = 0; i < hw; i++)
                                        ga[base_a + i] += gp[i] * vb[i];
                                else
                                    for (int64_t i = 0; i < hw; i++)
                                        ga[base_a + i] += gp[i] * vb[0];
                            } else {
                                T acc = 0;
                                if (ob.plane)
                                    for (int64_t i = 0; i < hw; i++) acc += gp[i] * vb[i];
                                else
                                    for (int64_t i = 0; i < hw; i++) acc += gp[i] * vb[0];
                                ga[base_a] += acc;
                            }
                        }
                    }
                    if (gb) {
                        const T sign = kind == 1 ? T(-1) : T(1);
                        if (kind != 2) {
                            if (ob.plane)
                                for (int64_t i = 0; i < hw; i++) gb[base_b + i] += sign * gp[i];
                            else {
                                T acc = 0;
                                for (int64_t i = 0; i < hw; i++) acc += gp[i];
                                gb[base_b] += sign * acc;
                            }
                        } else {
                            const T* va = pa2 + base_a;
                            if (ob.plane) {
                                if (oa.plane)
                                    for (int64_t i = 0; i < hw; i++)
                                        gb[base_b + i] += gp[i] * va[i];
                                else
                                    for (int64_t i = 0; i < hw; i++)
                                        gb[base_b + i] += gp[i] * va[0];
                            } else {
                                T acc = 0;
                                if (oa.plane)
                                    for (int64_t i = 0; i < hw; i++) acc += gp[i] * va[i];
                                else
                                    for (int64_t i = 0; i < hw; i++) acc += gp[i] * va[0];
                                gb[base_b] += acc;
                            }
                        }
                    }
                }
        };
    }
    detail::check_finite(*out, "broadcast_binary");
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return broadcast_binary(a, b, 0);
}
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return broadcast_binary(a, b, 1);
}
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return broadcast_binary(a, b, 2);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    auto out = detail::make_node<T>(a.shape(), {a.node()}, "scale");
    const T* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); i++) out->value[i] = pa[i] * s;
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na, s](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            for (size_t i = 0; i < n.grad.size(); i++) ga[i] += g[i] * s;
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
    auto out = detail::make_node<T>(a.shape(), {a.node()}, "add_scalar");
    const T* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); i++) out->value[i] = pa[i] + s;
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            for (size_t i = 0; i < n.grad.size(); i++) ga[i] += g[i];
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return scale(a, T(-1));
}

// Unary op with pointwise derivative computed from (x, y).
template <typename T, typename F, typename DF>
TensorT<T> unary_op(const TensorT<T>& a, F f, DF df, const char* name) {
    auto out = detail::make_node<T>(a.shape(), {a.node()}, name);
    const T* pa = a.data().data();
    for (int64_t i = 0; i < a.numel(); i++) out->value[i] = f(pa[i]);
    if (out->requires_grad) {
        auto na = a.node();
        auto no = out;
        out->backward_fn = [na, df](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            const T* x = na->value.data();
            const T* y = n.value.data();
            for (size_t i = 0; i < n.grad.size(); i++) ga[i] += g[i] * df(x[i], y[i]);
        };
    }
    detail::check_finite(*out, name);
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> leaky_relu(const TensorT<T>& a, T slope = T(0.2)) {
    return unary_op(
        a, [slope](T x) { return x > T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; }, "leaky_relu");
}

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); },
        "relu");
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; }, "tanh");
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); },
        "sigmoid");
}

template <typename T>
TensorT<T> exp_op(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return std::exp(x); }, [](T, T y) { return y; }, "exp");
}

template <typename T>
TensorT<T> abs_op(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return std::abs(x); },
        [](T x, T) { return x >= T(0) ? T(1) : T(-1); }, "abs");
}

template <typename T>
TensorT<T> square(const TensorT<T>& a) {
    return unary_op(
        a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; }, "square");
}

template <typename T>
TensorT<T> clamp(const TensorT<T>& a, T lo, T hi) {
    return unary_op(
        a, [lo, hi](T x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); }, "clamp");
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    auto out = detail::make_node<T>(Shape4{1, 1, 1, 1}, {a.node()}, "sum_all");
    T acc = 0;
    for (T v : a.data()) acc += v;
    out->value[0] = acc;
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na](NodeT<T>& n) {
            T g = n.grad[0];
            T* ga = na->grad_buf().data();
            for (size_t i = 0; i < na->value.size(); i++) ga[i] += g;
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
    return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// Mean over the channel axis -> (B,1,H,W).
template <typename T>
TensorT<T> channel_mean(const TensorT<T>& a) {
    const Shape4 s = a.shape();
    auto out = detail::make_node<T>(Shape4{s.b, 1, s.h, s.w}, {a.node()}, "channel_mean");
    const T* pa = a.data().data();
    T* po = out->value.data();
    const int64_t hw = s.hw();
    std::fill(out->value.begin(), out->value.end(), T(0));
    for (int64_t b = 0; b < s.b; b++)
        for (int64_t c = 0; c < s.c; c++) {
            const T* x = pa + (b * s.c + c) * hw;
            T* o = po + b * hw;
            for (int64_t i = 0; i < hw; i++) o[i] += x[i];
        }
    const T inv = T(1) / static_cast<T>(s.c);
    for (auto& v : out->value) v *= inv;
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na, s, inv](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            const int64_t hw = s.hw();
            for (int64_t b = 0; b < s.b; b++)
                for (int64_t c = 0; c < s.c; c++) {
                    T* gx = ga + (b * s.c + c) * hw;
                    const T* go = g + b * hw;
                    for (int64_t i = 0; i < hw; i++) gx[i] += go[i] * inv;
                }
        };
    }
    return TensorT<T>(out);
}

// Mean over the spatial axes -> (B,C,1,1).
template <typename T>
TensorT<T> spatial_mean(const TensorT<T>& a) {
    const Shape4 s = a.shape();
    auto out = detail::make_node<T>(Shape4{s.b, s.c, 1, 1}, {a.node()}, "spatial_mean");
    const T* pa = a.data().data();
    const int64_t hw = s.hw();
    const T inv = T(1) / static_cast<T>(hw);
    for (int64_t bc = 0; bc < s.b * s.c; bc++) {
        T acc = 0;
        const T* x = pa + bc * hw;
        for (int64_t i = 0; i < hw; i++) acc += x[i];
        out->value[bc] = acc * inv;
    }
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na, s, inv](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            const int64_t hw = s.hw();
            for (int64_t bc = 0; bc < s.b * s.c; bc++) {
                T gv = g[bc] * inv;
                T* gx = ga + bc * hw;
                for (int64_t i = 0; i < hw; i++) gx[i] += gv;
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape4 s) {
    require(s.numel() == a.numel(),
            "reshape from " + a.shape().str() + " to " + s.str() + " changes element count");
    auto out = detail::make_node<T>(s, {a.node()}, "reshape");
    std::copy(a.data().begin(), a.data().end(), out->value.begin());
    if (out->requires_grad) {
        auto na = a.node();
        out->backward_fn = [na](NodeT<T>& n) {
            T* ga = na->grad_buf().data();
            const T* g = n.grad.data();
            for (size_t i = 0; i < n.grad.size(); i++) ga[i] += g[i];
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> flatten(const TensorT<T>& a) {
    const Shape4 s = a.shape();
    return reshape(a, Shape4{s.b, s.c * s.h * s.w, 1, 1});
}

template <typename T>
TensorT<T> detach(const TensorT<T>& a) {
    auto out = std::make_shared<NodeT<T>>();
    out->shape = a.shape();
    out->value = a.data();
    out->requires_grad = false;
    out->seq = detail::next_seq<T>();
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
    require(!xs.empty(), "concat_channels on empty list");
    const Shape4 s0 = xs[0].shape();
    int64_t ctot = 0;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    for (const auto& x : xs) {
        const Shape4 s = x.shape();
        require(s.b == s0.b && s.h == s0.h && s.w == s0.w,
                "concat_channels shape mismatch: " + s0.str() + " vs " + s.str());
        ctot += s.c;
        parents.push_back(x.node());
    }
    auto out = detail::make_node<T>(Shape4{s0.b, ctot, s0.h, s0.w}, parents, "concat");
    const int64_t hw = s0.hw();
    T* po = out->value.data();
    for (int64_t b = 0; b < s0.b; b++) {
        int64_t coff = 0;
        for (const auto& x : xs) {
            const int64_t c = x.shape().c;
            std::memcpy(po + (b * ctot + coff) * hw, x.data().data() + b * c * hw,
                        sizeof(T) * c * hw);
            coff += c;
        }
    }
    if (out->requires_grad) {
        std::vector<std::shared_ptr<NodeT<T>>> srcs;
        for (const auto& x : xs) srcs.push_back(x.node());
        out->backward_fn = [srcs, s0, ctot](NodeT<T>& n) {
            const int64_t hw = s0.hw();
            const T* g = n.grad.data();
            for (int64_t b = 0; b < s0.b; b++) {
                int64_t coff = 0;
                for (auto& src : srcs) {
                    const int64_t c = src->shape.c;
                    if (src->requires_grad) {
                        T* gs = src->grad_buf().data() + b * c * hw;
                        const T* gg = g + (b * ctot + coff) * hw;
                        for (int64_t i = 0; i < c * hw; i++) gs[i] += gg[i];
                    }
                    coff += c;
                }
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// linear algebra

// Fully connected: x (B,F,1,1) * w (O,F,1,1)^T + optional bias (1,O,1,1) -> (B,O,1,1).
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w) {
    const Shape4 sx = x.shape(), sw = w.shape();
    require(sx.h == 1 && sx.w == 1 && sw.h == 1 && sw.w == 1 && sx.c == sw.c,
            "linear: inner extents disagree, input " + sx.str() + " weight " + sw.str());
    const int B = static_cast<int>(sx.b), F = static_cast<int>(sx.c), O = static_cast<int>(sw.b);
    auto out = detail::make_node<T>(Shape4{B, O, 1, 1}, {x.node(), w.node()}, "linear");
    gemm(false, true, B, O, F, T(1), x.data().data(), F, w.data().data(), F, T(0),
         out->value.data(), O);
    if (out->requires_grad) {
        auto nx = x.node();
        auto nw = w.node();
        out->backward_fn = [nx, nw, B, F, O](NodeT<T>& n) {
            const T* g = n.grad.data();
            if (nx->requires_grad)
                gemm(false, false, B, F, O, T(1), g, O, nw->value.data(), F, T(1),
                     nx->grad_buf().data(), F);
            if (nw->requires_grad)
                gemm(true, false, O, F, B, T(1), g, O, nx->value.data(), F, T(1),
                     nw->grad_buf().data(), F);
        };
    }
    detail::check_finite(*out, "linear");
    return TensorT<T>(out);
}

// Per-batch-item matrix product. Matrix dims are given logically; each item of
// `a` must hold ra*ca contiguous values and likewise for `b`.
template <typename T>
TensorT<T> bmm(const TensorT<T>& a, int64_t ra, int64_t ca, bool trans_a, const TensorT<T>& b,
               int64_t rb, int64_t cb, bool trans_b, Shape4 out_shape) {
    const int64_t B = a.shape().b;
    require(b.shape().b == B, "bmm: batch mismatch " + a.shape().str() + " vs " + b.shape().str());
    require(a.numel() == B * ra * ca && b.numel() == B * rb * cb, "bmm: logical dims disagree");
    const int64_t M = trans_a ? ca : ra;
    const int64_t K = trans_a ? ra : ca;
    const int64_t Kb = trans_b ? cb : rb;
    const int64_t N = trans_b ? rb : cb;
    require(K == Kb, "bmm: inner extents disagree");
    require(out_shape.numel() == B * M * N && out_shape.b == B, "bmm: bad output shape");

    auto out = detail::make_node<T>(out_shape, {a.node(), b.node()}, "bmm");
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    // NT at these sizes runs far below NN throughput; transpose B explicitly
    std::vector<T> bt;
    if (trans_b) {
        auto& pool = BufferPoolT<T>::instance();
        bt = pool.acquire(static_cast<size_t>(rb * cb));
        for (int64_t i = 0; i < B; i++) {
            const T* src = pb + i * rb * cb;
            for (int64_t r = 0; r < rb; r++)
                for (int64_t c = 0; c < cb; c++) bt[c * rb + r] = src[r * cb + c];
            gemm(trans_a, false, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K),
                 T(1), pa + i * ra * ca, static_cast<int>(ca), bt.data(), static_cast<int>(rb),
                 T(0), out->value.data() + i * M * N, static_cast<int>(N));
        }
        pool.release(std::move(bt));
    } else {
        for (int64_t i = 0; i < B; i++)
            gemm(trans_a, false, static_cast<int>(M), static_cast<int>(N), static_cast<int>(K),
                 T(1), pa + i * ra * ca, static_cast<int>(ca), pb + i * rb * cb,
                 static_cast<int>(cb), T(0), out->value.data() + i * M * N, static_cast<int>(N));
    }
    if (out->requires_grad) {
        auto na = a.node();
        auto nb = b.node();
        // Only NN / TN forms are issued (NT is slow at these sizes); the small
        // per-item transposes run through pooled scratch.
        out->backward_fn = [na, nb, B, ra, ca, rb, cb, M, N, K, trans_a, trans_b](NodeT<T>& n) {
            auto& pool = BufferPoolT<T>::instance();
            std::vector<T> scratch = pool.acquire(static_cast<size_t>(
                std::max(rb * cb, std::max(M * K, K * N))));
            auto transpose_into = [](const T* src, int64_t rows, int64_t cols, T* dst) {
                for (int64_t r = 0; r < rows; r++)
                    for (int64_t c = 0; c < cols; c++) dst[c * rows + r] = src[r * cols + c];
            };
            for (int64_t i = 0; i < B; i++) {
                const T* g = n.grad.data() + i * M * N;
                const T* va = na->value.data() + i * ra * ca;
                const T* vb = nb->value.data() + i * rb * cb;
                if (na->requires_grad) {
                    T* ga = na->grad_buf().data() + i * ra * ca;
                    // dOpA (M x K) = dC (M x N) * OpB^T (N x K)
                    const T* opb_t = vb;  // trans_b: OpB^T is B itself
                    if (!trans_b) {
#ifdef VSYN_PROFILE
                        auto tp0 = std::chrono::steady_clock::now();
#endif
                        transpose_into(vb, K, N, scratch.data());
#ifdef VSYN_PROFILE
                        detail::profile_add("bmm.transpose", std::chrono::duration<double>(std::chrono::steady_clock::now() - tp0).count());
#endif
                        opb_t = scratch.data();
                    }
                    if (!trans_a) {
#ifdef VSYN_PROFILE
                        auto tg0 = std::chrono::steady_clock::now();
#endif
                        gemm(false, false, static_cast<int>(M), static_cast<int>(K),
                             static_cast<int>(N), T(1), g, static_cast<int>(N), opb_t,
                             static_cast<int>(K), T(1), ga, static_cast<int>(ca));
#ifdef VSYN_PROFILE
                        detail::profile_add("bmm.gemm_dA", std::chrono::duration<double>(std::chrono::steady_clock::now() - tg0).count());
#endif
                    } else {
                        // A stores OpA^T: accumulate the transposed product
                        std::vector<T> tmp = pool.acquire(static_cast<size_t>(M * K));
                        gemm(false, false, static_cast<int>(M), static_cast<int>(K),
                             static_cast<int>(N), T(1), g, static_cast<int>(N), opb_t,
                             static_cast<int>(K), T(0), tmp.data(), static_cast<int>(K));
                        for (int64_t m = 0; m < M; m++)
                            for (int64_t k = 0; k < K; k++) ga[k * M + m] += tmp[m * K + k];
                        pool.release(std::move(tmp));
                    }
                }
                if (nb->requires_grad) {
                    T* gb = nb->grad_buf().data() + i * rb * cb;
                    // dOpB (K x N) = OpA^T (K x M) * dC (M x N)
                    const bool opa_t_direct = trans_a;  // trans_a: OpA^T is A itself
                    if (!trans_b) {
#ifdef VSYN_PROFILE
                        auto tg1 = std::chrono::steady_clock::now();
#endif
                        gemm(!opa_t_direct, false, static_cast<int>(K), static_cast<int>(N),
                             static_cast<int>(M), T(1), va, static_cast<int>(ca), g,
                             static_cast<int>(N), T(1), gb, static_cast<int>(cb));
#ifdef VSYN_PROFILE
                        detail::profile_add("bmm.gemm_dB_tn", std::chrono::duration<double>(std::chrono::steady_clock::now() - tg1).count());
#endif
                    } else {
                        std::vector<T> tmp = pool.acquire(static_cast<size_t>(K * N));
                        gemm(!opa_t_direct, false, static_cast<int>(K), static_cast<int>(N),
                             static_cast<int>(M), T(1), va, static_cast<int>(ca), g,
                             static_cast<int>(N), T(0), tmp.data(), static_cast<int>(N));
                        for (int64_t k = 0; k < K; k++)
                            for (int64_t nn = 0; nn < N; nn++)
                                gb[nn * K + k] += tmp[k * N + nn];
                        pool.release(std::move(tmp));
                    }
                }
            }
            pool.release(std::move(scratch));
        };
    }
    detail::check_finite(*out, "bmm");
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

// Packs one sample into a (K, ld) column matrix at column offset `off`.
template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* col, int64_t ld, int64_t off) {
    for (int64_t c = 0; c < C; c++)
        for (int64_t ky = 0; ky < kh; ky++)
            for (int64_t kx = 0; kx < kw; kx++) {
                T* dst = col + ((c * kh + ky) * kw + kx) * ld + off;
                for (int64_t oy = 0; oy < oh; oy++) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst + oy * ow, dst + (oy + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (c * H + iy) * W;
                    const int64_t x0 = std::max<int64_t>(0, (pad - kx + stride - 1) / stride);
                    const int64_t x1 =
                        std::max(x0, std::min<int64_t>(ow, (W - 1 - kx + pad) / stride + 1));
                    T* row = dst + oy * ow;
                    std::fill(row, row + x0, T(0));
                    if (stride == 1) {
                        const T* s = src - pad + kx + x0;
                        std::copy(s, s + (x1 - x0), row + x0);
                    } else {
                        for (int64_t ox = x0; ox < x1; ox++)
                            row[ox] = src[ox * stride - pad + kx];
                    }
                    std::fill(row + x1, row + ow, T(0));
                }
            }
}

template <typename T>
void col2im_add(const T* col, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* x, int64_t ld,
                int64_t off) {
    for (int64_t c = 0; c < C; c++)
        for (int64_t ky = 0; ky < kh; ky++)
            for (int64_t kx = 0; kx < kw; kx++) {
                const T* src = col + ((c * kh + ky) * kw + kx) * ld + off;
                for (int64_t oy = 0; oy < oh; oy++) {
                    const int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    T* dst = x + (c * H + iy) * W;
                    for (int64_t ox = 0; ox < ow; ox++) {
                        const int64_t ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[oy * ow + ox];
                    }
                }
            }
}

// Largest per-GEMM sample group keeping the column buffer near 32 MB; purely
// shape-derived so runs stay deterministic.
inline int64_t conv_chunk_samples(int64_t batch, int64_t k, int64_t n) {
    const int64_t budget = (64LL << 20) / static_cast<int64_t>(sizeof(float));
    return std::clamp<int64_t>(budget / std::max<int64_t>(1, k * n), 1, batch);
}

}  // namespace detail

// Cross-correlation with zero padding, weight (O, I, kh, kw). Samples are
// folded into the GEMM column dimension in fixed-size groups, which keeps the
// matrices wide enough for BLAS to run near peak.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, int64_t stride = 1, int64_t pad = 0) {
    const Shape4 sx = x.shape(), sw = w.shape();
    require(sx.c == sw.c, "conv2d: channel counts disagree, input " + sx.str() + " weight " +
                              sw.str());
    require(sw.h <= sx.h + 2 * pad && sw.w <= sx.w + 2 * pad,
            "conv2d: kernel " + sw.str() + " larger than padded input " + sx.str());
    const int64_t oh = (sx.h + 2 * pad - sw.h) / stride + 1;
    const int64_t ow = (sx.w + 2 * pad - sw.w) / stride + 1;
    const int64_t O = sw.b, K = sw.c * sw.h * sw.w, N = oh * ow;
    auto out = detail::make_node<T>(Shape4{sx.b, O, oh, ow}, {x.node(), w.node()}, "conv2d");

    auto& pool = BufferPoolT<T>::instance();
    const bool is_1x1 = (sw.h == 1 && sw.w == 1 && stride == 1 && pad == 0);
    if (is_1x1) {
        for (int64_t b = 0; b < sx.b; b++)
            gemm(false, false, static_cast<int>(O), static_cast<int>(N), static_cast<int>(K),
                 T(1), w.data().data(), static_cast<int>(K),
                 x.data().data() + b * sx.c * sx.hw(), static_cast<int>(N), T(0),
                 out->value.data() + b * O * N, static_cast<int>(N));
    } else {
        const int64_t chunk = detail::conv_chunk_samples(sx.b, K, N);
        std::vector<T> col = pool.acquire(static_cast<size_t>(K * chunk * N));
        std::vector<T> ybuf = pool.acquire(static_cast<size_t>(O * chunk * N));
        for (int64_t b0 = 0; b0 < sx.b; b0 += chunk) {
            const int64_t bs = std::min(chunk, sx.b - b0);
            for (int64_t s = 0; s < bs; s++)
                detail::im2col(x.data().data() + (b0 + s) * sx.c * sx.hw(), sx.c, sx.h, sx.w,
                               sw.h, sw.w, stride, pad, oh, ow, col.data(), chunk * N, s * N);
            gemm(false, false, static_cast<int>(O), static_cast<int>(bs * N),
                 static_cast<int>(K), T(1), w.data().data(), static_cast<int>(K), col.data(),
                 static_cast<int>(chunk * N), T(0), ybuf.data(), static_cast<int>(chunk * N));
            for (int64_t o = 0; o < O; o++)
                for (int64_t s = 0; s < bs; s++)
                    std::copy(ybuf.data() + o * chunk * N + s * N,
                              ybuf.data() + o * chunk * N + (s + 1) * N,
                              out->value.data() + ((b0 + s) * O + o) * N);
        }
        pool.release(std::move(col));
        pool.release(std::move(ybuf));
    }

    if (out->requires_grad) {
        auto nx = x.node();
        auto nw = w.node();
        out->backward_fn = [nx, nw, sx, sw, stride, pad, oh, ow, O, K, N, is_1x1](NodeT<T>& n) {
            auto& pool = BufferPoolT<T>::instance();
            if (is_1x1) {
                for (int64_t b = 0; b < sx.b; b++) {
                    const T* g = n.grad.data() + b * O * N;
                    if (nw->requires_grad)
                        gemm(false, true, static_cast<int>(O), static_cast<int>(K),
                             static_cast<int>(N), T(1), g, static_cast<int>(N),
                             nx->value.data() + b * K * N, static_cast<int>(N), T(1),
                             nw->grad_buf().data(), static_cast<int>(K));
                    if (nx->requires_grad)
                        gemm(true, false, static_cast<int>(K), static_cast<int>(N),
                             static_cast<int>(O), T(1), nw->value.data(), static_cast<int>(K), g,
                             static_cast<int>(N), T(1),
                             nx->grad_buf().data() + b * K * N, static_cast<int>(N));
                }
                return;
            }
            const int64_t chunk = detail::conv_chunk_samples(sx.b, K, N);
            std::vector<T> gy = pool.acquire(static_cast<size_t>(O * chunk * N));
            std::vector<T> col;
            if (nw->requires_grad) col = pool.acquire(static_cast<size_t>(K * chunk * N));
            std::vector<T> dcol;
            if (nx->requires_grad) dcol = pool.acquire(static_cast<size_t>(K * chunk * N));
            for (int64_t b0 = 0; b0 < sx.b; b0 += chunk) {
                const int64_t bs = std::min(chunk, sx.b - b0);
                for (int64_t o = 0; o < O; o++)
                    for (int64_t s = 0; s < bs; s++)
                        std::copy(n.grad.data() + ((b0 + s) * O + o) * N,
                                  n.grad.data() + ((b0 + s) * O + o + 1) * N,
                                  gy.data() + o * chunk * N + s * N);
                if (nw->requires_grad) {
                    for (int64_t s = 0; s < bs; s++)
                        detail::im2col(nx->value.data() + (b0 + s) * sx.c * sx.hw(), sx.c, sx.h,
                                       sx.w, sw.h, sw.w, stride, pad, oh, ow, col.data(),
                                       chunk * N, s * N);
                    gemm(false, true, static_cast<int>(O), static_cast<int>(K),
                         static_cast<int>(bs * N), T(1), gy.data(),
                         static_cast<int>(chunk * N), col.data(), static_cast<int>(chunk * N),
                         T(1), nw->grad_buf().data(), static_cast<int>(K));
                }
                if (nx->requires_grad) {
                    gemm(true, false, static_cast<int>(K), static_cast<int>(bs * N),
                         static_cast<int>(O), T(1), nw->value.data(), static_cast<int>(K),
                         gy.data(), static_cast<int>(chunk * N), T(0), dcol.data(),
                         static_cast<int>(chunk * N));
                    T* gx = nx->grad_buf().data();
                    for (int64_t s = 0; s < bs; s++)
                        detail::col2im_add(dcol.data(), sx.c, sx.h, sx.w, sw.h, sw.w, stride,
                                           pad, oh, ow, gx + (b0 + s) * sx.c * sx.hw(),
                                           chunk * N, s * N);
                }
            }
            pool.release(std::move(gy));
            pool.release(std::move(col));
            pool.release(std::move(dcol));
        };
    }
    detail::check_finite(*out, "conv2d");
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// normalizations

namespace detail {

// Shared normalization backward for groups of size L normalized jointly:
// y = (x - mu) / sqrt(var + eps)
// dx = inv_std * (dy - mean(dy) - y * mean(dy * y))
template <typename T>
void norm_group_backward(const T* y, const T* dy, T inv_std, int64_t L, int64_t stride, T* dx) {
    T mean_dy = 0, mean_dyy = 0;
    for (int64_t i = 0; i < L; i++) {
        mean_dy += dy[i * stride];
        mean_dyy += dy[i * stride] * y[i * stride];
    }
    mean_dy /= static_cast<T>(L);
    mean_dyy /= static_cast<T>(L);
    for (int64_t i = 0; i < L; i++)
        dx[i * stride] += inv_std * (dy[i * stride] - mean_dy - y[i * stride] * mean_dyy);
}

}  // namespace detail

// Per (batch, channel): zero-mean unit-variance over the spatial extent.
template <typename T>
TensorT<T> instance_norm(const TensorT<T>& x, T eps = T(1e-5)) {
    const Shape4 s = x.shape();
    auto out = detail::make_node<T>(s, {x.node()}, "instance_norm");
    const int64_t hw = s.hw();
    std::vector<T> inv_stds(static_cast<size_t>(s.b * s.c));
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t bc = 0; bc < s.b * s.c; bc++) {
        const T* xg = px + bc * hw;
        T mu = 0;
        for (int64_t i = 0; i < hw; i++) mu += xg[i];
        mu /= static_cast<T>(hw);
        T var = 0;
        for (int64_t i = 0; i < hw; i++) var += (xg[i] - mu) * (xg[i] - mu);
        var /= static_cast<T>(hw);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_stds[bc] = inv;
        T* og = po + bc * hw;
        for (int64_t i = 0; i < hw; i++) og[i] = (xg[i] - mu) * inv;
    }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, s, inv_stds](NodeT<T>& n) {
            const int64_t hw = s.hw();
            T* gx = nx->grad_buf().data();
            for (int64_t bc = 0; bc < s.b * s.c; bc++)
                detail::norm_group_backward(n.value.data() + bc * hw, n.grad.data() + bc * hw,
                                            inv_stds[bc], hw, 1, gx + bc * hw);
        };
    }
    detail::check_finite(*out, "instance_norm");
    return TensorT<T>(out);
}

// Per (batch, position): zero-mean unit-variance over the channel extent.
template <typename T>
TensorT<T> positional_norm(const TensorT<T>& x, T eps = T(1e-5)) {
    const Shape4 s = x.shape();
    auto out = detail::make_node<T>(s, {x.node()}, "positional_norm");
    const int64_t hw = s.hw();
    std::vector<T> inv_stds(static_cast<size_t>(s.b * hw));
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t b = 0; b < s.b; b++)
        for (int64_t i = 0; i < hw; i++) {
            const T* xg = px + b * s.c * hw + i;
            T mu = 0;
            for (int64_t c = 0; c < s.c; c++) mu += xg[c * hw];
            mu /= static_cast<T>(s.c);
            T var = 0;
            for (int64_t c = 0; c < s.c; c++) var += (xg[c * hw] - mu) * (xg[c * hw] - mu);
            var /= static_cast<T>(s.c);
            const T inv = T(1) / std::sqrt(var + eps);
            inv_stds[b * hw + i] = inv;
            T* og = po + b * s.c * hw + i;
            for (int64_t c = 0; c < s.c; c++) og[c * hw] = (xg[c * hw] - mu) * inv;
        }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, s, inv_stds](NodeT<T>& n) {
            const int64_t hw = s.hw();
            T* gx = nx->grad_buf().data();
            for (int64_t b = 0; b < s.b; b++)
                for (int64_t i = 0; i < hw; i++)
                    detail::norm_group_backward(n.value.data() + b * s.c * hw + i,
                                                n.grad.data() + b * s.c * hw + i,
                                                inv_stds[b * hw + i], s.c, hw,
                                                gx + b * s.c * hw + i);
        };
    }
    detail::check_finite(*out, "positional_norm");
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// softmax

// Temperature softmax over contiguous rows of length row_len.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x, T tau, int64_t row_len) {
    require(tau > T(0), "softmax temperature must be positive, got " + std::to_string(tau));
    require(x.numel() % row_len == 0, "softmax row length does not divide element count");
    auto out = detail::make_node<T>(x.shape(), {x.node()}, "softmax");
    const int64_t rows = x.numel() / row_len;
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t r = 0; r < rows; r++) {
        const T* xr = px + r * row_len;
        T* yr = po + r * row_len;
        T m = xr[0];
        for (int64_t i = 1; i < row_len; i++) m = std::max(m, xr[i]);
        T sum = 0;
        for (int64_t i = 0; i < row_len; i++) {
            yr[i] = std::exp((xr[i] - m) / tau);
            sum += yr[i];
        }
        const T inv = T(1) / sum;
        // subnormal weights carry no signal but cripple downstream GEMMs
        for (int64_t i = 0; i < row_len; i++) {
            yr[i] *= inv;
            if (yr[i] < T(1e-30)) yr[i] = T(0);
        }
    }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, rows, row_len, tau](NodeT<T>& n) {
            T* gx = nx->grad_buf().data();
            for (int64_t r = 0; r < rows; r++) {
                const T* y = n.value.data() + r * row_len;
                const T* gy = n.grad.data() + r * row_len;
                T dot = 0;
                for (int64_t i = 0; i < row_len; i++) dot += gy[i] * y[i];
                for (int64_t i = 0; i < row_len; i++)
                    gx[r * row_len + i] += y[i] * (gy[i] - dot) / tau;
            }
        };
    }
    detail::check_finite(*out, "softmax_rows");
    return TensorT<T>(out);
}

// Stable log-softmax over contiguous rows (classifier logits).
template <typename T>
TensorT<T> log_softmax_rows(const TensorT<T>& x, int64_t row_len) {
    require(x.numel() % row_len == 0, "log_softmax row length does not divide element count");
    auto out = detail::make_node<T>(x.shape(), {x.node()});
    const int64_t rows = x.numel() / row_len;
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t r = 0; r < rows; r++) {
        const T* xr = px + r * row_len;
        T* yr = po + r * row_len;
        T m = xr[0];
        for (int64_t i = 1; i < row_len; i++) m = std::max(m, xr[i]);
        T sum = 0;
        for (int64_t i = 0; i < row_len; i++) sum += std::exp(xr[i] - m);
        const T lse = m + std::log(sum);
        for (int64_t i = 0; i < row_len; i++) yr[i] = xr[i] - lse;
    }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, rows, row_len](NodeT<T>& n) {
            T* gx = nx->grad_buf().data();
            for (int64_t r = 0; r < rows; r++) {
                const T* y = n.value.data() + r * row_len;
                const T* gy = n.grad.data() + r * row_len;
                T gsum = 0;
                for (int64_t i = 0; i < row_len; i++) gsum += gy[i];
                for (int64_t i = 0; i < row_len; i++)
                    gx[r * row_len + i] += gy[i] - std::exp(y[i]) * gsum;
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// resampling

template <typename T>
TensorT<T> upsample_nearest(const TensorT<T>& x, int64_t factor) {
    require(factor == 2 || factor == 4, "upsample factor must be 2 or 4, got " +
                                            std::to_string(factor));
    const Shape4 s = x.shape();
    const Shape4 so{s.b, s.c, s.h * factor, s.w * factor};
    auto out = detail::make_node<T>(so, {x.node()}, "upsample_nearest");
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t bc = 0; bc < s.b * s.c; bc++)
        for (int64_t y = 0; y < so.h; y++) {
            const T* src = px + bc * s.hw() + (y / factor) * s.w;
            T* dst = po + bc * so.hw() + y * so.w;
            for (int64_t xx = 0; xx < so.w; xx++) dst[xx] = src[xx / factor];
        }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, s, so, factor](NodeT<T>& n) {
            T* gx = nx->grad_buf().data();
            const T* g = n.grad.data();
            for (int64_t bc = 0; bc < s.b * s.c; bc++)
                for (int64_t y = 0; y < so.h; y++) {
                    T* dst = gx + bc * s.hw() + (y / factor) * s.w;
                    const T* src = g + bc * so.hw() + y * so.w;
                    for (int64_t xx = 0; xx < so.w; xx++) dst[xx / factor] += src[xx];
                }
        };
    }
    return TensorT<T>(out);
}

namespace detail {

// Half-pixel-centers source coordinate; clamped to the valid range.
struct LinCoef {
    int64_t i0, i1;
    double f;  // weight of i1
};

inline LinCoef lin_coef(int64_t dst, int64_t factor, int64_t src_len) {
    double s = (dst + 0.5) / factor - 0.5;
    if (s < 0) s = 0;
    if (s > src_len - 1) s = static_cast<double>(src_len - 1);
    int64_t i0 = static_cast<int64_t>(std::floor(s));
    int64_t i1 = std::min(i0 + 1, src_len - 1);
    return {i0, i1, s - i0};
}

}  // namespace detail

template <typename T>
TensorT<T> upsample_bilinear(const TensorT<T>& x, int64_t factor) {
    require(factor == 2 || factor == 4, "upsample factor must be 2 or 4, got " +
                                            std::to_string(factor));
    const Shape4 s = x.shape();
    const Shape4 so{s.b, s.c, s.h * factor, s.w * factor};
    auto out = detail::make_node<T>(so, {x.node()}, "upsample_bilinear");
    std::vector<detail::LinCoef> ys(so.h), xs(so.w);
    for (int64_t y = 0; y < so.h; y++) ys[y] = detail::lin_coef(y, factor, s.h);
    for (int64_t xx = 0; xx < so.w; xx++) xs[xx] = detail::lin_coef(xx, factor, s.w);
    const T* px = x.data().data();
    T* po = out->value.data();
    for (int64_t bc = 0; bc < s.b * s.c; bc++) {
        const T* src = px + bc * s.hw();
        T* dst = po + bc * so.hw();
        for (int64_t y = 0; y < so.h; y++)
            for (int64_t xx = 0; xx < so.w; xx++) {
                const auto& cy = ys[y];
                const auto& cx = xs[xx];
                const T v00 = src[cy.i0 * s.w + cx.i0], v01 = src[cy.i0 * s.w + cx.i1];
                const T v10 = src[cy.i1 * s.w + cx.i0], v11 = src[cy.i1 * s.w + cx.i1];
                const T top = v00 + static_cast<T>(cx.f) * (v01 - v00);
                const T bot = v10 + static_cast<T>(cx.f) * (v11 - v10);
                dst[y * so.w + xx] = top + static_cast<T>(cy.f) * (bot - top);
            }
    }
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, s, so, ys, xs](NodeT<T>& n) {
            T* gx = nx->grad_buf().data();
            const T* g = n.grad.data();
            for (int64_t bc = 0; bc < s.b * s.c; bc++) {
                T* dst = gx + bc * s.hw();
                const T* src = g + bc * so.hw();
                for (int64_t y = 0; y < so.h; y++)
                    for (int64_t xx = 0; xx < so.w; xx++) {
                        const auto& cy = ys[y];
                        const auto& cx = xs[xx];
                        const T gv = src[y * so.w + xx];
                        const T fy = static_cast<T>(cy.f), fx = static_cast<T>(cx.f);
                        dst[cy.i0 * s.w + cx.i0] += gv * (1 - fy) * (1 - fx);
                        dst[cy.i0 * s.w + cx.i1] += gv * (1 - fy) * fx;
                        dst[cy.i1 * s.w + cx.i0] += gv * fy * (1 - fx);
                        dst[cy.i1 * s.w + cx.i1] += gv * fy * fx;
                    }
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// random fills (graph leaves)

template <typename T>
TensorT<T> randn(Shape4 s, std::mt19937_64& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(dist(rng)) * stddev;
    return TensorT<T>::from_data(s, std::move(v), requires_grad);
}

template <typename T>
TensorT<T> rand_uniform(Shape4 s, std::mt19937_64& rng, T lo, T hi, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<T> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return TensorT<T>::from_data(s, std::move(v), requires_grad);
}

}  // namespace vsyn
