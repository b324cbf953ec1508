#pragma once

// Flow representations and warping kernels: dense backward-sampling hard warp,
// condition-kernel flow prediction, the all-pairs soft flow with temperature
// softmax, its spatial/channel application, blockwise coarse deformation of
// higher resolutions, and flow composition across the resolution ladder.
//
// Convention throughout: flows are backward-sampling offsets in pixel units,
// output(u) samples input(u + flow(u)); channel 0 is dx, channel 1 is dy.

#include <utility>

#include "vsyn/tensor.hpp"

namespace vsyn {

template <typename T>
struct FlowFieldT {
    TensorT<T> field;  // (B, 2, H, W)

    FlowFieldT() = default;
    explicit FlowFieldT(TensorT<T> t) : field(std::move(t)) {
        require(field.shape().c == 2, "flow field must have 2 channels, got " +
                                          field.shape().str());
    }

    static FlowFieldT zeros(int64_t b, int64_t h, int64_t w) {
        return FlowFieldT(TensorT<T>::zeros(Shape4{b, 2, h, w}));
    }

    const Shape4& shape() const { return field.shape(); }
};

template <typename T>
struct SoftFlowMatrixT {
    TensorT<T> weights;  // (B, 1, U, V) row-stochastic after softmax
    T tau = T(0);
    int64_t grid_h = 0, grid_w = 0;

    int64_t positions() const { return grid_h * grid_w; }
};

using FlowField = FlowFieldT<float>;
using SoftFlowMatrix = SoftFlowMatrixT<float>;

// ---------------------------------------------------------------------------
// hard warp

// Bilinear backward sampling with clamp-to-edge. Differentiable in both the
// feature and the flow; the flow gradient vanishes where sampling clamps.
template <typename T>
TensorT<T> hard_warp(const TensorT<T>& feature, const FlowFieldT<T>& flow) {
    const Shape4 sf = feature.shape(), sl = flow.shape();
    require(sf.b == sl.b && sf.h == sl.h && sf.w == sl.w,
            "hard_warp: flow resolution " + sl.str() + " does not match feature " + sf.str());
    auto out = detail::make_node<T>(sf, {feature.node(), flow.field.node()}, "hard_warp");

    const int64_t B = sf.b, C = sf.c, H = sf.h, W = sf.w, hw = H * W;
    const T* pf = feature.data().data();
    const T* pl = flow.field.data().data();
    T* po = out->value.data();
    for (int64_t b = 0; b < B; b++) {
        const T* dx = pl + b * 2 * hw;
        const T* dy = dx + hw;
        for (int64_t y = 0; y < H; y++)
            for (int64_t x = 0; x < W; x++) {
                const int64_t i = y * W + x;
                T sx = static_cast<T>(x) + dx[i];
                T sy = static_cast<T>(y) + dy[i];
                sx = std::min(std::max(sx, T(0)), static_cast<T>(W - 1));
                sy = std::min(std::max(sy, T(0)), static_cast<T>(H - 1));
                const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                const int64_t y0 = static_cast<int64_t>(std::floor(sy));
                const int64_t x1 = std::min(x0 + 1, W - 1);
                const int64_t y1 = std::min(y0 + 1, H - 1);
                const T fx = sx - static_cast<T>(x0);
                const T fy = sy - static_cast<T>(y0);
                for (int64_t c = 0; c < C; c++) {
                    const T* src = pf + (b * C + c) * hw;
                    const T top = src[y0 * W + x0] + fx * (src[y0 * W + x1] - src[y0 * W + x0]);
                    const T bot = src[y1 * W + x0] + fx * (src[y1 * W + x1] - src[y1 * W + x0]);
                    po[(b * C + c) * hw + i] = top + fy * (bot - top);
                }
            }
    }

    if (out->requires_grad) {
        auto nf = feature.node();
        auto nl = flow.field.node();
        out->backward_fn = [nf, nl, B, C, H, W, hw](NodeT<T>& n) {
            const T* g = n.grad.data();
            const T* pf = nf->value.data();
            const T* pl = nl->value.data();
            T* gf = nf->requires_grad ? nf->grad_buf().data() : nullptr;
            T* gl = nl->requires_grad ? nl->grad_buf().data() : nullptr;
            for (int64_t b = 0; b < B; b++) {
                const T* dx = pl + b * 2 * hw;
                const T* dy = dx + hw;
                for (int64_t y = 0; y < H; y++)
                    for (int64_t x = 0; x < W; x++) {
                        const int64_t i = y * W + x;
                        T sx = static_cast<T>(x) + dx[i];
                        T sy = static_cast<T>(y) + dy[i];
                        const bool in_x = (sx >= T(0) && sx <= static_cast<T>(W - 1));
                        const bool in_y = (sy >= T(0) && sy <= static_cast<T>(H - 1));
                        sx = std::min(std::max(sx, T(0)), static_cast<T>(W - 1));
                        sy = std::min(std::max(sy, T(0)), static_cast<T>(H - 1));
                        const int64_t x0 = static_cast<int64_t>(std::floor(sx));
                        const int64_t y0 = static_cast<int64_t>(std::floor(sy));
                        const int64_t x1 = std::min(x0 + 1, W - 1);
                        const int64_t y1 = std::min(y0 + 1, H - 1);
                        const T fx = sx - static_cast<T>(x0);
                        const T fy = sy - static_cast<T>(y0);
                        T acc_dx = 0, acc_dy = 0;
                        for (int64_t c = 0; c < C; c++) {
                            const T gv = g[(b * C + c) * hw + i];
                            if (gv == T(0)) continue;
                            const T* src = pf + (b * C + c) * hw;
                            if (gf) {
                                T* dst = gf + (b * C + c) * hw;
                                dst[y0 * W + x0] += gv * (1 - fy) * (1 - fx);
                                dst[y0 * W + x1] += gv * (1 - fy) * fx;
                                dst[y1 * W + x0] += gv * fy * (1 - fx);
                                dst[y1 * W + x1] += gv * fy * fx;
                            }
                            if (gl) {
                                const T ddx = (1 - fy) * (src[y0 * W + x1] - src[y0 * W + x0]) +
                                              fy * (src[y1 * W + x1] - src[y1 * W + x0]);
                                const T ddy = (1 - fx) * (src[y1 * W + x0] - src[y0 * W + x0]) +
                                              fx * (src[y1 * W + x1] - src[y0 * W + x1]);
                                acc_dx += gv * ddx;
                                acc_dy += gv * ddy;
                            }
                        }
                        if (gl) {
                            if (in_x) gl[b * 2 * hw + i] += acc_dx;
                            if (in_y) gl[b * 2 * hw + hw + i] += acc_dy;
                        }
                    }
            }
        };
    }
    detail::check_finite(*out, "hard_warp");
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// condition-kernel flow prediction

// The per-sample condition vector acts as the kernel of a 1x1 convolution
// producing the (dx, dy) offsets. Vector layout: [dx kernel over C, dy kernel
// over C]; no bias, so a zero condition yields exactly zero flow.
template <typename T>
FlowFieldT<T> kg_conv(const TensorT<T>& feature, const TensorT<T>& cond_kernel, int64_t k = 1) {
    require(k == 1, "kg_conv: only kernel size 1 is supported");
    const Shape4 sf = feature.shape();
    const int64_t expected = 2 * sf.c * k * k;
    const Shape4 sc = cond_kernel.shape();
    require(sc.b == sf.b && sc.c == expected && sc.h == 1 && sc.w == 1,
            "kg_conv: condition vector " + sc.str() + " must have length " +
                std::to_string(expected) + " per batch item");
    auto out = detail::make_node<T>(Shape4{sf.b, 2, sf.h, sf.w},
                                    {feature.node(), cond_kernel.node()}, "kg_conv");
    const int64_t C = sf.c, hw = sf.hw();
    const T* pf = feature.data().data();
    const T* pc = cond_kernel.data().data();
    T* po = out->value.data();
    for (int64_t b = 0; b < sf.b; b++)
        for (int64_t o = 0; o < 2; o++) {
            T* dst = po + (b * 2 + o) * hw;
            std::fill(dst, dst + hw, T(0));
            for (int64_t c = 0; c < C; c++) {
                const T wv = pc[b * 2 * C + o * C + c];
                if (wv == T(0)) continue;
                const T* src = pf + (b * C + c) * hw;
                for (int64_t i = 0; i < hw; i++) dst[i] += wv * src[i];
            }
        }
    if (out->requires_grad) {
        auto nf = feature.node();
        auto nc = cond_kernel.node();
        out->backward_fn = [nf, nc, C, hw](NodeT<T>& n) {
            const int64_t B = n.shape.b;
            const T* g = n.grad.data();
            for (int64_t b = 0; b < B; b++)
                for (int64_t o = 0; o < 2; o++) {
                    const T* gd = g + (b * 2 + o) * hw;
                    for (int64_t c = 0; c < C; c++) {
                        const T* src = nf->value.data() + (b * C + c) * hw;
                        if (nc->requires_grad) {
                            T acc = 0;
                            for (int64_t i = 0; i < hw; i++) acc += gd[i] * src[i];
                            nc->grad_buf()[b * 2 * C + o * C + c] += acc;
                        }
                        if (nf->requires_grad) {
                            const T wv = nc->value[b * 2 * C + o * C + c];
                            if (wv == T(0)) continue;
                            T* dst = nf->grad_buf().data() + (b * C + c) * hw;
                            for (int64_t i = 0; i < hw; i++) dst[i] += wv * gd[i];
                        }
                    }
                }
        };
    }
    return FlowFieldT<T>(TensorT<T>(out));
}

// ---------------------------------------------------------------------------
// soft flow

// All-pairs attention between the channel-wise centralized features: row u of
// the matrix is the softmax over source positions v of <g_hat_u, e_hat_v>.
template <typename T>
SoftFlowMatrixT<T> soft_flow(const TensorT<T>& source_feat, const TensorT<T>& target_feat, T tau) {
    const Shape4 se = source_feat.shape(), sg = target_feat.shape();
    require(se == sg, "soft_flow: feature shapes disagree, " + se.str() + " vs " + sg.str());
    const int64_t C = se.c, P = se.hw();
    TensorT<T> e_hat = sub(source_feat, channel_mean(source_feat));
    TensorT<T> g_hat = sub(target_feat, channel_mean(target_feat));
    TensorT<T> logits = bmm(g_hat, C, P, true, e_hat, C, P, false, Shape4{se.b, 1, P, P});
    SoftFlowMatrixT<T> sf;
    sf.weights = softmax_rows(logits, tau, P);
    sf.tau = tau;
    sf.grid_h = se.h;
    sf.grid_w = se.w;
    return sf;
}

// F_sp(u) = sum_v sf(u, v) * feature(:, v); the uncentralized feature is mixed.
template <typename T>
TensorT<T> soft_spatial_warp(const TensorT<T>& source_feat, const SoftFlowMatrixT<T>& sf) {
    const Shape4 s = source_feat.shape();
    require(s.hw() == sf.positions(),
            "soft_spatial_warp: matrix built for " + std::to_string(sf.positions()) +
                " positions, feature has " + std::to_string(s.hw()));
    const int64_t P = s.hw();
    return bmm(source_feat, s.c, P, false, sf.weights, P, P, true, s);
}

// Channel-to-channel attention computed like the spatial one but over the
// per-channel spatially centralized features; rows softmax with the same tau.
// A single position carries no spatial statistics, so the 1x1 case is the
// identity (matching the degenerate-extent contract).
template <typename T>
TensorT<T> channel_soft_warp(const TensorT<T>& warped_feat, const TensorT<T>& target_feat, T tau) {
    const Shape4 s = warped_feat.shape();
    require(s == target_feat.shape(), "channel_soft_warp: shapes disagree, " + s.str() + " vs " +
                                          target_feat.shape().str());
    if (s.hw() == 1) return warped_feat;
    const int64_t C = s.c, P = s.hw();
    TensorT<T> f_hat = sub(warped_feat, spatial_mean(warped_feat));
    TensorT<T> g_hat = sub(target_feat, spatial_mean(target_feat));
    TensorT<T> cov = bmm(g_hat, C, P, false, f_hat, C, P, true, Shape4{s.b, 1, C, C});
    TensorT<T> w = softmax_rows(cov, tau, C);
    return bmm(w, C, C, false, warped_feat, C, P, false, s);
}

// ---------------------------------------------------------------------------
// blockwise coarse deformation

namespace detail {

// Streams contiguous r-length runs between the (B, C, Hc*r, Wc*r) layout and
// block rows: dir > 0 reads planes into rows, dir < 0 the reverse;
// accumulate adds instead of assigning (gradient scatter).
template <typename T, bool kAccumulate>
void block_permute(const T* src, T* dst, Shape4 s, int64_t r, bool to_rows) {
    const int64_t Hc = s.h / r, Wc = s.w / r, U = Hc * Wc, L = s.c * r * r;
    for (int64_t b = 0; b < s.b; b++)
        for (int64_t c = 0; c < s.c; c++)
            for (int64_t uy = 0; uy < Hc; uy++)
                for (int64_t dy = 0; dy < r; dy++)
                    for (int64_t ux = 0; ux < Wc; ux++) {
                        const int64_t plane =
                            ((b * s.c + c) * s.h + uy * r + dy) * s.w + ux * r;
                        const int64_t row =
                            (b * U + uy * Wc + ux) * L + (c * r + dy) * r;
                        const T* from = src + (to_rows ? plane : row);
                        T* to = dst + (to_rows ? row : plane);
                        if constexpr (kAccumulate)
                            for (int64_t k = 0; k < r; k++) to[k] += from[k];
                        else
                            for (int64_t k = 0; k < r; k++) to[k] = from[k];
                    }
}

// (B, C, Hc*r, Wc*r) -> (B, 1, Hc*Wc, C*r*r): row u holds the flattened block
// at coarse cell u. Pure permutation; backward is the inverse scatter.
template <typename T>
TensorT<T> blockify(const TensorT<T>& x, int64_t r) {
    const Shape4 s = x.shape();
    const int64_t U = (s.h / r) * (s.w / r), L = s.c * r * r;
    auto out = make_node<T>(Shape4{s.b, 1, U, L}, {x.node()}, "blockify");
    block_permute<T, false>(x.data().data(), out->value.data(), s, r, true);
    if (out->requires_grad) {
        auto nx = x.node();
        out->backward_fn = [nx, s, r](NodeT<T>& n) {
            block_permute<T, true>(n.grad.data(), nx->grad_buf().data(), s, r, false);
        };
    }
    return TensorT<T>(out);
}

template <typename T>
TensorT<T> unblockify(const TensorT<T>& rows, Shape4 target, int64_t r) {
    auto out = make_node<T>(target, {rows.node()}, "unblockify");
    block_permute<T, false>(rows.data().data(), out->value.data(), target, r, false);
    if (out->requires_grad) {
        auto nr = rows.node();
        out->backward_fn = [nr, target, r](NodeT<T>& n) {
            block_permute<T, true>(n.grad.data(), nr->grad_buf().data(), target, r, true);
        };
    }
    return TensorT<T>(out);
}

}  // namespace detail

// Applies the coarse soft-flow matrix to a higher-resolution feature: the r x r
// block at coarse cell u becomes the sf(u, :)-weighted sum of all source blocks.
template <typename T>
TensorT<T> soft_flow_apply_blockwise(const TensorT<T>& feature_hi, const SoftFlowMatrixT<T>& sf) {
    const Shape4 s = feature_hi.shape();
    require(sf.grid_h > 0 && s.h % sf.grid_h == 0 && s.w % sf.grid_w == 0 &&
                s.h / sf.grid_h == s.w / sf.grid_w,
            "blockwise warp: feature " + s.str() + " is not an integer multiple of the coarse grid " +
                std::to_string(sf.grid_h) + "x" + std::to_string(sf.grid_w));
    const int64_t r = s.h / sf.grid_h;
    require(r == 2 || r == 4, "blockwise warp: ratio must be 2 or 4, got " + std::to_string(r));
    const int64_t U = sf.positions(), L = s.c * r * r;
    TensorT<T> blocks = detail::blockify(feature_hi, r);
    TensorT<T> mixed = bmm(sf.weights, U, U, false, blocks, U, L, false, Shape4{s.b, 1, U, L});
    return detail::unblockify(mixed, s, r);
}

// ---------------------------------------------------------------------------
// flow arithmetic

// Offsets are in pixel units, so upscaling the grid rescales the vectors too.
template <typename T>
FlowFieldT<T> flow_upscale(const FlowFieldT<T>& flow, int64_t factor) {
    return FlowFieldT<T>(scale(upsample_bilinear(flow.field, factor), static_cast<T>(factor)));
}

// Composition consistent with sequential backward warping:
// composed(u) = residual(u) + prior(u + residual(u)), bilinear lookup of prior.
template <typename T>
FlowFieldT<T> flow_compose(const FlowFieldT<T>& prior, const FlowFieldT<T>& residual) {
    require(prior.shape() == residual.shape(),
            "flow_compose: resolutions disagree, " + prior.shape().str() + " vs " +
                residual.shape().str());
    return FlowFieldT<T>(add(residual.field, hard_warp(prior.field, residual)));
}

// Spatial-and-batch mean of each offset channel (diagnostic statistic).
template <typename T>
std::pair<double, double> flow_mean(const FlowFieldT<T>& flow) {
    const Shape4 s = flow.shape();
    const int64_t hw = s.hw();
    double mx = 0, my = 0;
    const T* p = flow.field.data().data();
    for (int64_t b = 0; b < s.b; b++)
        for (int64_t i = 0; i < hw; i++) {
            mx += p[b * 2 * hw + i];
            my += p[b * 2 * hw + hw + i];
        }
    const double n = static_cast<double>(s.b * hw);
    return {mx / n, my / n};
}

// Per-sample spatial mean (B,2,1,1), kept in the graph for condition updates.
template <typename T>
TensorT<T> flow_spatial_mean(const FlowFieldT<T>& flow) {
    return spatial_mean(flow.field);
}

// ---------------------------------------------------------------------------
// non-graph utilities

// Most-relevant-coordinate conversion of the attention matrix into a dense
// 2-channel flow on the coarse grid (visualization and the temperature-limit
// oracle).
template <typename T>
FlowFieldT<T> soft_flow_argmax(const SoftFlowMatrixT<T>& sf) {
    NoGradGuard ng;
    const int64_t B = sf.weights.shape().b, P = sf.positions();
    const int64_t H = sf.grid_h, W = sf.grid_w;
    auto flow = FlowFieldT<T>::zeros(B, H, W);
    const T* pw = sf.weights.data().data();
    T* pf = flow.field.data().data();
    for (int64_t b = 0; b < B; b++)
        for (int64_t u = 0; u < P; u++) {
            const T* row = pw + (b * P + u) * P;
            int64_t best = 0;
            for (int64_t v = 1; v < P; v++)
                if (row[v] > row[best]) best = v;
            pf[b * 2 * H * W + u] = static_cast<T>(best % W - u % W);
            pf[b * 2 * H * W + H * W + u] = static_cast<T>(best / W - u / W);
        }
    return flow;
}

// Attention-weighted expected displacement per coarse cell.
template <typename T>
FlowFieldT<T> soft_flow_expectation(const SoftFlowMatrixT<T>& sf) {
    NoGradGuard ng;
    const int64_t B = sf.weights.shape().b, P = sf.positions();
    const int64_t H = sf.grid_h, W = sf.grid_w;
    auto flow = FlowFieldT<T>::zeros(B, H, W);
    const T* pw = sf.weights.data().data();
    T* pf = flow.field.data().data();
    for (int64_t b = 0; b < B; b++)
        for (int64_t u = 0; u < P; u++) {
            const T* row = pw + (b * P + u) * P;
            T ex = 0, ey = 0;
            for (int64_t v = 0; v < P; v++) {
                ex += row[v] * static_cast<T>(v % W - u % W);
                ey += row[v] * static_cast<T>(v / W - u / W);
            }
            pf[b * 2 * H * W + u] = ex;
            pf[b * 2 * H * W + H * W + u] = ey;
        }
    return flow;
}

}  // namespace vsyn
