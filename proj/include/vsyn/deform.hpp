#pragma once

// The two conditional deformation modules and the iterative view-difference
// condition branch. The coarse stage aligns the lowest-resolution encoder
// feature by a condition-kernel hard pre-warp followed by spatial and channel
// attention; the two finer stages reuse the coarse attention blockwise, apply
// the accumulated hard flows, and estimate a residual flow on top.

#include <optional>
#include <vector>

#include "vsyn/nn.hpp"
#include "vsyn/warp.hpp"

namespace vsyn {

// Discrete view with one-hot encoding; interpolated targets are convex
// combinations of two adjacent one-hots.
struct ViewLabel {
    int index = 0;
    int num_views = 9;
};

template <typename T>
TensorT<T> onehot_labels(const std::vector<ViewLabel>& labels) {
    require(!labels.empty(), "onehot_labels: empty batch");
    const int K = labels[0].num_views;
    std::vector<T> v(labels.size() * K, T(0));
    for (size_t i = 0; i < labels.size(); i++) {
        require(labels[i].num_views == K, "onehot_labels: mixed view counts in batch");
        require(labels[i].index >= 0 && labels[i].index < K,
                "view index " + std::to_string(labels[i].index) + " outside [0, " +
                    std::to_string(K) + ")");
        v[i * K + labels[i].index] = T(1);
    }
    return TensorT<T>::from_data({static_cast<int64_t>(labels.size()), K, 1, 1}, std::move(v));
}

// Broadcasts a (B,L,1,1) vector over a spatial extent.
template <typename T>
TensorT<T> broadcast_spatial(const TensorT<T>& v, int64_t h, int64_t w) {
    return add(v, TensorT<T>::zeros({1, 1, h, w}));
}

// ---------------------------------------------------------------------------
// condition branch

// Per-stage condition vectors derived from the view-label difference. The
// base embedding feeds a dedicated head per stage; the mid and fine heads
// additionally see the mean offsets of the previous stage's flow.
template <typename T>
struct ConditionBranchT {
    int num_views = 9;
    LinearT<T> mlp1, mlp2;
    LinearT<T> head_coarse;  // w_diff -> coarse kernel vector (2 * C_coarse)
    LinearT<T> head_mid;     // [w_diff, mu] -> 2 * C_mid
    LinearT<T> head_fine;    // [w_diff, mu] -> 2 * C_fine

    ConditionBranchT() = default;
    ConditionBranchT(const std::string& name, int K, int embed_dim, int64_t c_coarse,
                     int64_t c_mid, int64_t c_fine, std::mt19937_64& rng)
        : num_views(K),
          mlp1(name + ".mlp1", K, embed_dim, rng),
          mlp2(name + ".mlp2", embed_dim, embed_dim, rng),
          head_coarse(name + ".head3", embed_dim, 2 * c_coarse, rng),
          head_mid(name + ".head2", embed_dim + 2, 2 * c_mid, rng),
          head_fine(name + ".head1", embed_dim + 2, 2 * c_fine, rng) {}

    // c_diff = onehot(b) - onehot(a), then the two-layer MLP.
    TensorT<T> embed(const TensorT<T>& onehot_a, const TensorT<T>& onehot_b) {
        require(onehot_a.shape() == onehot_b.shape() && onehot_a.shape().c == num_views,
                "condition embed: label shapes disagree with K=" + std::to_string(num_views));
        TensorT<T> diff = sub(onehot_b, onehot_a);
        return leaky_relu(mlp2.forward(leaky_relu(mlp1.forward(diff))));
    }

    TensorT<T> coarse_code(const TensorT<T>& w_diff) { return head_coarse.forward(w_diff); }

    // stage 2 = mid resolution, stage 1 = full resolution.
    TensorT<T> update(const TensorT<T>& w_diff, const TensorT<T>& flow_mu, int stage) {
        require(stage == 1 || stage == 2, "condition update: stage must be 1 or 2, got " +
                                              std::to_string(stage));
        TensorT<T> mu = reshape(flow_mu, Shape4{flow_mu.shape().b, 2, 1, 1});
        TensorT<T> joint = concat_channels<T>({w_diff, mu});
        return stage == 2 ? head_mid.forward(joint) : head_fine.forward(joint);
    }

    void collect(ParamRefs<T>& out) {
        mlp1.collect(out);
        mlp2.collect(out);
        head_coarse.collect(out);
        head_mid.collect(out);
        head_fine.collect(out);
    }
};

// ---------------------------------------------------------------------------
// deformation stages

template <typename T>
struct ScdmOutputT {
    TensorT<T> warped;  // feature aligned to the target view
    SoftFlowMatrixT<T> sf;
    FlowFieldT<T> kg_flow;
};

// Coarse stage: condition-kernel pre-warp, spatial soft warp, channel soft warp.
// Parameter-free; all learning happens in the features and the condition branch.
template <typename T>
ScdmOutputT<T> scdm_forward(const TensorT<T>& enc_feat, const TensorT<T>& dec_feat,
                            const TensorT<T>& coarse_code, T tau) {
    require(enc_feat.shape() == dec_feat.shape(),
            "scdm: feature shapes disagree, " + enc_feat.shape().str() + " vs " +
                dec_feat.shape().str());
    ScdmOutputT<T> out;
    out.kg_flow = kg_conv(enc_feat, coarse_code);
    TensorT<T> pre_warped = hard_warp(enc_feat, out.kg_flow);
    out.sf = soft_flow(pre_warped, dec_feat, tau);
    TensorT<T> spatially = soft_spatial_warp(pre_warped, out.sf);
    out.warped = channel_soft_warp(spatially, dec_feat, tau);
    return out;
}

template <typename T>
struct HcdmOutputT {
    TensorT<T> warped;
    FlowFieldT<T> residual;
    TensorT<T> coarse_deformed;  // before the residual refinement
};

// Fine stage: blockwise coarse deformation plus accumulated hard flows, then a
// residual flow head over the concatenation of the roughly aligned feature,
// the decoder feature, and the broadcast stage condition.
template <typename T>
struct HcdmT {
    Conv2dT<T> head1;
    Conv2dT<T> head2;

    HcdmT() = default;
    HcdmT(const std::string& name, int64_t feat_ch, int64_t cond_len, int64_t hidden,
          std::mt19937_64& rng) {
        head1 = Conv2dT<T>(name + ".res1", 2 * feat_ch + cond_len, hidden, 3, 1, 1, rng);
        head2 = Conv2dT<T>(name + ".res2", hidden, 2, 3, 1, 1, rng);
        // zero-initialized final conv: the stage starts as the identity refinement
        std::fill(head2.weight.value.data().begin(), head2.weight.value.data().end(), T(0));
    }

    HcdmOutputT<T> forward(const TensorT<T>& enc_feat, const TensorT<T>& dec_feat,
                           const TensorT<T>& stage_code, const SoftFlowMatrixT<T>* sf,
                           const std::vector<FlowFieldT<T>>& prior_flows) {
        require(enc_feat.shape() == dec_feat.shape(),
                "hcdm: feature shapes disagree, " + enc_feat.shape().str() + " vs " +
                    dec_feat.shape().str());
        const Shape4 s = enc_feat.shape();
        TensorT<T> coarse = enc_feat;
        if (sf) coarse = soft_flow_apply_blockwise(coarse, *sf);
        for (const auto& flow : prior_flows) {
            require(flow.shape().h == s.h && flow.shape().w == s.w,
                    "hcdm: prior flow resolution " + flow.shape().str() +
                        " does not match stage " + s.str());
            coarse = hard_warp(coarse, flow);
        }
        TensorT<T> cond_map = broadcast_spatial(stage_code, s.h, s.w);
        TensorT<T> head_in = concat_channels<T>({coarse, dec_feat, cond_map});
        TensorT<T> h = leaky_relu(head1.forward(head_in));
        HcdmOutputT<T> out;
        out.residual = FlowFieldT<T>(head2.forward(h));
        out.warped = hard_warp(coarse, out.residual);
        out.coarse_deformed = coarse;
        return out;
    }

    void collect(ParamRefs<T>& out) {
        head1.collect(out);
        head2.collect(out);
    }
};

// ---------------------------------------------------------------------------
// accumulated deformation state

// Everything needed to replay the full deformation on the raw image: the
// coarse attention, the condition-kernel flow (coarse diagnostics only), and
// the residual hard flows of the two fine stages.
template <typename T>
struct DeformStateT {
    SoftFlowMatrixT<T> sf;
    FlowFieldT<T> kg_flow;                     // quarter resolution
    std::optional<FlowFieldT<T>> res_half;     // half resolution
    std::optional<FlowFieldT<T>> res_full;     // full resolution
    bool use_coarse_prior = true;              // false in the independent-flows ablation

    bool complete() const { return res_half.has_value() && res_full.has_value(); }

    // Hard flows accumulated so far, upscaled to the given resolution.
    std::vector<FlowFieldT<T>> hard_flows_at(int64_t h) const {
        std::vector<FlowFieldT<T>> flows;
        if (res_half) {
            const int64_t hh = res_half->shape().h;
            if (hh == h)
                flows.push_back(*res_half);
            else
                flows.push_back(flow_upscale(*res_half, h / hh));
        }
        if (res_full && res_full->shape().h == h) flows.push_back(*res_full);
        return flows;
    }

    // Single full-resolution flow equivalent to the accumulated hard flows.
    // In the independent-flows ablation the fine flow already stands alone.
    FlowFieldT<T> composed_full() const {
        require(complete(), "deform state is incomplete: residual flows missing");
        if (!use_coarse_prior) return *res_full;
        return flow_compose(flow_upscale(*res_half, 2), *res_full);
    }
};

// Applies the whole deformation chain to the raw image: blockwise coarse
// attention (ratio 4), then the upscaled half-resolution residual, then the
// full-resolution residual. The independent-flows ablation applies only the
// full-resolution flow it learned.
template <typename T>
TensorT<T> image_warp_chain(const TensorT<T>& image, const DeformStateT<T>& state) {
    require(state.complete(), "image_warp_chain: incomplete flow state");
    if (!state.use_coarse_prior) return hard_warp(image, *state.res_full);
    TensorT<T> y = soft_flow_apply_blockwise(image, state.sf);
    y = hard_warp(y, flow_upscale(*state.res_half, 2));
    return hard_warp(y, *state.res_full);
}

}  // namespace vsyn
