#pragma once

// The reusable 64-bit gradient-check suite: every warping kernel against
// central differences at 1e-4 over ten seeds, the composite deformation
// stages and every loss at 1e-3, and the full generator objective on a
// two-sample micro-batch with sampled coordinates of every parameter tensor.

#include <functional>
#include <iostream>

#include "vsyn/deform.hpp"
#include "vsyn/gradcheck.hpp"
#include "vsyn/losses.hpp"
#include "vsyn/networks.hpp"

namespace vsyn {

struct SuiteCheck {
    std::string name;
    double max_rel_err = 0;
    double tol = 0;
    bool pass = false;
};

namespace gradsuite_detail {

inline DTensor rnd(Shape4 s, uint64_t seed, double stddev = 1.0) {
    auto rng = make_rng(seed, 777);
    return randn<double>(s, rng, stddev, true);
}

// offsets with fractional parts away from the bilinear kinks
inline DTensor kink_safe_flow(Shape4 img, uint64_t seed) {
    auto rng = make_rng(seed, 778);
    std::uniform_real_distribution<double> mag(0.15, 0.45);
    std::vector<double> v(static_cast<size_t>(img.b * 2 * img.h * img.w));
    for (auto& x : v) x = (rng() % 2 ? 1 : -1) * mag(rng);
    return DTensor::from_data({img.b, 2, img.h, img.w}, std::move(v), true);
}

inline void add_check(std::vector<SuiteCheck>& out, const std::string& name, double tol,
                      const std::function<DTensor(const std::vector<DTensor>&)>& f,
                      const std::vector<DTensor>& inputs, double eps = 1e-4,
                      size_t max_coords = 0, int seeds = 1, uint64_t seed0 = 0) {
    (void)seeds;
    (void)seed0;
    SuiteCheck c;
    c.name = name;
    c.tol = tol;
    auto rep = grad_check(f, inputs, eps, max_coords, 99);
    c.max_rel_err = rep.max_rel_err;
    c.pass = rep.passed(tol);
    out.push_back(c);
}

}  // namespace gradsuite_detail

inline std::vector<SuiteCheck> gradsuite_warp() {
    using namespace gradsuite_detail;
    std::vector<SuiteCheck> out;
    for (uint64_t seed = 0; seed < 10; seed++) {
        const std::string tag = "#s" + std::to_string(seed);
        {
            DTensor x = rnd({1, 2, 4, 4}, seed + 1);
            DTensor flow = kink_safe_flow({1, 2, 4, 4}, seed + 50);
            add_check(out, "hard_warp" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          return sum_all(hard_warp(in[0], FlowFieldT<double>(in[1])));
                      },
                      {x, flow});
        }
        {
            DTensor x = rnd({1, 3, 3, 3}, seed + 2);
            DTensor w = rnd({1, 6, 1, 1}, seed + 3, 0.3);
            add_check(out, "kg_conv" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          return sum_all(square(kg_conv(in[0], in[1]).field));
                      },
                      {x, w});
        }
        {
            DTensor e = rnd({1, 3, 2, 2}, seed + 4);
            DTensor g = rnd({1, 3, 2, 2}, seed + 5);
            add_check(out, "soft_flow+spatial_warp" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          auto sf = soft_flow(in[0], in[1], 0.5);
                          return mean_all(square(soft_spatial_warp(in[0], sf)));
                      },
                      {e, g}, 1e-5);
        }
        {
            DTensor f = rnd({1, 3, 2, 2}, seed + 6);
            DTensor g = rnd({1, 3, 2, 2}, seed + 7);
            add_check(out, "channel_soft_warp" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          return mean_all(square(channel_soft_warp(in[0], in[1], 0.5)));
                      },
                      {f, g}, 1e-5);
        }
        {
            DTensor hi = rnd({1, 2, 4, 4}, seed + 8);
            DTensor e = rnd({1, 3, 2, 2}, seed + 9);
            add_check(out, "blockwise_warp" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          auto sf = soft_flow(in[1], in[1], 0.5);
                          return mean_all(square(soft_flow_apply_blockwise(in[0], sf)));
                      },
                      {hi, e}, 1e-5);
        }
        {
            DTensor img = rnd({1, 2, 4, 4}, seed + 10);
            DTensor f1 = kink_safe_flow({1, 1, 4, 4}, seed + 60);
            DTensor f2 = kink_safe_flow({1, 1, 4, 4}, seed + 70);
            add_check(out, "flow_compose" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          auto comp = flow_compose(FlowFieldT<double>(in[1]),
                                                   FlowFieldT<double>(in[2]));
                          return sum_all(hard_warp(in[0], comp));
                      },
                      {img, f1, f2});
        }
        {
            DTensor f = rnd({1, 2, 2, 2}, seed + 11);
            add_check(out, "flow_upscale" + tag, 1e-4,
                      [](const std::vector<DTensor>& in) {
                          return mean_all(square(flow_upscale(FlowFieldT<double>(in[0]), 2).field));
                      },
                      {f});
        }
    }
    return out;
}

inline std::vector<SuiteCheck> gradsuite_deform() {
    using namespace gradsuite_detail;
    std::vector<SuiteCheck> out;
    for (uint64_t seed = 0; seed < 10; seed++) {
        const std::string tag = "#s" + std::to_string(seed);
        {
            DTensor fe = rnd({1, 3, 2, 2}, seed + 20);
            DTensor fg = rnd({1, 3, 2, 2}, seed + 21);
            DTensor code = rnd({1, 6, 1, 1}, seed + 22, 0.2);
            add_check(out, "scdm_forward" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) {
                          auto o = scdm_forward(in[0], in[1], in[2], 0.5);
                          return mean_all(square(o.warped));
                      },
                      {fe, fg, code}, 1e-5);
        }
        {
            auto rngh = make_rng(seed, 781);
            HcdmT<double> hcdm("gs.h", 2, 4, 6, rngh);
            init_trunc_normal(hcdm.head2.weight, rngh, 0.05);
            DTensor fe = rnd({1, 2, 4, 4}, seed + 23);
            DTensor fg = rnd({1, 2, 4, 4}, seed + 24);
            DTensor code = rnd({1, 4, 1, 1}, seed + 25, 0.3);
            DTensor src = rnd({1, 2, 2, 2}, seed + 26);
            add_check(out, "hcdm_forward" + tag, 1e-3,
                      [&hcdm](const std::vector<DTensor>& in) {
                          auto sf = soft_flow(in[3], in[3], 0.5);
                          auto o = hcdm.forward(in[0], in[1], in[2], &sf, {});
                          return mean_all(square(o.warped));
                      },
                      {fe, fg, code, src}, 1e-5);
        }
        {
            DTensor img = rnd({1, 2, 8, 8}, seed + 27);
            DTensor src = rnd({1, 2, 2, 2}, seed + 28);
            DTensor rh = kink_safe_flow({1, 1, 4, 4}, seed + 80);
            DTensor rf = kink_safe_flow({1, 1, 8, 8}, seed + 81);
            add_check(out, "image_warp_chain" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) {
                          DeformStateT<double> st;
                          st.sf = soft_flow(in[1], in[1], 0.5);
                          st.kg_flow = FlowFieldT<double>::zeros(1, 2, 2);
                          st.res_half = FlowFieldT<double>(in[2]);
                          st.res_full = FlowFieldT<double>(in[3]);
                          return mean_all(square(image_warp_chain(in[0], st)));
                      },
                      {img, src, rh, rf}, 1e-5);
        }
    }
    return out;
}

inline std::vector<SuiteCheck> gradsuite_loss() {
    using namespace gradsuite_detail;
    std::vector<SuiteCheck> out;
    for (uint64_t seed = 0; seed < 10; seed++) {
        const std::string tag = "#s" + std::to_string(seed);
        {
            DTensor mu = rnd({2, 4, 1, 1}, seed + 30, 0.7);
            DTensor lv = rnd({2, 4, 1, 1}, seed + 31, 0.5);
            add_check(out, "kl_loss" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) { return kl_loss(in[0], in[1]); },
                      {mu, lv});
        }
        {
            DTensor logits = rnd({2, 9, 1, 1}, seed + 32);
            auto target = onehot_labels<double>({{2, 9}, {7, 9}});
            add_check(out, "cross_entropy" + tag, 1e-3,
                      [target](const std::vector<DTensor>& in) {
                          return cross_entropy(in[0], target);
                      },
                      {logits});
            add_check(out, "uniform_cross_entropy" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) {
                          return uniform_cross_entropy(in[0]);
                      },
                      {logits});
        }
        {
            DTensor a = rnd({1, 3, 4, 4}, seed + 33);
            DTensor b = rnd({1, 3, 4, 4}, seed + 34);
            add_check(out, "pixel_loss" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) { return pixel_loss(in[0], in[1]); },
                      {a, b});
        }
        {
            // scores away from the hinge kinks at +-1
            auto rng = make_rng(seed, 782);
            std::uniform_real_distribution<double> d(0.05, 0.8);
            std::vector<double> rv, fv;
            for (int i = 0; i < 3; i++) rv.push_back((rng() % 2 ? 2.0 : 0.0) + d(rng) * 0.2);
            for (int i = 0; i < 3; i++) fv.push_back((rng() % 2 ? 1.5 : -1.8) + d(rng) * 0.2);
            DTensor dr = DTensor::from_data({3, 1, 1, 1}, rv, true);
            DTensor df = DTensor::from_data({3, 1, 1, 1}, fv, true);
            add_check(out, "hinge_losses" + tag, 1e-3,
                      [](const std::vector<DTensor>& in) {
                          return add(hinge_d_loss(in[0], in[1]), hinge_g_loss(in[1]));
                      },
                      {dr, df});
        }
    }
    return out;
}

// Full generator objective on a two-sample micro-batch, checked against
// finite differences at sampled coordinates of every trainable parameter.
inline std::vector<SuiteCheck> gradsuite_net(size_t coords_per_param = 2) {
    std::vector<SuiteCheck> out;
    ModelConfig cfg;
    cfg.seed = 12345;
    ModelT<double> model(cfg);
    // perturb the zero-init residual heads so their gradient paths are live
    auto rngp = make_rng(7, 783);
    init_trunc_normal(model.generator.hcdm_half.head2.weight, rngp, 0.02);
    init_trunc_normal(model.generator.hcdm_full.head2.weight, rngp, 0.02);

    auto rng = make_rng(99, 784);
    DTensor x_a = rand_uniform<double>({2, 3, 64, 64}, rng, -0.9, 0.9);
    DTensor x_b = rand_uniform<double>({2, 3, 64, 64}, rng, -0.9, 0.9);
    auto oh_a = onehot_labels<double>({{1, 9}, {6, 9}});
    auto oh_b = onehot_labels<double>({{5, 9}, {2, 9}});
    DTensor eps_b = randn<double>({2, 128, 1, 1}, rng);
    DTensor eps_aa = randn<double>({2, 128, 1, 1}, rng);
    LossWeights w;

    auto objective = [&]() {
        auto enc = model.encoder.forward(x_a);
        DTensor z = reparameterize(enc.mu, enc.log_var, eps_b);
        auto gen_b = model.generator.forward(x_a, enc, z, oh_a, oh_b);
        auto gen_a = model.generator.forward(x_a, enc, z, oh_a, oh_a);
        auto enc2 = model.encoder.forward(gen_b.image_mixed);
        DTensor z2 = reparameterize(enc2.mu, enc2.log_var, eps_aa);
        auto gen_aa = model.generator.forward(gen_b.image_mixed, enc2, z2, oh_b, oh_a);
        auto d_fake = model.disc.forward(gen_b.image_mixed, oh_b);
        DTensor adv_g = hinge_g_loss(d_fake.adv_score);
        DTensor cls_eg = cross_entropy(d_fake.cls_logits, oh_b);
        DTensor pixel = add(add(pixel_loss(gen_b.image_mixed, x_b),
                                pixel_loss(gen_a.image_mixed, x_a)),
                            pixel_loss(gen_aa.image_mixed, x_a));
        DTensor content = add(
            add(content_loss(model.content.forward(gen_b.image_mixed),
                             model.content.forward(x_b)),
                content_loss(model.content.forward(gen_a.image_mixed),
                             model.content.forward(x_a))),
            content_loss(model.content.forward(gen_aa.image_mixed),
                         model.content.forward(x_a)));
        DTensor kl = kl_loss(enc.mu, enc.log_var);
        DTensor cls_c_enc = cross_entropy(enc.view_logits, oh_a);
        DTensor cls_z_enc = uniform_cross_entropy(model.dac.forward_frozen(z));
        auto rough_cls = model.disc.forward(gen_b.image_rough, oh_b);
        DTensor rough = rough_loss(gen_b.image_rough, x_b, rough_cls.cls_logits, oh_b);
        DTensor total = add(adv_g, cls_eg);
        total = add(total, scale(content, w.content));
        total = add(total, scale(pixel, w.pixel));
        total = add(total, scale(kl, w.kl));
        total = add(total, add(cls_c_enc, cls_z_enc));
        total = add(total, scale(rough, w.rough));
        return total;
    };

    // analytic gradient once
    for (auto* p : model.all_params()) p->value.zero_grad();
    DTensor y = objective();
    y.backward();
    std::map<std::string, std::vector<double>> analytic;
    for (auto* p : model.eg_params())
        analytic[p->name] = p->value.grad().empty() ? std::vector<double>(p->value.numel(), 0.0)
                                                    : p->value.grad();

    const double eps = 1e-5;
    auto rng_pick = make_rng(5, 785);
    double worst = 0;
    size_t checked = 0;
    bool finite = true;
    for (auto* p : model.eg_params()) {
        std::uniform_int_distribution<int64_t> pick(0, p->value.numel() - 1);
        for (size_t k = 0; k < coords_per_param; k++) {
            const int64_t idx = pick(rng_pick);
            double& slot = p->value.data()[idx];
            const double orig = slot;
            double fp, fm;
            {
                NoGradGuard ng;
                slot = orig + eps;
                fp = objective().item();
                slot = orig - eps;
                fm = objective().item();
                slot = orig;
            }
            const double numeric = (fp - fm) / (2 * eps);
            const double a = analytic[p->name][idx];
            if (!std::isfinite(numeric) || !std::isfinite(a)) finite = false;
            worst = std::max(worst, rel_err(a, numeric));
            checked++;
        }
    }
    for (auto* p : model.all_params()) p->value.zero_grad();

    SuiteCheck c;
    c.name = "total_generator_loss(all parameters, " + std::to_string(checked) + " coords)";
    c.tol = 1e-3;
    c.max_rel_err = worst;
    c.pass = finite && worst < c.tol;
    out.push_back(c);
    return out;
}

inline std::vector<SuiteCheck> run_gradsuite(const std::string& scope) {
    std::vector<SuiteCheck> out;
    auto append = [&](std::vector<SuiteCheck> v) {
        out.insert(out.end(), v.begin(), v.end());
    };
    if (scope == "warp" || scope == "all") append(gradsuite_warp());
    if (scope == "deform" || scope == "all") append(gradsuite_deform());
    if (scope == "loss" || scope == "all") append(gradsuite_loss());
    if (scope == "net" || scope == "all") append(gradsuite_net());
    require(!out.empty(), "unknown gradcheck scope: " + scope);
    return out;
}

// Deliberately wrong backward; the oracle must flag it.
inline bool gradsuite_selftest() {
    auto corrupted_square = [](const DTensor& a) {
        auto out = detail::make_node<double>(a.shape(), {a.node()});
        for (int64_t i = 0; i < a.numel(); i++) out->value[i] = a.data()[i] * a.data()[i];
        auto na = a.node();
        out->backward_fn = [na](NodeT<double>& n) {
            for (size_t i = 0; i < n.grad.size(); i++)
                na->grad_buf()[i] += n.grad[i] * 2.1 * na->value[i];  // should be 2.0
        };
        return DTensor(out);
    };
    DTensor x = DTensor::from_data({1, 1, 1, 1}, {1.7}, true);
    auto rep = grad_check(
        [&](const std::vector<DTensor>& in) { return corrupted_square(in[0]); }, {x}, 1e-5);
    return !rep.passed(1e-4);
}

}  // namespace vsyn
