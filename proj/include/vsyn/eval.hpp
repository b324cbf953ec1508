#pragma once

// Test-split evaluation: L1 / SSIM of every ordered (a -> b) translation
// against the rendered target, the identity baseline (source copied
// unchanged), quarter-resolution flow endpoint error against the analytic
// flow, and the sign agreement of the mean horizontal displacement.
// Evaluation decodes with the posterior mean, so reports are deterministic.

#include <sstream>

#include "vsyn/metrics.hpp"
#include "vsyn/networks.hpp"
#include "vsyn/sprites.hpp"
#include "vsyn/train.hpp"

namespace vsyn {

struct EvalReport {
    double l1 = 0, ssim = 0;
    double identity_l1 = 0, identity_ssim = 0;
    double flow_epe = 0;
    double flow_sign_agreement = 0;
    int pairs = 0, sign_pairs = 0;

    std::string serialize() const {
        std::ostringstream os;
        os.precision(17);
        os << "pairs=" << pairs << "\n";
        os << "l1=" << l1 << "\n";
        os << "ssim=" << ssim << "\n";
        os << "identity_l1=" << identity_l1 << "\n";
        os << "identity_ssim=" << identity_ssim << "\n";
        os << "flow_epe=" << flow_epe << "\n";
        os << "sign_pairs=" << sign_pairs << "\n";
        os << "flow_sign_agreement=" << flow_sign_agreement << "\n";
        return os.str();
    }
};

// The learned quarter-resolution flow of one sample: attention-expected
// displacement plus the condition-kernel flow.
inline FlowField learned_quarter_flow(const DeformStateT<float>& state) {
    FlowField expect = soft_flow_expectation(state.sf);
    return FlowField(add(expect.field, state.kg_flow.field));
}

// Mean horizontal displacement of the analytic flow over valid pixels.
inline double gt_mean_dx(const GtFlow& flow) {
    double acc = 0;
    int n = 0;
    for (size_t i = 0; i < flow.valid.size(); i++)
        if (flow.valid[i]) {
            acc += flow.dx[i];
            n++;
        }
    return n ? acc / n : 0.0;
}

inline EvalReport evaluate(ModelT<float>& model, const DatasetManifest& manifest,
                           int max_sprites = -1) {
    NoGradGuard ng;
    EvalReport rep;
    const int64_t S = manifest.image_size;
    const int K = manifest.num_views;

    std::vector<int> test_sprites;
    for (size_t i = 0; i < manifest.is_train.size(); i++)
        if (!manifest.is_train[i]) test_sprites.push_back(static_cast<int>(i));
    if (max_sprites > 0 && static_cast<int>(test_sprites.size()) > max_sprites)
        test_sprites.resize(max_sprites);
    require(!test_sprites.empty(), "dataset has no test sprites");

    ImageCache cache(manifest);
    double sum_l1 = 0, sum_ssim = 0, sum_id_l1 = 0, sum_id_ssim = 0, sum_epe = 0;
    int sign_hits = 0, sign_total = 0, epe_cells_total = 0;

    for (int sprite : test_sprites) {
        SpriteSpec spec = SpriteSpec::from_seed(manifest.sprite_seeds[sprite]);
        for (int a = 0; a < K; a++) {
            const auto& img_a = cache.get(sprite, a);
            Tensor x_a = Tensor::from_data({1, 3, S, S}, img_a);
            auto enc = model.encoder.forward(x_a);
            Tensor oh_a = onehot_labels<float>({{a, K}});
            for (int b = 0; b < K; b++) {
                const auto& img_b = cache.get(sprite, b);
                Tensor oh_b = onehot_labels<float>({{b, K}});
                auto gen = model.generator.forward(x_a, enc, enc.mu, oh_a, oh_b);
                const auto& out = gen.image_mixed.data();

                sum_l1 += image_l1(out, img_b);
                sum_ssim += image_ssim(out, img_b, static_cast<int>(S), static_cast<int>(S));
                sum_id_l1 += image_l1(img_a, img_b);
                sum_id_ssim += image_ssim(img_a, img_b, static_cast<int>(S), static_cast<int>(S));
                rep.pairs++;

                GtFlow gt = gt_flow(spec, a, b, static_cast<int>(S));
                FlowField learned = learned_quarter_flow(gen.state);
                const int64_t q = S / 4;
                // average-pool the analytic flow onto the coarse grid
                for (int64_t cy = 0; cy < q; cy++)
                    for (int64_t cx = 0; cx < q; cx++) {
                        double gx = 0, gy = 0;
                        int n = 0;
                        for (int64_t sy = 0; sy < 4; sy++)
                            for (int64_t ox = 0; ox < 4; ox++) {
                                const int64_t idx = (cy * 4 + sy) * S + cx * 4 + ox;
                                if (!gt.valid[idx]) continue;
                                gx += gt.dx[idx];
                                gy += gt.dy[idx];
                                n++;
                            }
                        if (n < 16) continue;  // only fully valid cells
                        gx /= 4.0 * n;         // pixel units rescale with resolution
                        gy /= 4.0 * n;
                        const double lx = learned.field.at(0, 0, cy, cx);
                        const double ly = learned.field.at(0, 1, cy, cx);
                        sum_epe += std::sqrt((lx - gx) * (lx - gx) + (ly - gy) * (ly - gy));
                        epe_cells_total++;
                    }

                if (a != b) {
                    const double gmean = gt_mean_dx(gt);
                    auto [lmx, lmy] = flow_mean(learned);
                    if (std::abs(gmean) > 1e-6) {
                        sign_total++;
                        if ((gmean > 0) == (lmx > 0)) sign_hits++;
                    }
                }
            }
        }
    }

    rep.l1 = sum_l1 / rep.pairs;
    rep.ssim = sum_ssim / rep.pairs;
    rep.identity_l1 = sum_id_l1 / rep.pairs;
    rep.identity_ssim = sum_id_ssim / rep.pairs;
    rep.flow_epe = epe_cells_total ? sum_epe / epe_cells_total : 0.0;
    rep.sign_pairs = sign_total;
    rep.flow_sign_agreement = sign_total ? static_cast<double>(sign_hits) / sign_total : 0.0;
    return rep;
}

}  // namespace vsyn
