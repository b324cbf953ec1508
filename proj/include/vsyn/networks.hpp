#pragma once

// The toy-scale (3x64x64) networks: encoder with posterior and view head,
// generator with per-stage deformation injection and mask mixing, projection
// discriminator with a shared classifier head, the adversarial latent
// classifier, and a frozen random feature pyramid for the content loss.

#include "vsyn/deform.hpp"
#include "vsyn/nn.hpp"

namespace vsyn {

struct ModelConfig {
    int num_views = 9;
    int64_t image_size = 64;
    int64_t ch_full = 32, ch_half = 64, ch_quarter = 128;
    int64_t z_dim = 128;
    int64_t cond_dim = 64;
    int64_t resid_hidden = 16;
    double tau = 0.1;
    bool iterative = true;  // false: independent per-resolution flows (ablation)
    uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// encoder

template <typename T>
struct EncoderOutputT {
    TensorT<T> feat_full;     // (B, 32, 64, 64)
    TensorT<T> feat_half;     // (B, 64, 32, 32)
    TensorT<T> feat_quarter;  // (B, 128, 16, 16)
    TensorT<T> mu, log_var;   // (B, 128, 1, 1)
    TensorT<T> view_logits;   // (B, K, 1, 1)
};

template <typename T>
struct EncoderT {
    Conv2dT<T> c1, c2, c3, c4;
    LinearT<T> fc_mu, fc_logvar, fc_view;
    int64_t image_size = 64;

    EncoderT() = default;
    EncoderT(const ModelConfig& cfg, std::mt19937_64& rng) : image_size(cfg.image_size) {
        c1 = Conv2dT<T>("enc.c1", 3, cfg.ch_full, 3, 1, 1, rng);
        c2 = Conv2dT<T>("enc.c2", cfg.ch_full, cfg.ch_half, 3, 2, 1, rng);
        c3 = Conv2dT<T>("enc.c3", cfg.ch_half, cfg.ch_quarter, 3, 2, 1, rng);
        c4 = Conv2dT<T>("enc.c4", cfg.ch_quarter, cfg.ch_quarter, 3, 2, 1, rng);
        const int64_t flat = cfg.ch_quarter * (cfg.image_size / 8) * (cfg.image_size / 8);
        fc_mu = LinearT<T>("enc.mu", flat, cfg.z_dim, rng);
        fc_logvar = LinearT<T>("enc.logvar", flat, cfg.z_dim, rng);
        fc_view = LinearT<T>("enc.view", flat, cfg.num_views, rng);
    }

    // Shallow tapped features use positional normalization, deeper blocks
    // instance normalization.
    EncoderOutputT<T> forward(const TensorT<T>& x) {
        const Shape4 s = x.shape();
        require(s.c == 3 && s.h == image_size && s.w == image_size,
                "encoder: expected (B,3," + std::to_string(image_size) + "," +
                    std::to_string(image_size) + "), got " + s.str());
        EncoderOutputT<T> out;
        out.feat_full = leaky_relu(positional_norm(c1.forward(x)));
        out.feat_half = leaky_relu(positional_norm(c2.forward(out.feat_full)));
        out.feat_quarter = leaky_relu(positional_norm(c3.forward(out.feat_half)));
        TensorT<T> deep = leaky_relu(instance_norm(c4.forward(out.feat_quarter)));
        TensorT<T> flat = flatten(deep);
        out.mu = fc_mu.forward(flat);
        out.log_var = fc_logvar.forward(flat);
        out.view_logits = fc_view.forward(flat);
        return out;
    }

    void collect(ParamRefs<T>& out) {
        c1.collect(out);
        c2.collect(out);
        c3.collect(out);
        c4.collect(out);
        fc_mu.collect(out);
        fc_logvar.collect(out);
        fc_view.collect(out);
    }
};

// z = mu + exp(log_var / 2) * eps with the log-variance clamped to [-10, 10].
template <typename T>
TensorT<T> reparameterize(const TensorT<T>& mu, const TensorT<T>& log_var,
                          const TensorT<T>& eps) {
    TensorT<T> lv = clamp(log_var, T(-10), T(10));
    TensorT<T> std = exp_op(scale(lv, T(0.5)));
    return add(mu, mul(std, eps));
}

// ---------------------------------------------------------------------------
// generator

template <typename T>
struct GeneratorOutputT {
    TensorT<T> dec_quarter, dec_half, dec_full;  // decoder features per stage
    TensorT<T> stage_q, stage_h, stage_f;        // deformed encoder features
    TensorT<T> image_gen;                        // tanh output of the decoder
    TensorT<T> mask;                             // (B,1,H,W) in (0,1)
    TensorT<T> image_warp;                       // deformed source image
    TensorT<T> image_mixed;                      // mask-mixed final output
    TensorT<T> image_rough;                      // auxiliary rough synthesis
    DeformStateT<T> state;
    TensorT<T> code_base, code_q, code_h, code_f;
};

template <typename T>
struct GeneratorT {
    ModelConfig cfg;
    ConditionBranchT<T> cond;
    HcdmT<T> hcdm_half, hcdm_full;
    LinearT<T> target_embed;
    LinearT<T> seed_fc;
    Conv2dT<T> gamma_q, beta_q, conv_q, trans_q;
    Conv2dT<T> gamma_h, beta_h, conv_h, trans_h;
    Conv2dT<T> gamma_f, beta_f, conv_f;
    Conv2dT<T> to_rgb, mask_head, rough_head;

    GeneratorT() = default;
    GeneratorT(const ModelConfig& c, std::mt19937_64& rng) : cfg(c) {
        cond = ConditionBranchT<T>("gen.cond", c.num_views, static_cast<int>(c.cond_dim),
                                   c.ch_quarter, c.ch_half, c.ch_full, rng);
        hcdm_half = HcdmT<T>("gen.hcdm2", c.ch_half, 2 * c.ch_half, c.resid_hidden, rng);
        hcdm_full = HcdmT<T>("gen.hcdm1", c.ch_full, 2 * c.ch_full, c.resid_hidden, rng);
        target_embed = LinearT<T>("gen.embed", c.num_views, c.cond_dim, rng);
        const int64_t q = c.image_size / 4;
        seed_fc = LinearT<T>("gen.seed", c.z_dim + c.cond_dim, c.ch_quarter * q * q, rng);
        gamma_q = Conv2dT<T>("gen.gamma3", c.ch_quarter, c.ch_quarter, 1, 1, 0, rng);
        beta_q = Conv2dT<T>("gen.beta3", c.ch_quarter, c.ch_quarter, 1, 1, 0, rng);
        conv_q = Conv2dT<T>("gen.conv3", c.ch_quarter, c.ch_quarter, 3, 1, 1, rng);
        trans_q = Conv2dT<T>("gen.trans3", c.ch_quarter, c.ch_half, 1, 1, 0, rng);
        gamma_h = Conv2dT<T>("gen.gamma2", c.ch_half, c.ch_half, 1, 1, 0, rng);
        beta_h = Conv2dT<T>("gen.beta2", c.ch_half, c.ch_half, 1, 1, 0, rng);
        conv_h = Conv2dT<T>("gen.conv2", c.ch_half, c.ch_half, 3, 1, 1, rng);
        trans_h = Conv2dT<T>("gen.trans2", c.ch_half, c.ch_full, 1, 1, 0, rng);
        gamma_f = Conv2dT<T>("gen.gamma1", c.ch_full, c.ch_full, 1, 1, 0, rng);
        beta_f = Conv2dT<T>("gen.beta1", c.ch_full, c.ch_full, 1, 1, 0, rng);
        conv_f = Conv2dT<T>("gen.conv1", c.ch_full, c.ch_full, 3, 1, 1, rng);
        to_rgb = Conv2dT<T>("gen.rgb", c.ch_full, 3, 3, 1, 1, rng);
        mask_head = Conv2dT<T>("gen.mask", c.ch_full + 2, 1, 3, 1, 1, rng);
        rough_head = Conv2dT<T>("gen.rough", c.ch_quarter + c.ch_half + c.ch_full, 3, 1, 1, 0,
                                rng);
    }

    // Denormalization injection: the deformed encoder feature predicts a
    // per-pixel scale and shift for the instance-normalized decoder feature.
    TensorT<T> inject(const TensorT<T>& h, const TensorT<T>& warped, Conv2dT<T>& gamma_conv,
                      Conv2dT<T>& beta_conv) {
        TensorT<T> g = gamma_conv.forward(warped);
        TensorT<T> b = beta_conv.forward(warped);
        return add(mul(instance_norm(h), add_scalar(g, T(1))), b);
    }

    GeneratorOutputT<T> forward(const TensorT<T>& source_image, const EncoderOutputT<T>& enc,
                                const TensorT<T>& z, const TensorT<T>& onehot_a,
                                const TensorT<T>& onehot_b) {
        const T tau = static_cast<T>(cfg.tau);
        GeneratorOutputT<T> out;
        out.state.use_coarse_prior = cfg.iterative;

        // latent + target condition seed the coarse decoder feature
        TensorT<T> emb = leaky_relu(target_embed.forward(onehot_b));
        TensorT<T> seed = seed_fc.forward(concat_channels<T>({z, emb}));
        const int64_t q = cfg.image_size / 4;
        TensorT<T> h = reshape(seed, Shape4{z.shape().b, cfg.ch_quarter, q, q});
        out.dec_quarter = leaky_relu(instance_norm(h));

        out.code_base = cond.embed(onehot_a, onehot_b);
        out.code_q = cond.coarse_code(out.code_base);
        auto scdm = scdm_forward(enc.feat_quarter, out.dec_quarter, out.code_q, tau);
        out.stage_q = scdm.warped;
        out.state.sf = scdm.sf;
        out.state.kg_flow = scdm.kg_flow;

        h = leaky_relu(inject(out.dec_quarter, out.stage_q, gamma_q, beta_q));
        h = leaky_relu(conv_q.forward(h));
        h = upsample_nearest(trans_q.forward(h), 2);
        out.dec_half = leaky_relu(instance_norm(h));

        out.code_h = cond.update(out.code_base, flow_spatial_mean(out.state.kg_flow), 2);
        auto hc2 = hcdm_half.forward(enc.feat_half, out.dec_half, out.code_h,
                                     cfg.iterative ? &out.state.sf : nullptr, {});
        out.stage_h = hc2.warped;
        out.state.res_half = hc2.residual;

        h = leaky_relu(inject(out.dec_half, out.stage_h, gamma_h, beta_h));
        h = leaky_relu(conv_h.forward(h));
        h = upsample_nearest(trans_h.forward(h), 2);
        out.dec_full = leaky_relu(instance_norm(h));

        out.code_f = cond.update(out.code_base, flow_spatial_mean(*out.state.res_half), 1);
        std::vector<FlowFieldT<T>> priors;
        if (cfg.iterative) priors.push_back(flow_upscale(*out.state.res_half, 2));
        auto hc1 = hcdm_full.forward(enc.feat_full, out.dec_full, out.code_f,
                                     cfg.iterative ? &out.state.sf : nullptr, priors);
        out.stage_f = hc1.warped;
        out.state.res_full = hc1.residual;

        h = leaky_relu(inject(out.dec_full, out.stage_f, gamma_f, beta_f));
        TensorT<T> pen = leaky_relu(conv_f.forward(h));
        out.image_gen = tanh_op(to_rgb.forward(pen));

        FlowFieldT<T> composed = out.state.composed_full();
        out.mask = sigmoid(mask_head.forward(concat_channels<T>({pen, composed.field})));
        out.image_warp = image_warp_chain(source_image, out.state);
        // convex per-pixel mix of the pixel-warped source and the synthesis
        out.image_mixed =
            add(mul(out.mask, out.image_warp),
                mul(add_scalar(neg(out.mask), T(1)), out.image_gen));

        TensorT<T> rough_in = concat_channels<T>({upsample_nearest(out.dec_quarter, 4),
                                                  upsample_nearest(out.dec_half, 2),
                                                  out.dec_full});
        out.image_rough = tanh_op(rough_head.forward(rough_in));
        return out;
    }

    void collect(ParamRefs<T>& out) {
        cond.collect(out);
        hcdm_half.collect(out);
        hcdm_full.collect(out);
        target_embed.collect(out);
        seed_fc.collect(out);
        for (Conv2dT<T>* c : {&gamma_q, &beta_q, &conv_q, &trans_q, &gamma_h, &beta_h, &conv_h,
                              &trans_h, &gamma_f, &beta_f, &conv_f, &to_rgb, &mask_head,
                              &rough_head})
            c->collect(out);
    }
};

// ---------------------------------------------------------------------------
// discriminator with shared classifier

template <typename T>
struct DiscOutputT {
    TensorT<T> adv_score;   // (B,1,1,1)
    TensorT<T> cls_logits;  // (B,K,1,1)
};

template <typename T>
struct DiscriminatorT {
    Conv2dT<T> d1, d2, d3, d4;
    LinearT<T> adv_head;    // spectral-normalized
    LinearT<T> proj_embed;  // projection conditioning, spectral-normalized
    LinearT<T> cls_head;    // classifier share: trunk weights + this head
    int64_t flat_dim = 0;

    DiscriminatorT() = default;
    DiscriminatorT(const ModelConfig& cfg, std::mt19937_64& rng) {
        d1 = Conv2dT<T>("disc.c1", 3, cfg.ch_full, 4, 2, 1, rng, true);
        d2 = Conv2dT<T>("disc.c2", cfg.ch_full, cfg.ch_half, 4, 2, 1, rng, true);
        d3 = Conv2dT<T>("disc.c3", cfg.ch_half, cfg.ch_quarter, 4, 2, 1, rng, true);
        d4 = Conv2dT<T>("disc.c4", cfg.ch_quarter, cfg.ch_quarter, 4, 2, 1, rng, true);
        flat_dim = cfg.ch_quarter * (cfg.image_size / 16) * (cfg.image_size / 16);
        adv_head = LinearT<T>("disc.adv", flat_dim, 1, rng, true);
        proj_embed = LinearT<T>("disc.proj", cfg.num_views, flat_dim, rng, true, false);
        cls_head = LinearT<T>("disc.cls", flat_dim, cfg.num_views, rng);
    }

    DiscOutputT<T> forward(const TensorT<T>& x, const TensorT<T>& onehot_cond) {
        TensorT<T> h = leaky_relu(d1.forward(x));
        h = leaky_relu(d2.forward(h));
        h = leaky_relu(d3.forward(h));
        h = leaky_relu(d4.forward(h));
        TensorT<T> feat = flatten(h);
        DiscOutputT<T> out;
        // projection conditioning: score = w^T feat + <embed(c), feat>
        TensorT<T> e = linear(onehot_cond, proj_embed.use_sn
                                               ? spectral_normalize(proj_embed.weight)
                                               : proj_embed.weight.value);
        TensorT<T> proj = scale(channel_mean(mul(feat, e)), static_cast<T>(flat_dim));
        out.adv_score = add(adv_head.forward(feat), proj);
        out.cls_logits = cls_head.forward(feat);
        return out;
    }

    // One refinement of every spectral-norm state per training step.
    void power_iterate() {
        for (auto* p : sn_params()) sn_power_iterate(*p);
    }

    std::vector<ParameterT<T>*> sn_params() {
        return {&d1.weight, &d2.weight, &d3.weight, &d4.weight, &adv_head.weight,
                &proj_embed.weight};
    }

    void collect(ParamRefs<T>& out) {
        d1.collect(out);
        d2.collect(out);
        d3.collect(out);
        d4.collect(out);
        adv_head.collect(out);
        proj_embed.collect(out);
        cls_head.collect(out);
    }
};

// ---------------------------------------------------------------------------
// latent classifier

template <typename T>
struct DacT {
    LinearT<T> fc1, fc2;

    DacT() = default;
    DacT(const ModelConfig& cfg, std::mt19937_64& rng) {
        fc1 = LinearT<T>("dac.fc1", cfg.z_dim, 64, rng);
        fc2 = LinearT<T>("dac.fc2", 64, cfg.num_views, rng);
    }

    TensorT<T> forward(const TensorT<T>& z) { return fc2.forward(leaky_relu(fc1.forward(z))); }

    // Same map with the classifier weights treated as constants: gradient
    // reaches the latent but never the classifier.
    TensorT<T> forward_frozen(const TensorT<T>& z) {
        TensorT<T> h = leaky_relu(add(linear(z, detach(fc1.weight.value)),
                                      detach(fc1.bias.value)));
        return add(linear(h, detach(fc2.weight.value)), detach(fc2.bias.value));
    }

    void collect(ParamRefs<T>& out) {
        fc1.collect(out);
        fc2.collect(out);
    }
};

// ---------------------------------------------------------------------------
// frozen content pyramid

// Seeded random conv pyramid standing in for a pretrained feature extractor.
// Never updated; still differentiable w.r.t. its input.
template <typename T>
struct ContentNetT {
    Conv2dT<T> c1, c2, c3;

    ContentNetT() = default;
    explicit ContentNetT(std::mt19937_64& rng) {
        c1 = Conv2dT<T>("content.c1", 3, 16, 3, 2, 1, rng);
        c2 = Conv2dT<T>("content.c2", 16, 32, 3, 2, 1, rng);
        c3 = Conv2dT<T>("content.c3", 32, 64, 3, 2, 1, rng);
        for (Conv2dT<T>* c : {&c1, &c2, &c3}) {
            c->weight.trainable = false;
            c->bias.trainable = false;
            c->weight.value.node()->requires_grad = false;
            c->bias.value.node()->requires_grad = false;
        }
    }

    std::vector<TensorT<T>> forward(const TensorT<T>& x) {
        TensorT<T> h1 = leaky_relu(c1.forward(x));
        TensorT<T> h2 = leaky_relu(c2.forward(h1));
        TensorT<T> h3 = leaky_relu(c3.forward(h2));
        return {h1, h2, h3};
    }

    void collect(ParamRefs<T>& out) {
        c1.collect(out);
        c2.collect(out);
        c3.collect(out);
    }
};

// ---------------------------------------------------------------------------
// model bundle

template <typename T>
struct ModelT {
    ModelConfig cfg;
    EncoderT<T> encoder;
    GeneratorT<T> generator;
    DiscriminatorT<T> disc;
    DacT<T> dac;
    ContentNetT<T> content;

    ModelT() = default;
    explicit ModelT(const ModelConfig& c) : cfg(c) {
        auto rng_enc = make_rng(c.seed, 101);
        auto rng_gen = make_rng(c.seed, 102);
        auto rng_disc = make_rng(c.seed, 103);
        auto rng_dac = make_rng(c.seed, 104);
        auto rng_content = make_rng(c.seed, 105);
        encoder = EncoderT<T>(cfg, rng_enc);
        generator = GeneratorT<T>(cfg, rng_gen);
        disc = DiscriminatorT<T>(cfg, rng_disc);
        dac = DacT<T>(cfg, rng_dac);
        content = ContentNetT<T>(rng_content);
    }

    ParamRefs<T> eg_params() {
        ParamRefs<T> p;
        encoder.collect(p);
        generator.collect(p);
        return p;
    }
    ParamRefs<T> dc_params() {
        ParamRefs<T> p;
        disc.collect(p);
        return p;
    }
    ParamRefs<T> dac_params() {
        ParamRefs<T> p;
        dac.collect(p);
        return p;
    }
    ParamRefs<T> all_params() {
        ParamRefs<T> p;
        encoder.collect(p);
        generator.collect(p);
        disc.collect(p);
        dac.collect(p);
        content.collect(p);
        return p;
    }

    // Full translation pass: encode, sample, decode toward the target view.
    GeneratorOutputT<T> translate(const TensorT<T>& source_image, const EncoderOutputT<T>& enc,
                                  const TensorT<T>& z, const TensorT<T>& onehot_a,
                                  const TensorT<T>& onehot_b) {
        return generator.forward(source_image, enc, z, onehot_a, onehot_b);
    }
};

}  // namespace vsyn
