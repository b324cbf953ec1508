#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vsyn/deform.hpp"
#include "vsyn/gradcheck.hpp"
#include "vsyn/losses.hpp"

using namespace vsyn;

TEST_CASE("hinge adversarial losses") {
    // margins satisfied -> zero
    Tensor real = Tensor::from_data({2, 1, 1, 1}, {2.f, 3.f});
    Tensor fake = Tensor::from_data({2, 1, 1, 1}, {-2.f, -4.f});
    CHECK(hinge_d_loss(real, fake).item() == doctest::Approx(0.f));

    // both at zero: L_D = 2, L_EG = 1
    Tensor z = Tensor::zeros({3, 1, 1, 1});
    CHECK(hinge_d_loss(z, z).item() == doctest::Approx(2.f));
    CHECK(hinge_g_loss(z).item() == doctest::Approx(1.f));

    // confident fakes silence the generator hinge
    Tensor good = Tensor::from_data({2, 1, 1, 1}, {2.f, 5.f});
    CHECK(hinge_g_loss(good).item() == doctest::Approx(0.f));
}

TEST_CASE("cross entropy examples") {
    const int K = 9;
    Tensor uniform = Tensor::zeros({1, K, 1, 1});
    Tensor target = onehot_labels<float>({{4, K}});
    CHECK(cross_entropy(uniform, target).item() == doctest::Approx(std::log(9.0)).epsilon(1e-6));

    // overwhelming margin on the true class
    std::vector<float> big(K, 0.f);
    big[4] = 100.f;
    CHECK(cross_entropy(Tensor::from_data({1, K, 1, 1}, big), target).item() ==
          doctest::Approx(0.f).epsilon(1e-6));

    // brute-force oracle on random logits
    auto rng = make_rng(3, 0);
    Tensor logits = randn<float>({4, K, 1, 1}, rng, 2.f);
    auto labels = onehot_labels<float>({{0, K}, {3, K}, {8, K}, {5, K}});
    double expect = 0;
    for (int64_t b = 0; b < 4; b++) {
        double mx = -1e30, sum = 0;
        for (int k = 0; k < K; k++) mx = std::max(mx, (double)logits.data()[b * K + k]);
        for (int k = 0; k < K; k++) sum += std::exp(logits.data()[b * K + k] - mx);
        int lbl = b == 0 ? 0 : b == 1 ? 3 : b == 2 ? 8 : 5;
        expect -= logits.data()[b * K + lbl] - mx - std::log(sum);
    }
    expect /= 4;
    CHECK(cross_entropy(logits, labels).item() == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("pixel and content losses") {
    auto rng = make_rng(4, 0);
    Tensor x = randn<float>({2, 3, 4, 4}, rng);
    CHECK(pixel_loss(x, x).item() == 0.f);

    Tensor ones = Tensor::filled({1, 3, 4, 4}, 1.f);
    Tensor zeros = Tensor::zeros({1, 3, 4, 4});
    CHECK(pixel_loss(ones, zeros).item() == doctest::Approx(1.f));

    Tensor y = randn<float>({2, 3, 4, 4}, rng);
    double acc = 0;
    for (int64_t i = 0; i < x.numel(); i++) acc += std::abs(x.data()[i] - y.data()[i]);
    CHECK(pixel_loss(x, y).item() == doctest::Approx(acc / x.numel()).epsilon(1e-6));

    CHECK_THROWS_AS(pixel_loss(x, ones), std::runtime_error);

    // content loss is the sum of per-level mean errors, zero on equal input
    std::vector<Tensor> fa = {x, y, ones};
    CHECK(content_loss(fa, fa).item() == 0.f);
}

TEST_CASE("kl loss examples and nonnegativity") {
    Tensor z = Tensor::zeros({1, 1, 1, 1});
    CHECK(kl_loss(z, z).item() == doctest::Approx(0.f));

    Tensor mu1 = Tensor::from_data({1, 1, 1, 1}, {1.f});
    CHECK(kl_loss(mu1, z).item() == doctest::Approx(0.5f));

    for (uint64_t seed = 0; seed < 20; seed++) {
        auto rng = make_rng(seed, 10);
        Tensor mu = randn<float>({2, 8, 1, 1}, rng, 2.f);
        Tensor lv = randn<float>({2, 8, 1, 1}, rng, 2.f);
        CHECK(kl_loss(mu, lv).item() >= 0.f);
    }

    // zero only at (0, 0): probe a grid around the origin
    for (float m : {-0.5f, 0.f, 0.5f})
        for (float l : {-0.5f, 0.f, 0.5f}) {
            if (m == 0.f && l == 0.f) continue;
            Tensor mm = Tensor::from_data({1, 1, 1, 1}, {m});
            Tensor ll = Tensor::from_data({1, 1, 1, 1}, {l});
            CHECK(kl_loss(mm, ll).item() > 1e-4f);
        }
}

TEST_CASE("disentangling losses") {
    const int K = 9;
    // uniform dac output: the adversarial term reaches its minimum ln K
    Tensor uniform_logits = Tensor::zeros({2, K, 1, 1});
    CHECK(uniform_cross_entropy(uniform_logits).item() ==
          doctest::Approx(std::log(9.0)).epsilon(1e-6));

    // a perfect encoder view head drives its CE to zero
    std::vector<float> sharp(K, -50.f);
    sharp[2] = 50.f;
    Tensor enc_logits = Tensor::from_data({1, K, 1, 1}, sharp);
    CHECK(cross_entropy(enc_logits, onehot_labels<float>({{2, K}})).item() ==
          doctest::Approx(0.f).epsilon(1e-6));
}

TEST_CASE("gradient routing through detach") {
    // DAC CE on detached z must not reach the encoder-side input; the
    // adversarial uniform term with frozen DAC weights must not touch them.
    DTensor z = DTensor::from_data({1, 3, 1, 1}, {0.3, -0.2, 0.5}, true);
    auto w = make_param<double>("dac.w", {9, 3, 1, 1});
    auto rngw = make_rng(5, 0);
    init_trunc_normal(w, rngw, 0.5);

    // dac loss: CE(dac(detach(z)), label)
    Tensor dummy;
    DTensor dac_logits = linear(detach(z), w.value);
    DTensor dac_ce = cross_entropy(dac_logits, onehot_labels<double>({{1, 9}}));
    dac_ce.backward();
    CHECK(z.grad().empty());
    double wsum = 0;
    for (double g : w.value.grad()) wsum += std::abs(g);
    CHECK(wsum > 0);

    // encoder-side uniform CE: gradient reaches z but not the frozen weights
    w.value.zero_grad();
    DTensor wd = detach(w.value);
    DTensor enc_logits = linear(z, wd);
    DTensor enc_term = uniform_cross_entropy(enc_logits);
    enc_term.backward();
    double zsum = 0;
    for (double g : z.grad()) zsum += std::abs(g);
    CHECK(zsum > 0);
    CHECK(w.value.grad().empty());
}

TEST_CASE("rough loss composition") {
    auto rng = make_rng(6, 0);
    Tensor xb = rand_uniform<float>({1, 3, 4, 4}, rng, -1.f, 1.f);
    Tensor logits = randn<float>({1, 9, 1, 1}, rng);
    Tensor target = onehot_labels<float>({{4, 9}});

    // equals the sum of its two independently computed terms
    Tensor total = rough_loss(xb, xb, logits, target);
    Tensor ce_only = cross_entropy(logits, target);
    CHECK(total.item() == doctest::Approx(ce_only.item()).epsilon(1e-6));

    // sign-flipped +-1 images give an L1 term of exactly 2
    Tensor ones = Tensor::filled({1, 3, 4, 4}, 1.f);
    Tensor negs = Tensor::filled({1, 3, 4, 4}, -1.f);
    Tensor flipped = rough_loss(negs, ones, logits, target);
    CHECK(flipped.item() - ce_only.item() == doctest::Approx(2.f).epsilon(1e-5));

    Tensor r = rough_loss(xb, xb, logits, target);
    Tensor p = pixel_loss(xb, xb);
    CHECK(r.item() == doctest::Approx(p.item() + ce_only.item()).epsilon(1e-6));
}

TEST_CASE("total loss ledger") {
    std::map<std::string, double> parts = {
        {"adv_d", 1}, {"adv_g", 1},      {"cls_c", 1},     {"cls_eg", 1}, {"pixel", 1},
        {"content", 1}, {"kl", 1},       {"cls_c_enc", 1}, {"cls_z_enc", 1}, {"dac", 1},
        {"rough", 1},
    };
    LossWeights w;
    LossReport rep = total_losses(parts, w);
    CHECK(rep.at("total_eg") == doctest::Approx(24.1).epsilon(1e-9));
    CHECK(rep.at("total_d") == doctest::Approx(1.0));

    // all parts zero
    for (auto& [k, v] : parts) v = 0;
    LossReport zero = total_losses(parts, w);
    CHECK(zero.at("total_eg") == 0.0);
    CHECK(zero.at("total_d") == 0.0);

    // recomposition equals the stored total
    auto rng = make_rng(7, 0);
    std::uniform_real_distribution<double> d(0.0, 2.0);
    for (auto& [k, v] : parts) v = d(rng);
    LossReport r = total_losses(parts, w);
    double recomputed = r.at("adv_g") + r.at("cls_eg") + w.content * r.at("content") +
                        w.pixel * r.at("pixel") + w.kl * r.at("kl") + r.at("cls_c_enc") +
                        r.at("cls_z_enc") + w.rough * r.at("rough");
    CHECK(std::abs(recomputed - r.at("total_eg")) < 1e-6);

    // linearity in each weight: doubling alpha2 doubles the pixel share
    LossWeights w2 = w;
    w2.pixel *= 2;
    LossReport r2 = total_losses(parts, w2);
    CHECK(r2.at("total_eg") - r.at("total_eg") ==
          doctest::Approx(w.pixel * r.at("pixel")).epsilon(1e-9));

    parts.erase("rough");
    CHECK_THROWS_AS(total_losses(parts, w), std::runtime_error);
}

TEST_CASE("loss gradients") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 20);
        DTensor mu = randn<double>({2, 4, 1, 1}, rng, 0.7, true);
        DTensor lv = randn<double>({2, 4, 1, 1}, rng, 0.5, true);
        auto fkl = [](const std::vector<DTensor>& in) { return kl_loss(in[0], in[1]); };
        CHECK(grad_check(fkl, {mu, lv}, 1e-4).passed(1e-4));

        DTensor logits = randn<double>({2, 5, 1, 1}, rng, 1.0, true);
        auto target = onehot_labels<double>({{1, 5}, {4, 5}});
        auto fce = [&target](const std::vector<DTensor>& in) {
            return cross_entropy(in[0], target);
        };
        CHECK(grad_check(fce, {logits}, 1e-4).passed(1e-4));

        DTensor a = randn<double>({1, 3, 3, 3}, rng, 1.0, true);
        DTensor b = randn<double>({1, 3, 3, 3}, rng, 1.0, true);
        auto fl1 = [](const std::vector<DTensor>& in) { return pixel_loss(in[0], in[1]); };
        CHECK(grad_check(fl1, {a, b}, 1e-4).passed(1e-4));

        // hinge pair away from the kink
        DTensor dr = randn<double>({3, 1, 1, 1}, rng, 3.0, true);
        DTensor df = randn<double>({3, 1, 1, 1}, rng, 3.0, true);
        bool near_kink = false;
        for (double v : dr.data()) near_kink |= std::abs(v - 1.0) < 1e-3;
        for (double v : df.data()) near_kink |= std::abs(v + 1.0) < 1e-3 || std::abs(v - 1.0) < 1e-3;
        if (!near_kink) {
            auto fh = [](const std::vector<DTensor>& in) {
                return add(hinge_d_loss(in[0], in[1]), hinge_g_loss(in[1]));
            };
            CHECK(grad_check(fh, {dr, df}, 1e-4).passed(1e-4));
        }
    }
}
