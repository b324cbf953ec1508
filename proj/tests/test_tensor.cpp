#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vsyn/gradcheck.hpp"
#include "vsyn/nn.hpp"
#include "vsyn/tensor.hpp"

using namespace vsyn;

namespace {

DTensor drandn(Shape4 s, uint64_t seed, double stddev = 1.0, bool rg = true) {
    auto rng = make_rng(seed, 7);
    return randn<double>(s, rng, stddev, rg);
}

}  // namespace

TEST_CASE("conv2d identity 1x1 kernel") {
    auto rng = make_rng(1, 0);
    Tensor x = randn<float>({2, 3, 5, 5}, rng);
    // identity over channels: w[o][i] = (o == i)
    std::vector<float> w(3 * 3, 0.f);
    for (int i = 0; i < 3; i++) w[i * 3 + i] = 1.f;
    Tensor weight = Tensor::from_data({3, 3, 1, 1}, w);
    Tensor y = conv2d(x, weight, 1, 0);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); i++) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d constant image all-ones 3x3 kernel sums 9c") {
    const float c = 2.5f;
    Tensor x = Tensor::filled({1, 1, 6, 6}, c);
    Tensor w = Tensor::filled({1, 1, 3, 3}, 1.f);
    Tensor y = conv2d(x, w, 1, 1);
    // interior pixel sees the full 3x3 support
    CHECK(y.at(0, 0, 3, 3) == doctest::Approx(9 * c));
    // corner pixel only 2x2 of it
    CHECK(y.at(0, 0, 0, 0) == doctest::Approx(4 * c));
}

TEST_CASE("conv2d shape mismatch rejected with both shapes named") {
    Tensor x = Tensor::filled({1, 3, 4, 4}, 1.f);
    Tensor w = Tensor::filled({2, 4, 3, 3}, 1.f);
    try {
        conv2d(x, w, 1, 1);
        FAIL("expected shape mismatch to throw");
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        CHECK(msg.find("(1,3,4,4)") != std::string::npos);
        CHECK(msg.find("(2,4,3,3)") != std::string::npos);
    }
}

TEST_CASE("conv2d gradient vs central differences") {
    for (uint64_t seed = 0; seed < 3; seed++) {
        DTensor x = drandn({1, 2, 4, 4}, seed * 11 + 1);
        DTensor w = drandn({3, 2, 3, 3}, seed * 11 + 2);
        auto f = [](const std::vector<DTensor>& in) {
            return sum_all(tanh_op(conv2d(in[0], in[1], 1, 1)));
        };
        auto rep = grad_check(f, {x, w}, 1e-4);
        CHECK(rep.passed(1e-4));
    }
}

TEST_CASE("linear identity and arithmetic") {
    Tensor x = Tensor::from_data({1, 3, 1, 1}, {1.f, 2.f, 3.f});
    std::vector<float> w(9, 0.f);
    for (int i = 0; i < 3; i++) w[i * 3 + i] = 1.f;
    Tensor y = linear(x, Tensor::from_data({3, 3, 1, 1}, w));
    for (int i = 0; i < 3; i++) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

    // weight [[2]], bias [1], input [3] -> [7]
    Tensor x2 = Tensor::from_data({1, 1, 1, 1}, {3.f});
    Tensor w2 = Tensor::from_data({1, 1, 1, 1}, {2.f});
    Tensor b2 = Tensor::from_data({1, 1, 1, 1}, {1.f});
    CHECK(add(linear(x2, w2), b2).item() == doctest::Approx(7.f));
}

TEST_CASE("linear gradient") {
    DTensor x = drandn({3, 5, 1, 1}, 21);
    DTensor w = drandn({4, 5, 1, 1}, 22);
    DTensor b = drandn({1, 4, 1, 1}, 23);
    auto f = [](const std::vector<DTensor>& in) {
        return mean_all(square(add(linear(in[0], in[1]), in[2])));
    };
    CHECK(grad_check(f, {x, w, b}, 1e-4).passed(1e-4));
}

TEST_CASE("instance_norm examples") {
    // constant channel -> zeros
    Tensor c = Tensor::filled({1, 1, 3, 3}, 4.f);
    Tensor cn = instance_norm(c);
    for (float v : cn.data()) CHECK(v == doctest::Approx(0.f));

    // channel [1, -1]: unit variance already, epsilon shrinks slightly
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {1.f, -1.f});
    Tensor y = instance_norm(x);
    const float expect = 1.f / std::sqrt(1.f + 1e-5f);
    CHECK(y.data()[0] == doctest::Approx(expect));
    CHECK(y.data()[1] == doctest::Approx(-expect));

    // output spatial mean per channel = 0
    auto rng = make_rng(3, 0);
    Tensor r = randn<float>({2, 4, 6, 6}, rng);
    Tensor n = instance_norm(r);
    for (int64_t bc = 0; bc < 8; bc++) {
        double mu = 0;
        for (int64_t i = 0; i < 36; i++) mu += n.data()[bc * 36 + i];
        CHECK(std::abs(mu / 36) < 1e-5);
    }
}

TEST_CASE("positional_norm examples") {
    // channels (2, 0) at one position -> (1, -1) up to epsilon
    Tensor x = Tensor::from_data({1, 2, 1, 1}, {2.f, 0.f});
    Tensor y = positional_norm(x);
    const float expect = 1.f / std::sqrt(1.f + 1e-5f);
    CHECK(y.data()[0] == doctest::Approx(expect));
    CHECK(y.data()[1] == doctest::Approx(-expect));

    // single channel -> zeros
    Tensor s = Tensor::from_data({1, 1, 2, 2}, {5.f, 1.f, 0.f, -3.f});
    Tensor sn = positional_norm(s);
    for (float v : sn.data()) CHECK(v == doctest::Approx(0.f));

    // per-position channel mean of output = 0
    auto rng = make_rng(4, 0);
    Tensor r = randn<float>({2, 5, 3, 3}, rng);
    Tensor n = positional_norm(r);
    for (int64_t b = 0; b < 2; b++)
        for (int64_t i = 0; i < 9; i++) {
            double mu = 0;
            for (int64_t c = 0; c < 5; c++) mu += n.data()[(b * 5 + c) * 9 + i];
            CHECK(std::abs(mu / 5) < 1e-5);
        }
}

TEST_CASE("norm gradients") {
    DTensor x = drandn({2, 3, 4, 4}, 31);
    auto f_in = [](const std::vector<DTensor>& in) {
        return mean_all(square(instance_norm(in[0])));
    };
    CHECK(grad_check(f_in, {x}, 1e-4).passed(1e-4));
    auto f_pn = [](const std::vector<DTensor>& in) {
        return mean_all(square(positional_norm(in[0])));
    };
    CHECK(grad_check(f_pn, {x}, 1e-4).passed(1e-4));
}

TEST_CASE("softmax_temp examples") {
    Tensor l = Tensor::from_data({1, 2, 1, 1}, {1.f, -1.f});
    Tensor y = softmax_rows(l, 1.f, 2);
    CHECK(y.data()[0] == doctest::Approx(0.8808).epsilon(1e-3));
    CHECK(y.data()[1] == doctest::Approx(0.1192).epsilon(1e-3));

    // tau -> 0 gives one-hot at the argmax
    Tensor l2 = Tensor::from_data({1, 3, 1, 1}, {0.3f, 0.9f, 0.1f});
    Tensor y2 = softmax_rows(l2, 1e-3f, 3);
    CHECK(std::abs(y2.data()[1] - 1.f) < 1e-6);

    // uniform logits -> uniform output; sums to 1
    Tensor l3 = Tensor::filled({1, 4, 1, 1}, 0.7f);
    Tensor y3 = softmax_rows(l3, 0.5f, 4);
    float sum = 0;
    for (float v : y3.data()) {
        CHECK(v == doctest::Approx(0.25f));
        sum += v;
    }
    CHECK(sum == doctest::Approx(1.f).epsilon(1e-6));

    CHECK_THROWS_AS(softmax_rows(l3, 0.f, 4), std::runtime_error);
}

TEST_CASE("softmax probability vector property over random seeds") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 40);
        Tensor l = randn<float>({2, 1, 4, 8}, rng, 3.f);
        Tensor y = softmax_rows(l, 0.37f, 8);
        for (int64_t r = 0; r < 8; r++) {
            float sum = 0;
            for (int64_t i = 0; i < 8; i++) {
                float v = y.data()[r * 8 + i];
                CHECK(v >= 0.f);
                sum += v;
            }
            CHECK(std::abs(sum - 1.f) < 1e-6);
        }
    }
}

TEST_CASE("softmax and log_softmax gradients") {
    DTensor l = drandn({2, 1, 3, 5}, 51);
    auto f = [](const std::vector<DTensor>& in) {
        return sum_all(square(softmax_rows(in[0], 0.7, 5)));
    };
    CHECK(grad_check(f, {l}, 1e-4).passed(1e-4));
    auto f2 = [](const std::vector<DTensor>& in) {
        return mean_all(square(log_softmax_rows(in[0], 5)));
    };
    CHECK(grad_check(f2, {l}, 1e-4).passed(1e-4));
}

TEST_CASE("upsample examples") {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
    Tensor yn = upsample_nearest(x, 2);
    REQUIRE(yn.shape() == Shape4{1, 1, 4, 4});
    CHECK(yn.at(0, 0, 0, 0) == 1.f);
    CHECK(yn.at(0, 0, 0, 1) == 1.f);
    CHECK(yn.at(0, 0, 1, 1) == 1.f);
    CHECK(yn.at(0, 0, 0, 2) == 2.f);
    CHECK(yn.at(0, 0, 3, 3) == 4.f);

    // constant image stays constant under both modes
    Tensor c = Tensor::filled({1, 2, 3, 3}, 0.4f);
    Tensor un = upsample_nearest(c, 2);
    Tensor ub = upsample_bilinear(c, 4);
    for (float v : un.data()) CHECK(v == doctest::Approx(0.4f));
    for (float v : ub.data()) CHECK(v == doctest::Approx(0.4f));

    CHECK_THROWS_AS(upsample_nearest(x, 3), std::runtime_error);

    // bilinear preserves the spatial mean
    auto rng = make_rng(5, 0);
    Tensor r = randn<float>({1, 3, 4, 4}, rng);
    Tensor up = upsample_bilinear(r, 2);
    double m0 = 0, m1 = 0;
    for (float v : r.data()) m0 += v;
    for (float v : up.data()) m1 += v;
    CHECK(std::abs(m0 / r.numel() - m1 / up.numel()) < 1e-6);
}

TEST_CASE("upsample gradients") {
    DTensor x = drandn({1, 2, 3, 3}, 61);
    auto fn = [](const std::vector<DTensor>& in) {
        return mean_all(square(upsample_nearest(in[0], 2)));
    };
    CHECK(grad_check(fn, {x}, 1e-4).passed(1e-4));
    auto fb = [](const std::vector<DTensor>& in) {
        return mean_all(square(upsample_bilinear(in[0], 2)));
    };
    CHECK(grad_check(fb, {x}, 1e-4).passed(1e-4));
}

TEST_CASE("broadcast, concat, reshape gradients") {
    DTensor a = drandn({2, 3, 2, 2}, 71);
    DTensor b = drandn({1, 3, 1, 1}, 72);
    DTensor c = drandn({2, 1, 2, 2}, 73);
    auto f = [](const std::vector<DTensor>& in) {
        auto s = mul(add(in[0], in[1]), in[2]);
        auto cat = concat_channels<double>({s, in[0]});
        return mean_all(square(flatten(cat)));
    };
    CHECK(grad_check(f, {a, b, c}, 1e-4).passed(1e-4));
}

TEST_CASE("adam single step hand-derived") {
    // w=0, g=1, defaults, t=1: m_hat=1, v_hat=1, w -> -lr/(1+eps)
    auto p = make_param<float>("w", {1, 1, 1, 1});
    p.value.data()[0] = 0.f;
    p.value.node()->grad_buf()[0] = 1.f;
    AdamConfig cfg;
    adam_step<float>({&p}, cfg, 1);
    CHECK(p.value.data()[0] == doctest::Approx(-2e-4).epsilon(1e-4));

    // zero gradient leaves parameters unchanged
    auto q = make_param<float>("q", {1, 2, 1, 1});
    q.value.data() = {1.f, -2.f};
    q.value.node()->grad_buf();
    adam_step<float>({&q}, cfg, 1);
    CHECK(q.value.data()[0] == 1.f);
    CHECK(q.value.data()[1] == -2.f);
}

TEST_CASE("adam determinism: identical runs give bit-identical parameters") {
    auto run = [] {
        auto rng = make_rng(99, 0);
        auto p = make_param<float>("w", {4, 4, 1, 1});
        init_trunc_normal(p, rng);
        AdamConfig cfg;
        for (int t = 1; t <= 5; t++) {
            Tensor x = randn<float>({2, 4, 1, 1}, rng);
            Tensor loss = mean_all(square(linear(x, p.value)));
            loss.backward();
            adam_step<float>({&p}, cfg, t);
            p.value.zero_grad();
        }
        return p.value.data();
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); i++) CHECK(std::memcmp(&a[i], &b[i], sizeof(float)) == 0);
}

TEST_CASE("spectral normalization") {
    // 1x1 weight [[3]] normalizes to [[1]]
    auto p = make_param<float>("w", {1, 1, 1, 1});
    p.value.data()[0] = 3.f;
    for (int i = 0; i < 5; i++) sn_power_iterate(p);
    Tensor wn = spectral_normalize(p);
    CHECK(wn.data()[0] == doctest::Approx(1.f).epsilon(1e-4));

    // diag(2, 1) -> diag(1, 0.5) after convergence
    auto d = make_param<float>("d", {2, 2, 1, 1});
    d.value.data() = {2.f, 0.f, 0.f, 1.f};
    for (int i = 0; i < 200; i++) sn_power_iterate(d);
    Tensor dn = spectral_normalize(d);
    CHECK(dn.data()[0] == doctest::Approx(1.f).epsilon(1e-3));
    CHECK(dn.data()[3] == doctest::Approx(0.5f).epsilon(1e-3));

    // random 8x8: top singular value of the output near 1 after 20 iterations
    auto r = make_param<float>("r", {8, 8, 1, 1});
    auto rng = make_rng(123, 0);
    for (auto& v : r.value.data()) v = static_cast<float>(randn<float>({1,1,1,1}, rng).data()[0]);
    for (int i = 0; i < 20; i++) sn_power_iterate(r);
    Tensor rn = spectral_normalize(r);
    CHECK(top_singular_value(rn) <= 1.0 + 1e-2);

    // scale equivariance: normalizing c*W and W agree after convergence
    auto w1 = make_param<float>("w1", {4, 4, 1, 1});
    auto rng2 = make_rng(321, 0);
    init_trunc_normal(w1, rng2, 1.0);
    auto w2 = make_param<float>("w2", w1.value.shape());
    w2.value.data() = w1.value.data();
    for (auto& v : w2.value.data()) v *= 3.7f;
    for (int i = 0; i < 100; i++) {
        sn_power_iterate(w1);
        sn_power_iterate(w2);
    }
    Tensor n1 = spectral_normalize(w1);
    Tensor n2 = spectral_normalize(w2);
    for (int64_t i = 0; i < n1.numel(); i++)
        CHECK(n1.data()[i] == doctest::Approx(n2.data()[i]).epsilon(1e-3));
}

TEST_CASE("spectral normalize gradient") {
    auto p = make_param<double>("w", {3, 4, 1, 1});
    auto rng = make_rng(77, 0);
    init_trunc_normal(p, rng, 0.5);
    for (int i = 0; i < 50; i++) sn_power_iterate(p);
    DTensor x = drandn({2, 4, 1, 1}, 81);
    auto f = [&p](const std::vector<DTensor>& in) {
        // rebuild the normalized view from the perturbed raw weight each call
        auto q = p;
        q.value = in[0];
        q.value.node()->requires_grad = in[0].requires_grad();
        return mean_all(square(linear(in[1], spectral_normalize(q))));
    };
    DTensor w = DTensor::from_data(p.value.shape(), p.value.data(), true);
    CHECK(grad_check(f, {w, x}, 1e-5).passed(1e-4));
}

TEST_CASE("grad_check trivial oracle: f(x)=x^2 at x=3") {
    DTensor x = DTensor::from_data({1, 1, 1, 1}, {3.0}, true);
    auto f = [](const std::vector<DTensor>& in) { return square(in[0]); };
    DTensor y = f({x});
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-12));
    auto rep = grad_check(f, {x}, 1e-4);
    CHECK(rep.max_rel_err < 1e-8);
}

TEST_CASE("autodiff correctness across ops and seeds") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        DTensor x = drandn({1, 2, 3, 3}, 1000 + seed, 0.8);
        auto f = [](const std::vector<DTensor>& in) {
            auto h = leaky_relu(in[0], 0.2);
            h = add(mul(h, sigmoid(h)), tanh_op(h));
            h = instance_norm(h);
            return mean_all(square(h));
        };
        auto rep = grad_check(f, {x}, 1e-4);
        CHECK(rep.passed(1e-4));
    }
}

TEST_CASE("detach stops gradient") {
    DTensor x = DTensor::from_data({1, 1, 1, 1}, {2.0}, true);
    auto y = mul(detach(square(x)), x);  // d/dx should be x^2 = 4 only
    y.backward();
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}
