#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vsyn/gradcheck.hpp"
#include "vsyn/warp.hpp"

using namespace vsyn;

namespace {

// Flows with fractional parts away from bilinear kinks, for finite differences.
template <typename T>
FlowFieldT<T> smooth_flow(Shape4 img, uint64_t seed, T magnitude = T(0.4)) {
    auto rng = make_rng(seed, 13);
    std::uniform_real_distribution<double> d(0.15, 0.45);
    std::vector<T> v(static_cast<size_t>(img.b * 2 * img.h * img.w));
    for (auto& x : v) {
        double m = d(rng);
        x = static_cast<T>(rng() % 2 ? m : -m) * magnitude / T(0.4);
    }
    return FlowFieldT<T>(TensorT<T>::from_data({img.b, 2, img.h, img.w}, std::move(v), true));
}

// Separable 5-tap binomial blur over each plane of a (planes, h, w) buffer.
void blur_planes(std::vector<float>& v, int64_t planes, int64_t h, int64_t w, int passes) {
    const float k[5] = {1, 4, 6, 4, 1};
    std::vector<float> tmp(v.size());
    auto at = [&](std::vector<float>& buf, int64_t p, int64_t y, int64_t x_) -> float& {
        return buf[(p * h + y) * w + x_];
    };
    for (int pass = 0; pass < passes; pass++) {
        for (int64_t p = 0; p < planes; p++)
            for (int64_t y = 0; y < h; y++)
                for (int64_t x = 0; x < w; x++) {
                    float acc = 0, wsum = 0;
                    for (int t = -2; t <= 2; t++) {
                        int64_t xx = std::clamp<int64_t>(x + t, 0, w - 1);
                        acc += k[t + 2] * at(v, p, y, xx);
                        wsum += k[t + 2];
                    }
                    at(tmp, p, y, x) = acc / wsum;
                }
        for (int64_t p = 0; p < planes; p++)
            for (int64_t y = 0; y < h; y++)
                for (int64_t x = 0; x < w; x++) {
                    float acc = 0, wsum = 0;
                    for (int t = -2; t <= 2; t++) {
                        int64_t yy = std::clamp<int64_t>(y + t, 0, h - 1);
                        acc += k[t + 2] * at(tmp, p, yy, x);
                        wsum += k[t + 2];
                    }
                    at(v, p, y, x) = acc / wsum;
                }
    }
}

// Gaussian-filtered random flow with |f| <= bound.
FlowField gaussian_flow(int64_t b, int64_t h, int64_t w, uint64_t seed, float bound = 2.f) {
    auto rng = make_rng(seed, 17);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<float> out(static_cast<size_t>(b * 2 * h * w));
    for (auto& x : out) x = static_cast<float>(d(rng));
    blur_planes(out, b * 2, h, w, 2);
    float mx = 0;
    for (float v : out) mx = std::max(mx, std::abs(v));
    for (auto& v : out) v = v / mx * bound;
    return FlowField(Tensor::from_data({b, 2, h, w}, std::move(out)));
}

// Gaussian-filtered random image normalized into [-1, 1].
Tensor smooth_image(int64_t b, int64_t c, int64_t h, int64_t w, uint64_t seed, int passes = 5) {
    auto rng = make_rng(seed, 19);
    std::normal_distribution<double> d(0.0, 1.0);
    std::vector<float> out(static_cast<size_t>(b * c * h * w));
    for (auto& x : out) x = static_cast<float>(d(rng));
    blur_planes(out, b * c, h, w, passes);
    float mx = 0;
    for (float v : out) mx = std::max(mx, std::abs(v));
    for (auto& v : out) v /= mx;
    return Tensor::from_data({b, c, h, w}, std::move(out));
}

SoftFlowMatrix identity_soft_flow(int64_t b, int64_t h, int64_t w) {
    const int64_t P = h * w;
    std::vector<float> m(static_cast<size_t>(b * P * P), 0.f);
    for (int64_t i = 0; i < b; i++)
        for (int64_t u = 0; u < P; u++) m[(i * P + u) * P + u] = 1.f;
    SoftFlowMatrix sf;
    sf.weights = Tensor::from_data({b, 1, P, P}, std::move(m));
    sf.tau = 0.1f;
    sf.grid_h = h;
    sf.grid_w = w;
    return sf;
}

}  // namespace

TEST_CASE("hard_warp zero flow is the exact identity") {
    auto rng = make_rng(1, 0);
    Tensor x = randn<float>({2, 3, 5, 7}, rng);
    Tensor y = hard_warp(x, FlowField::zeros(2, 5, 7));
    for (int64_t i = 0; i < x.numel(); i++) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("hard_warp hand-derived shifts") {
    // dx=+1 with clamp: [[1,2],[3,4]] -> [[2,2],[4,4]]
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    std::vector<float> f(8, 0.f);
    f[0] = f[1] = f[2] = f[3] = 1.f;  // dx channel
    Tensor y = hard_warp(x, FlowField(Tensor::from_data({1, 2, 2, 2}, f)));
    CHECK(y.data()[0] == doctest::Approx(2));
    CHECK(y.data()[1] == doctest::Approx(2));
    CHECK(y.data()[2] == doctest::Approx(4));
    CHECK(y.data()[3] == doctest::Approx(4));

    // dx=0.5 on row [0, 1] -> [0.5, 1]
    Tensor r = Tensor::from_data({1, 1, 1, 2}, {0.f, 1.f});
    std::vector<float> f2 = {0.5f, 0.5f, 0.f, 0.f};
    Tensor y2 = hard_warp(r, FlowField(Tensor::from_data({1, 2, 1, 2}, f2)));
    CHECK(y2.data()[0] == doctest::Approx(0.5f));
    CHECK(y2.data()[1] == doctest::Approx(1.f));
}

TEST_CASE("hard_warp rejects resolution mismatch") {
    Tensor x = Tensor::filled({1, 1, 4, 4}, 1.f);
    CHECK_THROWS_AS(hard_warp(x, FlowField::zeros(1, 2, 2)), std::runtime_error);
}

TEST_CASE("hard_warp commutes with per-channel affine maps") {
    auto rng = make_rng(9, 0);
    Tensor x = randn<float>({1, 2, 6, 6}, rng);
    FlowField f = gaussian_flow(1, 6, 6, 5);
    const float a = 1.7f, b = -0.3f;
    Tensor lhs = hard_warp(add_scalar(scale(x, a), b), f);
    Tensor rhs = add_scalar(scale(hard_warp(x, f), a), b);
    for (int64_t i = 0; i < lhs.numel(); i++)
        CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-6));
}

TEST_CASE("hard_warp gradient w.r.t. feature and flow") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 23);
        DTensor x = randn<double>({1, 2, 4, 4}, rng, 1.0, true);
        auto flow = smooth_flow<double>({1, 2, 4, 4}, seed + 100);
        auto f = [](const std::vector<DTensor>& in) {
            return sum_all(hard_warp(in[0], FlowFieldT<double>(in[1])));
        };
        auto rep = grad_check(f, {x, flow.field}, 1e-4);
        CHECK(rep.passed(1e-4));
    }
}

TEST_CASE("kg_conv examples") {
    auto rng = make_rng(2, 0);
    Tensor x = randn<float>({2, 3, 4, 4}, rng);

    // zero condition -> zero flow
    FlowField f0 = kg_conv(x, Tensor::zeros({2, 6, 1, 1}));
    for (float v : f0.field.data()) CHECK(v == 0.f);

    // C=1, k=1, w=[1, 0]: dx equals the feature channel, dy = 0
    Tensor x1 = randn<float>({1, 1, 3, 3}, rng);
    FlowField f1 = kg_conv(x1, Tensor::from_data({1, 2, 1, 1}, {1.f, 0.f}));
    for (int64_t i = 0; i < 9; i++) {
        CHECK(f1.field.data()[i] == doctest::Approx(x1.data()[i]));
        CHECK(f1.field.data()[9 + i] == 0.f);
    }

    // length mismatch names the expected length
    try {
        kg_conv(x, Tensor::zeros({2, 5, 1, 1}));
        FAIL("expected length mismatch to throw");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("6") != std::string::npos);
    }
}

TEST_CASE("kg_conv gradient w.r.t. condition vector") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 29);
        DTensor x = randn<double>({1, 3, 3, 3}, rng, 1.0, true);
        DTensor w = randn<double>({1, 6, 1, 1}, rng, 0.3, true);
        auto f = [](const std::vector<DTensor>& in) {
            auto flow = kg_conv(in[0], in[1]);
            return sum_all(square(flow.field));
        };
        CHECK(grad_check(f, {x, w}, 1e-4).passed(1e-4));
    }
}

TEST_CASE("soft_flow two-position hand computation") {
    // positions with features e = {(1,0), (0,1)}, g_u = (2,0), tau = 1
    Tensor e = Tensor::from_data({1, 2, 1, 2}, {1.f, 0.f, 0.f, 1.f});
    Tensor g = Tensor::from_data({1, 2, 1, 2}, {2.f, 2.f, 0.f, 0.f});
    SoftFlowMatrix sf = soft_flow(e, g, 1.f);
    CHECK(sf.weights.data()[0] == doctest::Approx(0.8808).epsilon(1e-3));
    CHECK(sf.weights.data()[1] == doctest::Approx(0.1192).epsilon(1e-3));

    // F_sp mixes the uncentralized features with those weights
    Tensor fsp = soft_spatial_warp(e, sf);
    CHECK(fsp.data()[0] == doctest::Approx(0.8808).epsilon(1e-3));  // channel 0 at u=0
    CHECK(fsp.data()[2] == doctest::Approx(0.1192).epsilon(1e-3));  // channel 1 at u=0
}

TEST_CASE("soft_flow rows sum to one for random inputs") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 31);
        Tensor e = randn<float>({2, 4, 3, 3}, rng);
        Tensor g = randn<float>({2, 4, 3, 3}, rng);
        SoftFlowMatrix sf = soft_flow(e, g, 0.1f);
        const int64_t P = 9;
        for (int64_t r = 0; r < 2 * P; r++) {
            float sum = 0;
            for (int64_t v = 0; v < P; v++) sum += sf.weights.data()[r * P + v];
            CHECK(std::abs(sum - 1.f) < 1e-6);
        }
    }
}

TEST_CASE("soft_flow self-similarity at low temperature is near-diagonal") {
    // equal-norm distinct centralized columns: by Cauchy-Schwarz the diagonal
    // inner product strictly dominates each row
    auto rng = make_rng(3, 0);
    const int64_t C = 6, P = 4;
    std::vector<float> cols(C * P);
    std::normal_distribution<double> d(0.0, 1.0);
    for (int64_t v = 0; v < P; v++) {
        double mu = 0;
        std::vector<double> col(C);
        for (auto& x : col) {
            x = d(rng);
            mu += x;
        }
        mu /= C;
        double norm = 0;
        for (auto& x : col) {
            x -= mu;
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (int64_t c = 0; c < C; c++) cols[c * P + v] = static_cast<float>(col[c] / norm * 2.0);
    }
    Tensor e = Tensor::from_data({1, C, 2, 2}, cols);
    SoftFlowMatrix sf = soft_flow(e, e, 1e-3f);
    for (int64_t u = 0; u < P; u++)
        CHECK(sf.weights.data()[u * P + u] == doctest::Approx(1.f).epsilon(1e-4));
    // argmax conversion of a diagonal matrix is the zero displacement
    FlowField am = soft_flow_argmax(sf);
    for (float v : am.field.data()) CHECK(v == 0.f);
}

TEST_CASE("soft_spatial_warp identity and uniform rows") {
    auto rng = make_rng(4, 0);
    Tensor e = randn<float>({2, 3, 2, 2}, rng);
    SoftFlowMatrix id = identity_soft_flow(2, 2, 2);
    Tensor out = soft_spatial_warp(e, id);
    for (int64_t i = 0; i < e.numel(); i++) CHECK(out.data()[i] == doctest::Approx(e.data()[i]));

    SoftFlowMatrix uni;
    uni.weights = Tensor::filled({2, 1, 4, 4}, 0.25f);
    uni.tau = 1.f;
    uni.grid_h = uni.grid_w = 2;
    Tensor avg = soft_spatial_warp(e, uni);
    for (int64_t b = 0; b < 2; b++)
        for (int64_t c = 0; c < 3; c++) {
            float mean = 0;
            for (int64_t i = 0; i < 4; i++) mean += e.data()[(b * 3 + c) * 4 + i];
            mean /= 4;
            for (int64_t i = 0; i < 4; i++)
                CHECK(avg.data()[(b * 3 + c) * 4 + i] == doctest::Approx(mean).epsilon(1e-5));
        }
}

TEST_CASE("temperature limit: soft warp equals gather at argmax") {
    for (uint64_t seed = 0; seed < 5; seed++) {
        auto rng = make_rng(seed, 37);
        Tensor e = randn<float>({1, 4, 3, 3}, rng, 2.f);
        Tensor g = randn<float>({1, 4, 3, 3}, rng, 2.f);
        SoftFlowMatrix sf = soft_flow(e, g, 1e-3f);
        Tensor soft = soft_spatial_warp(e, sf);
        // brute-force gather at the row argmax
        const int64_t P = 9, C = 4;
        for (int64_t u = 0; u < P; u++) {
            int64_t best = 0;
            for (int64_t v = 1; v < P; v++)
                if (sf.weights.data()[u * P + v] > sf.weights.data()[u * P + best]) best = v;
            for (int64_t c = 0; c < C; c++)
                CHECK(std::abs(soft.data()[c * P + u] - e.data()[c * P + best]) < 1e-4);
        }
    }
}

TEST_CASE("channel_soft_warp examples") {
    auto rng = make_rng(5, 0);

    // single channel is the identity
    Tensor f1 = randn<float>({1, 1, 3, 3}, rng);
    Tensor g1 = randn<float>({1, 1, 3, 3}, rng);
    Tensor o1 = channel_soft_warp(f1, g1, 0.1f);
    for (int64_t i = 0; i < f1.numel(); i++) CHECK(o1.data()[i] == doctest::Approx(f1.data()[i]));

    // two identical channels -> uniform weights -> output equals the channel
    std::vector<float> base = {1.f, -2.f, 0.5f, 3.f};
    std::vector<float> dup;
    dup.insert(dup.end(), base.begin(), base.end());
    dup.insert(dup.end(), base.begin(), base.end());
    Tensor f2 = Tensor::from_data({1, 2, 2, 2}, dup);
    Tensor g2 = Tensor::from_data({1, 2, 2, 2}, dup);
    Tensor o2 = channel_soft_warp(f2, g2, 0.1f);
    for (int64_t i = 0; i < o2.numel(); i++)
        CHECK(o2.data()[i] == doctest::Approx(f2.data()[i]).epsilon(1e-5));

    // shape contract
    Tensor f3 = randn<float>({2, 5, 4, 4}, rng);
    Tensor g3 = randn<float>({2, 5, 4, 4}, rng);
    CHECK(channel_soft_warp(f3, g3, 0.1f).shape() == f3.shape());
    CHECK_THROWS_AS(channel_soft_warp(f3, f1, 0.1f), std::runtime_error);
}

TEST_CASE("channel affinity rows sum to one") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 41);
        Tensor f = randn<float>({1, 5, 3, 3}, rng);
        Tensor g = randn<float>({1, 5, 3, 3}, rng);
        Tensor fc = sub(f, spatial_mean(f));
        Tensor gc = sub(g, spatial_mean(g));
        Tensor cov = bmm(gc, 5, 9, false, fc, 5, 9, true, Shape4{1, 1, 5, 5});
        Tensor w = softmax_rows(cov, 0.1f, 5);
        for (int64_t r = 0; r < 5; r++) {
            float sum = 0;
            for (int64_t c = 0; c < 5; c++) sum += w.data()[r * 5 + c];
            CHECK(std::abs(sum - 1.f) < 1e-6);
        }
    }
}

TEST_CASE("blockwise application: identity, permutation, uniform") {
    auto rng = make_rng(6, 0);
    Tensor hi = randn<float>({1, 2, 4, 4}, rng);  // coarse 2x2, ratio 2
    SoftFlowMatrix id = identity_soft_flow(1, 2, 2);
    Tensor same = soft_flow_apply_blockwise(hi, id);
    for (int64_t i = 0; i < hi.numel(); i++) CHECK(same.data()[i] == hi.data()[i]);

    // permutation swapping coarse cells 0 and 3
    SoftFlowMatrix perm = identity_soft_flow(1, 2, 2);
    auto& m = perm.weights.data();
    m[0 * 4 + 0] = 0;
    m[0 * 4 + 3] = 1;
    m[3 * 4 + 3] = 0;
    m[3 * 4 + 0] = 1;
    Tensor sw = soft_flow_apply_blockwise(hi, perm);
    // brute-force block gather oracle
    auto block_val = [&](const Tensor& t, int64_t c, int64_t cell, int64_t dy, int64_t dx) {
        int64_t by = (cell / 2) * 2 + dy, bx = (cell % 2) * 2 + dx;
        return t.data()[(c * 4 + by) * 4 + bx];
    };
    for (int64_t c = 0; c < 2; c++)
        for (int64_t dy = 0; dy < 2; dy++)
            for (int64_t dx = 0; dx < 2; dx++) {
                CHECK(block_val(sw, c, 0, dy, dx) == block_val(hi, c, 3, dy, dx));
                CHECK(block_val(sw, c, 3, dy, dx) == block_val(hi, c, 0, dy, dx));
                CHECK(block_val(sw, c, 1, dy, dx) == block_val(hi, c, 1, dy, dx));
                CHECK(block_val(sw, c, 2, dy, dx) == block_val(hi, c, 2, dy, dx));
            }

    // uniform rows -> every block is the mean block
    SoftFlowMatrix uni;
    uni.weights = Tensor::filled({1, 1, 4, 4}, 0.25f);
    uni.tau = 1.f;
    uni.grid_h = uni.grid_w = 2;
    Tensor u = soft_flow_apply_blockwise(hi, uni);
    for (int64_t c = 0; c < 2; c++)
        for (int64_t dy = 0; dy < 2; dy++)
            for (int64_t dx = 0; dx < 2; dx++) {
                float mean = 0;
                for (int64_t cell = 0; cell < 4; cell++) mean += block_val(hi, c, cell, dy, dx);
                mean /= 4;
                for (int64_t cell = 0; cell < 4; cell++)
                    CHECK(block_val(u, c, cell, dy, dx) == doctest::Approx(mean).epsilon(1e-5));
            }

    // non-integer ratio rejected
    Tensor bad = randn<float>({1, 2, 6, 6}, rng);
    CHECK_THROWS_AS(soft_flow_apply_blockwise(bad, id), std::runtime_error);
}

TEST_CASE("flow_upscale examples") {
    FlowField zero = FlowField::zeros(1, 3, 3);
    FlowField z2 = flow_upscale(zero, 2);
    for (float v : z2.field.data()) CHECK(v == 0.f);

    std::vector<float> cf(2 * 9, 0.f);
    for (int i = 0; i < 9; i++) cf[i] = 1.f;  // dx = 1
    FlowField c(Tensor::from_data({1, 2, 3, 3}, cf));
    FlowField c2 = flow_upscale(c, 2);
    REQUIRE(c2.shape() == Shape4{1, 2, 6, 6});
    for (int64_t i = 0; i < 36; i++) {
        CHECK(c2.field.data()[i] == doctest::Approx(2.f));
        CHECK(c2.field.data()[36 + i] == doctest::Approx(0.f));
    }

    CHECK_THROWS_AS(flow_upscale(zero, 3), std::runtime_error);
}

TEST_CASE("flow_upscale commutes with warping for smooth flows") {
    Tensor img = smooth_image(1, 1, 16, 16, 7, 10);
    FlowField f = gaussian_flow(1, 16, 16, 8, 0.8f);
    Tensor lhs = hard_warp(upsample_bilinear(img, 2), flow_upscale(f, 2));
    Tensor rhs = upsample_bilinear(hard_warp(img, f), 2);
    double max_err = 0;
    for (int64_t y = 4; y < 28; y++)
        for (int64_t x = 4; x < 28; x++)
            max_err = std::max(max_err,
                               std::abs(static_cast<double>(lhs.at(0, 0, y, x)) - rhs.at(0, 0, y, x)));
    CHECK(max_err < 1e-2);
}

TEST_CASE("flow_compose identities and constant case") {
    FlowField zero = FlowField::zeros(1, 4, 4);
    FlowField f = gaussian_flow(1, 4, 4, 9);

    FlowField a = flow_compose(f, zero);
    for (int64_t i = 0; i < f.field.numel(); i++)
        CHECK(a.field.data()[i] == doctest::Approx(f.field.data()[i]));

    FlowField b = flow_compose(zero, f);
    for (int64_t i = 0; i < f.field.numel(); i++)
        CHECK(b.field.data()[i] == doctest::Approx(f.field.data()[i]));

    // constant flows with interior-safe magnitudes add up
    std::vector<float> f1(2 * 16), f2(2 * 16);
    for (int i = 0; i < 16; i++) {
        f1[i] = 0.5f;
        f1[16 + i] = -0.25f;
        f2[i] = 0.25f;
        f2[16 + i] = 0.5f;
    }
    FlowField c1(Tensor::from_data({1, 2, 4, 4}, f1));
    FlowField c2(Tensor::from_data({1, 2, 4, 4}, f2));
    FlowField comp = flow_compose(c1, c2);
    // interior pixels see the sum (border lookups clamp)
    CHECK(comp.field.at(0, 0, 1, 1) == doctest::Approx(0.75f));
    CHECK(comp.field.at(0, 1, 1, 1) == doctest::Approx(0.25f));

    CHECK_THROWS_AS(flow_compose(c1, FlowField::zeros(1, 2, 2)), std::runtime_error);
}

TEST_CASE("flow composition consistency on smooth flows") {
    for (uint64_t seed = 0; seed < 5; seed++) {
        Tensor img = smooth_image(1, 3, 16, 16, seed + 600);
        FlowField f1 = gaussian_flow(1, 16, 16, seed * 2 + 50, 2.f);
        FlowField f2 = gaussian_flow(1, 16, 16, seed * 2 + 51, 2.f);
        Tensor seq = hard_warp(hard_warp(img, f1), f2);
        Tensor comp = hard_warp(img, flow_compose(f1, f2));
        double max_err = 0;
        for (int64_t c = 0; c < 3; c++)
            for (int64_t y = 3; y < 13; y++)
                for (int64_t x = 3; x < 13; x++)
                    max_err = std::max(max_err, std::abs(static_cast<double>(seq.at(0, c, y, x)) -
                                                         comp.at(0, c, y, x)));
        CHECK(max_err < 5e-2);
    }
}

TEST_CASE("flow_mean examples") {
    std::vector<float> cf(2 * 12);
    for (int i = 0; i < 12; i++) {
        cf[i] = 2.f;
        cf[12 + i] = -3.f;
    }
    FlowField c(Tensor::from_data({1, 2, 3, 4}, cf));
    auto [mx, my] = flow_mean(c);
    CHECK(mx == doctest::Approx(2.0));
    CHECK(my == doctest::Approx(-3.0));

    // antisymmetric dx cancels
    std::vector<float> af(2 * 4, 0.f);
    af[0] = -1.f;
    af[1] = 1.f;
    af[2] = -2.f;
    af[3] = 2.f;
    af[4] = af[5] = af[6] = af[7] = 0.7f;
    FlowField a(Tensor::from_data({1, 2, 2, 2}, af));
    auto [ax, ay] = flow_mean(a);
    CHECK(ax == doctest::Approx(0.0));
    CHECK(ay == doctest::Approx(0.7));

    // random flow matches a brute-force sum
    auto rng = make_rng(10, 0);
    FlowField r(randn<float>({3, 2, 4, 4}, rng));
    auto [rx, ry] = flow_mean(r);
    double sx = 0, sy = 0;
    for (int64_t b = 0; b < 3; b++)
        for (int64_t i = 0; i < 16; i++) {
            sx += r.field.data()[b * 32 + i];
            sy += r.field.data()[b * 32 + 16 + i];
        }
    CHECK(rx == doctest::Approx(sx / 48).epsilon(1e-6));
    CHECK(ry == doctest::Approx(sy / 48).epsilon(1e-6));
}

TEST_CASE("gradients through the attention chain and blockwise warp") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 47);
        DTensor e = randn<double>({1, 3, 2, 2}, rng, 1.0, true);
        DTensor g = randn<double>({1, 3, 2, 2}, rng, 1.0, true);
        auto f = [](const std::vector<DTensor>& in) {
            auto sf = soft_flow(in[0], in[1], 0.5);
            auto fsp = soft_spatial_warp(in[0], sf);
            auto out = channel_soft_warp(fsp, in[1], 0.5);
            return mean_all(square(out));
        };
        CHECK(grad_check(f, {e, g}, 1e-5).passed(1e-4));
    }

    for (uint64_t seed = 0; seed < 10; seed++) {
        auto rng = make_rng(seed, 53);
        DTensor hi = randn<double>({1, 2, 4, 4}, rng, 1.0, true);
        DTensor e = randn<double>({1, 3, 2, 2}, rng, 1.0, true);
        DTensor g = randn<double>({1, 3, 2, 2}, rng, 1.0, true);
        auto f = [](const std::vector<DTensor>& in) {
            auto sf = soft_flow(in[1], in[2], 0.5);
            return mean_all(square(soft_flow_apply_blockwise(in[0], sf)));
        };
        CHECK(grad_check(f, {hi, e, g}, 1e-5).passed(1e-4));
    }
}

TEST_CASE("gradient through flow_compose") {
    for (uint64_t seed = 0; seed < 10; seed++) {
        auto f1 = smooth_flow<double>({1, 1, 4, 4}, seed + 200);
        auto f2 = smooth_flow<double>({1, 1, 4, 4}, seed + 300);
        auto rng = make_rng(seed, 59);
        DTensor img = randn<double>({1, 2, 4, 4}, rng, 1.0, true);
        auto f = [](const std::vector<DTensor>& in) {
            auto comp = flow_compose(FlowFieldT<double>(in[1]), FlowFieldT<double>(in[2]));
            return sum_all(hard_warp(in[0], comp));
        };
        CHECK(grad_check(f, {img, f1.field, f2.field}, 1e-4).passed(1e-4));
    }
}
