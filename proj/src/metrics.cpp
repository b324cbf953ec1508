#include "vsyn/metrics.hpp"

#include <cmath>

#include "vsyn/common.hpp"

namespace vsyn {

double image_l1(const std::vector<float>& a, const std::vector<float>& b) {
    require(a.size() == b.size() && !a.empty(), "image_l1: size mismatch");
    double acc = 0;
    for (size_t i = 0; i < a.size(); i++) acc += std::abs(a[i] - b[i]) * 0.5;  // [-1,1] -> [0,1]
    return acc / static_cast<double>(a.size());
}

namespace {

std::vector<double> gaussian_window() {
    std::vector<double> w(11);
    double sum = 0;
    for (int i = 0; i < 11; i++) {
        const double d = i - 5;
        w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += w[i];
    }
    for (auto& v : w) v /= sum;
    return w;
}

// Valid-mode separable convolution of one plane with the 11-tap window.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, int& oh, int& ow) {
    const auto win = gaussian_window();
    oh = h - 10;
    ow = w - 10;
    std::vector<double> tmp(static_cast<size_t>(h) * ow);
    for (int y = 0; y < h; y++)
        for (int x = 0; x < ow; x++) {
            double acc = 0;
            for (int k = 0; k < 11; k++) acc += win[k] * img[y * w + x + k];
            tmp[y * ow + x] = acc;
        }
    std::vector<double> out(static_cast<size_t>(oh) * ow);
    for (int y = 0; y < oh; y++)
        for (int x = 0; x < ow; x++) {
            double acc = 0;
            for (int k = 0; k < 11; k++) acc += win[k] * tmp[(y + k) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

}  // namespace

double image_ssim(const std::vector<float>& a, const std::vector<float>& b, int h, int w) {
    require(a.size() == b.size() && a.size() == static_cast<size_t>(3 * h * w),
            "image_ssim: size mismatch");
    require(h >= 11 && w >= 11, "image_ssim: image smaller than the window");
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0;
    for (int c = 0; c < 3; c++) {
        std::vector<double> xa(static_cast<size_t>(h) * w), xb(xa.size());
        for (size_t i = 0; i < xa.size(); i++) {
            xa[i] = (a[c * h * w + i] + 1.0) * 0.5;
            xb[i] = (b[c * h * w + i] + 1.0) * 0.5;
        }
        std::vector<double> aa(xa.size()), bb(xa.size()), ab(xa.size());
        for (size_t i = 0; i < xa.size(); i++) {
            aa[i] = xa[i] * xa[i];
            bb[i] = xb[i] * xb[i];
            ab[i] = xa[i] * xb[i];
        }
        int oh, ow;
        auto mu_a = filter_valid(xa, h, w, oh, ow);
        auto mu_b = filter_valid(xb, h, w, oh, ow);
        auto m_aa = filter_valid(aa, h, w, oh, ow);
        auto m_bb = filter_valid(bb, h, w, oh, ow);
        auto m_ab = filter_valid(ab, h, w, oh, ow);
        double acc = 0;
        for (size_t i = 0; i < mu_a.size(); i++) {
            const double va = m_aa[i] - mu_a[i] * mu_a[i];
            const double vb = m_bb[i] - mu_b[i] * mu_b[i];
            const double cov = m_ab[i] - mu_a[i] * mu_b[i];
            acc += ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
                   ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
        }
        total += acc / static_cast<double>(mu_a.size());
    }
    return total / 3.0;
}

}  // namespace vsyn
