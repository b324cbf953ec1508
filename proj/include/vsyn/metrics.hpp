#pragma once

// Evaluation metrics on [0,1]-range images: mean absolute error and SSIM with
// the standard 11x11 Gaussian window (sigma 1.5, k1=0.01, k2=0.03), averaged
// over channels and valid window positions.

#include <cstdint>
#include <vector>

namespace vsyn {

// Images are (3, h, w) planar, values in [-1, 1]; metrics map them to [0, 1].
double image_l1(const std::vector<float>& a, const std::vector<float>& b);

double image_ssim(const std::vector<float>& a, const std::vector<float>& b, int h, int w);

}  // namespace vsyn
