#include "vsyn/flowviz.hpp"

#include <algorithm>
#include <cmath>

namespace vsyn {

namespace {

void hsv_to_rgb(double hue, double sat, double val, double rgb[3]) {
    hue = hue - std::floor(hue);  // [0, 1)
    const double h6 = hue * 6.0;
    const int sector = static_cast<int>(h6) % 6;
    const double f = h6 - std::floor(h6);
    const double p = val * (1 - sat);
    const double q = val * (1 - sat * f);
    const double t = val * (1 - sat * (1 - f));
    switch (sector) {
        case 0: rgb[0] = val; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = val; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = val; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = val; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = val; break;
        default: rgb[0] = val; rgb[1] = p; rgb[2] = q;
    }
}

}  // namespace

ImageU8 flow_viz_encode(const float* dx, const float* dy, int h, int w, float max_mag) {
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.rgb.resize(static_cast<size_t>(3) * h * w);
    double mx = static_cast<double>(max_mag);
    if (mx <= 0) {
        for (int i = 0; i < h * w; i++)
            mx = std::max(mx, std::sqrt(double(dx[i]) * dx[i] + double(dy[i]) * dy[i]));
        if (mx <= 0) mx = 1.0;
    }
    for (int i = 0; i < h * w; i++) {
        const double mag = std::sqrt(double(dx[i]) * dx[i] + double(dy[i]) * dy[i]);
        const double hue = (std::atan2(double(dy[i]), double(dx[i])) / (2 * 3.14159265358979)) + 0.5;
        const double sat = std::min(mag / mx, 1.0);
        double rgb[3];
        hsv_to_rgb(hue, sat, 1.0, rgb);
        for (int c = 0; c < 3; c++)
            img.rgb[static_cast<size_t>(i) * 3 + c] =
                static_cast<uint8_t>(std::lround(std::clamp(rgb[c], 0.0, 1.0) * 255.0));
    }
    return img;
}

}  // namespace vsyn
