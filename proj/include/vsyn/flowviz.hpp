#pragma once

// Color-wheel flow rendering: direction maps to hue, magnitude to saturation
// (normalized by the per-image maximum), so zero flow renders white.

#include "vsyn/png_io.hpp"

namespace vsyn {

// dx, dy are h*w planes in pixel units. max_mag <= 0 uses the image maximum.
ImageU8 flow_viz_encode(const float* dx, const float* dy, int h, int w, float max_mag = -1.f);

}  // namespace vsyn
