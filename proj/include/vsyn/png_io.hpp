#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vsyn {

// Interleaved 8-bit RGB raster.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // 3 * width * height
};

void write_png(const std::string& path, const ImageU8& img);
ImageU8 read_png(const std::string& path);

// [-1, 1] float raster (3, H, W) <-> 8-bit RGB with the linear mapping
// byte = round((v + 1) / 2 * 255), v = byte / 255 * 2 - 1.
ImageU8 to_u8(const float* chw, int h, int w);
std::vector<float> from_u8(const ImageU8& img);

}  // namespace vsyn
