#pragma once

// Deterministic multi-view sprite dataset. Sprites are assemblies of flat
// colored parts (rectangles and ellipses) at distinct depths inside the unit
// canvas. A view rotates the assembly about the vertical axis under an
// orthographic projection, which for a flat part at depth z reduces to a
// horizontal scale by cos(theta) plus a shift by z*sin(theta), so the exact
// backward flow between any two views is available in closed form, including
// an occlusion mask.

#include <cstdint>
#include <string>
#include <vector>

namespace vsyn {

constexpr int kNumViews = 9;

// Azimuth of a discrete view: {-60, -45, ..., +60} degrees, in radians.
double view_azimuth(int view);

struct SpritePart {
    enum Kind { Rect, Ellipse };
    Kind kind = Rect;
    double cx = 0, cy = 0;          // canonical center
    double half_w = 0, half_h = 0;  // canonical half extents
    double depth = 0;               // in [-0.35, 0.35]; larger is closer
    float color[3] = {0, 0, 0};     // in [0, 1]
};

struct SpriteSpec {
    uint64_t seed = 0;
    std::vector<SpritePart> parts;

    // Reproducible chair-like assembly: seat, offset backrest, legs at
    // staggered depths, and an optional ellipse accent.
    static SpriteSpec from_seed(uint64_t seed);
};

// Index of the closest part covering a canvas point in the given view,
// -1 for background.
int topmost_part(const SpriteSpec& spec, double x, double y, double theta);

// Anti-aliased render (supersampled box filter), 3 x size x size in [-1, 1].
std::vector<float> render_view(const SpriteSpec& spec, int view, int size, int supersample = 4);

struct GtFlow {
    int size = 0;
    std::vector<float> dx, dy;    // pixel-unit backward offsets on the target grid
    std::vector<uint8_t> valid;   // 1 where the flow is well defined
};

// Analytic backward flow for translating view_a into view_b (offsets live on
// the target grid and point into the source). Pixels whose source is occluded,
// out of frame, or that straddle a part boundary in either view are masked.
GtFlow gt_flow(const SpriteSpec& spec, int view_a, int view_b, int size);

struct DatasetManifest {
    int version = 1;
    int num_views = kNumViews;
    int image_size = 64;
    uint64_t seed = 0;
    std::vector<uint64_t> sprite_seeds;
    std::vector<uint8_t> is_train;  // 80/20 split, disjoint contiguous ranges
    std::string dir;

    int train_count() const;
    int test_count() const;
    std::string image_path(int sprite_index, int view) const;
};

// Renders n_sprites * K images into out_dir plus a manifest.txt; pure function
// of (seed, n, K). Returns the manifest it wrote.
DatasetManifest generate_dataset(int n_sprites, const std::string& out_dir, uint64_t seed,
                                 int image_size = 64);

DatasetManifest load_manifest(const std::string& dir);

struct SyntheticSample {
    std::vector<float> image_a, image_b;  // decoded to [-1, 1]
    int view_a = 0, view_b = 0;
    uint64_t sprite_seed = 0;
    GtFlow flow;  // target(b) -> source(a)
};

SyntheticSample load_pair(const DatasetManifest& manifest, int sprite_index, int view_a,
                          int view_b, bool with_flow = true);

}  // namespace vsyn
