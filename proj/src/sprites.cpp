#include "vsyn/sprites.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "vsyn/common.hpp"
#include "vsyn/png_io.hpp"

namespace fs = std::filesystem;

namespace vsyn {

namespace {

constexpr double kPi = 3.14159265358979323846;
const float kBackground[3] = {0.76f, 0.76f, 0.80f};  // [-1,1] range

// Canonical x recovered from a screen x for a layer at the given depth.
inline double canonical_x(double screen_x, double depth, double cos_t, double sin_t) {
    return (screen_x - depth * sin_t) / cos_t;
}

inline double screen_x(double canon_x, double depth, double cos_t, double sin_t) {
    return canon_x * cos_t + depth * sin_t;
}

inline bool part_covers(const SpritePart& p, double canon_x, double y) {
    const double dx = canon_x - p.cx, dy = y - p.cy;
    if (p.kind == SpritePart::Rect)
        return std::abs(dx) <= p.half_w && std::abs(dy) <= p.half_h;
    const double nx = dx / p.half_w, ny = dy / p.half_h;
    return nx * nx + ny * ny <= 1.0;
}

}  // namespace

double view_azimuth(int view) {
    require(view >= 0 && view < kNumViews,
            "view index " + std::to_string(view) + " outside [0, " + std::to_string(kNumViews) +
                ")");
    return (view - (kNumViews - 1) / 2) * 15.0 * kPi / 180.0;
}

int topmost_part(const SpriteSpec& spec, double x, double y, double theta) {
    const double ct = std::cos(theta), st = std::sin(theta);
    int best = -1;
    double best_depth = -1e9;
    for (size_t i = 0; i < spec.parts.size(); i++) {
        const SpritePart& p = spec.parts[i];
        if (p.depth > best_depth && part_covers(p, canonical_x(x, p.depth, ct, st), y)) {
            best = static_cast<int>(i);
            best_depth = p.depth;
        }
    }
    return best;
}

SpriteSpec SpriteSpec::from_seed(uint64_t seed) {
    SpriteSpec spec;
    spec.seed = seed;
    auto rng = make_rng(seed, 0xa11ce);
    auto uni = [&](double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(rng);
    };
    auto color = [&](SpritePart& p) {
        for (int c = 0; c < 3; c++) p.color[c] = static_cast<float>(uni(0.05, 0.95));
    };

    // depths are drawn from a shuffled ladder so no two parts tie
    std::vector<double> depths;
    for (int i = 0; i < 8; i++) depths.push_back(-0.32 + 0.08 * i + uni(-0.02, 0.02));
    std::shuffle(depths.begin(), depths.end(), rng);
    size_t next_depth = 0;

    SpritePart seat;
    seat.kind = SpritePart::Rect;
    seat.cx = uni(-0.04, 0.04);
    seat.cy = uni(0.02, 0.12);
    seat.half_w = uni(0.14, 0.20);
    seat.half_h = uni(0.035, 0.06);
    seat.depth = depths[next_depth++];
    color(seat);
    spec.parts.push_back(seat);

    SpritePart back;
    back.kind = SpritePart::Rect;
    back.cx = (rng() % 2 ? 1 : -1) * uni(0.07, 0.13);  // asymmetric on purpose
    back.cy = seat.cy - uni(0.18, 0.26);
    back.half_w = uni(0.03, 0.055);
    back.half_h = uni(0.14, 0.20);
    back.depth = depths[next_depth++];
    color(back);
    spec.parts.push_back(back);

    const int n_legs = 2 + static_cast<int>(rng() % 2);
    for (int l = 0; l < n_legs; l++) {
        SpritePart leg;
        leg.kind = SpritePart::Rect;
        leg.cx = seat.cx + (l == 0 ? -1 : l == 1 ? 1 : 0) * uni(0.08, 0.13);
        leg.cy = seat.cy + uni(0.14, 0.2);
        leg.half_w = uni(0.015, 0.03);
        leg.half_h = uni(0.1, 0.15);
        leg.depth = depths[next_depth++];
        color(leg);
        spec.parts.push_back(leg);
    }

    if (rng() % 2) {
        SpritePart accent;
        accent.kind = SpritePart::Ellipse;
        accent.cx = back.cx + uni(-0.03, 0.03);
        accent.cy = back.cy - uni(0.05, 0.1);
        accent.half_w = uni(0.04, 0.08);
        accent.half_h = uni(0.03, 0.06);
        accent.depth = depths[next_depth++];
        color(accent);
        spec.parts.push_back(accent);
    }
    return spec;
}

std::vector<float> render_view(const SpriteSpec& spec, int view, int size, int supersample) {
    const double theta = view_azimuth(view);
    const double ct = std::cos(theta), st = std::sin(theta);
    const int ss = supersample;
    std::vector<float> out(3 * static_cast<size_t>(size) * size);

    // back-to-front isn't needed: coverage picks the closest part directly
    for (int i = 0; i < size; i++)
        for (int j = 0; j < size; j++) {
            double acc[3] = {0, 0, 0};
            for (int si = 0; si < ss; si++)
                for (int sj = 0; sj < ss; sj++) {
                    const double y = (i * ss + si + 0.5) / (size * ss) - 0.5;
                    const double x = (j * ss + sj + 0.5) / (size * ss) - 0.5;
                    int best = -1;
                    double best_depth = -1e9;
                    for (size_t p = 0; p < spec.parts.size(); p++) {
                        const SpritePart& part = spec.parts[p];
                        if (part.depth > best_depth &&
                            part_covers(part, canonical_x(x, part.depth, ct, st), y)) {
                            best = static_cast<int>(p);
                            best_depth = part.depth;
                        }
                    }
                    if (best < 0)
                        for (int c = 0; c < 3; c++) acc[c] += kBackground[c];
                    else
                        for (int c = 0; c < 3; c++)
                            acc[c] += spec.parts[best].color[c] * 2.f - 1.f;
                }
            for (int c = 0; c < 3; c++)
                out[(static_cast<size_t>(c) * size + i) * size + j] =
                    static_cast<float>(acc[c] / (ss * ss));
        }
    return out;
}

GtFlow gt_flow(const SpriteSpec& spec, int view_a, int view_b, int size) {
    const double ta = view_azimuth(view_a), tb = view_azimuth(view_b);
    const double ca = std::cos(ta), sa = std::sin(ta);
    const double cb = std::cos(tb), sb = std::sin(tb);
    GtFlow flow;
    flow.size = size;
    flow.dx.assign(static_cast<size_t>(size) * size, 0.f);
    flow.dy.assign(static_cast<size_t>(size) * size, 0.f);
    flow.valid.assign(static_cast<size_t>(size) * size, 0);

    const double edge_eps = 0.6 / size;  // boundary-straddle probe radius
    auto interior = [&](double x, double y, double theta, int part) {
        for (int k = 0; k < 4; k++) {
            const double ox = (k % 2 ? edge_eps : -edge_eps);
            const double oy = (k / 2 ? edge_eps : -edge_eps);
            if (topmost_part(spec, x + ox, y + oy, theta) != part) return false;
        }
        return true;
    };

    for (int i = 0; i < size; i++)
        for (int j = 0; j < size; j++) {
            const double y = (i + 0.5) / size - 0.5;
            const double xb = (j + 0.5) / size - 0.5;
            const size_t idx = static_cast<size_t>(i) * size + j;
            const int part = topmost_part(spec, xb, y, tb);
            if (part < 0) {
                // background maps to itself where it is also visible in the source
                if (topmost_part(spec, xb, y, ta) == -1 && interior(xb, y, ta, -1) &&
                    interior(xb, y, tb, -1))
                    flow.valid[idx] = 1;
                continue;
            }
            // xa = xb * (ca/cb) + depth * (sa - sb * ca/cb); exactly xb when a == b
            const double depth = spec.parts[part].depth;
            const double view_scale = ca / cb;
            const double xa = xb * view_scale + depth * (sa - sb * view_scale);
            flow.dx[idx] = static_cast<float>((xa - xb) * size);
            if (xa < -0.5 || xa > 0.5) continue;                       // out of frame
            if (topmost_part(spec, xa, y, ta) != part) continue;       // occluded
            if (!interior(xb, y, tb, part)) continue;                  // target edge
            if (!interior(xa, y, ta, part)) continue;                  // source edge
            flow.valid[idx] = 1;
        }
    return flow;
}

int DatasetManifest::train_count() const {
    int n = 0;
    for (uint8_t t : is_train) n += t;
    return n;
}

int DatasetManifest::test_count() const { return static_cast<int>(is_train.size()) - train_count(); }

std::string DatasetManifest::image_path(int sprite_index, int view) const {
    return dir + "/sprite" + std::to_string(sprite_seeds.at(sprite_index)) + "view" +
           std::to_string(view) + ".png";
}

DatasetManifest generate_dataset(int n_sprites, const std::string& out_dir, uint64_t seed,
                                 int image_size) {
    require(n_sprites >= 1, "generate_dataset: need at least one sprite");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (!fs::is_directory(out_dir))
        fail("cannot create dataset directory: " + out_dir);

    DatasetManifest m;
    m.seed = seed;
    m.image_size = image_size;
    m.dir = out_dir;
    const int train_n = std::max(1, (n_sprites * 8) / 10);
    for (int i = 0; i < n_sprites; i++) {
        m.sprite_seeds.push_back(seed * 100000ULL + static_cast<uint64_t>(i));
        m.is_train.push_back(i < train_n ? 1 : 0);
    }

    for (int i = 0; i < n_sprites; i++) {
        SpriteSpec spec = SpriteSpec::from_seed(m.sprite_seeds[i]);
        for (int v = 0; v < m.num_views; v++) {
            std::vector<float> img = render_view(spec, v, image_size);
            write_png(m.image_path(i, v), to_u8(img.data(), image_size, image_size));
        }
    }

    std::ofstream f(out_dir + "/manifest.txt");
    if (!f) fail("cannot write manifest in: " + out_dir);
    f << "version=" << m.version << "\n";
    f << "k=" << m.num_views << "\n";
    f << "image_size=" << m.image_size << "\n";
    f << "seed=" << m.seed << "\n";
    f << "n_sprites=" << n_sprites << "\n";
    for (int i = 0; i < n_sprites; i++) {
        f << "sprite." << i << ".seed=" << m.sprite_seeds[i] << "\n";
        f << "sprite." << i << ".split=" << (m.is_train[i] ? "train" : "test") << "\n";
    }
    return m;
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/manifest.txt");
    if (!f) fail("missing manifest: " + dir + "/manifest.txt");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    DatasetManifest m;
    m.dir = dir;
    m.version = std::stoi(kv.at("version"));
    m.num_views = std::stoi(kv.at("k"));
    m.image_size = std::stoi(kv.at("image_size"));
    m.seed = std::stoull(kv.at("seed"));
    const int n = std::stoi(kv.at("n_sprites"));
    for (int i = 0; i < n; i++) {
        m.sprite_seeds.push_back(std::stoull(kv.at("sprite." + std::to_string(i) + ".seed")));
        m.is_train.push_back(kv.at("sprite." + std::to_string(i) + ".split") == "train" ? 1 : 0);
    }
    return m;
}

SyntheticSample load_pair(const DatasetManifest& manifest, int sprite_index, int view_a,
                          int view_b, bool with_flow) {
    require(sprite_index >= 0 && sprite_index < static_cast<int>(manifest.sprite_seeds.size()),
            "sprite index out of range");
    SyntheticSample s;
    s.view_a = view_a;
    s.view_b = view_b;
    s.sprite_seed = manifest.sprite_seeds[sprite_index];
    const std::string pa = manifest.image_path(sprite_index, view_a);
    const std::string pb = manifest.image_path(sprite_index, view_b);
    if (!fs::exists(pa)) fail("missing dataset image: " + pa);
    if (!fs::exists(pb)) fail("missing dataset image: " + pb);
    s.image_a = from_u8(read_png(pa));
    s.image_b = from_u8(read_png(pb));
    if (with_flow)
        s.flow = gt_flow(SpriteSpec::from_seed(s.sprite_seed), view_a, view_b,
                         manifest.image_size);
    return s;
}

}  // namespace vsyn
