#include "crmatch/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "crmatch/rng.hpp"

namespace crmatch {

namespace {

constexpr std::array<const char*, 6> kShapeNames = {"square", "circle", "triangle",
                                                    "cross",  "ring",   "bar"};

/// Signed distance to the class silhouette in unit coordinates (shape fits
/// in [-1,1]^2, negative inside).
float shape_sdf(int cls, float u, float v) {
    const float au = std::fabs(u), av = std::fabs(v);
    switch (cls) {
    case 0: // square
        return std::max(au, av) - 0.82f;
    case 1: // circle
        return std::sqrt(u * u + v * v) - 0.85f;
    case 2: { // triangle: apex at (0,-0.9), base y=0.75 with half-width 0.8
        const float base = v - 0.75f;
        const float side = 0.90f * au - 0.436f * v - 0.393f;
        return std::max(base, side);
    }
    case 3: { // cross: union of two bars
        const float horiz = std::max(au - 0.9f, av - 0.3f);
        const float vert = std::max(au - 0.3f, av - 0.9f);
        return std::min(horiz, vert);
    }
    case 4: // ring
        return std::fabs(std::sqrt(u * u + v * v) - 0.62f) - 0.24f;
    default: // bar
        return std::max(au - 0.32f, av - 0.9f);
    }
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
    const float c = v * s;
    const float hp = h * 6.0f;
    const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
    float rr = 0, gg = 0, bb = 0;
    if (hp < 1) { rr = c; gg = x; }
    else if (hp < 2) { rr = x; gg = c; }
    else if (hp < 3) { gg = c; bb = x; }
    else if (hp < 4) { gg = x; bb = c; }
    else if (hp < 5) { rr = x; bb = c; }
    else { rr = c; bb = x; }
    const float m = v - c;
    r = rr + m;
    g = gg + m;
    b = bb + m;
}

float clamp01(float x) { return x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x); }

Image render_sample(const SyntheticSpec& spec, int cls, Rng rng) {
    const int n = spec.image_size;
    Image img(n, n);

    // jittered shape pose and color
    const float cx = n * (0.5f + spec.pos_jitter * static_cast<float>(rng.uniform(-1, 1)));
    const float cy = n * (0.5f + spec.pos_jitter * static_cast<float>(rng.uniform(-1, 1)));
    const float half = n * spec.base_half_size *
                       static_cast<float>(rng.uniform(spec.scale_lo, spec.scale_hi));
    const float ang =
        static_cast<float>(rng.uniform(-spec.rot_jitter_deg, spec.rot_jitter_deg)) *
        3.14159265f / 180.0f;
    const float ca = std::cos(ang), sa = std::sin(ang);
    float r, g, b;
    hsv_to_rgb(static_cast<float>(rng.uniform()),
               0.75f + 0.25f * static_cast<float>(rng.uniform()),
               0.75f + 0.25f * static_cast<float>(rng.uniform()), r, g, b);
    const float shape_rgb[3] = {r, g, b};

    const float aa = 1.2f / half; // ~1px anti-aliasing band in unit coords
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            // background: vertical luminance gradient + noise
            const float grad = 0.55f - 0.35f * static_cast<float>(y) / (n - 1);
            const float nz = spec.noise * static_cast<float>(rng.uniform(-1, 1));
            // shape coverage from the signed distance at this pixel
            const float du = (x - cx) / half, dv = (y - cy) / half;
            const float u = ca * du + sa * dv, v = -sa * du + ca * dv;
            const float sd = shape_sdf(cls, u, v);
            float alpha = 0.5f - sd / aa;
            alpha = alpha < 0.0f ? 0.0f : (alpha > 1.0f ? 1.0f : alpha);
            for (int c = 0; c < 3; ++c) {
                const float bg = grad + nz;
                img.at(c, y, x) = clamp01(bg + alpha * (shape_rgb[c] - bg));
            }
        }
    }
    return img;
}

} // namespace

int max_synthetic_classes() { return static_cast<int>(kShapeNames.size()); }

Dataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.num_classes < 2 || spec.num_classes > max_synthetic_classes())
        fail("generate_synthetic: num_classes must be in [2, ", max_synthetic_classes(),
             "], got ", spec.num_classes);
    if (spec.image_size < 8) fail("generate_synthetic: image_size too small");

    Dataset out;
    out.images.reserve(static_cast<size_t>(spec.num_classes) * spec.samples_per_class);
    out.labels.reserve(out.images.capacity());
    for (int c = 0; c < spec.num_classes; ++c)
        out.class_names.emplace_back(kShapeNames[static_cast<size_t>(c)]);

    const Rng root(spec.seed);
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int k = 0; k < spec.samples_per_class; ++k) {
            out.images.push_back(render_sample(
                spec, c,
                root.stream({0x73796eULL, static_cast<uint64_t>(c), static_cast<uint64_t>(k)})));
            out.labels.push_back(c);
        }
    }
    return out;
}

Dataset read_cifar_binary(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) fail("cannot open '", path, "'");
    const std::streamoff size = f.tellg();
    constexpr std::streamoff kRecord = 3073;
    if (size == 0 || size % kRecord != 0)
        fail("'", path, "' has ", size, " bytes, not a multiple of the ", kRecord,
             "-byte record size");
    f.seekg(0);

    Dataset out;
    const auto n = static_cast<size_t>(size / kRecord);
    out.images.reserve(n);
    out.labels.reserve(n);
    std::vector<unsigned char> record(kRecord);
    for (size_t i = 0; i < n; ++i) {
        if (!f.read(reinterpret_cast<char*>(record.data()), kRecord))
            fail("truncated read in '", path, "'");
        const int label = record[0];
        if (label >= 10) fail("'", path, "' record ", i, " has label ", label, " >= 10");
        Image img(32, 32);
        for (size_t j = 0; j < 3072; ++j)
            img.data[j] = static_cast<float>(record[1 + j]) / 255.0f;
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

} // namespace crmatch
