#include "crmatch/augment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>

namespace crmatch {

namespace {

constexpr float kPi = 3.14159265358979323846f;

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

int quant8(float v) {
    const int q = static_cast<int>(std::lround(clamp01(v) * 255.0f));
    return q < 0 ? 0 : (q > 255 ? 255 : q);
}

float dequant8(int q) { return static_cast<float>(q) / 255.0f; }

float luminance(const Image& img, int y, int x) {
    return 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
}

/// Blend degenerate -> original with factor m (m=0 gives degenerate, m=1
/// gives the original).
Image blend(const Image& degenerate, const Image& original, float m) {
    Image out(original.height, original.width);
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = clamp01(degenerate.data[i] + m * (original.data[i] - degenerate.data[i]));
    return out;
}

Image grayscale_of(const Image& img) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const float l = luminance(img, y, x);
            out.at(0, y, x) = l;
            out.at(1, y, x) = l;
            out.at(2, y, x) = l;
        }
    return out;
}

Image smooth_of(const Image& img) {
    // 3x3 smoothing kernel 1/13 * [1 1 1; 1 5 1; 1 1 1], border rows/cols
    // left unchanged.
    Image out = img;
    for (int c = 0; c < 3; ++c)
        for (int y = 1; y + 1 < img.height; ++y)
            for (int x = 1; x + 1 < img.width; ++x) {
                float s = 0.0f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        s += img.at(c, y + dy, x + dx) * ((dy == 0 && dx == 0) ? 5.0f : 1.0f);
                out.at(c, y, x) = s / 13.0f;
            }
    return out;
}

/// Inverse-mapped affine resampling with bilinear interpolation and zero
/// fill outside the source. Maps output (x,y) to source (a*x + b*y + c,
/// d*x + e*y + f).
Image affine_sample(const Image& img, float a, float b, float c, float d, float e, float f) {
    Image out(img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const float sx = a * static_cast<float>(x) + b * static_cast<float>(y) + c;
            const float sy = d * static_cast<float>(x) + e * static_cast<float>(y) + f;
            const int x0 = static_cast<int>(std::floor(sx));
            const int y0 = static_cast<int>(std::floor(sy));
            const float fx = sx - static_cast<float>(x0);
            const float fy = sy - static_cast<float>(y0);
            for (int ch = 0; ch < 3; ++ch) {
                auto tap = [&](int yy, int xx) -> float {
                    if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return 0.0f;
                    return img.at(ch, yy, xx);
                };
                const float v = tap(y0, x0) * (1.0f - fx) * (1.0f - fy) +
                                tap(y0, x0 + 1) * fx * (1.0f - fy) +
                                tap(y0 + 1, x0) * (1.0f - fx) * fy +
                                tap(y0 + 1, x0 + 1) * fx * fy;
                out.at(ch, y, x) = clamp01(v);
            }
        }
    }
    return out;
}

using Lut = std::array<int, 256>;

/// 8-bit LUT ops (posterize/solarize/autocontrast/equalize): quantize,
/// look up, dequantize. Pixels whose quantized value the LUT leaves
/// unchanged keep their original float, so identity LUTs are byte-exact.
Image apply_lut_per_channel(const Image& img, const std::function<Lut(const int*)>& make_lut) {
    Image out(img.height, img.width);
    std::array<int, 256> hist;
    for (int c = 0; c < 3; ++c) {
        hist.fill(0);
        const size_t plane = static_cast<size_t>(c) * img.height * img.width;
        for (int i = 0; i < img.height * img.width; ++i)
            hist[static_cast<size_t>(quant8(img.data[plane + i]))]++;
        const Lut lut = make_lut(hist.data());
        for (int i = 0; i < img.height * img.width; ++i) {
            const float v = img.data[plane + i];
            const int q = quant8(v);
            const int m = lut[static_cast<size_t>(q)];
            out.data[plane + i] = m == q ? v : dequant8(m);
        }
    }
    return out;
}

} // namespace

const std::array<TransformSpec, 14>& strong_transform_table() {
    static const std::array<TransformSpec, 14> table = {{
        {TransformKind::Autocontrast, 0.0f, 1.0f},
        {TransformKind::Brightness, 0.05f, 0.95f},
        {TransformKind::Color, 0.05f, 0.95f},
        {TransformKind::Contrast, 0.05f, 0.95f},
        {TransformKind::Equalize, 0.0f, 1.0f},
        {TransformKind::Identity, 0.0f, 1.0f},
        {TransformKind::Posterize, 4.0f, 8.0f},
        {TransformKind::Rotate, -30.0f, 30.0f},
        {TransformKind::Sharpness, 0.05f, 0.95f},
        {TransformKind::ShearX, -0.3f, 0.3f},
        {TransformKind::ShearY, -0.3f, 0.3f},
        {TransformKind::Solarize, 0.0f, 1.0f},
        {TransformKind::TranslateX, -0.3f, 0.3f},
        {TransformKind::TranslateY, -0.3f, 0.3f},
    }};
    return table;
}

const char* transform_name(TransformKind k) {
    switch (k) {
    case TransformKind::Autocontrast: return "autocontrast";
    case TransformKind::Brightness: return "brightness";
    case TransformKind::Color: return "color";
    case TransformKind::Contrast: return "contrast";
    case TransformKind::Equalize: return "equalize";
    case TransformKind::Identity: return "identity";
    case TransformKind::Posterize: return "posterize";
    case TransformKind::Rotate: return "rotate";
    case TransformKind::Sharpness: return "sharpness";
    case TransformKind::ShearX: return "shear_x";
    case TransformKind::ShearY: return "shear_y";
    case TransformKind::Solarize: return "solarize";
    case TransformKind::TranslateX: return "translate_x";
    case TransformKind::TranslateY: return "translate_y";
    }
    return "?";
}

TransformKind parse_transform(const std::string& name) {
    for (const auto& spec : strong_transform_table())
        if (name == transform_name(spec.kind)) return spec.kind;
    fail("unknown transform '", name, "'");
}

const TransformSpec& transform_spec(TransformKind k) {
    for (const auto& spec : strong_transform_table())
        if (spec.kind == k) return spec;
    fail("no spec for transform id ", static_cast<int>(k));
}

Image apply_transform(const Image& img, TransformKind kind, float magnitude) {
    const TransformSpec& spec = transform_spec(kind);
    if (magnitude < spec.lo - 1e-6f || magnitude > spec.hi + 1e-6f)
        fail(transform_name(kind), ": magnitude ", magnitude, " outside [", spec.lo, ", ",
             spec.hi, "]");

    switch (kind) {
    case TransformKind::Identity:
        return img;

    case TransformKind::Brightness: {
        Image black(img.height, img.width, 0.0f);
        return blend(black, img, magnitude);
    }
    case TransformKind::Color:
        return blend(grayscale_of(img), img, magnitude);

    case TransformKind::Contrast: {
        double mean = 0.0;
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) mean += luminance(img, y, x);
        mean /= static_cast<double>(img.height) * img.width;
        Image gray(img.height, img.width, static_cast<float>(mean));
        return blend(gray, img, magnitude);
    }
    case TransformKind::Sharpness:
        return blend(smooth_of(img), img, magnitude);

    case TransformKind::Posterize: {
        const int bits = static_cast<int>(std::lround(magnitude));
        if (bits < 4 || bits > 8) fail("posterize: bits ", bits, " outside [4, 8]");
        const int mask = 0xFF << (8 - bits);
        return apply_lut_per_channel(img, [mask](const int*) {
            Lut lut;
            for (int v = 0; v < 256; ++v) lut[static_cast<size_t>(v)] = v & mask;
            return lut;
        });
    }
    case TransformKind::Solarize: {
        const int threshold = quant8(magnitude);
        return apply_lut_per_channel(img, [threshold](const int*) {
            Lut lut;
            for (int v = 0; v < 256; ++v)
                lut[static_cast<size_t>(v)] = v > threshold ? 255 - v : v;
            return lut;
        });
    }
    case TransformKind::Autocontrast:
        return apply_lut_per_channel(img, [](const int* hist) {
            int lo = 0, hi = 255;
            while (lo < 256 && hist[lo] == 0) ++lo;
            while (hi >= 0 && hist[hi] == 0) --hi;
            Lut lut;
            if (hi <= lo) {
                for (int v = 0; v < 256; ++v) lut[static_cast<size_t>(v)] = v;
                return lut;
            }
            const double scl = 255.0 / (hi - lo);
            for (int v = 0; v < 256; ++v) {
                const int m = static_cast<int>(std::lround((v - lo) * scl));
                lut[static_cast<size_t>(v)] = m < 0 ? 0 : (m > 255 ? 255 : m);
            }
            return lut;
        });

    case TransformKind::Equalize:
        return apply_lut_per_channel(img, [](const int* hist) {
            Lut lut;
            int total = 0, last_nonzero = 0, nonzero_bins = 0;
            for (int v = 0; v < 256; ++v) {
                total += hist[v];
                if (hist[v]) {
                    last_nonzero = hist[v];
                    ++nonzero_bins;
                }
            }
            const int step = (total - last_nonzero) / 255;
            if (nonzero_bins <= 1 || step == 0) {
                for (int v = 0; v < 256; ++v) lut[static_cast<size_t>(v)] = v;
                return lut;
            }
            int n = step / 2;
            for (int v = 0; v < 256; ++v) {
                const int m = n / step;
                lut[static_cast<size_t>(v)] = m > 255 ? 255 : m;
                n += hist[v];
            }
            return lut;
        });

    case TransformKind::Rotate: {
        const float a = magnitude * kPi / 180.0f;
        const float cx = static_cast<float>(img.width - 1) / 2.0f;
        const float cy = static_cast<float>(img.height - 1) / 2.0f;
        const float ca = std::cos(a), sa = std::sin(a);
        // inverse map of a rotation about the image center
        return affine_sample(img, ca, sa, cx - ca * cx - sa * cy, -sa, ca,
                             cy + sa * cx - ca * cy);
    }
    case TransformKind::ShearX:
        return affine_sample(img, 1.0f, magnitude, 0.0f, 0.0f, 1.0f, 0.0f);
    case TransformKind::ShearY:
        return affine_sample(img, 1.0f, 0.0f, 0.0f, magnitude, 1.0f, 0.0f);

    case TransformKind::TranslateX: {
        const float shift = static_cast<float>(
            std::lround(static_cast<double>(magnitude) * img.width));
        return affine_sample(img, 1.0f, 0.0f, -shift, 0.0f, 1.0f, 0.0f);
    }
    case TransformKind::TranslateY: {
        const float shift = static_cast<float>(
            std::lround(static_cast<double>(magnitude) * img.height));
        return affine_sample(img, 1.0f, 0.0f, 0.0f, 0.0f, 1.0f, -shift);
    }
    }
    fail("unknown transform id ", static_cast<int>(kind));
}

namespace {
int reflect_index(int i, int n) {
    // mirror without edge repetition: -1 -> 1, n -> n-2
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return i;
}
} // namespace

Image weak_augment_with(const Image& img, const WeakDraw& draw, int pad) {
    if (pad < 0) pad = (img.height + 7) / 8;
    Image flipped = img;
    if (draw.flip) {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < img.height; ++y)
                for (int x = 0; x < img.width; ++x)
                    flipped.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    }
    if (draw.crop_dy < 0 || draw.crop_dy > 2 * pad || draw.crop_dx < 0 ||
        draw.crop_dx > 2 * pad)
        fail("weak_augment: crop offset (", draw.crop_dy, ",", draw.crop_dx,
             ") outside [0, ", 2 * pad, "]");
    Image out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y) {
            const int sy = reflect_index(y + draw.crop_dy - pad, img.height);
            for (int x = 0; x < img.width; ++x) {
                const int sx = reflect_index(x + draw.crop_dx - pad, img.width);
                out.at(c, y, x) = flipped.at(c, sy, sx);
            }
        }
    return out;
}

Image weak_augment(const Image& img, Rng& rng, int pad) {
    if (pad < 0) pad = (img.height + 7) / 8;
    WeakDraw draw;
    draw.flip = rng.bernoulli(0.5);
    draw.crop_dy = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(2 * pad + 1)));
    draw.crop_dx = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(2 * pad + 1)));
    return weak_augment_with(img, draw, pad);
}

namespace {
/// Every pool entry consumes exactly one magnitude draw so the stream layout
/// does not depend on which transforms were picked. Posterize draws an
/// integer; parameterless transforms ignore the value.
float draw_magnitude(Rng& rng, const TransformSpec& spec) {
    if (spec.kind == TransformKind::Posterize)
        return static_cast<float>(rng.uniform_int(static_cast<int>(spec.lo),
                                                  static_cast<int>(spec.hi)));
    return static_cast<float>(rng.uniform(spec.lo, spec.hi));
}
} // namespace

Image strong_augment_with(const Image& img, const StrongDraw& draw, int cutout_side) {
    Image out = apply_transform(img, draw.ops[0], draw.magnitudes[0]);
    out = apply_transform(out, draw.ops[1], draw.magnitudes[1]);
    if (cutout_side < 0) cutout_side = img.height / 2;
    if (cutout_side > 0) out = cutout_at(out, draw.cut_cy, draw.cut_cx, cutout_side);
    return out;
}

Image strong_augment(const Image& img, Rng& rng, const StrongOptions& opt) {
    const auto& table = strong_transform_table();
    StrongDraw draw;
    const uint32_t n = static_cast<uint32_t>(table.size());

    const uint32_t first = rng.uniform_int(n);
    draw.ops[0] = table[first].kind;
    draw.magnitudes[0] = draw_magnitude(rng, table[first]);

    uint32_t second;
    if (opt.with_replacement) {
        second = rng.uniform_int(n);
    } else {
        second = rng.uniform_int(n - 1);
        if (second >= first) ++second;
    }
    draw.ops[1] = table[second].kind;
    draw.magnitudes[1] = draw_magnitude(rng, table[second]);

    draw.cut_cy = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(img.height)));
    draw.cut_cx = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(img.width)));
    return strong_augment_with(img, draw, opt.cutout_side);
}

Image cutout_at(const Image& img, int cy, int cx, int side) {
    Image out = img;
    if (side <= 0) return out;
    const int y0 = std::max(0, cy - side / 2);
    const int x0 = std::max(0, cx - side / 2);
    const int y1 = std::min(img.height, cy - side / 2 + side);
    const int x1 = std::min(img.width, cx - side / 2 + side);
    for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) out.at(c, y, x) = 0.5f;
    return out;
}

Image cutout(const Image& img, Rng& rng, int side) {
    if (side < 0) side = img.height / 2;
    const int cy = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(img.height)));
    const int cx = static_cast<int>(rng.uniform_int(static_cast<uint32_t>(img.width)));
    return cutout_at(img, cy, cx, side);
}

Image rotate90(const Image& img, int r) {
    if (img.height != img.width)
        fail("rotate90: image must be square, got ", img.height, "x", img.width);
    if (r < 0 || r > 3) fail("rotate90: r must be in {0,1,2,3}, got ", r);
    if (r == 0) return img;
    const int n = img.height;
    Image out(n, n);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                float v;
                switch (r) {
                case 1: v = img.at(c, j, n - 1 - i); break;
                case 2: v = img.at(c, n - 1 - i, n - 1 - j); break;
                default: v = img.at(c, n - 1 - j, i); break;
                }
                out.at(c, i, j) = v;
            }
    return out;
}

Image scale_image(const Image& img, float factor) {
    if (factor <= 0.0f) fail("scale_image: factor must be > 0, got ", factor);
    const float cx = static_cast<float>(img.width - 1) / 2.0f;
    const float cy = static_cast<float>(img.height - 1) / 2.0f;
    const float inv = 1.0f / factor;
    return affine_sample(img, inv, 0.0f, cx - inv * cx, 0.0f, inv, cy - inv * cy);
}

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("cannot open '", path, "' for writing");
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                f.put(static_cast<char>(quant8(img.at(c, y, x))));
    if (!f) fail("failed writing '", path, "'");
}

} // namespace crmatch
