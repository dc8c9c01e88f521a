#pragma once

#include <array>
#include <vector>

#include "crmatch/common.hpp"
#include "crmatch/rng.hpp"

namespace crmatch {

/// 3-channel float image, values in [0,1], CHW layout.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> data; // 3 * height * width

    Image() = default;
    Image(int h, int w, float fill = 0.0f)
        : height(h), width(w), data(static_cast<size_t>(3) * h * w, fill) {}

    float& at(int c, int y, int x) {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    float at(int c, int y, int x) const {
        return data[(static_cast<size_t>(c) * height + y) * width + x];
    }
    size_t size() const { return data.size(); }
};

enum class TransformKind {
    Autocontrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
};

/// One entry of the strong-augmentation pool: transform plus its magnitude
/// range. Posterize draws integer magnitudes; everything else is continuous.
struct TransformSpec {
    TransformKind kind;
    float lo;
    float hi;
};

/// The 14-transform pool used by strong augmentation.
const std::array<TransformSpec, 14>& strong_transform_table();

const char* transform_name(TransformKind k);
TransformKind parse_transform(const std::string& name);
const TransformSpec& transform_spec(TransformKind k);

/// Applies a single transform at the given magnitude. Throws if the
/// magnitude lies outside the transform's table range. Output values are
/// clamped to [0,1]; shape is preserved.
Image apply_transform(const Image& img, TransformKind kind, float magnitude);

// --- weak augmentation: flip + pad-and-crop -------------------------------

struct WeakDraw {
    bool flip = false;
    int crop_dy = 0; // window offset in the reflect-padded image, [0, 2*pad]
    int crop_dx = 0;
};

/// Deterministic core: horizontal flip, reflect-pad, crop an HxW window at
/// (crop_dy, crop_dx). pad < 0 selects the default ceil(H/8).
Image weak_augment_with(const Image& img, const WeakDraw& draw, int pad = -1);

/// Draw order: flip (bernoulli 0.5), crop_dy, crop_dx.
Image weak_augment(const Image& img, Rng& rng, int pad = -1);

// --- strong augmentation: two pool draws + cutout -------------------------

struct StrongOptions {
    int cutout_side = -1;          // -1: floor(H/2); 0 disables cutout
    bool with_replacement = true;  // pool sampling mode
};

struct StrongDraw {
    std::array<TransformKind, 2> ops;
    std::array<float, 2> magnitudes;
    int cut_cy = 0;
    int cut_cx = 0;
};

Image strong_augment_with(const Image& img, const StrongDraw& draw, int cutout_side = -1);

/// Draw order: op index 1, magnitude 1, op index 2, magnitude 2, cutout
/// center y, cutout center x. Without replacement, the second op index is
/// drawn from the remaining 13 entries.
Image strong_augment(const Image& img, Rng& rng, const StrongOptions& opt = {});

// --- cutout ----------------------------------------------------------------

/// Fills a side x side square centered at (cy,cx) with 0.5, clipped at the
/// image border.
Image cutout_at(const Image& img, int cy, int cx, int side);

/// Draw order: center y, center x (uniform over all pixels). side < 0
/// selects the default floor(H/2).
Image cutout(const Image& img, Rng& rng, int side = -1);

// --- exact rotations for the self-supervised task --------------------------

/// Counterclockwise rotation by r*90 degrees, r in {0,1,2,3}. Lossless pixel
/// permutation; square images only.
Image rotate90(const Image& img, int r);

/// Rescales the content about the image center (bilinear, zero fill).
/// factor < 1 shrinks the content. Used by the analysis probes.
Image scale_image(const Image& img, float factor);

/// P6 binary PPM, maxval 255.
void write_ppm(const std::string& path, const Image& img);

} // namespace crmatch
