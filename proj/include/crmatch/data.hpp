#pragma once

#include <string>
#include <vector>

#include "crmatch/augment.hpp"

namespace crmatch {

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> class_names;

    size_t size() const { return images.size(); }
};

/// Procedurally rendered shape-classification set. Each sample is a colored
/// shape on a noisy background with a fixed vertical luminance gradient (the
/// gradient keeps 90-degree rotations distinguishable regardless of shape
/// symmetry). Shape color, position, scale and orientation jitter per
/// sample; class identity is carried by the silhouette only.
struct SyntheticSpec {
    int num_classes = 4;
    int samples_per_class = 504;
    int image_size = 32;
    float pos_jitter = 0.15f;      // center offset, fraction of image size
    float base_half_size = 0.30f;  // shape half-extent, fraction of image size
    float scale_lo = 0.75f;        // scale jitter relative to base_half_size
    float scale_hi = 1.25f;
    float rot_jitter_deg = 15.0f;
    float noise = 0.06f;           // background noise amplitude
    uint64_t seed = 1;
};

int max_synthetic_classes();

Dataset generate_synthetic(const SyntheticSpec& spec);

/// CIFAR-10 binary batches: records of 1 label byte + 3072 RGB-plane bytes,
/// pixels mapped to [0,1] by v/255.
Dataset read_cifar_binary(const std::string& path);

} // namespace crmatch
