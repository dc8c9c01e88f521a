#pragma once

#include <string>
#include <vector>

#include "crmatch/data.hpp"
#include "crmatch/model.hpp"

namespace crmatch {

enum class ProbeTransform { Translation, Scaling, Rotation, ColorJitter, StrongVsWeak };

const char* probe_transform_name(ProbeTransform t);
ProbeTransform parse_probe_transform(const std::string& name);

/// Binary "was this augmentation applied" probe: a linear hinge-loss
/// classifier trained by SGD on frozen features.
struct ProbeConfig {
    ProbeTransform transform = ProbeTransform::StrongVsWeak;
    double train_fraction = 0.1; // image-level train/validation split
    double lr = 0.001;
    int epochs = 50;
    uint64_t seed = 1;
    bool pooled_features = true; // pooled vector vs flattened un-pooled map

    // fixed probe magnitudes
    int translate_px = 4;
    float scale_factor = 0.8f;
    float rotate_deg = 15.0f;
    float brightness = 0.5f;
};

/// Held-out error of the probe. The encoder is never mutated.
double equivariance_probe(const ModelState<float>& model, const std::vector<Image>& images,
                          const ProbeConfig& cfg);

/// Probe core on precomputed per-image feature pairs: class -1 is view0,
/// class +1 is view1. Split/training behavior as in equivariance_probe.
double linear_probe_error(const std::vector<std::vector<float>>& view0,
                          const std::vector<std::vector<float>>& view1,
                          const ProbeConfig& cfg);

struct DistanceStats {
    double mean = 0.0;
    double stddev = 0.0;
};

/// Mean/stddev cosine distances between classifier-input features of
/// (weak, original), (strong, original) and (weak, strong) pairs over the
/// first n images.
struct FeatureDistanceStats {
    DistanceStats weak_orig;
    DistanceStats strong_orig;
    DistanceStats weak_strong;
};

FeatureDistanceStats feature_distance_stats(const ModelState<float>& model,
                                            const std::vector<Image>& images, int n,
                                            uint64_t seed);

/// Binary export: magic "FEAT", u32 count, u32 dim, count*dim little-endian
/// f32 features, then count u32 labels.
void export_features(const ModelState<float>& model, const std::vector<Image>& images,
                     const std::vector<int>& labels, const std::string& path);

struct FeatureFile {
    int dim = 0;
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
};

FeatureFile read_features(const std::string& path);

/// Pooled (or flattened un-pooled) encoder features for a set of images,
/// computed without recording gradients.
std::vector<std::vector<float>> encode_images(const ModelState<float>& model,
                                              const std::vector<Image>& images,
                                              bool pooled = true);

} // namespace crmatch
