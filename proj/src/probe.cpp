#include "crmatch/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "crmatch/ops.hpp"
#include "crmatch/rng.hpp"

namespace crmatch {

namespace {

constexpr uint64_t kTagProbeAug = 21;
constexpr uint64_t kTagProbeSplit = 22;
constexpr uint64_t kTagProbeEpoch = 23;

void shuffle_with(std::vector<int>& v, Rng rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = rng.uniform_int(static_cast<uint32_t>(i));
        std::swap(v[i - 1], v[j]);
    }
}

std::vector<std::vector<float>> encode_batched(const ModelState<float>& model,
                                               const std::vector<Image>& images,
                                               bool pooled) {
    std::vector<std::vector<float>> out;
    out.reserve(images.size());
    ModelState<float> m = model; // handle copy; forward only reads
    Tape<float> tape(false);
    constexpr size_t kChunk = 128;
    for (size_t start = 0; start < images.size(); start += kChunk) {
        const size_t end = std::min(images.size(), start + kChunk);
        auto batch = images_to_tensor<float>(
            std::span<const Image>(images.data() + start, end - start));
        auto fb = forward(tape, m, batch);
        const Tensor<float>& feat =
            pooled ? fb.feat_b : flatten(tape, fb.feat_a);
        const int dim = feat.shape[1];
        for (size_t i = 0; i < end - start; ++i)
            out.emplace_back(feat.data() + i * static_cast<size_t>(dim),
                             feat.data() + (i + 1) * static_cast<size_t>(dim));
    }
    return out;
}

double cosine_distance(const std::vector<float>& a, const std::vector<float>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    return 1.0 - dot / std::sqrt(na * nb + 1e-30);
}

DistanceStats stats_of(const std::vector<double>& v) {
    DistanceStats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double acc = 0.0;
        for (double x : v) acc += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    return s;
}

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail("truncated feature file '", path, "'");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

const char* probe_transform_name(ProbeTransform t) {
    switch (t) {
    case ProbeTransform::Translation: return "translation";
    case ProbeTransform::Scaling: return "scaling";
    case ProbeTransform::Rotation: return "rotation";
    case ProbeTransform::ColorJitter: return "color_jitter";
    case ProbeTransform::StrongVsWeak: return "strong-vs-weak";
    }
    return "?";
}

ProbeTransform parse_probe_transform(const std::string& name) {
    for (ProbeTransform t : {ProbeTransform::Translation, ProbeTransform::Scaling,
                             ProbeTransform::Rotation, ProbeTransform::ColorJitter,
                             ProbeTransform::StrongVsWeak})
        if (name == probe_transform_name(t)) return t;
    fail_config("unknown probe transform '", name, "'");
}

std::vector<std::vector<float>> encode_images(const ModelState<float>& model,
                                              const std::vector<Image>& images,
                                              bool pooled) {
    return encode_batched(model, images, pooled);
}

double equivariance_probe(const ModelState<float>& model, const std::vector<Image>& images,
                          const ProbeConfig& cfg) {
    if (images.size() < 10) fail("equivariance_probe: need at least 10 images");
    if (cfg.lr <= 0.0 || cfg.epochs < 1) fail("equivariance_probe: bad lr/epochs");

    // class 0: original view (weak view for strong-vs-weak); class 1: transformed
    std::vector<Image> view0, view1;
    view0.reserve(images.size());
    view1.reserve(images.size());
    const Rng root(cfg.seed);
    for (size_t i = 0; i < images.size(); ++i) {
        const Image& img = images[i];
        switch (cfg.transform) {
        case ProbeTransform::Translation:
            view0.push_back(img);
            view1.push_back(apply_transform(
                img, TransformKind::TranslateX,
                static_cast<float>(cfg.translate_px) / static_cast<float>(img.width)));
            break;
        case ProbeTransform::Scaling:
            view0.push_back(img);
            view1.push_back(scale_image(img, cfg.scale_factor));
            break;
        case ProbeTransform::Rotation:
            view0.push_back(img);
            view1.push_back(apply_transform(img, TransformKind::Rotate, cfg.rotate_deg));
            break;
        case ProbeTransform::ColorJitter:
            view0.push_back(img);
            view1.push_back(apply_transform(img, TransformKind::Brightness, cfg.brightness));
            break;
        case ProbeTransform::StrongVsWeak: {
            Rng rw = root.stream({kTagProbeAug, i, 0});
            Rng rs = root.stream({kTagProbeAug, i, 1});
            view0.push_back(weak_augment(img, rw));
            view1.push_back(strong_augment(img, rs));
            break;
        }
        }
    }

    auto feats0 = encode_batched(model, view0, cfg.pooled_features);
    auto feats1 = encode_batched(model, view1, cfg.pooled_features);
    return linear_probe_error(feats0, feats1, cfg);
}

double linear_probe_error(const std::vector<std::vector<float>>& view0,
                          const std::vector<std::vector<float>>& view1,
                          const ProbeConfig& cfg) {
    if (view0.size() != view1.size() || view0.empty())
        fail("linear_probe_error: need equally many features per view");
    const size_t dim = view0[0].size();
    const Rng root(cfg.seed);

    // degenerate-feature guard
    double spread = 0.0;
    for (size_t i = 1; i < view0.size(); ++i)
        for (size_t d = 0; d < dim; ++d) spread += std::fabs(view0[i][d] - view0[0][d]);
    for (size_t i = 0; i < view1.size(); ++i)
        for (size_t d = 0; d < dim; ++d) spread += std::fabs(view1[i][d] - view0[0][d]);
    if (spread == 0.0)
        fail("equivariance probe: degenerate feature set (all features identical); "
             "the encoder maps every view to the same point");

    // image-level split keeps both views of an image on the same side
    std::vector<int> order(view0.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    shuffle_with(order, root.stream({kTagProbeSplit}));
    const size_t n_train = std::max<size_t>(
        1, static_cast<size_t>(std::llround(cfg.train_fraction * view0.size())));

    struct Sample {
        const std::vector<float>* x;
        int y; // -1: original view, +1: transformed view
    };
    std::vector<Sample> train, val;
    for (size_t pos = 0; pos < order.size(); ++pos) {
        const auto img = static_cast<size_t>(order[pos]);
        auto& dst = pos < n_train ? train : val;
        dst.push_back({&view0[img], -1});
        dst.push_back({&view1[img], +1});
    }
    if (val.empty()) fail("equivariance probe: empty validation split");

    // linear hinge classifier trained by plain SGD
    std::vector<double> w(dim, 0.0);
    double bias = 0.0;
    std::vector<int> idx(train.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_with(idx, root.stream({kTagProbeEpoch, static_cast<uint64_t>(epoch)}));
        for (int i : idx) {
            const Sample& s = train[static_cast<size_t>(i)];
            double score = bias;
            for (size_t d = 0; d < dim; ++d) score += w[d] * (*s.x)[d];
            if (s.y * score < 1.0) {
                for (size_t d = 0; d < dim; ++d) w[d] += cfg.lr * s.y * (*s.x)[d];
                bias += cfg.lr * s.y;
            }
        }
    }

    size_t wrong = 0;
    for (const Sample& s : val) {
        double score = bias;
        for (size_t d = 0; d < dim; ++d) score += w[d] * (*s.x)[d];
        const int pred = score >= 0.0 ? +1 : -1;
        if (pred != s.y) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(val.size());
}

FeatureDistanceStats feature_distance_stats(const ModelState<float>& model,
                                            const std::vector<Image>& images, int n,
                                            uint64_t seed) {
    if (n < 1 || static_cast<size_t>(n) > images.size())
        fail("feature_distance_stats: n must be in [1, ", images.size(), "], got ", n);

    std::vector<Image> orig(images.begin(), images.begin() + n);
    std::vector<Image> weak, strong;
    weak.reserve(static_cast<size_t>(n));
    strong.reserve(static_cast<size_t>(n));
    const Rng root(seed);
    for (int i = 0; i < n; ++i) {
        Rng rw = root.stream({kTagProbeAug, static_cast<uint64_t>(i), 2});
        Rng rs = root.stream({kTagProbeAug, static_cast<uint64_t>(i), 3});
        weak.push_back(weak_augment(images[static_cast<size_t>(i)], rw));
        strong.push_back(strong_augment(images[static_cast<size_t>(i)], rs));
    }

    // classifier-input space: pooled features
    auto fo = encode_batched(model, orig, true);
    auto fw = encode_batched(model, weak, true);
    auto fs = encode_batched(model, strong, true);

    std::vector<double> dwo, dso, dws;
    for (int i = 0; i < n; ++i) {
        dwo.push_back(cosine_distance(fw[static_cast<size_t>(i)], fo[static_cast<size_t>(i)]));
        dso.push_back(cosine_distance(fs[static_cast<size_t>(i)], fo[static_cast<size_t>(i)]));
        dws.push_back(cosine_distance(fw[static_cast<size_t>(i)], fs[static_cast<size_t>(i)]));
    }
    FeatureDistanceStats out;
    out.weak_orig = stats_of(dwo);
    out.strong_orig = stats_of(dso);
    out.weak_strong = stats_of(dws);
    return out;
}

void export_features(const ModelState<float>& model, const std::vector<Image>& images,
                     const std::vector<int>& labels, const std::string& path) {
    if (images.size() != labels.size())
        fail("export_features: ", images.size(), " images vs ", labels.size(), " labels");
    std::ofstream f(path, std::ios::binary);
    if (!f) fail("cannot open '", path, "' for writing");

    std::vector<std::vector<float>> feats;
    int dim = 0;
    if (!images.empty()) {
        feats = encode_batched(model, images, true);
        dim = static_cast<int>(feats[0].size());
    }
    f.write("FEAT", 4);
    put_u32(f, static_cast<uint32_t>(images.size()));
    put_u32(f, static_cast<uint32_t>(dim));
    for (const auto& row : feats)
        for (float v : row) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(f, bits);
        }
    for (int l : labels) put_u32(f, static_cast<uint32_t>(l));
    if (!f) fail("failed writing '", path, "'");
}

FeatureFile read_features(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail("cannot open '", path, "'");
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, "FEAT", 4) != 0)
        fail("'", path, "' is not a feature file");
    FeatureFile out;
    const uint32_t count = get_u32(f, path);
    out.dim = static_cast<int>(get_u32(f, path));
    out.rows.resize(count);
    for (auto& row : out.rows) {
        row.resize(static_cast<size_t>(out.dim));
        for (auto& v : row) {
            const uint32_t bits = get_u32(f, path);
            std::memcpy(&v, &bits, 4);
        }
    }
    out.labels.resize(count);
    for (auto& l : out.labels) l = static_cast<int>(get_u32(f, path));
    return out;
}

} // namespace crmatch
