#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "crmatch/data.hpp"
#include "crmatch/probe.hpp"

using namespace crmatch;

namespace {

std::vector<Image> probe_images(int n) {
    SyntheticSpec spec;
    spec.num_classes = 4;
    spec.samples_per_class = (n + 3) / 4;
    spec.seed = 1234;
    auto d = generate_synthetic(spec);
    d.images.resize(static_cast<size_t>(n));
    return d.images;
}

ModelState<float> tiny_model(uint64_t seed) {
    ModelConfig mc;
    mc.input_size = 32;
    mc.width = 2;
    mc.num_classes = 4;
    mc.proj_dim = 8;
    return init_model<float>(mc, seed);
}

} // namespace

TEST_CASE("probe reaches zero error on linearly separable features") {
    Rng rng(1);
    std::vector<std::vector<float>> v0, v1;
    for (int i = 0; i < 40; ++i) {
        std::vector<float> a(6), b(6);
        for (int d = 0; d < 6; ++d) {
            a[static_cast<size_t>(d)] = static_cast<float>(rng.uniform(-1, 1));
            b[static_cast<size_t>(d)] = a[static_cast<size_t>(d)];
        }
        b[0] += 5.0f; // large margin along one axis
        v0.push_back(a);
        v1.push_back(b);
    }
    ProbeConfig cfg;
    cfg.train_fraction = 0.5;
    cfg.epochs = 50;
    cfg.lr = 0.01;
    CHECK(linear_probe_error(v0, v1, cfg) == 0.0);
}

TEST_CASE("probe sits at chance when the views are indistinguishable") {
    Rng rng(2);
    std::vector<std::vector<float>> v0;
    for (int i = 0; i < 30; ++i) {
        std::vector<float> a(5);
        for (auto& x : a) x = static_cast<float>(rng.uniform(-1, 1));
        v0.push_back(a);
    }
    ProbeConfig cfg;
    cfg.train_fraction = 0.3;
    CHECK(linear_probe_error(v0, v0, cfg) == doctest::Approx(0.5));
}

TEST_CASE("probe rejects a fully degenerate feature set") {
    std::vector<std::vector<float>> v0(10, std::vector<float>(4, 0.5f));
    ProbeConfig cfg;
    CHECK_THROWS_WITH_AS(linear_probe_error(v0, v0, cfg), doctest::Contains("degenerate"),
                         Error);
}

TEST_CASE("equivariance probe is deterministic and leaves the model untouched") {
    auto model = tiny_model(3);
    auto images = probe_images(40);

    std::vector<float> before;
    for (const auto& [name, t] : model.params)
        before.insert(before.end(), t.vals().begin(), t.vals().end());

    ProbeConfig cfg;
    cfg.transform = ProbeTransform::StrongVsWeak;
    cfg.train_fraction = 0.25;
    cfg.epochs = 10;
    cfg.seed = 9;
    const double e1 = equivariance_probe(model, images, cfg);
    const double e2 = equivariance_probe(model, images, cfg);
    CHECK(e1 == e2);
    CHECK(e1 >= 0.0);
    CHECK(e1 <= 1.0);

    std::vector<float> after;
    for (const auto& [name, t] : model.params)
        after.insert(after.end(), t.vals().begin(), t.vals().end());
    CHECK(before == after);

    for (ProbeTransform tr : {ProbeTransform::Translation, ProbeTransform::Scaling,
                              ProbeTransform::Rotation, ProbeTransform::ColorJitter}) {
        cfg.transform = tr;
        cfg.epochs = 3;
        CHECK_NOTHROW(equivariance_probe(model, images, cfg));
    }
    CHECK(parse_probe_transform("strong-vs-weak") == ProbeTransform::StrongVsWeak);
    CHECK_THROWS_AS(parse_probe_transform("blur"), ConfigError);
}

TEST_CASE("feature distance stats are deterministic with sane ranges") {
    auto model = tiny_model(4);
    auto images = probe_images(30);
    auto s1 = feature_distance_stats(model, images, 20, 7);
    auto s2 = feature_distance_stats(model, images, 20, 7);
    CHECK(s1.weak_orig.mean == s2.weak_orig.mean);
    CHECK(s1.strong_orig.stddev == s2.strong_orig.stddev);
    for (const auto& st : {s1.weak_orig, s1.strong_orig, s1.weak_strong}) {
        CHECK(st.mean >= 0.0);
        CHECK(st.mean <= 2.0);
        CHECK(st.stddev >= 0.0);
    }
    // weak crops perturb an untrained encoder's features only slightly
    CHECK(s1.weak_orig.mean < 0.5);
    CHECK_THROWS_AS(feature_distance_stats(model, images, 31, 7), Error);
}

TEST_CASE("feature export writes the documented binary layout") {
    ModelConfig mc; // default width 16 -> 64-d pooled features
    mc.num_classes = 4;
    auto model = init_model<float>(mc, 5);
    auto images = probe_images(10);
    std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3, 0, 1};

    const std::string path =
        (std::filesystem::temp_directory_path() / "crmatch_feat.bin").string();
    export_features(model, images, labels, path);

    // magic(4) + count(4) + dim(4) + 10*64 floats + 10 labels
    CHECK(std::filesystem::file_size(path) == 12 + 10 * 64 * 4 + 10 * 4);

    auto file = read_features(path);
    CHECK(file.dim == 64);
    REQUIRE(file.rows.size() == 10);
    CHECK(file.labels == labels);

    auto direct = encode_images(model, images, true);
    for (size_t i = 0; i < 10; ++i) CHECK(file.rows[i] == direct[i]); // exact round trip

    // empty input: count=0 file is valid
    export_features(model, {}, {}, path);
    auto empty = read_features(path);
    CHECK(empty.rows.empty());
    CHECK(empty.labels.empty());
    std::filesystem::remove(path);
}
