#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "crmatch/gradcheck.hpp"
#include "crmatch/losses.hpp"
#include "crmatch/model.hpp"

using namespace crmatch;

namespace {

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.input_size = 8;
    cfg.width = 2;
    cfg.num_classes = 3;
    cfg.proj_dim = 4;
    return cfg;
}

template <typename T>
Tensor<T> random_batch(uint64_t seed, int n, int size) {
    Rng rng(seed);
    std::vector<T> data(static_cast<size_t>(n) * 3 * size * size);
    for (auto& v : data) v = static_cast<T>(rng.uniform());
    return tensor_of<T>({n, 3, size, size}, std::move(data));
}

} // namespace

TEST_CASE("init is deterministic and shapes line up") {
    auto a = init_model<float>(small_cfg(), 5);
    auto b = init_model<float>(small_cfg(), 5);
    REQUIRE(a.params.size() == b.params.size());
    for (size_t i = 0; i < a.params.size(); ++i) {
        CHECK(a.params[i].first == b.params[i].first);
        CHECK(a.params[i].second.vals() == b.params[i].second.vals());
    }
    auto c = init_model<float>(small_cfg(), 6);
    CHECK(a.param("enc.conv1.w").vals() != c.param("enc.conv1.w").vals());
    CHECK(a.param("cls.w").shape == Shape{8, 3});
    CHECK(a.param("proj.w").shape == Shape{8, 4}); // placement (a): 4w * (s/8)^2 = 8
}

TEST_CASE("forward produces the full bundle with contract shapes") {
    auto m = init_model<float>(small_cfg(), 1);
    auto batch = random_batch<float>(2, 5, 8);
    Tape<float> tape(false);
    auto fb = forward(tape, m, batch);
    CHECK(fb.feat_a.shape == Shape{5, 8, 1, 1});
    CHECK(fb.feat_b.shape == Shape{5, 8});
    CHECK(fb.logits.shape == Shape{5, 3});
    CHECK(fb.proj.shape == Shape{5, 4});

    CHECK_THROWS_AS(forward(tape, m, random_batch<float>(2, 2, 16)), Error);
}

TEST_CASE("constant-zero input gives a bias-driven constant bundle") {
    auto m = init_model<float>(small_cfg(), 2);
    auto batch = zeros<float>({4, 3, 8, 8});
    Tape<float> tape(false);
    auto fb = forward(tape, m, batch);
    for (int i = 1; i < 4; ++i)
        for (int c = 0; c < 8; ++c)
            CHECK(fb.feat_b.vals()[static_cast<size_t>(i) * 8 + c] ==
                  fb.feat_b.vals()[static_cast<size_t>(c)]);
}

TEST_CASE("identical images produce identical logits rows") {
    auto m = init_model<float>(small_cfg(), 3);
    auto one = random_batch<float>(9, 1, 8);
    std::vector<float> two_data = one.vals();
    two_data.insert(two_data.end(), one.vals().begin(), one.vals().end());
    auto two = tensor_of<float>({2, 3, 8, 8}, std::move(two_data));
    Tape<float> tape(false);
    auto fb = forward(tape, m, two);
    for (int c = 0; c < 3; ++c)
        CHECK(fb.logits.vals()[static_cast<size_t>(c)] ==
              fb.logits.vals()[static_cast<size_t>(3 + c)]);
}

TEST_CASE("batch forward equals concatenated per-sample forward") {
    auto m = init_model<float>(small_cfg(), 4);
    auto batch = random_batch<float>(10, 3, 8);
    Tape<float> tape(false);
    auto fb = forward(tape, m, batch);
    for (int i = 0; i < 3; ++i) {
        std::vector<float> single(batch.vals().begin() + static_cast<long>(i) * 3 * 64,
                                  batch.vals().begin() + static_cast<long>(i + 1) * 3 * 64);
        auto sb = forward(tape, m, tensor_of<float>({1, 3, 8, 8}, std::move(single)));
        for (int c = 0; c < 3; ++c)
            CHECK(fb.logits.vals()[static_cast<size_t>(i) * 3 + c] ==
                  doctest::Approx(sb.logits.vals()[static_cast<size_t>(c)]).epsilon(1e-6));
    }
}

TEST_CASE("projection is linear in the encoder output at init (zero biases)") {
    auto m = init_model<float>(small_cfg(), 7);
    Rng rng(13);
    std::vector<float> a(16), b(16);
    for (auto& v : a) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : b) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> ab(16);
    for (size_t i = 0; i < 16; ++i) ab[i] = a[i] + b[i];

    Tape<float> tape(false);
    auto pw = m.param("proj.w");
    auto pa = matmul(tape, tensor_of<float>({2, 8}, std::move(a)), pw);
    auto pb = matmul(tape, tensor_of<float>({2, 8}, std::move(b)), pw);
    auto pab = matmul(tape, tensor_of<float>({2, 8}, std::move(ab)), pw);
    for (size_t i = 0; i < pab.vals().size(); ++i)
        CHECK(pab.vals()[i] == doctest::Approx(pa.vals()[i] + pb.vals()[i]).epsilon(1e-5));
}

TEST_CASE("rot_forward emits 4-way logits deterministically") {
    auto m = init_model<float>(small_cfg(), 8);
    auto batch = random_batch<float>(3, 4, 8);
    Tape<float> tape(false);
    auto fb = forward(tape, m, batch);
    auto r1 = rot_forward(tape, m, fb.feat_b);
    auto r2 = rot_forward(tape, m, fb.feat_b);
    CHECK(r1.shape == Shape{4, 4});
    CHECK(r1.vals() == r2.vals());
    CHECK_THROWS_AS(rot_forward(tape, m, zeros<float>({4, 5})), Error);
}

TEST_CASE("rotation-head cross-entropy gradient passes the finite-difference oracle") {
    auto m = init_model<double>(small_cfg(), 9);
    auto batch = random_batch<double>(4, 2, 8);
    std::vector<Tensor<double>> leaves = {m.param("rot.fc1.w"), m.param("rot.fc1.b"),
                                          m.param("rot.fc2.w"), m.param("rot.fc2.b")};
    LossBuilder builder = [&m, &batch](Tape<double>& tp, std::vector<Tensor<double>>&) {
        auto fb = forward(tp, m, batch);
        auto rl = rot_forward(tp, m, fb.feat_b);
        return rotation_loss(tp, rl, {1, 3});
    };
    CHECK(grad_check(builder, leaves) < 1e-4);
}

TEST_CASE("ema update arithmetic and closed form") {
    ModelConfig cfg = small_cfg();
    auto m = init_model<float>(cfg, 10);
    auto& p = m.param("cls.b");
    std::fill(p.vals().begin(), p.vals().end(), 2.0f);
    auto ema = make_ema(m, 0.9);
    for (auto& [name, t] : ema.shadow)
        if (name == "cls.b") std::fill(t.vals().begin(), t.vals().end(), 1.0f);

    ema_update(ema, m, 0.9);
    CHECK(ema.param("cls.b").vals()[0] == doctest::Approx(1.1f));
    CHECK(m.param("cls.b").vals()[0] == 2.0f); // model untouched

    // decay -> 1 limit: shadow unchanged
    auto ema2 = make_ema(m, 0.999);
    for (auto& [name, t] : ema2.shadow)
        if (name == "cls.b") std::fill(t.vals().begin(), t.vals().end(), 1.0f);
    ema_update(ema2, m, 1.0 - 1e-9);
    CHECK(ema2.param("cls.b").vals()[0] == doctest::Approx(1.0f).epsilon(1e-6));

    // after k updates with constant param p: shadow = p + d^k (s0 - p)
    auto ema3 = make_ema(m, 0.9);
    for (auto& [name, t] : ema3.shadow)
        if (name == "cls.b") std::fill(t.vals().begin(), t.vals().end(), 5.0f);
    const int k = 100;
    for (int i = 0; i < k; ++i) ema_update(ema3, m, 0.9);
    const double expect = 2.0 + std::pow(0.9, k) * (5.0 - 2.0);
    CHECK(ema3.param("cls.b").vals()[0] == doctest::Approx(expect).epsilon(1e-7));

    CHECK_THROWS_AS(ema_update(ema, m, 1.5), Error);
}

TEST_CASE("checkpoint round trip preserves every tensor bit-exactly") {
    auto m = init_model<float>(small_cfg(), 11);
    auto ema = make_ema(m, 0.999);
    m.param("cls.b").vals()[0] = 0.25f; // make raw differ from the shadow

    const std::string path =
        (std::filesystem::temp_directory_path() / "crmatch_test.ckpt").string();
    save_checkpoint(path, m, ema);

    auto m2 = init_model<float>(small_cfg(), 99);
    auto ema2 = make_ema(m2, 0.999);
    load_checkpoint(path, m2, ema2);
    for (size_t i = 0; i < m.params.size(); ++i)
        CHECK(m2.params[i].second.vals() == m.params[i].second.vals());
    for (size_t i = 0; i < ema.shadow.size(); ++i)
        CHECK(ema2.shadow[i].second.vals() == ema.shadow[i].second.vals());

    FILE* f = std::fopen(path.c_str(), "rb");
    REQUIRE(f);
    char magic[4];
    REQUIRE(std::fread(magic, 1, 4, f) == 4);
    std::fclose(f);
    CHECK(std::string(magic, 4) == "CRMT");
    std::filesystem::remove(path);

    CHECK_THROWS_AS(read_checkpoint("/nonexistent/nope.ckpt"), Error);
}

TEST_CASE("placement and head variants change the projection path") {
    ModelConfig cfg = small_cfg();
    cfg.placement = DistPlacement::B;
    cfg.proj_head = ProjHead::None;
    auto m = init_model<float>(cfg, 12);
    Tape<float> tape(false);
    auto fb = forward(tape, m, random_batch<float>(14, 2, 8));
    CHECK(fb.proj.shape == Shape{2, 8}); // proj == feat_b when head is none at (b)
    CHECK(fb.proj.vals() == fb.feat_b.vals());

    cfg.proj_head = ProjHead::Mlp;
    auto m2 = init_model<float>(cfg, 13);
    auto fb2 = forward(tape, m2, random_batch<float>(14, 2, 8));
    CHECK(fb2.proj.shape == Shape{2, 4});
}
