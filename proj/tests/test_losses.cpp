#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "crmatch/gradcheck.hpp"
#include "crmatch/losses.hpp"

using namespace crmatch;

namespace {

using TensorD = Tensor<double>;

TensorD vec(std::vector<double> v, bool rg = false) {
    Shape s = {static_cast<int>(v.size())};
    return tensor_of<double>(s, std::move(v), rg);
}

double eval_metric(DistanceMetric m, const std::vector<double>& a,
                   const std::vector<double>& b) {
    Tape<double> tape(false);
    auto av = vec(std::vector<double>(a)), bv = vec(std::vector<double>(b));
    return metric_eval(tape, m, av, bv).item();
}

TensorD rand_vec(Rng& rng, int n, double offset = 0.0) {
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = offset + rng.uniform(-1.0, 1.0);
    return vec(std::move(v));
}

} // namespace

TEST_CASE("metric identities on identical inputs") {
    const std::vector<double> v = {0.3, -1.2, 0.7, 2.0};
    CHECK(eval_metric(DistanceMetric::CosineSimilarity, v, v) == doctest::Approx(1.0));
    CHECK(eval_metric(DistanceMetric::CosineDistance, v, v) == doctest::Approx(0.0));
    CHECK(eval_metric(DistanceMetric::L2Distance, v, v) == doctest::Approx(0.0));
    CHECK(eval_metric(DistanceMetric::JsDivergence, v, v) == doctest::Approx(0.0));
    CHECK(eval_metric(DistanceMetric::L2Similarity, v, v) == doctest::Approx(0.0));
}

TEST_CASE("cosine similarity of orthogonal vectors is zero") {
    CHECK(eval_metric(DistanceMetric::CosineSimilarity, {1.0, 0.0}, {0.0, 1.0}) ==
          doctest::Approx(0.0));
}

TEST_CASE("js divergence hits ln 2 on (nearly) disjoint distributions") {
    // logits with a 60-nat gap: softmax puts ~1e-26 mass off the peak
    const std::vector<double> d0 = {60.0, 0.0};
    const std::vector<double> d1 = {0.0, 60.0};
    const double js = eval_metric(DistanceMetric::JsDivergence, d0, d1);
    CHECK(std::abs(js - std::log(2.0)) < 1e-9);
    CHECK(eval_metric(DistanceMetric::NegativeJs, d0, d1) == doctest::Approx(-js));
}

TEST_CASE("metric symmetry and polarity pairs") {
    Rng rng(31);
    for (int round = 0; round < 10; ++round) {
        auto a = rand_vec(rng, 8, 0.5), b = rand_vec(rng, 8, -0.5);
        Tape<double> tape(false);
        for (DistanceMetric m : kAllMetrics) {
            const double ab = metric_eval(tape, m, a, b).item();
            const double ba = metric_eval(tape, m, b, a).item();
            INFO(metric_name(m));
            CHECK(ab == doctest::Approx(ba).epsilon(1e-12));
        }
        const double cs = metric_eval(tape, DistanceMetric::CosineSimilarity, a, b).item();
        const double cd = metric_eval(tape, DistanceMetric::CosineDistance, a, b).item();
        CHECK(cs + cd == doctest::Approx(1.0).epsilon(1e-12));
        const double js = metric_eval(tape, DistanceMetric::JsDivergence, a, b).item();
        const double nj = metric_eval(tape, DistanceMetric::NegativeJs, a, b).item();
        CHECK(js + nj == 0.0);
        CHECK(js >= 0.0);
        CHECK(js <= std::log(2.0) + 1e-12);
        const double ls = metric_eval(tape, DistanceMetric::L2Similarity, a, b).item();
        CHECK(ls <= 0.0);
        CHECK(ls >= -2.0 - 1e-12);
    }
}

TEST_CASE("metric polarity classification") {
    CHECK(metric_imposes_equivariance(DistanceMetric::CosineSimilarity));
    CHECK(metric_imposes_equivariance(DistanceMetric::L2Similarity));
    CHECK(metric_imposes_equivariance(DistanceMetric::NegativeJs));
    CHECK(!metric_imposes_equivariance(DistanceMetric::CosineDistance));
    CHECK(!metric_imposes_equivariance(DistanceMetric::L2Distance));
    CHECK(!metric_imposes_equivariance(DistanceMetric::JsDivergence));
    CHECK(parse_metric("none") == std::nullopt);
    CHECK(parse_metric("l2_similarity") == DistanceMetric::L2Similarity);
    CHECK_THROWS_AS(parse_metric("manhattan"), ConfigError);
}

TEST_CASE("cosine metrics reject zero vectors") {
    Tape<double> tape(false);
    auto z = vec({0.0, 0.0, 0.0});
    auto v = vec({1.0, 2.0, 3.0});
    CHECK_THROWS_WITH_AS(metric_eval(tape, DistanceMetric::CosineSimilarity, z, v),
                         doctest::Contains("zero vector"), Error);
    CHECK_THROWS_AS(metric_eval(tape, DistanceMetric::CosineDistance, v, z), Error);
    // length-mismatch and short-vector errors
    auto w = vec({1.0, 2.0});
    CHECK_THROWS_AS(metric_eval(tape, DistanceMetric::L2Distance, v, w), Error);
}

TEST_CASE("all six metrics pass the finite-difference oracle on random 8-d inputs") {
    for (DistanceMetric m : kAllMetrics) {
        double worst = 0.0;
        for (uint64_t round = 0; round < 20; ++round) {
            Rng rng = Rng(900 + round).stream({static_cast<uint64_t>(m)});
            std::vector<TensorD> leaves(2);
            for (auto& leaf : leaves) {
                leaf = rand_vec(rng, 8, rng.bernoulli(0.5) ? 1.0 : -1.0);
                leaf.requires_grad = true;
                leaf.grad = std::make_shared<std::vector<double>>(8, 0.0);
            }
            LossBuilder builder = [m](Tape<double>& tp, std::vector<TensorD>& l) {
                return metric_eval(tp, m, l[0], l[1]);
            };
            worst = std::max(worst, grad_check(builder, leaves));
        }
        INFO(metric_name(m));
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("feat_dist_loss on identical projections") {
    Tape<double> tape(false);
    auto p = tensor_of<double>({2, 4}, {1, 2, 3, 4, -1, 0.5, 2, 1});
    CHECK(feat_dist_loss(tape, DistanceMetric::CosineDistance, p, p).item() ==
          doctest::Approx(0.0));
    CHECK(feat_dist_loss(tape, DistanceMetric::CosineSimilarity, p, p).item() ==
          doctest::Approx(1.0));
}

TEST_CASE("supervised loss matches analytic cross-entropy values") {
    Tape<double> tape(false);
    auto uniform = zeros<double>({3, 10});
    CHECK(supervised_loss(tape, uniform, {0, 5, 9}).item() ==
          doctest::Approx(std::log(10.0)).epsilon(1e-9));

    auto pair = tensor_of<double>({1, 2}, {1.0, 0.0});
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(supervised_loss(tape, pair, {0}).item() == doctest::Approx(expect).epsilon(1e-9));

    auto sharp = tensor_of<double>({1, 4}, {80.0, 0.0, 0.0, 0.0});
    CHECK(supervised_loss(tape, sharp, {0}).item() == doctest::Approx(0.0).epsilon(1e-9));

    CHECK_THROWS_AS(supervised_loss(tape, uniform, {0, 5, 10}), Error);
}

TEST_CASE("pseudo labels carry argmax and confidence") {
    // softmax of log(p) recovers p exactly
    auto logits = tensor_of<double>(
        {1, 3}, {std::log(0.97), std::log(0.02), std::log(0.01)});
    auto pls = pseudo_labels(logits);
    REQUIRE(pls.size() == 1);
    CHECK(pls[0].label == 0);
    CHECK(pls[0].confidence == doctest::Approx(0.97).epsilon(1e-9));
    CHECK(pls[0].one_hot == std::vector<float>{1.0f, 0.0f, 0.0f});
}

TEST_CASE("pseudo-label loss: uniform strong logits cost ln C") {
    Tape<double> tape(false);
    auto weak = tensor_of<double>({2, 5}, {0, 0, 9, 0, 0, 0, 0, 9, 0, 0});
    auto strong = zeros<double>({2, 5});
    auto [loss, pls] = pseudo_label_loss(tape, weak, strong);
    CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-9));
    CHECK(pls[0].label == 2);

    // aligned, sharply confident strong logits drive the loss to zero
    auto aligned = tensor_of<double>({2, 5}, {0, 0, 80, 0, 0, 0, 0, 80, 0, 0});
    CHECK(pseudo_label_loss(tape, weak, aligned).first.item() ==
          doctest::Approx(0.0).epsilon(1e-9));

    CHECK_THROWS_AS(pseudo_label_loss(tape, weak, zeros<double>({2, 4})), Error);
}

namespace {

/// Minimal hand-built bundle: logits plus projections.
FeatureBundle<double> bundle_of(Tensor<double> logits, Tensor<double> proj) {
    FeatureBundle<double> fb;
    fb.logits = std::move(logits);
    fb.proj = std::move(proj);
    return fb;
}

} // namespace

TEST_CASE("unlabeled loss masks by confidence and divides by the batch size") {
    Tape<double> tape(false);
    // 4 samples; only sample 0 is confident (softmax max ~ 0.9997)
    std::vector<double> weak_logits = {
        9, 0, 0,  // confident, label 0
        0.1, 0, 0, // not confident
        0, 0.1, 0, //
        0, 0, 0.1, //
    };
    auto weak = bundle_of(tensor_of<double>({4, 3}, std::move(weak_logits)),
                          tensor_of<double>({4, 2}, {1, 0, 0, 1, 1, 1, 0.5, 0.5}));
    auto strong = bundle_of(zeros<double>({4, 3}),
                            tensor_of<double>({4, 2}, {1, 0, 0, 1, 1, 1, 0.5, 0.5}));

    auto res = unlabeled_loss(tape, weak, strong, 0.95, std::nullopt, false);
    CHECK(res.mask == std::vector<char>{1, 0, 0, 0});
    CHECK(res.mask_rate == doctest::Approx(0.25));
    // one passing sample with CE = ln 3, normalized by the full batch of 4
    CHECK(res.total.item() == doctest::Approx(std::log(3.0) / 4.0).epsilon(1e-9));
    CHECK(res.dist_part.item() == 0.0);

    // identical projections + cosine distance add exactly zero
    auto res2 = unlabeled_loss(tape, weak, strong, 0.95, DistanceMetric::CosineDistance, false);
    CHECK(res2.total.item() == doctest::Approx(std::log(3.0) / 4.0).epsilon(1e-9));

    // all below the threshold: exactly zero
    auto res3 = unlabeled_loss(tape, weak, strong, 0.9999, DistanceMetric::CosineDistance,
                               false);
    CHECK(res3.total.item() == 0.0);
    CHECK(res3.mask_rate == 0.0);
}

TEST_CASE("masked-out samples cannot influence the loss value at all") {
    Tape<double> tape(false);
    std::vector<double> weak_logits = {9, 0, 0, 0.1, 0, 0};
    auto weak = bundle_of(tensor_of<double>({2, 3}, std::move(weak_logits)),
                          tensor_of<double>({2, 2}, {1, 0, 0.2, 0.4}));
    auto strong_logits = tensor_of<double>({2, 3}, {1, 2, 3, 4, 5, 6});
    auto strong_proj = tensor_of<double>({2, 2}, {0.3, 0.6, 0.8, 0.1});
    auto strong = bundle_of(strong_logits, strong_proj);

    const double base =
        unlabeled_loss(tape, weak, strong, 0.95, DistanceMetric::CosineSimilarity, false)
            .total.item();

    // perturb the below-threshold sample's strong inputs arbitrarily
    strong.logits.vals()[3] = -77.0;
    strong.logits.vals()[5] = 1e6;
    strong.proj.vals()[2] = 123.0;
    strong.proj.vals()[3] = -9.0;
    const double perturbed =
        unlabeled_loss(tape, weak, strong, 0.95, DistanceMetric::CosineSimilarity, false)
            .total.item();
    CHECK(perturbed == base); // bit-identical
}

TEST_CASE("pseudo-label path carries zero gradient into weak logits") {
    auto weak_logits = tensor_of<double>({2, 3}, {9, 0, 0, 8, 0, 0}, true);
    auto strong_logits = tensor_of<double>({2, 3}, {0.5, 0.2, 0.1, 0.1, 0.7, 0.2}, true);

    std::vector<Tensor<double>> leaves = {weak_logits, strong_logits};
    LossBuilder builder = [](Tape<double>& tp, std::vector<Tensor<double>>& l) {
        FeatureBundle<double> weak, strong;
        weak.logits = l[0];
        weak.proj = tensor_of<double>({2, 2}, {1, 0, 0, 1});
        strong.logits = l[1];
        strong.proj = tensor_of<double>({2, 2}, {1, 0, 0, 1});
        return unlabeled_loss(tp, weak, strong, 0.9, std::nullopt, false).total;
    };
    CHECK(grad_check(builder, leaves) < 1e-4); // finite differences agree...
    for (double g : *leaves[0].grad) CHECK(g == 0.0); // ...and the grad is exactly 0
    double strong_norm = 0.0;
    for (double g : *leaves[1].grad) strong_norm += std::abs(g);
    CHECK(strong_norm > 0.0);
}

TEST_CASE("detach_weak stops the distance gradient on the weak branch") {
    auto weak_proj = tensor_of<double>({1, 3}, {1.0, 0.4, -0.2}, true);
    auto strong_proj = tensor_of<double>({1, 3}, {0.2, 1.0, 0.3}, true);
    auto weak_logits = tensor_of<double>({1, 3}, {9, 0, 0});
    auto strong_logits = tensor_of<double>({1, 3}, {9, 0, 0});

    auto run = [&](bool detach) {
        weak_proj.zero_grad();
        strong_proj.zero_grad();
        Tape<double> tape;
        FeatureBundle<double> weak, strong;
        weak.logits = weak_logits;
        weak.proj = weak_proj;
        strong.logits = strong_logits;
        strong.proj = strong_proj;
        auto res =
            unlabeled_loss(tape, weak, strong, 0.9, DistanceMetric::CosineSimilarity, detach);
        tape.backward(res.total);
        double wsum = 0.0, ssum = 0.0;
        for (double g : *weak_proj.grad) wsum += std::abs(g);
        for (double g : *strong_proj.grad) ssum += std::abs(g);
        return std::make_pair(wsum, ssum);
    };
    auto [w_both, s_both] = run(false);
    CHECK(w_both > 0.0);
    CHECK(s_both > 0.0);
    auto [w_detached, s_detached] = run(true);
    CHECK(w_detached == 0.0);
    CHECK(s_detached > 0.0);
}

TEST_CASE("rotation loss normalization") {
    Tape<double> tape(false);
    auto uniform = zeros<double>({8, 4}); // B_u = 2 -> 8 rows
    CHECK(rotation_loss(tape, uniform, {0, 1, 2, 3, 0, 1, 2, 3}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-9));

    // one row with known CE, the rest pinned near zero loss: total = CE / 8
    std::vector<double> logits(32, 0.0);
    std::vector<int> targets = {0, 1, 2, 3, 0, 1, 2, 3};
    for (int r = 1; r < 8; ++r) logits[static_cast<size_t>(r) * 4 + targets[static_cast<size_t>(r)]] = 80.0;
    auto t = tensor_of<double>({8, 4}, std::move(logits));
    CHECK(rotation_loss(tape, t, targets).item() ==
          doctest::Approx(std::log(4.0) / 8.0).epsilon(1e-9));

    auto perfect = tensor_of<double>({4, 4}, std::vector<double>{80, 0, 0, 0, 0, 80, 0, 0,
                                                                 0, 0, 80, 0, 0, 0, 0, 80});
    CHECK(rotation_loss(tape, perfect, {0, 1, 2, 3}).item() ==
          doctest::Approx(0.0).epsilon(1e-9));

    CHECK_THROWS_AS(rotation_loss(tape, uniform, {0, 1, 2, 4, 0, 1, 2, 3}), Error);
}

TEST_CASE("total objective is the weighted sum") {
    Tape<double> tape(false);
    auto ls = scalar_tensor<double>(1.0);
    auto lu = scalar_tensor<double>(2.0);
    auto lr = scalar_tensor<double>(3.0);
    CHECK(total_objective(tape, ls, lu, lr, 1.0, 1.0).item() == doctest::Approx(6.0));
    CHECK(total_objective(tape, ls, lu, lr, 0.0, 0.0).item() == doctest::Approx(1.0));
    CHECK_THROWS_AS(total_objective(tape, ls, lu, lr, -1.0, 1.0), Error);
}

TEST_CASE("losses stay finite on extreme finite logits") {
    Tape<double> tape(false);
    auto big = tensor_of<double>({2, 3}, {1e4, -1e4, 0, -1e4, 1e4, 0});
    CHECK(std::isfinite(supervised_loss(tape, big, {0, 1}).item()));
    auto [pl_loss, pls] = pseudo_label_loss(tape, big, big);
    CHECK(std::isfinite(pl_loss.item()));
    CHECK(std::isfinite(eval_metric(DistanceMetric::JsDivergence, {1e4, -1e4}, {-1e4, 1e4})));
}
