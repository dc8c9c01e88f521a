#include "crmatch/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "crmatch/losses.hpp"
#include "crmatch/ops.hpp"
#include "crmatch/rng.hpp"

namespace crmatch {

double grad_check(const LossBuilder& builder, std::vector<Tensor<double>>& leaves,
                  double eps) {
    if (eps <= 0.0) fail("grad_check: eps must be > 0");
    for (auto& leaf : leaves) {
        if (!leaf.requires_grad) fail("grad_check: all leaves must require grad");
        leaf.zero_grad();
    }
    {
        Tape<double> tape;
        auto loss = builder(tape, leaves);
        // A loss with no tracked inputs never lands on the tape; its analytic
        // gradient is identically zero.
        if (loss.tape_id == &tape) tape.backward(loss);
    }
    auto eval = [&]() {
        Tape<double> tape(false);
        return builder(tape, leaves).item();
    };
    double max_err = 0.0;
    for (auto& leaf : leaves) {
        auto& vals = leaf.vals();
        const auto& grad = *leaf.grad;
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + eps;
            const double fp = eval();
            vals[i] = saved - eps;
            const double fm = eval();
            vals[i] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double err = std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

namespace {

using TensorD = Tensor<double>;
using TapeD = Tape<double>;

TensorD random_leaf(Rng& rng, Shape shape, double scale = 1.0, double offset = 0.0) {
    std::vector<double> data(static_cast<size_t>(numel(shape)));
    for (auto& v : data) v = offset + scale * (rng.uniform() * 2.0 - 1.0);
    return tensor_of<double>(std::move(shape), std::move(data), true);
}

/// Reduce an op output to a scalar with a fixed random weighting; a plain
/// sum would let transposition-style backward errors cancel out. Seeded so
/// repeated builder invocations evaluate the same function.
TensorD weighted_sum(TapeD& tape, const TensorD& t, uint64_t wseed) {
    Rng rng(wseed);
    std::vector<double> w(static_cast<size_t>(numel(t.shape)));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return sum(tape, mul(tape, t, tensor_of<double>(t.shape, std::move(w))));
}

double check_op(OpKind kind, Rng& rng) {
    std::vector<TensorD> leaves;
    LossBuilder builder;
    const uint64_t wseed = rng.stream({static_cast<uint64_t>(kind), 17}).state();

    switch (kind) {
    case OpKind::Matmul: {
        leaves = {random_leaf(rng, {3, 4}), random_leaf(rng, {4, 5})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, matmul(tp, l[0], l[1]), wseed);
        };
        break;
    }
    case OpKind::Add: {
        const int form = static_cast<int>(rng.uniform_int(3u));
        if (form == 0)
            leaves = {random_leaf(rng, {3, 4}), random_leaf(rng, {3, 4})};
        else if (form == 1)
            leaves = {random_leaf(rng, {3, 4}), random_leaf(rng, {4})};
        else
            leaves = {random_leaf(rng, {2, 3, 4, 4}), random_leaf(rng, {3})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, add(tp, l[0], l[1]), wseed);
        };
        break;
    }
    case OpKind::Scale: {
        leaves = {random_leaf(rng, {2, 5})};
        const double f = rng.uniform(-2.0, 2.0);
        builder = [f, wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, scale(tp, l[0], f), wseed);
        };
        break;
    }
    case OpKind::Conv2d: {
        const int stride = 1 + static_cast<int>(rng.uniform_int(2u));
        const int pad = static_cast<int>(rng.uniform_int(2u));
        const int k = 1 + static_cast<int>(rng.uniform_int(3u));
        leaves = {random_leaf(rng, {2, 3, 6, 6}), random_leaf(rng, {4, 3, k, k})};
        builder = [stride, pad, wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, conv2d(tp, l[0], l[1], stride, pad), wseed);
        };
        break;
    }
    case OpKind::Relu: {
        // keep samples away from the kink at 0
        auto leaf = random_leaf(rng, {4, 6});
        for (auto& v : leaf.vals())
            if (std::abs(v) < 0.1) v = v < 0 ? v - 0.2 : v + 0.2;
        leaves = {leaf};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, relu(tp, l[0]), wseed);
        };
        break;
    }
    case OpKind::AvgPool2x2: {
        leaves = {random_leaf(rng, {2, 3, 4, 6})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, avg_pool2x2(tp, l[0]), wseed);
        };
        break;
    }
    case OpKind::GlobalAvgPool: {
        leaves = {random_leaf(rng, {2, 4, 3, 3})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, global_avg_pool(tp, l[0]), wseed);
        };
        break;
    }
    case OpKind::Flatten: {
        leaves = {random_leaf(rng, {2, 3, 4, 4})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, flatten(tp, l[0]), wseed);
        };
        break;
    }
    case OpKind::LogSoftmax: {
        leaves = {random_leaf(rng, {3, 7}, 3.0)};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, log_softmax(tp, l[0]), wseed);
        };
        break;
    }
    case OpKind::Mul: {
        leaves = {random_leaf(rng, {3, 5}), random_leaf(rng, {3, 5})};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, mul(tp, l[0], l[1]), wseed);
        };
        break;
    }
    case OpKind::Sum: {
        leaves = {random_leaf(rng, {4, 3})};
        builder = [](TapeD& tp, std::vector<TensorD>& l) { return sum(tp, l[0]); };
        break;
    }
    case OpKind::Mean: {
        leaves = {random_leaf(rng, {2, 6})};
        builder = [](TapeD& tp, std::vector<TensorD>& l) { return mean(tp, l[0]); };
        break;
    }
    case OpKind::L2Normalize: {
        // offset rows away from the origin where the epsilon smoothing bites
        leaves = {random_leaf(rng, {3, 6}, 1.0, rng.bernoulli(0.5) ? 1.5 : -1.5)};
        builder = [wseed](TapeD& tp, std::vector<TensorD>& l) {
            return weighted_sum(tp, l2_normalize(tp, l[0]), wseed);
        };
        break;
    }
    }
    return grad_check(builder, leaves);
}

double check_metric(DistanceMetric m, Rng& rng) {
    std::vector<TensorD> leaves = {random_leaf(rng, {8}, 1.0, rng.bernoulli(0.5) ? 1.0 : -1.0),
                                   random_leaf(rng, {8}, 1.0, rng.bernoulli(0.5) ? 1.0 : -1.0)};
    LossBuilder builder = [m](TapeD& tp, std::vector<TensorD>& l) {
        return metric_eval(tp, m, l[0], l[1]);
    };
    return grad_check(builder, leaves);
}

/// conv2d + relu + global pool + linear + cross-entropy on a 3x8x8 input.
double check_conv_chain(Rng& rng) {
    std::vector<TensorD> leaves = {random_leaf(rng, {1, 3, 8, 8}),
                                   random_leaf(rng, {4, 3, 3, 3}),
                                   random_leaf(rng, {4, 5}), random_leaf(rng, {5})};
    const int label = static_cast<int>(rng.uniform_int(5u));
    LossBuilder builder = [label](TapeD& tp, std::vector<TensorD>& l) {
        auto h = relu(tp, conv2d(tp, l[0], l[1], 1, 1));
        auto feat = global_avg_pool(tp, h);
        auto logits = add(tp, matmul(tp, feat, l[2]), l[3]);
        return cross_entropy_weighted(tp, logits, {label}, {1.0});
    };
    return grad_check(builder, leaves);
}

double check_cosine_chain(Rng& rng) {
    std::vector<TensorD> leaves = {random_leaf(rng, {8}, 1.0, 0.8),
                                   random_leaf(rng, {8}, 1.0, -0.8)};
    LossBuilder builder = [](TapeD& tp, std::vector<TensorD>& l) {
        return metric_eval(tp, DistanceMetric::CosineSimilarity, l[0], l[1]);
    };
    return grad_check(builder, leaves);
}

} // namespace

std::vector<GradReport> run_grad_check_suite(uint64_t seed, int rounds) {
    std::vector<GradReport> reports;
    auto run = [&](const std::string& name, auto&& fn) {
        GradReport rep{name, 0.0, rounds};
        for (int r = 0; r < rounds; ++r) {
            Rng rng = Rng(seed).stream({std::hash<std::string>{}(name), static_cast<uint64_t>(r)});
            rep.max_rel_err = std::max(rep.max_rel_err, fn(rng));
        }
        reports.push_back(std::move(rep));
    };

    for (OpKind kind : kAllOpKinds)
        run(cat("op/", op_name(kind)), [kind](Rng& rng) { return check_op(kind, rng); });
    for (DistanceMetric m : kAllMetrics)
        run(cat("metric/", metric_name(m)), [m](Rng& rng) { return check_metric(m, rng); });
    run("chain/conv_relu_gap_linear_ce", [](Rng& rng) { return check_conv_chain(rng); });
    run("chain/cosine_similarity", [](Rng& rng) { return check_cosine_chain(rng); });
    return reports;
}

} // namespace crmatch
