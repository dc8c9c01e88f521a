#pragma once

#include <optional>
#include <string>

#include "crmatch/model.hpp"
#include "crmatch/ops.hpp"

namespace crmatch {

/// The six feature-distance behaviors. Similarity-named metrics impose
/// equivariance (minimizing them pushes the two projections apart);
/// distance-named metrics impose invariance (pull together).
enum class DistanceMetric {
    CosineSimilarity,
    L2Similarity,
    NegativeJs,
    CosineDistance,
    L2Distance,
    JsDivergence,
};

inline const char* metric_name(DistanceMetric m) {
    switch (m) {
    case DistanceMetric::CosineSimilarity: return "cosine_similarity";
    case DistanceMetric::L2Similarity: return "l2_similarity";
    case DistanceMetric::NegativeJs: return "negative_js";
    case DistanceMetric::CosineDistance: return "cosine_distance";
    case DistanceMetric::L2Distance: return "l2_distance";
    case DistanceMetric::JsDivergence: return "js_divergence";
    }
    return "?";
}

inline constexpr std::array<DistanceMetric, 6> kAllMetrics = {
    DistanceMetric::CosineSimilarity, DistanceMetric::L2Similarity,
    DistanceMetric::NegativeJs,       DistanceMetric::CosineDistance,
    DistanceMetric::L2Distance,       DistanceMetric::JsDivergence,
};

/// Accepts the six metric names plus "none" (FeatDistLoss disabled).
inline std::optional<DistanceMetric> parse_metric(const std::string& name) {
    if (name == "none") return std::nullopt;
    for (DistanceMetric m : kAllMetrics)
        if (name == metric_name(m)) return m;
    fail_config("unknown dist_metric '", name, "'");
}

inline bool metric_imposes_equivariance(DistanceMetric m) {
    return m == DistanceMetric::CosineSimilarity || m == DistanceMetric::L2Similarity ||
           m == DistanceMetric::NegativeJs;
}

namespace detail {

/// Same buffers viewed as a single-row matrix; keeps tape identity.
template <typename T>
Tensor<T> as_row(const Tensor<T>& v) {
    Tensor<T> out = v;
    out.shape = {1, v.shape[0]};
    return out;
}

constexpr double kLogFloor = 1e-8; // smoothing inside JS logs

/// Row-wise Jensen-Shannon divergence between softmax(a_i) and softmax(b_i),
/// (N,C) x (N,C) -> (N,). Registered as a custom tape rule with the analytic
/// backward through both softmaxes.
template <typename T>
Tensor<T> js_rows(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape || a.shape.size() != 2)
        fail("js_rows: need matching 2-D inputs, got ", shape_str(a.shape), " and ",
             shape_str(b.shape));
    const int N = a.shape[0], C = a.shape[1];

    auto softmax_rows = [&](const Tensor<T>& t) {
        std::vector<T> p(t.vals());
        for (int r = 0; r < N; ++r) {
            T* row = p.data() + static_cast<size_t>(r) * C;
            T mx = row[0];
            for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
            T z = T(0);
            for (int c = 0; c < C; ++c) {
                row[c] = std::exp(row[c] - mx);
                z += row[c];
            }
            for (int c = 0; c < C; ++c) row[c] /= z;
        }
        return p;
    };
    auto p = std::make_shared<std::vector<T>>(softmax_rows(a));
    auto q = std::make_shared<std::vector<T>>(softmax_rows(b));

    const T floor = static_cast<T>(kLogFloor);
    auto lg = [floor](T x) { return std::log(std::max(x, floor)); };

    std::vector<T> js(static_cast<size_t>(N), T(0));
    for (int r = 0; r < N; ++r) {
        const T* pr = p->data() + static_cast<size_t>(r) * C;
        const T* qr = q->data() + static_cast<size_t>(r) * C;
        T s = T(0);
        for (int c = 0; c < C; ++c) {
            const T m = (pr[c] + qr[c]) * T(0.5);
            s += pr[c] * (lg(pr[c]) - lg(m)) + qr[c] * (lg(qr[c]) - lg(m));
        }
        js[static_cast<size_t>(r)] = s * T(0.5);
    }

    return custom_op<T>(
        tape, {a, b}, {N}, std::move(js),
        [N, C, p, q, lg](const std::vector<T>& out_grad,
                         const std::vector<const std::vector<T>*>&,
                         const std::vector<std::vector<T>*>& in_grads) {
            // dJS/dp_k = log(p_k/m_k)/2 =: g_k, then through the softmax:
            // da_i = p_i * (g_i - <g,p>); symmetrically for b.
            std::vector<T> g(static_cast<size_t>(C));
            for (int r = 0; r < N; ++r) {
                const T og = out_grad[static_cast<size_t>(r)];
                if (og == T(0)) continue;
                const size_t off = static_cast<size_t>(r) * C;
                for (int side = 0; side < 2; ++side) {
                    if (!in_grads[static_cast<size_t>(side)]) continue;
                    const T* pr = (side == 0 ? p : q)->data() + off;
                    const T* qr = (side == 0 ? q : p)->data() + off;
                    T gdotp = T(0);
                    for (int c = 0; c < C; ++c) {
                        const T m = (pr[c] + qr[c]) * T(0.5);
                        g[static_cast<size_t>(c)] = T(0.5) * (lg(pr[c]) - lg(m));
                        gdotp += g[static_cast<size_t>(c)] * pr[c];
                    }
                    T* dst = in_grads[static_cast<size_t>(side)]->data() + off;
                    for (int c = 0; c < C; ++c)
                        dst[c] += og * pr[c] * (g[static_cast<size_t>(c)] - gdotp);
                }
            }
        });
}

template <typename T>
void check_nonzero_rows(const Tensor<T>& t, const std::vector<T>& weights,
                        DistanceMetric m) {
    const int N = t.shape[0], D = t.shape[1];
    for (int r = 0; r < N; ++r) {
        if (weights[static_cast<size_t>(r)] == T(0)) continue;
        T q = T(0);
        const T* row = t.data() + static_cast<size_t>(r) * D;
        for (int c = 0; c < D; ++c) q += row[c] * row[c];
        if (q <= T(1e-16))
            fail(metric_name(m), ": zero vector (row ", r, ")");
    }
}

/// Constant (N,D) matrix with each row filled by the row weight.
template <typename T>
Tensor<T> weight_matrix(const std::vector<T>& w, int D) {
    const int N = static_cast<int>(w.size());
    std::vector<T> data(static_cast<size_t>(N) * D);
    for (int r = 0; r < N; ++r)
        for (int c = 0; c < D; ++c) data[static_cast<size_t>(r) * D + c] = w[static_cast<size_t>(r)];
    return tensor_of<T>({N, D}, std::move(data));
}

} // namespace detail

/// Weighted row-wise metric sum: sum_i w_i * d(a_i, b_i) as a scalar on the
/// tape. This is the shared kernel behind metric_eval, feat_dist_loss and
/// the masked Eq.-style unlabeled objective: rows with weight exactly 0
/// contribute exactly 0 regardless of their content.
template <typename T>
Tensor<T> metric_weighted_sum(Tape<T>& tape, DistanceMetric m, const Tensor<T>& a,
                              const Tensor<T>& b, const std::vector<T>& weights) {
    if (a.shape != b.shape || a.shape.size() != 2)
        fail(metric_name(m), ": need matching 2-D inputs, got ", shape_str(a.shape), " and ",
             shape_str(b.shape));
    if (a.shape[1] < 2) fail(metric_name(m), ": vectors must have length >= 2");
    if (static_cast<int>(weights.size()) != a.shape[0])
        fail(metric_name(m), ": weight count ", weights.size(), " != rows ", a.shape[0]);
    const int D = a.shape[1];
    T wsum = T(0);
    for (T w : weights) wsum += w;

    switch (m) {
    case DistanceMetric::CosineSimilarity:
    case DistanceMetric::CosineDistance: {
        detail::check_nonzero_rows(a, weights, m);
        detail::check_nonzero_rows(b, weights, m);
        auto cos = sum(tape, mul(tape, detail::weight_matrix(weights, D),
                                 mul(tape, l2_normalize(tape, a), l2_normalize(tape, b))));
        if (m == DistanceMetric::CosineSimilarity) return cos;
        return add(tape, scale(tape, cos, T(-1)), scalar_tensor<T>(wsum));
    }
    case DistanceMetric::L2Distance: {
        auto d = add(tape, a, scale(tape, b, T(-1)));
        return sum(tape, mul(tape, detail::weight_matrix(weights, D), mul(tape, d, d)));
    }
    case DistanceMetric::L2Similarity: {
        // -||a^ - b^||_2 per row; the norm is sum(d * normalize(d)).
        auto d = add(tape, l2_normalize(tape, a), scale(tape, l2_normalize(tape, b), T(-1)));
        auto norms = sum(tape, mul(tape, detail::weight_matrix(weights, D),
                                   mul(tape, d, l2_normalize(tape, d))));
        return scale(tape, norms, T(-1));
    }
    case DistanceMetric::JsDivergence:
    case DistanceMetric::NegativeJs: {
        auto js = detail::js_rows(tape, a, b);
        auto wvec = tensor_of<T>({a.shape[0]}, std::vector<T>(weights));
        auto s = sum(tape, mul(tape, wvec, js));
        return m == DistanceMetric::JsDivergence ? s : scale(tape, s, T(-1));
    }
    }
    fail("unknown metric id ", static_cast<int>(m));
}

/// Metric between two vectors (length >= 2), as a scalar on the tape.
template <typename T>
Tensor<T> metric_eval(Tape<T>& tape, DistanceMetric m, const Tensor<T>& a,
                      const Tensor<T>& b) {
    if (a.shape.size() != 1 || b.shape.size() != 1)
        fail(metric_name(m), ": metric_eval expects vectors, got ", shape_str(a.shape),
             " and ", shape_str(b.shape));
    return metric_weighted_sum(tape, m, detail::as_row(a), detail::as_row(b), {T(1)});
}

/// Mean metric over the rows of two projection batches; gradients flow into
/// both branches.
template <typename T>
Tensor<T> feat_dist_loss(Tape<T>& tape, DistanceMetric m, const Tensor<T>& proj_strong,
                         const Tensor<T>& proj_weak) {
    const int N = proj_strong.shape.empty() ? 0 : proj_strong.shape[0];
    if (N == 0) fail("feat_dist_loss: empty batch");
    std::vector<T> w(static_cast<size_t>(N), T(1) / static_cast<T>(N));
    return metric_weighted_sum(tape, m, proj_strong, proj_weak, w);
}

// ---------------------------------------------------------------------------
// Cross-entropy pieces
// ---------------------------------------------------------------------------

/// sum_i w_i * CE(labels_i, logits_i) via a constant one-hot weight matrix.
template <typename T>
Tensor<T> cross_entropy_weighted(Tape<T>& tape, const Tensor<T>& logits,
                                 const std::vector<int>& labels, const std::vector<T>& weights) {
    if (logits.shape.size() != 2) fail("cross_entropy: logits must be 2-D");
    const int N = logits.shape[0], C = logits.shape[1];
    if (static_cast<int>(labels.size()) != N || weights.size() != labels.size())
        fail("cross_entropy: got ", labels.size(), " labels / ", weights.size(),
             " weights for ", N, " rows");
    std::vector<T> pick(static_cast<size_t>(N) * C, T(0));
    for (int i = 0; i < N; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= C)
            fail("cross_entropy: label ", labels[static_cast<size_t>(i)], " out of range [0,",
                 C, ")");
        pick[static_cast<size_t>(i) * C + labels[static_cast<size_t>(i)]] =
            -weights[static_cast<size_t>(i)];
    }
    return sum(tape, mul(tape, tensor_of<T>({N, C}, std::move(pick)),
                         log_softmax(tape, logits)));
}

/// Mean cross-entropy over a labeled batch.
template <typename T>
Tensor<T> supervised_loss(Tape<T>& tape, const Tensor<T>& logits,
                          const std::vector<int>& labels) {
    const int N = logits.shape[0];
    std::vector<T> w(static_cast<size_t>(N), T(1) / static_cast<T>(N));
    return cross_entropy_weighted(tape, logits, labels, w);
}

/// Mean cross-entropy over all rotated copies (targets in {0..3}); with the
/// four copies per image this realizes the 1/(4*Bu) normalization.
template <typename T>
Tensor<T> rotation_loss(Tape<T>& tape, const Tensor<T>& rot_logits,
                        const std::vector<int>& rot_targets) {
    if (rot_logits.shape.size() != 2 || rot_logits.shape[1] != 4)
        fail("rotation_loss: logits must be (N,4), got ", shape_str(rot_logits.shape));
    for (int t : rot_targets)
        if (t < 0 || t > 3) fail("rotation_loss: target ", t, " outside {0..3}");
    const int N = rot_logits.shape[0];
    std::vector<T> w(static_cast<size_t>(N), T(1) / static_cast<T>(N));
    return cross_entropy_weighted(tape, rot_logits, rot_targets, w);
}

// ---------------------------------------------------------------------------
// Pseudo-labeling
// ---------------------------------------------------------------------------

struct PseudoLabel {
    int label = 0;
    double confidence = 0.0; // max softmax probability of the weak logits
    std::vector<float> one_hot;
};

/// Hard pseudo-labels from weak logits. Detached: reads values only, no
/// tape participation.
template <typename T>
std::vector<PseudoLabel> pseudo_labels(const Tensor<T>& weak_logits) {
    if (weak_logits.shape.size() != 2) fail("pseudo_labels: logits must be 2-D");
    const int N = weak_logits.shape[0], C = weak_logits.shape[1];
    std::vector<PseudoLabel> out(static_cast<size_t>(N));
    for (int i = 0; i < N; ++i) {
        const T* row = weak_logits.data() + static_cast<size_t>(i) * C;
        int arg = 0;
        for (int c = 1; c < C; ++c)
            if (row[c] > row[arg]) arg = c;
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c] - row[arg]));
        auto& pl = out[static_cast<size_t>(i)];
        pl.label = arg;
        pl.confidence = 1.0 / z;
        pl.one_hot.assign(static_cast<size_t>(C), 0.0f);
        pl.one_hot[static_cast<size_t>(arg)] = 1.0f;
    }
    return out;
}

/// Mean cross-entropy between hard pseudo-labels (from the weak branch,
/// detached) and the strong-branch predictions.
template <typename T>
std::pair<Tensor<T>, std::vector<PseudoLabel>>
pseudo_label_loss(Tape<T>& tape, const Tensor<T>& weak_logits, const Tensor<T>& strong_logits) {
    if (weak_logits.shape != strong_logits.shape)
        fail("pseudo_label_loss: class-count mismatch: ", shape_str(weak_logits.shape),
             " vs ", shape_str(strong_logits.shape));
    auto pls = pseudo_labels(weak_logits);
    std::vector<int> labels(pls.size());
    for (size_t i = 0; i < pls.size(); ++i) labels[i] = pls[i].label;
    const int N = strong_logits.shape[0];
    std::vector<T> w(static_cast<size_t>(N), T(1) / static_cast<T>(N));
    return {cross_entropy_weighted(tape, strong_logits, labels, w), std::move(pls)};
}

// ---------------------------------------------------------------------------
// Confidence-masked unlabeled objective
// ---------------------------------------------------------------------------

template <typename T>
struct UnlabeledLoss {
    Tensor<T> total;       // pseudo + dist, already divided by the batch size
    Tensor<T> pseudo_part;
    Tensor<T> dist_part;
    std::vector<PseudoLabel> pls;
    std::vector<char> mask; // confidence > tau per sample
    double mask_rate = 0.0;
};

/// Per-sample confidence mask gates both sub-terms; the sum is divided by
/// the full batch size, not the mask count. The mask is a constant: no
/// gradient flows through the confidence computation, and samples below the
/// threshold contribute exactly zero value and gradient.
template <typename T>
UnlabeledLoss<T> unlabeled_loss(Tape<T>& tape, const FeatureBundle<T>& weak,
                                const FeatureBundle<T>& strong, double tau,
                                std::optional<DistanceMetric> metric,
                                bool detach_weak = false) {
    if (tau <= 0.0 || tau >= 1.0) fail("unlabeled_loss: tau must be in (0,1), got ", tau);
    if (weak.logits.shape != strong.logits.shape)
        fail("unlabeled_loss: class-count mismatch: ", shape_str(weak.logits.shape), " vs ",
             shape_str(strong.logits.shape));
    const int N = weak.logits.shape[0];

    UnlabeledLoss<T> out;
    out.pls = pseudo_labels(weak.logits);
    out.mask.resize(static_cast<size_t>(N));
    std::vector<int> labels(static_cast<size_t>(N));
    std::vector<T> w(static_cast<size_t>(N), T(0));
    int passing = 0;
    for (int i = 0; i < N; ++i) {
        const auto& pl = out.pls[static_cast<size_t>(i)];
        labels[static_cast<size_t>(i)] = pl.label;
        const bool pass = pl.confidence > tau;
        out.mask[static_cast<size_t>(i)] = pass ? 1 : 0;
        if (pass) {
            w[static_cast<size_t>(i)] = T(1) / static_cast<T>(N);
            ++passing;
        }
    }
    out.mask_rate = static_cast<double>(passing) / N;

    if (passing == 0) {
        out.pseudo_part = scalar_tensor<T>(T(0));
        out.dist_part = scalar_tensor<T>(T(0));
        out.total = scalar_tensor<T>(T(0));
        return out;
    }

    out.pseudo_part = cross_entropy_weighted(tape, strong.logits, labels, w);
    if (metric) {
        const Tensor<T> weak_proj = detach_weak ? detached(weak.proj) : weak.proj;
        out.dist_part = metric_weighted_sum(tape, *metric, strong.proj, weak_proj, w);
    } else {
        out.dist_part = scalar_tensor<T>(T(0));
    }
    out.total = add(tape, out.pseudo_part, out.dist_part);
    return out;
}

/// Eq.-style weighted total: L_S + lambda_u * L_U + lambda_r * L_Rot.
template <typename T>
Tensor<T> total_objective(Tape<T>& tape, const Tensor<T>& loss_sup, const Tensor<T>& loss_unlab,
                          const Tensor<T>& loss_rot, double lambda_u, double lambda_r) {
    if (lambda_u < 0.0 || lambda_r < 0.0)
        fail("total_objective: loss weights must be >= 0");
    return add(tape, loss_sup,
               add(tape, scale(tape, loss_unlab, static_cast<T>(lambda_u)),
                   scale(tape, loss_rot, static_cast<T>(lambda_r))));
}

} // namespace crmatch
