#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string_view>

#include "crmatch/tensor.hpp"

namespace crmatch {

namespace detail {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<size_t>(i) * K;
        T* c = C + static_cast<size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const T av = a[k];
            const T* b = B + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int k = 0; k < K; ++k) {
        const T* a = A + static_cast<size_t>(k) * M;
        const T* b = B + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const T av = a[i];
            T* c = C + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T. Fixed-order lane accumulators so the
// reduction vectorizes without reassociation flags.
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C) {
    constexpr int L = 16;
    for (int i = 0; i < M; ++i) {
        const T* a = A + static_cast<size_t>(i) * K;
        T* c = C + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const T* b = B + static_cast<size_t>(j) * K;
            T acc[L] = {};
            int k = 0;
            for (; k + L <= K; k += L)
                for (int l = 0; l < L; ++l) acc[l] += a[k + l] * b[k + l];
            T s = T(0);
            for (int l = 0; l < L; ++l) s += acc[l];
            for (; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// (C,H,W) image -> (C*kh*kw, Ho*Wo) patch matrix, zero padding.
template <typename T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride, int pad,
            int Ho, int Wo, T* col) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        const T* src = img + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = col + static_cast<size_t>((c * kh + ky) * kw + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    T* row = dst + static_cast<size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(row, row + Wo, T(0));
                        continue;
                    }
                    const T* srow = src + static_cast<size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[ox] = (ix >= 0 && ix < W) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Scatter-add of a patch-matrix gradient back onto the image gradient.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int Ho, int Wo, T* img) {
    const int P = Ho * Wo;
    for (int c = 0; c < C; ++c) {
        T* dst = img + static_cast<size_t>(c) * H * W;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = col + static_cast<size_t>((c * kh + ky) * kw + kx) * P;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    const T* row = src + static_cast<size_t>(oy) * Wo;
                    T* drow = dst + static_cast<size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) drow[ix] += row[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
#ifndef NDEBUG
    for (T x : v)
        if (!std::isfinite(x)) fail(op, ": non-finite value in forward output");
#else
    (void)v;
    (void)op;
#endif
}

constexpr double kNormEps = 1e-12;

} // namespace detail

// ---------------------------------------------------------------------------
// Op set. Every function computes forward eagerly and records a backward
// rule on the tape when any input is tracked.
// ---------------------------------------------------------------------------

/// (N,K) x (K,M) -> (N,M)
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        fail("matmul: incompatible shapes ", shape_str(a.shape), " x ", shape_str(b.shape));
    const int N = a.shape[0], K = a.shape[1], M = b.shape[1];
    auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * M, T(0));
    detail::gemm_nn(N, M, K, a.data(), b.data(), out->data());
    detail::check_finite(*out, "matmul");

    int an = tape.input_node(a), bn = tape.input_node(b);
    if (an < 0 && bn < 0) {
        Tensor<T> t;
        t.shape = {N, M};
        t.values = std::move(out);
        return t;
    }
    std::vector<int> parents;
    if (an >= 0) parents.push_back(an);
    if (bn >= 0) parents.push_back(bn);
    return tape.emit({N, M}, std::move(out), std::move(parents),
                     [an, bn, N, K, M, av = a.values, bv = b.values](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         if (an >= 0)
                             detail::gemm_nt(N, K, M, og.data(), bv->data(),
                                             tp.grad_of(an).data());
                         if (bn >= 0)
                             detail::gemm_tn(K, M, N, av->data(), og.data(),
                                             tp.grad_of(bn).data());
                     });
}

/// Elementwise sum. Two broadcast forms are supported because the model
/// needs them: (N,M) + (M,) row bias, and (N,C,H,W) + (C,) channel bias.
template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape == b.shape;
    const bool row_bias =
        a.shape.size() == 2 && b.shape.size() == 1 && a.shape[1] == b.shape[0];
    const bool chan_bias =
        a.shape.size() == 4 && b.shape.size() == 1 && a.shape[1] == b.shape[0];
    if (!same && !row_bias && !chan_bias)
        fail("add: incompatible shapes ", shape_str(a.shape), " + ", shape_str(b.shape));

    // Broadcast layout: repeats of each b element, and how many such blocks.
    const int C = same ? 0 : b.shape[0];
    const size_t rep = chan_bias ? static_cast<size_t>(a.shape[2]) * a.shape[3] : 1;
    const size_t blocks = same ? 0 : a.vals().size() / (rep * static_cast<size_t>(C));

    auto out = std::make_shared<std::vector<T>>(a.vals());
    if (same) {
        const auto& bv = b.vals();
        for (size_t i = 0; i < out->size(); ++i) (*out)[i] += bv[i];
    } else {
        const auto& bv = b.vals();
        size_t i = 0;
        for (size_t blk = 0; blk < blocks; ++blk)
            for (int c = 0; c < C; ++c)
                for (size_t r = 0; r < rep; ++r) (*out)[i++] += bv[static_cast<size_t>(c)];
    }
    detail::check_finite(*out, "add");

    int an = tape.input_node(a), bn = tape.input_node(b);
    if (an < 0 && bn < 0) {
        Tensor<T> t;
        t.shape = a.shape;
        t.values = std::move(out);
        return t;
    }
    std::vector<int> parents;
    if (an >= 0) parents.push_back(an);
    if (bn >= 0) parents.push_back(bn);
    return tape.emit(a.shape, std::move(out), std::move(parents),
                     [an, bn, same, C, rep, blocks](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         if (an >= 0) {
                             auto& ga = tp.grad_of(an);
                             for (size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
                         }
                         if (bn >= 0) {
                             auto& gb = tp.grad_of(bn);
                             if (same) {
                                 for (size_t i = 0; i < og.size(); ++i) gb[i] += og[i];
                             } else {
                                 size_t i = 0;
                                 for (size_t blk = 0; blk < blocks; ++blk)
                                     for (int c = 0; c < C; ++c)
                                         for (size_t r = 0; r < rep; ++r)
                                             gb[static_cast<size_t>(c)] += og[i++];
                             }
                         }
                     });
}

/// x * constant factor.
template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
    auto out = std::make_shared<std::vector<T>>(x.vals());
    for (auto& v : *out) v *= factor;
    detail::check_finite(*out, "scale");
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = x.shape;
        t.values = std::move(out);
        return t;
    }
    return tape.emit(x.shape, std::move(out), {xn}, [xn, factor](Tape<T>& tp, int self) {
        const auto& og = tp.grad_of(self);
        auto& gx = tp.grad_of(xn);
        for (size_t i = 0; i < og.size(); ++i) gx[i] += factor * og[i];
    });
}

/// Elementwise max(x, 0); subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
    auto out = std::make_shared<std::vector<T>>(x.vals());
    for (auto& v : *out) v = v > T(0) ? v : T(0);
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = x.shape;
        t.values = std::move(out);
        return t;
    }
    return tape.emit(x.shape, std::move(out), {xn}, [xn, xv = x.values](Tape<T>& tp, int self) {
        const auto& og = tp.grad_of(self);
        auto& gx = tp.grad_of(xn);
        const auto& in = *xv;
        for (size_t i = 0; i < og.size(); ++i)
            if (in[i] > T(0)) gx[i] += og[i];
    });
}

/// Elementwise product, same shapes.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        fail("mul: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape));
    auto out = std::make_shared<std::vector<T>>(a.vals());
    const auto& bv = b.vals();
    for (size_t i = 0; i < out->size(); ++i) (*out)[i] *= bv[i];
    detail::check_finite(*out, "mul");

    int an = tape.input_node(a), bn = tape.input_node(b);
    if (an < 0 && bn < 0) {
        Tensor<T> t;
        t.shape = a.shape;
        t.values = std::move(out);
        return t;
    }
    std::vector<int> parents;
    if (an >= 0) parents.push_back(an);
    if (bn >= 0) parents.push_back(bn);
    return tape.emit(a.shape, std::move(out), std::move(parents),
                     [an, bn, av = a.values, bv2 = b.values](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         if (an >= 0) {
                             auto& ga = tp.grad_of(an);
                             const auto& other = *bv2;
                             for (size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * other[i];
                         }
                         if (bn >= 0) {
                             auto& gb = tp.grad_of(bn);
                             const auto& other = *av;
                             for (size_t i = 0; i < og.size(); ++i) gb[i] += og[i] * other[i];
                         }
                     });
}

/// Full reduction to a scalar.
template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
    T s = T(0);
    for (T v : x.vals()) s += v;
    auto out = std::make_shared<std::vector<T>>(1, s);
    detail::check_finite(*out, "sum");
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = {1};
        t.values = std::move(out);
        return t;
    }
    return tape.emit({1}, std::move(out), {xn}, [xn](Tape<T>& tp, int self) {
        const T og = tp.grad_of(self)[0];
        auto& gx = tp.grad_of(xn);
        for (auto& g : gx) g += og;
    });
}

/// Full-reduction mean.
template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
    if (x.size() == 0) fail("mean: empty tensor");
    T s = T(0);
    for (T v : x.vals()) s += v;
    const T inv = T(1) / static_cast<T>(x.size());
    auto out = std::make_shared<std::vector<T>>(1, s * inv);
    detail::check_finite(*out, "mean");
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = {1};
        t.values = std::move(out);
        return t;
    }
    return tape.emit({1}, std::move(out), {xn}, [xn, inv](Tape<T>& tp, int self) {
        const T og = tp.grad_of(self)[0] * inv;
        auto& gx = tp.grad_of(xn);
        for (auto& g : gx) g += og;
    });
}

/// 2-D convolution with zero padding. Accepts (N,C,H,W) or (C,H,W) input;
/// weights are (Co,Ci,kh,kw). im2col + GEMM; patch matrices are cached for
/// the backward pass.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, int stride = 1,
                 int pad = 0) {
    const bool batched = x.shape.size() == 4;
    if (!batched && x.shape.size() != 3)
        fail("conv2d: input must be 3-D or 4-D, got ", shape_str(x.shape));
    if (w.shape.size() != 4) fail("conv2d: weights must be 4-D, got ", shape_str(w.shape));
    if (stride < 1) fail("conv2d: stride must be >= 1");
    const int N = batched ? x.shape[0] : 1;
    const int Ci = batched ? x.shape[1] : x.shape[0];
    const int H = batched ? x.shape[2] : x.shape[1];
    const int W = batched ? x.shape[3] : x.shape[2];
    const int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    if (w.shape[1] != Ci)
        fail("conv2d: input has ", Ci, " channels but weights expect ", w.shape[1]);
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        fail("conv2d: kernel ", kh, "x", kw, " does not fit input ", H, "x", W,
             " with pad ", pad);

    const int K = Ci * kh * kw;
    const int P = Ho * Wo;
    auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * K * P);
    auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * Co * P, T(0));
    for (int n = 0; n < N; ++n) {
        T* coln = col->data() + static_cast<size_t>(n) * K * P;
        detail::im2col(x.data() + static_cast<size_t>(n) * Ci * H * W, Ci, H, W, kh, kw,
                       stride, pad, Ho, Wo, coln);
        detail::gemm_nn(Co, P, K, w.data(), coln,
                        out->data() + static_cast<size_t>(n) * Co * P);
    }
    detail::check_finite(*out, "conv2d");

    Shape out_shape = batched ? Shape{N, Co, Ho, Wo} : Shape{Co, Ho, Wo};
    int xn = tape.input_node(x), wn = tape.input_node(w);
    if (xn < 0 && wn < 0) {
        Tensor<T> t;
        t.shape = std::move(out_shape);
        t.values = std::move(out);
        return t;
    }
    std::vector<int> parents;
    if (xn >= 0) parents.push_back(xn);
    if (wn >= 0) parents.push_back(wn);
    return tape.emit(
        std::move(out_shape), std::move(out), std::move(parents),
        [=, wv = w.values](Tape<T>& tp, int self) {
            const auto& og = tp.grad_of(self);
            std::vector<T> dcol;
            for (int n = 0; n < N; ++n) {
                const T* ogn = og.data() + static_cast<size_t>(n) * Co * P;
                const T* coln = col->data() + static_cast<size_t>(n) * K * P;
                if (wn >= 0) detail::gemm_nt(Co, K, P, ogn, coln, tp.grad_of(wn).data());
                if (xn >= 0) {
                    dcol.assign(static_cast<size_t>(K) * P, T(0));
                    detail::gemm_tn(K, P, Co, wv->data(), ogn, dcol.data());
                    detail::col2im_add(dcol.data(), Ci, H, W, kh, kw, stride, pad, Ho, Wo,
                                       tp.grad_of(xn).data() +
                                           static_cast<size_t>(n) * Ci * H * W);
                }
            }
        });
}

/// Non-overlapping 2x2 window mean with stride 2 (spatial downsampling).
template <typename T>
Tensor<T> avg_pool2x2(Tape<T>& tape, const Tensor<T>& x) {
    if (x.shape.size() != 4 && x.shape.size() != 3)
        fail("avg_pool2x2: input must be 3-D or 4-D, got ", shape_str(x.shape));
    const bool batched = x.shape.size() == 4;
    const int N = batched ? x.shape[0] : 1;
    const int C = batched ? x.shape[1] : x.shape[0];
    const int H = batched ? x.shape[2] : x.shape[1];
    const int W = batched ? x.shape[3] : x.shape[2];
    if (H % 2 || W % 2) fail("avg_pool2x2: spatial dims must be even, got ", H, "x", W);
    const int Ho = H / 2, Wo = W / 2;

    auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * C * Ho * Wo);
    const T* in = x.data();
    T* o = out->data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* plane = in + static_cast<size_t>(nc) * H * W;
        T* oplane = o + static_cast<size_t>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) {
                const T* p = plane + static_cast<size_t>(2 * y) * W + 2 * xx;
                oplane[static_cast<size_t>(y) * Wo + xx] =
                    (p[0] + p[1] + p[W] + p[W + 1]) * T(0.25);
            }
    }
    Shape out_shape = batched ? Shape{N, C, Ho, Wo} : Shape{C, Ho, Wo};
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = std::move(out_shape);
        t.values = std::move(out);
        return t;
    }
    return tape.emit(std::move(out_shape), std::move(out), {xn},
                     [xn, N, C, H, W, Ho, Wo](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         auto& gx = tp.grad_of(xn);
                         for (int nc = 0; nc < N * C; ++nc) {
                             const T* gplane = og.data() + static_cast<size_t>(nc) * Ho * Wo;
                             T* dplane = gx.data() + static_cast<size_t>(nc) * H * W;
                             for (int y = 0; y < Ho; ++y)
                                 for (int xx = 0; xx < Wo; ++xx) {
                                     const T g =
                                         gplane[static_cast<size_t>(y) * Wo + xx] * T(0.25);
                                     T* p = dplane + static_cast<size_t>(2 * y) * W + 2 * xx;
                                     p[0] += g;
                                     p[1] += g;
                                     p[W] += g;
                                     p[W + 1] += g;
                                 }
                         }
                     });
}

/// (N,C,H,W) -> (N,C) or (C,H,W) -> (C,): mean over the spatial dims.
template <typename T>
Tensor<T> global_avg_pool(Tape<T>& tape, const Tensor<T>& x) {
    if (x.shape.size() != 4 && x.shape.size() != 3)
        fail("global_avg_pool: input must be 3-D or 4-D, got ", shape_str(x.shape));
    const bool batched = x.shape.size() == 4;
    const int N = batched ? x.shape[0] : 1;
    const int C = batched ? x.shape[1] : x.shape[0];
    const int HW = batched ? x.shape[2] * x.shape[3] : x.shape[1] * x.shape[2];
    const T inv = T(1) / static_cast<T>(HW);

    auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * C);
    for (int nc = 0; nc < N * C; ++nc) {
        const T* p = x.data() + static_cast<size_t>(nc) * HW;
        T s = T(0);
        for (int i = 0; i < HW; ++i) s += p[i];
        (*out)[static_cast<size_t>(nc)] = s * inv;
    }
    Shape out_shape = batched ? Shape{N, C} : Shape{C};
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = std::move(out_shape);
        t.values = std::move(out);
        return t;
    }
    return tape.emit(std::move(out_shape), std::move(out), {xn},
                     [xn, N, C, HW, inv](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         auto& gx = tp.grad_of(xn);
                         for (int nc = 0; nc < N * C; ++nc) {
                             const T g = og[static_cast<size_t>(nc)] * inv;
                             T* p = gx.data() + static_cast<size_t>(nc) * HW;
                             for (int i = 0; i < HW; ++i) p[i] += g;
                         }
                     });
}

/// (N,...) -> (N, prod(rest)). Pure reshape.
template <typename T>
Tensor<T> flatten(Tape<T>& tape, const Tensor<T>& x) {
    if (x.shape.size() < 2) fail("flatten: need at least 2 dims, got ", shape_str(x.shape));
    const int N = x.shape[0];
    const int M = static_cast<int>(numel(x.shape) / N);
    auto out = std::make_shared<std::vector<T>>(x.vals());
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = {N, M};
        t.values = std::move(out);
        return t;
    }
    return tape.emit({N, M}, std::move(out), {xn}, [xn](Tape<T>& tp, int self) {
        const auto& og = tp.grad_of(self);
        auto& gx = tp.grad_of(xn);
        for (size_t i = 0; i < og.size(); ++i) gx[i] += og[i];
    });
}

/// Row-wise log softmax over the last dimension of a 1-D or 2-D tensor,
/// stabilized with the usual max shift.
template <typename T>
Tensor<T> log_softmax(Tape<T>& tape, const Tensor<T>& x) {
    if (x.shape.empty() || x.shape.size() > 2)
        fail("log_softmax: input must be 1-D or 2-D, got ", shape_str(x.shape));
    const int rows = x.shape.size() == 2 ? x.shape[0] : 1;
    const int cols = x.shape.size() == 2 ? x.shape[1] : x.shape[0];
    auto out = std::make_shared<std::vector<T>>(x.vals());
    for (int r = 0; r < rows; ++r) {
        T* row = out->data() + static_cast<size_t>(r) * cols;
        T mx = row[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        T lse = T(0);
        for (int c = 0; c < cols; ++c) lse += std::exp(row[c] - mx);
        lse = mx + std::log(lse);
        for (int c = 0; c < cols; ++c) row[c] -= lse;
    }
    detail::check_finite(*out, "log_softmax");
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = x.shape;
        t.values = std::move(out);
        return t;
    }
    auto out_vals = out; // kept for backward: softmax = exp(out)
    return tape.emit(x.shape, std::move(out), {xn},
                     [xn, rows, cols, out_vals](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         auto& gx = tp.grad_of(xn);
                         for (int r = 0; r < rows; ++r) {
                             const size_t off = static_cast<size_t>(r) * cols;
                             T gsum = T(0);
                             for (int c = 0; c < cols; ++c) gsum += og[off + c];
                             for (int c = 0; c < cols; ++c)
                                 gx[off + c] +=
                                     og[off + c] - std::exp((*out_vals)[off + c]) * gsum;
                         }
                     });
}

/// Row-wise x / sqrt(sum(x^2) + 1e-12) over the last dimension of a 1-D or
/// 2-D tensor. The epsilon keeps the zero vector mapped to zero.
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& x) {
    if (x.shape.empty() || x.shape.size() > 2)
        fail("l2_normalize: input must be 1-D or 2-D, got ", shape_str(x.shape));
    const int rows = x.shape.size() == 2 ? x.shape[0] : 1;
    const int cols = x.shape.size() == 2 ? x.shape[1] : x.shape[0];
    auto out = std::make_shared<std::vector<T>>(x.vals());
    std::vector<T> inv_norm(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        T* row = out->data() + static_cast<size_t>(r) * cols;
        T q = T(0);
        for (int c = 0; c < cols; ++c) q += row[c] * row[c];
        const T inv = T(1) / std::sqrt(q + static_cast<T>(detail::kNormEps));
        inv_norm[static_cast<size_t>(r)] = inv;
        for (int c = 0; c < cols; ++c) row[c] *= inv;
    }
    detail::check_finite(*out, "l2_normalize");
    int xn = tape.input_node(x);
    if (xn < 0) {
        Tensor<T> t;
        t.shape = x.shape;
        t.values = std::move(out);
        return t;
    }
    auto yv = out;
    return tape.emit(x.shape, std::move(out), {xn},
                     [xn, rows, cols, yv, inv_norm](Tape<T>& tp, int self) {
                         const auto& og = tp.grad_of(self);
                         auto& gx = tp.grad_of(xn);
                         for (int r = 0; r < rows; ++r) {
                             const size_t off = static_cast<size_t>(r) * cols;
                             T dot = T(0);
                             for (int c = 0; c < cols; ++c) dot += og[off + c] * (*yv)[off + c];
                             const T inv = inv_norm[static_cast<size_t>(r)];
                             for (int c = 0; c < cols; ++c)
                                 gx[off + c] += inv * (og[off + c] - (*yv)[off + c] * dot);
                         }
                     });
}

// ---------------------------------------------------------------------------
// Generic dispatch by op kind
// ---------------------------------------------------------------------------

enum class OpKind {
    Matmul,
    Add,
    Scale,
    Conv2d,
    Relu,
    AvgPool2x2,
    GlobalAvgPool,
    Flatten,
    LogSoftmax,
    Mul,
    Sum,
    Mean,
    L2Normalize,
};

struct OpAttrs {
    double scalar = 1.0; // scale factor
    int stride = 1;      // conv2d
    int pad = 0;         // conv2d
};

inline constexpr std::array<OpKind, 13> kAllOpKinds = {
    OpKind::Matmul,     OpKind::Add,       OpKind::Scale,      OpKind::Conv2d,
    OpKind::Relu,       OpKind::AvgPool2x2, OpKind::GlobalAvgPool, OpKind::Flatten,
    OpKind::LogSoftmax, OpKind::Mul,       OpKind::Sum,        OpKind::Mean,
    OpKind::L2Normalize,
};

inline const char* op_name(OpKind k) {
    switch (k) {
    case OpKind::Matmul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Scale: return "scale";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::AvgPool2x2: return "avg_pool2x2";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Flatten: return "flatten";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Mul: return "mul";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::L2Normalize: return "l2_normalize";
    }
    return "?";
}

inline OpKind parse_op_kind(std::string_view name) {
    for (OpKind k : kAllOpKinds)
        if (name == op_name(k)) return k;
    fail("unknown op kind '", name, "'");
}

template <typename T>
Tensor<T> forward_op(Tape<T>& tape, OpKind kind, std::span<const Tensor<T>> inputs,
                     const OpAttrs& attrs = {}) {
    auto need = [&](size_t n) {
        if (inputs.size() != n)
            fail(op_name(kind), ": expected ", n, " inputs, got ", inputs.size());
    };
    switch (kind) {
    case OpKind::Matmul: need(2); return matmul(tape, inputs[0], inputs[1]);
    case OpKind::Add: need(2); return add(tape, inputs[0], inputs[1]);
    case OpKind::Scale: need(1); return scale(tape, inputs[0], static_cast<T>(attrs.scalar));
    case OpKind::Conv2d: need(2); return conv2d(tape, inputs[0], inputs[1], attrs.stride, attrs.pad);
    case OpKind::Relu: need(1); return relu(tape, inputs[0]);
    case OpKind::AvgPool2x2: need(1); return avg_pool2x2(tape, inputs[0]);
    case OpKind::GlobalAvgPool: need(1); return global_avg_pool(tape, inputs[0]);
    case OpKind::Flatten: need(1); return flatten(tape, inputs[0]);
    case OpKind::LogSoftmax: need(1); return log_softmax(tape, inputs[0]);
    case OpKind::Mul: need(2); return mul(tape, inputs[0], inputs[1]);
    case OpKind::Sum: need(1); return sum(tape, inputs[0]);
    case OpKind::Mean: need(1); return mean(tape, inputs[0]);
    case OpKind::L2Normalize: need(1); return l2_normalize(tape, inputs[0]);
    }
    fail("unknown op kind id ", static_cast<int>(kind));
}

} // namespace crmatch
