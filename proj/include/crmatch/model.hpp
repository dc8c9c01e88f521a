#pragma once

#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "crmatch/augment.hpp"
#include "crmatch/ops.hpp"
#include "crmatch/rng.hpp"

namespace crmatch {

enum class DistPlacement { A, B }; // feature tap: before / after global pooling
enum class ProjHead { Linear, None, Mlp };

struct ModelConfig {
    int input_size = 32;
    int width = 16; // conv channels: width, 2*width, 4*width
    int num_classes = 10;
    int proj_dim = 128;
    DistPlacement placement = DistPlacement::A;
    ProjHead proj_head = ProjHead::Linear;

    int feat_spatial() const { return input_size / 8; }
    int feat_dim() const { return 4 * width; }
    int flat_dim() const { return feat_dim() * feat_spatial() * feat_spatial(); }
    int proj_input_dim() const {
        return placement == DistPlacement::A ? flat_dim() : feat_dim();
    }
    int proj_output_dim() const {
        return proj_head == ProjHead::None ? proj_input_dim() : proj_dim;
    }
};

/// Encoder (3 conv blocks), linear classifier, projection head, and the
/// 2-layer rotation head. Parameters are held both as named entries (stable
/// order, used by the optimizer / EMA / checkpoints) and as direct handles
/// for forward().
template <typename T>
struct ModelState {
    ModelConfig cfg;
    std::vector<std::pair<std::string, Tensor<T>>> params;

    Tensor<T>& param(std::string_view name) {
        for (auto& [n, t] : params)
            if (n == name) return t;
        fail("no parameter named '", name, "'");
    }
    const Tensor<T>& param(std::string_view name) const {
        return const_cast<ModelState*>(this)->param(name);
    }

    void zero_grad() {
        for (auto& [n, t] : params) t.zero_grad();
    }
};

/// Weight decay applies to weights only, not biases.
inline bool is_weight_param(std::string_view name) {
    return name.size() >= 2 && name.substr(name.size() - 2) == ".w";
}

/// Kaiming-style scaled uniform init U(-sqrt(6/fan_in), +sqrt(6/fan_in)) for
/// weights, zeros for biases. Fully determined by the seed.
template <typename T>
ModelState<T> init_model(const ModelConfig& cfg, uint64_t seed) {
    if (cfg.input_size % 8 != 0)
        fail("model: input_size must be a multiple of 8, got ", cfg.input_size);
    ModelState<T> state;
    state.cfg = cfg;
    Rng rng = Rng(seed).stream({0x6d6f64656cULL}); // "model"

    auto weight = [&](std::string name, Shape shape, int fan_in) {
        const double bound = std::sqrt(6.0 / fan_in);
        std::vector<T> data(static_cast<size_t>(numel(shape)));
        for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
        state.params.emplace_back(std::move(name), tensor_of<T>(shape, std::move(data), true));
    };
    auto bias = [&](std::string name, int n) {
        state.params.emplace_back(std::move(name), zeros<T>({n}, true));
    };

    const int w = cfg.width;
    weight("enc.conv1.w", {w, 3, 3, 3}, 3 * 9);
    bias("enc.conv1.b", w);
    weight("enc.conv2.w", {2 * w, w, 3, 3}, w * 9);
    bias("enc.conv2.b", 2 * w);
    weight("enc.conv3.w", {4 * w, 2 * w, 3, 3}, 2 * w * 9);
    bias("enc.conv3.b", 4 * w);

    weight("cls.w", {cfg.feat_dim(), cfg.num_classes}, cfg.feat_dim());
    bias("cls.b", cfg.num_classes);

    const int pin = cfg.proj_input_dim();
    switch (cfg.proj_head) {
    case ProjHead::Linear:
        weight("proj.w", {pin, cfg.proj_dim}, pin);
        bias("proj.b", cfg.proj_dim);
        break;
    case ProjHead::Mlp:
        weight("proj.fc1.w", {pin, cfg.proj_dim}, pin);
        bias("proj.fc1.b", cfg.proj_dim);
        weight("proj.fc2.w", {cfg.proj_dim, cfg.proj_dim}, cfg.proj_dim);
        bias("proj.fc2.b", cfg.proj_dim);
        break;
    case ProjHead::None:
        break;
    }

    weight("rot.fc1.w", {cfg.feat_dim(), cfg.feat_dim()}, cfg.feat_dim());
    bias("rot.fc1.b", cfg.feat_dim());
    weight("rot.fc2.w", {cfg.feat_dim(), 4}, cfg.feat_dim());
    bias("rot.fc2.b", 4);
    return state;
}

/// Activations at the four taps of the architecture: un-pooled encoder
/// output (a), pooled feature vector (b), class logits, and the projection
/// used by the feature-distance loss.
template <typename T>
struct FeatureBundle {
    Tensor<T> feat_a;
    Tensor<T> feat_b;
    Tensor<T> logits;
    Tensor<T> proj;
};

template <typename T>
FeatureBundle<T> forward(Tape<T>& tape, ModelState<T>& m, const Tensor<T>& batch) {
    const ModelConfig& cfg = m.cfg;
    if (batch.shape.size() != 4 || batch.shape[1] != 3 || batch.shape[2] != cfg.input_size ||
        batch.shape[3] != cfg.input_size)
        fail("forward: expected (N,3,", cfg.input_size, ",", cfg.input_size, ") batch, got ",
             shape_str(batch.shape));

    auto block = [&](const Tensor<T>& x, std::string_view wname, std::string_view bname) {
        auto h = conv2d(tape, x, m.param(wname), 1, 1);
        h = add(tape, h, m.param(bname));
        h = relu(tape, h);
        return avg_pool2x2(tape, h);
    };
    FeatureBundle<T> out;
    auto h = block(batch, "enc.conv1.w", "enc.conv1.b");
    h = block(h, "enc.conv2.w", "enc.conv2.b");
    out.feat_a = block(h, "enc.conv3.w", "enc.conv3.b");
    out.feat_b = global_avg_pool(tape, out.feat_a);
    out.logits = add(tape, matmul(tape, out.feat_b, m.param("cls.w")), m.param("cls.b"));

    Tensor<T> pin = cfg.placement == DistPlacement::A ? flatten(tape, out.feat_a) : out.feat_b;
    switch (cfg.proj_head) {
    case ProjHead::Linear:
        out.proj = add(tape, matmul(tape, pin, m.param("proj.w")), m.param("proj.b"));
        break;
    case ProjHead::Mlp: {
        auto h1 = relu(tape, add(tape, matmul(tape, pin, m.param("proj.fc1.w")),
                                 m.param("proj.fc1.b")));
        out.proj = add(tape, matmul(tape, h1, m.param("proj.fc2.w")), m.param("proj.fc2.b"));
        break;
    }
    case ProjHead::None:
        out.proj = pin;
        break;
    }
    return out;
}

/// 4-way rotation logits from pooled features.
template <typename T>
Tensor<T> rot_forward(Tape<T>& tape, ModelState<T>& m, const Tensor<T>& feat_b) {
    if (feat_b.shape.size() != 2 || feat_b.shape[1] != m.cfg.feat_dim())
        fail("rot_forward: expected (N,", m.cfg.feat_dim(), ") features, got ",
             shape_str(feat_b.shape));
    auto h = relu(tape, add(tape, matmul(tape, feat_b, m.param("rot.fc1.w")),
                            m.param("rot.fc1.b")));
    return add(tape, matmul(tape, h, m.param("rot.fc2.w")), m.param("rot.fc2.b"));
}

// ---------------------------------------------------------------------------
// EMA shadow
// ---------------------------------------------------------------------------

template <typename T>
struct EmaState {
    std::vector<std::pair<std::string, Tensor<T>>> shadow;
    double decay = 0.999;

    const Tensor<T>& param(std::string_view name) const {
        for (auto& [n, t] : shadow)
            if (n == name) return t;
        fail("no EMA parameter named '", name, "'");
    }
};

template <typename T>
EmaState<T> make_ema(const ModelState<T>& m, double decay) {
    EmaState<T> ema;
    ema.decay = decay;
    for (const auto& [name, t] : m.params)
        ema.shadow.emplace_back(name, tensor_of<T>(t.shape, t.vals()));
    return ema;
}

/// shadow <- decay * shadow + (1 - decay) * param. Never touches the model.
template <typename T>
void ema_update(EmaState<T>& ema, const ModelState<T>& m, double decay) {
    if (decay <= 0.0 || decay >= 1.0) fail("ema_update: decay must be in (0,1), got ", decay);
    if (ema.shadow.size() != m.params.size()) fail("ema_update: parameter count drift");
    const T d = static_cast<T>(decay);
    for (size_t i = 0; i < m.params.size(); ++i) {
        auto& [sname, s] = ema.shadow[i];
        const auto& [pname, p] = m.params[i];
        if (sname != pname || s.shape != p.shape)
            fail("ema_update: shape drift on '", pname, "'");
        auto& sv = s.vals();
        const auto& pv = p.vals();
        for (size_t k = 0; k < sv.size(); ++k) sv[k] = d * sv[k] + (T(1) - d) * pv[k];
    }
}

/// Copy of the model with EMA values substituted (for evaluation / probing).
template <typename T>
ModelState<T> with_ema_weights(const ModelState<T>& m, const EmaState<T>& ema) {
    ModelState<T> out;
    out.cfg = m.cfg;
    for (const auto& [name, t] : ema.shadow)
        out.params.emplace_back(name, tensor_of<T>(t.shape, t.vals()));
    return out;
}

// ---------------------------------------------------------------------------
// Image batches
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> images_to_tensor(std::span<const Image> images) {
    if (images.empty()) fail("images_to_tensor: empty batch");
    const int h = images[0].height, w = images[0].width;
    std::vector<T> data;
    data.reserve(images.size() * 3 * static_cast<size_t>(h) * w);
    for (const auto& img : images) {
        if (img.height != h || img.width != w) fail("images_to_tensor: mixed image sizes");
        for (float v : img.data) data.push_back(static_cast<T>(v));
    }
    return tensor_of<T>({static_cast<int>(images.size()), 3, h, w}, std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "CRMT", version u32, tensor count u32, then per tensor
// name_len u16 + name + ndim u8 + dims u32 each + raw f32 little-endian.
// Raw parameters under their own names, EMA shadows under "ema/<name>".
// ---------------------------------------------------------------------------

struct NamedBuffer {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

void save_checkpoint(const std::string& path, const ModelState<float>& m,
                     const EmaState<float>& ema);
std::vector<NamedBuffer> read_checkpoint(const std::string& path);
void load_checkpoint(const std::string& path, ModelState<float>& m, EmaState<float>& ema);

} // namespace crmatch
