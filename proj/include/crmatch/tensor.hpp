#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "crmatch/common.hpp"

namespace crmatch {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

/// N-dimensional row-major array. Value-semantic handle: copies share the
/// underlying buffers. `grad` is allocated only for requires_grad leaves and
/// accumulates across backward calls until zero_grad().
///
/// `tape_id`/`node` tie an op result to the tape that produced it; they are
/// meaningless for leaves (leaves are registered by buffer identity instead).
template <typename T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> values;
    std::shared_ptr<std::vector<T>> grad;
    bool requires_grad = false;
    const void* tape_id = nullptr;
    int node = -1;

    Tensor() = default;

    int64_t size() const { return values ? static_cast<int64_t>(values->size()) : 0; }
    T* data() { return values->data(); }
    const T* data() const { return values->data(); }
    std::vector<T>& vals() { return *values; }
    const std::vector<T>& vals() const { return *values; }

    T item() const {
        if (size() != 1) fail("item() on non-scalar tensor of shape ", shape_str(shape));
        return (*values)[0];
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }
};

template <typename T>
Tensor<T> tensor_of(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
        fail("tensor_of: shape ", shape_str(shape), " does not match data length ", data.size());
    Tensor<T> t;
    t.shape = std::move(shape);
    t.values = std::make_shared<std::vector<T>>(std::move(data));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.values->size(), T(0));
    return t;
}

template <typename T>
Tensor<T> full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(static_cast<size_t>(numel(shape)), value);
    return tensor_of<T>(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> zeros(Shape shape, bool requires_grad = false) {
    return full<T>(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> scalar_tensor(T value) {
    return tensor_of<T>({1}, {value});
}

/// Same values, no gradient participation.
template <typename T>
Tensor<T> detached(const Tensor<T>& t) {
    Tensor<T> out;
    out.shape = t.shape;
    out.values = t.values;
    return out;
}

/// Records forward operations so one backward() traversal can fill the
/// gradients of every reachable requires_grad leaf. Node order is
/// topological by construction (an op is appended after its inputs).
/// A tape lives for one training step and is then discarded.
template <typename T>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    size_t node_count() const { return nodes_.size(); }

    /// Backward rule: reads grad_of(self), accumulates into parents' grads.
    using Backprop = std::function<void(Tape&, int self)>;

    /// Node id for an op input, or -1 if the input does not participate in
    /// differentiation (constant, or recording disabled). requires_grad
    /// leaves are registered on first use, keyed by buffer identity.
    int input_node(const Tensor<T>& t) {
        if (!recording_) return -1;
        if (t.tape_id == this && t.node >= 0) return t.node;
        if (!t.requires_grad) return -1;
        const void* key = t.values.get();
        auto it = leaf_ids_.find(key);
        if (it != leaf_ids_.end()) return it->second;
        int id = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{t.shape, t.values, {}, {}, nullptr, t.grad});
        leaf_ids_.emplace(key, id);
        return id;
    }

    /// Appends an op node and returns the tensor handle for its output.
    Tensor<T> emit(Shape shape, std::shared_ptr<std::vector<T>> values,
                   std::vector<int> parents, Backprop backprop) {
        Tensor<T> out;
        out.shape = std::move(shape);
        out.values = std::move(values);
        out.tape_id = this;
        out.node = static_cast<int>(nodes_.size());
        nodes_.push_back(Node{out.shape, out.values, {}, std::move(parents),
                              std::move(backprop), nullptr});
        return out;
    }

    std::vector<T>& grad_of(int node) { return nodes_[static_cast<size_t>(node)].grad; }
    const std::vector<T>& values_of(int node) const {
        return *nodes_[static_cast<size_t>(node)].values;
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// additively into the leaves' own grad buffers.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1) fail("backward: loss must be scalar, got ", shape_str(loss.shape));
        if (loss.tape_id != this || loss.node < 0)
            fail("backward: loss was not produced on this tape");
        if (nodes_.empty()) fail("backward: empty tape");

        const int root = loss.node;
        std::vector<char> reachable(nodes_.size(), 0);
        reachable[static_cast<size_t>(root)] = 1;
        for (int i = root; i >= 0; --i) {
            if (!reachable[static_cast<size_t>(i)]) continue;
            for (int p : nodes_[static_cast<size_t>(i)].parents)
                reachable[static_cast<size_t>(p)] = 1;
        }
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (!reachable[i]) continue;
            auto& g = nodes_[i].grad;
            g.assign(nodes_[i].values->size(), T(0));
        }
        nodes_[static_cast<size_t>(root)].grad[0] = T(1);
        for (int i = root; i >= 0; --i) {
            if (!reachable[static_cast<size_t>(i)]) continue;
            auto& node = nodes_[static_cast<size_t>(i)];
            if (node.backprop) node.backprop(*this, i);
        }
        for (size_t i = 0; i < nodes_.size(); ++i) {
            if (!reachable[i] || !nodes_[i].leaf_grad) continue;
            auto& dst = *nodes_[i].leaf_grad;
            const auto& src = nodes_[i].grad;
            for (size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
    }

private:
    struct Node {
        Shape shape;
        std::shared_ptr<std::vector<T>> values;
        std::vector<T> grad;
        std::vector<int> parents;
        Backprop backprop;
        std::shared_ptr<std::vector<T>> leaf_grad; // leaves only
    };

    std::vector<Node> nodes_;
    std::unordered_map<const void*, int> leaf_ids_;
    bool recording_;
};

/// Extension point for composite losses that need an analytic backward rule
/// not expressible through the built-in ops. The caller supplies the forward
/// result; `backward` receives the output gradient and one writable gradient
/// accumulator per input (null when that input is not tracked).
template <typename T>
Tensor<T> custom_op(Tape<T>& tape, std::vector<Tensor<T>> inputs, Shape out_shape,
                    std::vector<T> out_values,
                    std::function<void(const std::vector<T>& out_grad,
                                       const std::vector<const std::vector<T>*>& in_values,
                                       const std::vector<std::vector<T>*>& in_grads)>
                        backward) {
    if (numel(out_shape) != static_cast<int64_t>(out_values.size()))
        fail("custom_op: output shape/value mismatch");
    auto values = std::make_shared<std::vector<T>>(std::move(out_values));

    std::vector<int> parent_ids;
    parent_ids.reserve(inputs.size());
    bool any = false;
    for (const auto& in : inputs) {
        int id = tape.input_node(in);
        parent_ids.push_back(id);
        any = any || id >= 0;
    }
    if (!any) {
        Tensor<T> out;
        out.shape = std::move(out_shape);
        out.values = std::move(values);
        return out;
    }

    std::vector<int> parents;
    for (int id : parent_ids)
        if (id >= 0) parents.push_back(id);

    std::vector<std::shared_ptr<std::vector<T>>> in_vals;
    for (const auto& in : inputs) in_vals.push_back(in.values);

    return tape.emit(
        std::move(out_shape), std::move(values), std::move(parents),
        [parent_ids, in_vals, backward = std::move(backward)](Tape<T>& tp, int self) {
            std::vector<const std::vector<T>*> vals;
            std::vector<std::vector<T>*> grads;
            vals.reserve(in_vals.size());
            grads.reserve(in_vals.size());
            for (size_t i = 0; i < in_vals.size(); ++i) {
                vals.push_back(in_vals[i].get());
                grads.push_back(parent_ids[i] >= 0 ? &tp.grad_of(parent_ids[i]) : nullptr);
            }
            backward(tp.grad_of(self), vals, grads);
        });
}

} // namespace crmatch
