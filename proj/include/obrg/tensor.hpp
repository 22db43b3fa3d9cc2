#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "obrg/common.hpp"
#include "obrg/rng.hpp"

namespace obrg {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) fail(ErrKind::shape, "tensor: non-positive dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class Tensor;

struct Node {
    std::vector<Tensor> parents;
    std::function<void(Tensor&)> backward;
};

// Value-semantic handle over shared storage. Values are float32; reductions
// inside kernels accumulate in double. Gradients accumulate additively until
// zero_grad.
class Tensor {
public:
    Tensor() : shape_{}, requires_grad_(false) {}

    Tensor(Shape shape, bool requires_grad = false)
        : data_(std::make_shared<std::vector<float>>(shape_numel(shape), 0.0f)),
          shape_(std::move(shape)),
          requires_grad_(requires_grad) {
        if (requires_grad_) grad_ = std::make_shared<std::vector<float>>(data_->size(), 0.0f);
    }

    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
        : data_(std::make_shared<std::vector<float>>(std::move(values))),
          shape_(std::move(shape)),
          requires_grad_(requires_grad) {
        if (data_->size() != shape_numel(shape_)) {
            fail(ErrKind::shape, "tensor: value count " + std::to_string(data_->size()) +
                                     " does not match shape " + shape_str(shape_));
        }
        if (requires_grad_) grad_ = std::make_shared<std::vector<float>>(data_->size(), 0.0f);
    }

    Tensor(Shape shape, std::initializer_list<float> values, bool requires_grad = false)
        : Tensor(std::move(shape), std::vector<float>(values), requires_grad) {}

    static Tensor scalar(float v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<float>{v}, requires_grad);
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        for (auto& x : *t.data_) x = v;
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, float stddev, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        for (auto& x : *t.data_) x = static_cast<float>(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    size_t numel() const { return data_ ? data_->size() : 0; }
    bool requires_grad() const { return requires_grad_; }

    std::vector<float>& values() { return *data_; }
    const std::vector<float>& values() const { return *data_; }
    float* data() { return data_->data(); }
    const float* data() const { return data_->data(); }

    float item() const {
        if (numel() != 1) fail(ErrKind::shape, "tensor: item() on non-scalar " + shape_str(shape_));
        return (*data_)[0];
    }

    bool has_grad() const { return static_cast<bool>(grad_); }
    std::vector<float>& grad() {
        if (!grad_) fail(ErrKind::shape, "tensor: grad accessed but not allocated");
        return *grad_;
    }
    const std::vector<float>& grad() const {
        if (!grad_) fail(ErrKind::shape, "tensor: grad accessed but not allocated");
        return *grad_;
    }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
    }

    // Detach from autograd: same storage, no grad, no history.
    Tensor detach() const {
        Tensor t;
        t.data_ = data_;
        t.shape_ = shape_;
        t.requires_grad_ = false;
        return t;
    }

    Tensor clone() const {
        return Tensor(shape_, *data_, requires_grad_);
    }

    void set_node(std::shared_ptr<Node> node) { node_ = std::move(node); }
    const std::shared_ptr<Node>& node() const { return node_; }

    // Reverse-mode sweep from a scalar root. Gradients are accumulated (+=)
    // into every reachable tensor with requires_grad; call zero_grad between
    // optimization steps, not between backward calls you want summed.
    void backward() {
        if (numel() != 1) fail(ErrKind::shape, "backward: root must be scalar");
        if (!requires_grad_) fail(ErrKind::numeric, "backward: root does not require grad");
        std::vector<Tensor> order;
        std::unordered_set<const Node*> seen;
        topo_(*this, seen, order);
        (*grad_)[0] += 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if (it->node_ && it->node_->backward) it->node_->backward(*it);
        }
    }

private:
    static void topo_(const Tensor& t, std::unordered_set<const Node*>& seen,
                      std::vector<Tensor>& order) {
        if (!t.node_ || seen.count(t.node_.get())) return;
        seen.insert(t.node_.get());
        for (const auto& p : t.node_->parents) topo_(p, seen, order);
        order.push_back(t);
    }

    std::shared_ptr<std::vector<float>> data_;
    std::shared_ptr<std::vector<float>> grad_;
    std::shared_ptr<Node> node_;
    Shape shape_;
    bool requires_grad_;
};

namespace detail {

// Shared builder for differentiable ops: allocates the output, wires the
// node when any parent needs grad.
inline Tensor make_op_output(Shape shape, std::vector<Tensor> parents,
                             std::function<void(Tensor&)> backward) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p.requires_grad();
    Tensor out(std::move(shape), needs);
    if (needs) {
        auto node = std::make_shared<Node>();
        node->parents = std::move(parents);
        node->backward = std::move(backward);
        out.set_node(std::move(node));
    }
    return out;
}

}  // namespace detail

}  // namespace obrg
