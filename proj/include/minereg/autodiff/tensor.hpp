#pragma once

// Reverse-mode differentiable tensors.
//
// A TensorT is a cheap handle onto a shared Node. Every op that has at least
// one input requiring a gradient records its backward closure on the result
// node, stamped with a monotonically increasing sequence number. backward()
// collects the reachable nodes and replays the closures in reverse sequence
// order, i.e. the recorded tape is walked backwards.
//
// Gradients accumulate into leaf tensors; callers zero them explicitly
// (zero_grad) between steps.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace minereg::ad {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    uint64_t seq = 0;
    std::string op;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node &)> backward_fn;

    // Returns the gradient buffer, allocating zeros on first use.
    T *grad_buffer() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad.data();
    }
};

template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static TensorT zeros(Shape shape, bool requires_grad = false);
    static TensorT full(Shape shape, T value, bool requires_grad = false);
    static TensorT from(Shape shape, std::vector<T> data, bool requires_grad = false);
    static TensorT scalar(T value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape &shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    int64_t dim(size_t i) const { return node_->shape.at(i); }
    int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

    std::span<const T> data() const { return node_->data; }
    // Writable view; only valid on leaves, never on values captured by a tape.
    std::span<T> mutable_data() { return node_->data; }
    std::span<const T> grad() const { return node_->grad; }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string &op() const { return node_->op; }
    T item() const;

    void zero_grad();
    // Copy of the values with no history and requires_grad = false.
    TensorT detach() const;

    template <class U>
    TensorT<U> cast(bool requires_grad = false) const {
        std::vector<U> out(node_->data.begin(), node_->data.end());
        return TensorT<U>::from(node_->shape, std::move(out), requires_grad);
    }

    const std::shared_ptr<Node<T>> &node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// Gradient recording is on by default; NoGradGuard disables it for the
// current thread (inference, evaluation).
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

private:
    bool previous_;
};

// Populates .grad of every tensor that requires a gradient and from which
// loss is reachable. loss must hold exactly one element.
template <class T>
void backward(const TensorT<T> &loss);

namespace detail {

uint64_t next_seq();

// Builds an op result. Throws NumericError naming `op` on non-finite output.
// The backward closure is attached only when gradient recording is enabled
// and at least one input requires a gradient.
template <class T>
TensorT<T> make_result(Shape shape, std::vector<T> data, std::string op,
                       std::initializer_list<const TensorT<T> *> inputs,
                       std::function<void(const Node<T> &)> backward_fn);

// Gradient buffer of an input, or nullptr if it does not take gradients.
template <class T>
T *grad_of(const std::shared_ptr<Node<T>> &node) {
    return node->requires_grad ? node->grad_buffer() : nullptr;
}

} // namespace detail

} // namespace minereg::ad
