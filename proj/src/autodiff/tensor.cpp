#include "minereg/autodiff/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "minereg/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace minereg::ad {

namespace {

#if defined(__GLIBC__)
// Tensor buffers are large and short-lived. By default glibc serves them with
// fresh mmap regions, so every op pays first-touch page faults; keeping them
// on the heap lets freed buffers be reused.
const bool g_allocator_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

} // namespace

int64_t shape_numel(const Shape &shape) {
    int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw ConfigError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_seq{1};
} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <class T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <class T>
TensorT<T> TensorT<T>::full(Shape shape, T value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(static_cast<size_t>(n), value), requires_grad);
}

template <class T>
TensorT<T> TensorT<T>::from(Shape shape, std::vector<T> data, bool requires_grad) {
    const auto n = shape_numel(shape);
    if (static_cast<int64_t>(data.size()) != n) {
        throw ConfigError("data length " + std::to_string(data.size()) + " does not match shape " +
                          shape_str(shape));
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = detail::next_seq();
    node->op = "leaf";
    return TensorT(std::move(node));
}

template <class T>
TensorT<T> TensorT<T>::scalar(T value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

template <class T>
T TensorT<T>::item() const {
    if (node_->data.size() != 1) {
        throw UsageError("item() on tensor of shape " + shape_str(node_->shape));
    }
    return node_->data[0];
}

template <class T>
void TensorT<T>::zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <class T>
TensorT<T> TensorT<T>::detach() const {
    return from(node_->shape, node_->data, false);
}

namespace detail {

uint64_t next_seq() { return g_seq.fetch_add(1, std::memory_order_relaxed); }

template <class T>
TensorT<T> make_result(Shape shape, std::vector<T> data, std::string op,
                       std::initializer_list<const TensorT<T> *> inputs,
                       std::function<void(const Node<T> &)> backward_fn) {
    for (const auto &v : data) {
        if (!std::isfinite(v)) throw NumericError("non-finite value produced by op '" + op + "'");
    }
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->seq = next_seq();
    node->op = std::move(op);
    if (g_grad_enabled) {
        for (const auto *in : inputs) {
            if (in->requires_grad()) node->parents.push_back(in->node());
        }
        if (!node->parents.empty()) {
            node->requires_grad = true;
            node->backward_fn = std::move(backward_fn);
        }
    }
    return TensorT<T>(std::move(node));
}

} // namespace detail

template <class T>
void backward(const TensorT<T> &loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward() requires a scalar loss");
    }
    if (!loss.requires_grad()) return;

    std::vector<Node<T> *> order;
    std::unordered_set<Node<T> *> seen;
    std::vector<Node<T> *> stack{loss.node().get()};
    while (!stack.empty()) {
        auto *n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto &p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](auto *a, auto *b) { return a->seq > b->seq; });

    loss.node()->grad_buffer()[0] += T(1);
    for (auto *n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

template class TensorT<float>;
template class TensorT<double>;
template void backward(const TensorT<float> &);
template void backward(const TensorT<double> &);
template TensorT<float> detail::make_result(Shape, std::vector<float>, std::string,
                                            std::initializer_list<const TensorT<float> *>,
                                            std::function<void(const Node<float> &)>);
template TensorT<double> detail::make_result(Shape, std::vector<double>, std::string,
                                             std::initializer_list<const TensorT<double> *>,
                                             std::function<void(const Node<double> &)>);

} // namespace minereg::ad
