#include "minereg/autodiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "minereg/errors.hpp"

namespace minereg::ad {

using detail::grad_of;
using detail::make_result;

namespace {

template <class T>
void require_same_shape(const TensorT<T> &a, const TensorT<T> &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

// Applies f elementwise; df(x, y) gives dy/dx from input and output.
template <class T, class F, class DF>
TensorT<T> unary(const TensorT<T> &x, const char *op, F f, DF df) {
    const auto xs = x.data();
    std::vector<T> out(xs.size());
    for (size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), op, {&x}, [xn, df](const Node<T> &self) {
        T *gx = grad_of(xn);
        for (size_t i = 0; i < self.grad.size(); ++i) {
            gx[i] += self.grad[i] * df(xn->data[i], self.data[i]);
        }
    });
}

template <class T>
T log_mean_exp_value(std::span<const T> xs) {
    T mx = -std::numeric_limits<T>::infinity();
    for (auto v : xs) mx = std::max(mx, v);
    double acc = 0;
    for (auto v : xs) acc += std::exp(static_cast<double>(v - mx));
    return mx + static_cast<T>(std::log(acc / static_cast<double>(xs.size())));
}

} // namespace

template <class T>
TensorT<T> add(const TensorT<T> &a, const TensorT<T> &b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.data().begin(), a.data().end());
    const auto bs = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bs[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), "add", {&a, &b}, [an, bn](const Node<T> &self) {
        if (T *g = grad_of(an)) for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (T *g = grad_of(bn)) for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
TensorT<T> sub(const TensorT<T> &a, const TensorT<T> &b) {
    require_same_shape(a, b, "sub");
    std::vector<T> out(a.data().begin(), a.data().end());
    const auto bs = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bs[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), "sub", {&a, &b}, [an, bn](const Node<T> &self) {
        if (T *g = grad_of(an)) for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        if (T *g = grad_of(bn)) for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    });
}

template <class T>
TensorT<T> mul(const TensorT<T> &a, const TensorT<T> &b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.data().begin(), a.data().end());
    const auto bs = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bs[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), "mul", {&a, &b}, [an, bn](const Node<T> &self) {
        if (T *g = grad_of(an))
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->data[i];
        if (T *g = grad_of(bn))
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->data[i];
    });
}

template <class T>
TensorT<T> div(const TensorT<T> &a, const TensorT<T> &b) {
    require_same_shape(a, b, "div");
    std::vector<T> out(a.data().begin(), a.data().end());
    const auto bs = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] /= bs[i];
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), "div", {&a, &b}, [an, bn](const Node<T> &self) {
        if (T *g = grad_of(an))
            for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / bn->data[i];
        if (T *g = grad_of(bn))
            for (size_t i = 0; i < self.grad.size(); ++i)
                g[i] -= self.grad[i] * self.data[i] / bn->data[i];
    });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T> &x, T c) {
    return unary<T>(x, "add_scalar", [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T> &x, T c) {
    return unary<T>(x, "mul_scalar", [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
TensorT<T> exp(const TensorT<T> &x) {
    return unary<T>(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
TensorT<T> log(const TensorT<T> &x) {
    return unary<T>(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
TensorT<T> square(const TensorT<T> &x) {
    return unary<T>(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <class T>
TensorT<T> sqrt(const TensorT<T> &x) {
    return unary<T>(x, "sqrt", [](T v) { return std::sqrt(v); },
                    [](T, T y) { return T(0.5) / y; });
}

template <class T>
TensorT<T> leaky_relu(const TensorT<T> &x, T negative_slope) {
    return unary<T>(
        x, "leaky_relu", [negative_slope](T v) { return v > T(0) ? v : negative_slope * v; },
        [negative_slope](T v, T) { return v > T(0) ? T(1) : negative_slope; });
}

template <class T>
TensorT<T> sum(const TensorT<T> &x) {
    double acc = 0;
    for (auto v : x.data()) acc += v;
    auto xn = x.node();
    return make_result<T>({1}, {static_cast<T>(acc)}, "sum", {&x}, [xn](const Node<T> &self) {
        T *g = grad_of(xn);
        for (size_t i = 0; i < xn->data.size(); ++i) g[i] += self.grad[0];
    });
}

template <class T>
TensorT<T> mean(const TensorT<T> &x) {
    double acc = 0;
    for (auto v : x.data()) acc += v;
    const auto n = static_cast<T>(x.numel());
    auto xn = x.node();
    return make_result<T>({1}, {static_cast<T>(acc / x.numel())}, "mean", {&x},
                          [xn, n](const Node<T> &self) {
                              T *g = grad_of(xn);
                              const T s = self.grad[0] / n;
                              for (size_t i = 0; i < xn->data.size(); ++i) g[i] += s;
                          });
}

template <class T>
TensorT<T> log_mean_exp(const TensorT<T> &x) {
    const T value = log_mean_exp_value<T>(x.data());
    auto xn = x.node();
    return make_result<T>({1}, {value}, "log_mean_exp", {&x}, [xn](const Node<T> &self) {
        // d/dx_i = exp(x_i - lme) / n = softmax(x)_i
        T *g = grad_of(xn);
        const T n = static_cast<T>(xn->data.size());
        for (size_t i = 0; i < xn->data.size(); ++i) {
            g[i] += self.grad[0] * std::exp(xn->data[i] - self.data[0]) / n;
        }
    });
}

template <class T>
TensorT<T> log_mean_exp_with_denominator(const TensorT<T> &x, T log_denominator) {
    if (!std::isfinite(log_denominator)) {
        throw NumericError("log_mean_exp_with_denominator: non-finite denominator");
    }
    const T value = log_mean_exp_value<T>(x.data());
    auto xn = x.node();
    return make_result<T>({1}, {value}, "log_mean_exp_with_denominator", {&x},
                          [xn, log_denominator](const Node<T> &self) {
                              T *g = grad_of(xn);
                              const T n = static_cast<T>(xn->data.size());
                              for (size_t i = 0; i < xn->data.size(); ++i) {
                                  g[i] += self.grad[0] * std::exp(xn->data[i] - log_denominator) / n;
                              }
                          });
}

template <class T>
TensorT<T> reshape(const TensorT<T> &x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ConfigError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto xn = x.node();
    return make_result<T>(std::move(shape), std::move(out), "reshape", {&x}, [xn](const Node<T> &self) {
        T *g = grad_of(xn);
        for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    });
}

template <class T>
TensorT<T> concat_channels(const TensorT<T> &a, const TensorT<T> &b) {
    if (a.rank() != b.rank() || a.rank() < 1 ||
        !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw ConfigError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    }
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    std::vector<T> out;
    out.reserve(static_cast<size_t>(a.numel() + b.numel()));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto an = a.node(), bn = b.node();
    return make_result<T>(std::move(shape), std::move(out), "concat_channels", {&a, &b},
                          [an, bn](const Node<T> &self) {
                              const size_t na = an->data.size();
                              if (T *g = grad_of(an))
                                  for (size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                              if (T *g = grad_of(bn))
                                  for (size_t i = 0; i < bn->data.size(); ++i) g[i] += self.grad[na + i];
                          });
}

template <class T>
TensorT<T> gather(const TensorT<T> &x, std::span<const int64_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<int64_t>(index.size())) {
        throw ConfigError("gather: index length does not match output shape " + shape_str(out_shape));
    }
    const auto xs = x.data();
    const auto n = static_cast<int64_t>(xs.size());
    std::vector<T> out(index.size());
    for (size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= n) throw ConfigError("gather: index out of range");
        out[i] = xs[static_cast<size_t>(index[i])];
    }
    auto xn = x.node();
    std::vector<int64_t> idx(index.begin(), index.end());
    return make_result<T>(std::move(out_shape), std::move(out), "gather", {&x},
                          [xn, idx = std::move(idx)](const Node<T> &self) {
                              T *g = grad_of(xn);
                              for (size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
                          });
}

#define MINEREG_INSTANTIATE_OPS(T)                                                                 \
    template TensorT<T> add(const TensorT<T> &, const TensorT<T> &);                              \
    template TensorT<T> sub(const TensorT<T> &, const TensorT<T> &);                              \
    template TensorT<T> mul(const TensorT<T> &, const TensorT<T> &);                              \
    template TensorT<T> div(const TensorT<T> &, const TensorT<T> &);                              \
    template TensorT<T> add_scalar(const TensorT<T> &, T);                                        \
    template TensorT<T> mul_scalar(const TensorT<T> &, T);                                        \
    template TensorT<T> exp(const TensorT<T> &);                                                  \
    template TensorT<T> log(const TensorT<T> &);                                                  \
    template TensorT<T> square(const TensorT<T> &);                                               \
    template TensorT<T> sqrt(const TensorT<T> &);                                                 \
    template TensorT<T> leaky_relu(const TensorT<T> &, T);                                        \
    template TensorT<T> sum(const TensorT<T> &);                                                  \
    template TensorT<T> mean(const TensorT<T> &);                                                 \
    template TensorT<T> log_mean_exp(const TensorT<T> &);                                         \
    template TensorT<T> log_mean_exp_with_denominator(const TensorT<T> &, T);                     \
    template TensorT<T> reshape(const TensorT<T> &, Shape);                                       \
    template TensorT<T> concat_channels(const TensorT<T> &, const TensorT<T> &);                  \
    template TensorT<T> gather(const TensorT<T> &, std::span<const int64_t>, Shape);

MINEREG_INSTANTIATE_OPS(float)
MINEREG_INSTANTIATE_OPS(double)

} // namespace minereg::ad
