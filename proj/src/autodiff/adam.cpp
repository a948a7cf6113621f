#include "minereg/autodiff/adam.hpp"

#include <cmath>
#include <set>

#include "minereg/errors.hpp"

namespace minereg::ad {

template <class T>
void check_unique_names(std::span<const Parameter<T>> params) {
    std::set<std::string> names;
    for (const auto &p : params) {
        if (!names.insert(p.name).second) throw ConfigError("duplicate parameter name '" + p.name + "'");
    }
}

template <class T>
void adam_step(std::span<Parameter<T>> params, AdamState<T> &state) {
    if (state.first_moment.empty()) {
        for (const auto &p : params) {
            state.first_moment.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
            state.second_moment.emplace_back(static_cast<size_t>(p.tensor.numel()), T(0));
        }
    }
    if (state.first_moment.size() != params.size()) {
        throw UsageError("adam_step: parameter list changed between steps");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].tensor.has_grad()) {
            throw UsageError("adam_step: parameter '" + params[i].name + "' has no gradient");
        }
        if (state.first_moment[i].size() != static_cast<size_t>(params[i].tensor.numel())) {
            throw UsageError("adam_step: moment shape mismatch for '" + params[i].name + "'");
        }
    }

    const auto &c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto value = params[i].tensor.mutable_data();
        const auto grad = params[i].tensor.grad();
        auto &m = state.first_moment[i];
        auto &v = state.second_moment[i];
        for (size_t k = 0; k < value.size(); ++k) {
            const double g = grad[k];
            const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            const double update = c.lr * (mk / bc1) / (std::sqrt(vk / bc2) + c.eps);
            value[k] = static_cast<T>(value[k] - update);
        }
    }
}

template <class T>
void zero_grads(std::span<Parameter<T>> params) {
    for (auto &p : params) p.tensor.zero_grad();
}

template <class T>
TensorT<T> kaiming_normal(Shape shape, int64_t fan_in, double negative_slope, std::mt19937_64 &rng) {
    if (fan_in <= 0) throw ConfigError("kaiming_normal: fan_in must be positive");
    const double gain = std::sqrt(2.0 / (1.0 + negative_slope * negative_slope));
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
    std::vector<T> data(static_cast<size_t>(shape_numel(shape)));
    for (auto &x : data) x = static_cast<T>(dist(rng));
    return TensorT<T>::from(std::move(shape), std::move(data), true);
}

template void check_unique_names(std::span<const Parameter<float>>);
template void check_unique_names(std::span<const Parameter<double>>);
template void adam_step(std::span<Parameter<float>>, AdamState<float> &);
template void adam_step(std::span<Parameter<double>>, AdamState<double> &);
template void zero_grads(std::span<Parameter<float>>);
template void zero_grads(std::span<Parameter<double>>);
template TensorT<float> kaiming_normal(Shape, int64_t, double, std::mt19937_64 &);
template TensorT<double> kaiming_normal(Shape, int64_t, double, std::mt19937_64 &);

} // namespace minereg::ad
