#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "minereg/autodiff/tensor.hpp"

namespace minereg::ad {

template <class T>
struct Parameter {
    std::string name;
    TensorT<T> tensor;
};

// Throws ConfigError on duplicate names.
template <class T>
void check_unique_names(std::span<const Parameter<T>> params);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.99;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    AdamConfig config;
    int64_t step = 0;
    std::vector<std::vector<T>> first_moment;
    std::vector<std::vector<T>> second_moment;
};

// One bias-corrected Adam update over params, in order. Moment buffers are
// created on the first call; later calls must pass the same parameter list.
// Throws UsageError if a parameter has no gradient.
template <class T>
void adam_step(std::span<Parameter<T>> params, AdamState<T> &state);

template <class T>
void zero_grads(std::span<Parameter<T>> params);

// Kaiming-normal fill for a weight of the given fan-in, with the gain of a
// leaky rectifier of slope `negative_slope`.
template <class T>
TensorT<T> kaiming_normal(Shape shape, int64_t fan_in, double negative_slope, std::mt19937_64 &rng);

} // namespace minereg::ad
