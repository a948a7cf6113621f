#pragma once

// Probabilistic registration network: an encoder-decoder over the stacked
// (fixed, moving) pair whose two 1x1 heads give the per-voxel mean and
// log-variance of a stationary velocity field.

#include <cstdint>
#include <random>
#include <vector>

#include "minereg/autodiff/adam.hpp"
#include "minereg/autodiff/tensor.hpp"
#include "minereg/transform/transform.hpp"

namespace minereg::regnet {

using ad::Parameter;
using ad::Shape;
using ad::TensorT;

struct RegNetConfig {
    // One entry per level; level 0 runs at full resolution and each further
    // level halves every spatial axis with a stride-2 convolution.
    std::vector<int64_t> channels{16, 32, 32};
    Shape dims{192, 192};
    uint64_t seed = 0;
    double negative_slope = 0.2;
    double log_var_bias = -10.0;
    // Standard deviations of the head weights; <= 0 selects Kaiming. A
    // Kaiming log-variance head dominates the shared decoder gradients early
    // on and stalls the mean head.
    double mu_head_std = 1e-3;
    double log_var_head_std = 1e-10;
    // The log-variance head reads the decoder features without sending
    // gradient back into them.
    bool detach_log_var_features = true;

    int levels() const { return static_cast<int>(channels.size()); }
    // Throws ConfigError unless every axis is divisible by 2^(levels-1) and
    // every channel count is positive.
    void validate() const;
};

template <class T>
struct PosteriorParams {
    TensorT<T> mu;      // [ndims, dims...]
    TensorT<T> log_var; // [ndims, dims...]
};

template <class T>
class RegNet {
public:
    explicit RegNet(RegNetConfig config);

    // fixed and moving are [1, dims...] images on the configured lattice.
    PosteriorParams<T> predict_posterior(const TensorT<T> &fixed, const TensorT<T> &moving) const;

    const RegNetConfig &config() const { return config_; }
    std::vector<Parameter<T>> &parameters() { return params_; }
    const std::vector<Parameter<T>> &parameters() const { return params_; }

    // Same architecture with parameters converted to U.
    template <class U>
    RegNet<U> cast() const {
        RegNet<U> out(config_);
        for (size_t i = 0; i < params_.size(); ++i) {
            out.parameters()[i].tensor = params_[i].tensor.template cast<U>(true);
        }
        return out;
    }

private:
    const TensorT<T> &param(size_t i) const { return params_[i].tensor; }

    RegNetConfig config_;
    std::vector<Parameter<T>> params_;
};

// v = mu + exp(log_var / 2) * eps with eps ~ N(0, I); differentiable in both
// posterior fields.
template <class T>
transform::VelocityField<T> sample_velocity(const PosteriorParams<T> &p, std::mt19937_64 &rng);

// R = 1/(2V) * sum_w [ lambda * sum_d |D_d mu(w)|^2 + lambda * K * sum_c sigma_c^2(w)
//                      - sum_c log sigma_c^2(w) ]
// with V the voxel count, K = 2 * ndims, and D_d the forward difference
// along axis d.
template <class T>
TensorT<T> kl_regularizer(const PosteriorParams<T> &p, double lambda);

} // namespace minereg::regnet
