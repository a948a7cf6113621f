#pragma once

// Image-matching losses: the MINE critic with its shuffle samplers and
// Donsker-Varadhan bound, plus MSE and local NCC baselines.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "minereg/autodiff/adam.hpp"
#include "minereg/autodiff/tensor.hpp"
#include "minereg/regnet/regnet.hpp"
#include "minereg/transform/transform.hpp"

namespace minereg::similarity {

using ad::Parameter;
using ad::Shape;
using ad::TensorT;

struct StatNetConfig {
    int64_t hidden = 30;
    double negative_slope = 0.2;
    uint64_t seed = 0;
};

// F(a, b): 1x1 conv 2 -> hidden, leaky ReLU, 1x1 conv hidden -> 1. Purely
// per voxel.
template <class T>
class StatNet {
public:
    explicit StatNet(StatNetConfig config);

    // a, b: [1, dims...]; returns [1, dims...].
    TensorT<T> operator()(const TensorT<T> &a, const TensorT<T> &b) const;

    const StatNetConfig &config() const { return config_; }
    std::vector<Parameter<T>> &parameters() { return params_; }
    const std::vector<Parameter<T>> &parameters() const { return params_; }

private:
    StatNetConfig config_;
    std::vector<Parameter<T>> params_;
};

enum class ShuffleMode { global, local };

struct ShuffleSpec {
    ShuffleMode mode = ShuffleMode::local;
    int64_t radius = 8; // N, local mode only
};

// Flat source index per lattice site. Global: a uniform permutation. Local:
// w + delta clamped to the lattice, delta uniform on [-N, N]^d per voxel.
std::vector<int64_t> shuffle_indices(const Shape &lattice, const ShuffleSpec &spec, std::mt19937_64 &rng);

// image [1, dims...] gathered at shuffle_indices; gradients flow to the
// gathered source values.
template <class T>
TensorT<T> shuffle(const TensorT<T> &image, const ShuffleSpec &spec, std::mt19937_64 &rng);

// Moving average of E_Q[exp F], kept in log space. rate = 0 disables it.
struct DenominatorEma {
    double rate = 0.0;
    double log_value = 0.0;
    bool initialized = false;
};

// mean F(f, joint) - log mean exp F(f, shuffled). With an active EMA the
// forward value is unchanged and the denominator gradient is rescaled by the
// running average instead of the batch mean.
template <class T>
TensorT<T> dv_bound(const StatNet<T> &critic, const TensorT<T> &fixed, const TensorT<T> &joint,
                    const TensorT<T> &shuffled, DenominatorEma *ema = nullptr);

template <class T>
TensorT<T> mse_loss(const TensorT<T> &fixed, const TensorT<T> &warped);

inline constexpr double kNccVarianceFloor = 1e-5;

// -mean over voxels of cov / sqrt((var_f + 1e-5)(var_m + 1e-5)) on
// window x window neighbourhoods clipped to the lattice.
template <class T>
TensorT<T> ncc_loss(const TensorT<T> &fixed, const TensorT<T> &warped, int window = 9);

enum class LossKind { mine_global, mine_local, mse, ncc };

std::string_view loss_name(LossKind kind);
// Accepts mine-local, mine-global, mse, ncc. Throws ConfigError otherwise.
LossKind parse_loss(std::string_view name);
inline bool is_mine(LossKind kind) { return kind == LossKind::mine_global || kind == LossKind::mine_local; }

struct LossConfig {
    LossKind kind = LossKind::mine_local;
    double alpha = 1.0;
    double lambda = 10.0;
    int64_t radius = 8;
    int ncc_window = 9;
    double ema_rate = 0.0;
    // Shuffle the moving image before warping instead of after.
    bool shuffle_before_warp = false;

    void validate() const;
};

template <class T>
struct LossTerms {
    TensorT<T> total;
    double similarity = 0.0; // DV bound for MINE kinds, otherwise the baseline loss
    double regularizer = 0.0;
};

// -alpha * DV + R for MINE kinds, alpha * {mse, ncc} + R otherwise. The
// critic is only evaluated for MINE kinds.
template <class T>
LossTerms<T> total_loss(const TensorT<T> &fixed, const TensorT<T> &moving, const regnet::PosteriorParams<T> &posterior,
                        const transform::DisplacementField<T> &phi, const StatNet<T> &critic, const LossConfig &cfg,
                        std::mt19937_64 &rng, DenominatorEma *ema = nullptr);

// exp F(a_i, b_j) on a grid_res x grid_res lattice over [0,1]^2, normalized
// to sum 1. Row i is the fixed intensity a_i = i / (grid_res - 1), column j
// the moving intensity b_j.
struct ResponseMap {
    int grid_res = 0;
    std::vector<double> values;

    double at(int i, int j) const { return values[static_cast<size_t>(i) * grid_res + j]; }
    double intensity(int i) const { return static_cast<double>(i) / (grid_res - 1); }
    // Shannon entropy in nats.
    double entropy() const;
};

template <class T>
ResponseMap joint_response_map(const StatNet<T> &critic, int grid_res);

// Header row "a\b,b_0,...", then one row per a_i.
void write_response_map_csv(std::ostream &out, const ResponseMap &map);

} // namespace minereg::similarity
