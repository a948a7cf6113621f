#pragma once

// Synthetic registration data: labeled blob images, random diffeomorphic
// pairs with known ground truth, modality transfer curves, and the MVOL
// volume container.

#include <cstdint>
#include <filesystem>
#include <random>
#include <utility>
#include <vector>

#include "minereg/autodiff/tensor.hpp"
#include "minereg/transform/transform.hpp"

namespace minereg::synthdata {

using ad::Shape;

struct Volume {
    Shape dims;
    std::vector<float> data; // row-major, values in [0, 1]
    double spacing = 1.0;    // isotropic; not stored in MVOL files
};

struct LabelMap {
    Shape dims;
    std::vector<uint16_t> labels; // 0 is background
};

struct LabeledVolume {
    Volume image;
    LabelMap labels;
};

// Piecewise-linear intensity remap followed by a smooth multiplicative bias
// field and additive Gaussian noise.
struct TransferCurve {
    std::vector<std::pair<double, double>> breakpoints;
    double noise_sd = 0.0;
    double bias_amplitude = 0.0;

    // Throws ConfigError unless there are >= 2 breakpoints with strictly
    // increasing inputs and every coordinate lies in [0, 1].
    void validate() const;
    double operator()(double x) const;

    static TransferCurve identity();
    static TransferCurve inversion();
    // Symmetric V through (0.5, 0); no noise or bias.
    static TransferCurve v_curve();
    // Default multi-modal curve: reorders background and the two body tissue
    // intensities so the modalities stay dependent but nearly uncorrelated.
    static TransferCurve zigzag();
};

inline constexpr int64_t kMinLabelVoxels = 100;

// Background plus n_labels - 1 structures: an ellipsoidal body (label 1)
// made of two unlabeled tissue intensities, and small blobs inside it, each
// with its own intensity and a mild texture. Every label covers at least
// kMinLabelVoxels voxels.
LabeledVolume gen_labeled_shape(std::mt19937_64 &rng, const Shape &dims, int n_labels);

struct GeneratedPair {
    Volume image;
    LabelMap labels;
    transform::VelocityField<float> velocity;
    transform::DisplacementField<float> displacement;
};

// Gaussian-smoothed white-noise velocity (sigma = smoothness voxels) scaled
// to a mean vector length of `magnitude`, integrated, and applied to the
// base image (linear) and labels (nearest). Retries up to 5 times when the
// interior Jacobian determinant is not positive everywhere.
GeneratedPair gen_pair(std::mt19937_64 &rng, const LabeledVolume &base, double magnitude, double smoothness);

Volume apply_modality(const Volume &vol, const TransferCurve &curve, std::mt19937_64 &rng);

// Separable Gaussian filter with edge replication, over one channel.
std::vector<double> gaussian_smooth(std::vector<double> values, const Shape &dims, double sigma);

// Subject seeds derived from a master seed (splitmix64 of master ^ index).
uint64_t derive_seed(uint64_t master, uint64_t index);

ad::Tensor to_tensor(const Volume &vol);
Volume from_tensor(const ad::Tensor &image);

// MVOL container, little-endian: "MVOL", u8 version = 1, u8 kind (0 float32,
// 1 uint16 labels), u8 ndims, u8 reserved = 0, u32 dims[ndims], row-major
// payload. Displacement fields are stored as kind 0 with dims
// [ndims, spatial...]. Readers throw FormatError naming the byte offset.
void write_volume(const std::filesystem::path &path, const Volume &vol);
void write_labels(const std::filesystem::path &path, const LabelMap &labels);
void write_field(const std::filesystem::path &path, const transform::DisplacementField<float> &field);
Volume read_volume(const std::filesystem::path &path);
LabelMap read_labels(const std::filesystem::path &path);
transform::DisplacementField<float> read_field(const std::filesystem::path &path);

} // namespace minereg::synthdata
