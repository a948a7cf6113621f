#pragma once

// Dense diffeomorphic transforms on a voxel lattice.
//
// Fields are stored channel-first, in voxel units: channel c of a field on a
// lattice with r spatial axes holds the displacement along axis c, and the
// mapping is phi(w) = w + u(w). Sampling clamps to the lattice border.

#include <cstdint>
#include <span>
#include <vector>

#include "minereg/autodiff/tensor.hpp"

namespace minereg::transform {

using ad::Shape;
using ad::TensorT;

inline constexpr int kDefaultSquaringSteps = 7;

struct VelocityTag {};
struct DisplacementTag {};

// Vector field with one channel per spatial axis. Construction validates
// the shape and that every value is finite.
template <class T, class Tag>
class VectorField {
public:
    VectorField() = default;
    explicit VectorField(TensorT<T> tensor);

    static VectorField zeros(const Shape &lattice, bool requires_grad = false);

    const TensorT<T> &tensor() const { return tensor_; }
    // Spatial extents, without the channel axis.
    Shape lattice() const { return Shape(tensor_.shape().begin() + 1, tensor_.shape().end()); }
    int ndims() const { return static_cast<int>(tensor_.rank()) - 1; }

private:
    TensorT<T> tensor_;
};

template <class T>
using VelocityField = VectorField<T, VelocityTag>;
template <class T>
using DisplacementField = VectorField<T, DisplacementTag>;

// Per-voxel determinant of the Jacobian of phi.
struct JacobianMap {
    Shape lattice;
    std::vector<double> det;
};

// image [C, s...] resampled at phi(w). Differentiable in both arguments.
template <class T>
TensorT<T> warp(const TensorT<T> &image, const DisplacementField<T> &phi);

// Scaling and squaring: u = v / 2^steps, then `steps` times u <- u + u o (id + u).
template <class T>
DisplacementField<T> integrate_velocity(const VelocityField<T> &v, int steps = kDefaultSquaringSteps);

// first o second: u(w) = u2(w) + u1(w + u2(w)).
template <class T>
DisplacementField<T> compose(const DisplacementField<T> &first, const DisplacementField<T> &second);

// Central differences on interior voxels, one-sided at the border. Every
// axis must have at least 3 voxels.
template <class T>
JacobianMap jacobian_determinant(const DisplacementField<T> &phi);

// True for voxels that are not on the lattice border.
std::vector<bool> interior_mask(const Shape &lattice);

// Nearest-neighbour resampling of a label image (no new labels introduced).
template <class T>
std::vector<uint16_t> warp_labels_nearest(std::span<const uint16_t> labels, const DisplacementField<T> &phi);

} // namespace minereg::transform
