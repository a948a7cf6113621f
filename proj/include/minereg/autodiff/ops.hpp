#pragma once

// Differentiable operations over TensorT.
//
// Spatial ops use the layout [C, s0, s1, ...] (channel first, batch size 1,
// 1 to 3 spatial axes, row-major). Vector fields store one channel per
// spatial axis: channel c is the displacement along spatial axis c, in
// voxel units.

#include <span>

#include "minereg/autodiff/tensor.hpp"

namespace minereg::ad {

// Elementwise, identical shapes.
template <class T> TensorT<T> add(const TensorT<T> &a, const TensorT<T> &b);
template <class T> TensorT<T> sub(const TensorT<T> &a, const TensorT<T> &b);
template <class T> TensorT<T> mul(const TensorT<T> &a, const TensorT<T> &b);
template <class T> TensorT<T> div(const TensorT<T> &a, const TensorT<T> &b);

template <class T> TensorT<T> add_scalar(const TensorT<T> &x, T c);
template <class T> TensorT<T> mul_scalar(const TensorT<T> &x, T c);

template <class T> TensorT<T> exp(const TensorT<T> &x);
template <class T> TensorT<T> log(const TensorT<T> &x);
template <class T> TensorT<T> square(const TensorT<T> &x);
template <class T> TensorT<T> sqrt(const TensorT<T> &x);
template <class T> TensorT<T> leaky_relu(const TensorT<T> &x, T negative_slope);

// Reductions to shape {1}.
template <class T> TensorT<T> sum(const TensorT<T> &x);
template <class T> TensorT<T> mean(const TensorT<T> &x);
// log(mean(exp(x))), max-shifted.
template <class T> TensorT<T> log_mean_exp(const TensorT<T> &x);
// Same forward value as log_mean_exp, but the backward pass divides by
// exp(log_denominator) instead of the batch mean of exp(x). Used for the
// moving-average gradient correction of the DV bound.
template <class T> TensorT<T> log_mean_exp_with_denominator(const TensorT<T> &x, T log_denominator);

// Structural.
template <class T> TensorT<T> reshape(const TensorT<T> &x, Shape shape);
// Concatenates along axis 0; remaining axes must match.
template <class T> TensorT<T> concat_channels(const TensorT<T> &a, const TensorT<T> &b);
// out[i] = x[index[i]] over the flattened tensor. Backward scatters.
template <class T>
TensorT<T> gather(const TensorT<T> &x, std::span<const int64_t> index, Shape out_shape);

// Per-voxel linear map over channels: weight [Cout, Cin], bias [Cout].
template <class T>
TensorT<T> conv1x1(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias);
// Spatial convolution, weight [Cout, Cin, k...] with odd k per axis, zero
// padding k/2, output extent (n + 2*(k/2) - k) / stride + 1 per axis.
template <class T>
TensorT<T> conv(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias,
                int stride = 1);
// Nearest-neighbour upsampling by 2 along every spatial axis.
template <class T> TensorT<T> upsample_nearest2(const TensorT<T> &x);
// x[.., i+1, ..] - x[.., i, ..] along spatial axis `axis`; that axis shrinks by one.
template <class T> TensorT<T> forward_diff(const TensorT<T> &x, int axis);
// Sum over the (2r+1)^d window clipped to the lattice, per channel.
template <class T> TensorT<T> box_sum(const TensorT<T> &x, int radius);

// Multilinear resampling: out(c, w) = image(c, w + disp(w)), sample
// positions clamped to the lattice (edge replication). Differentiable with
// respect to both arguments. disp has shape [r, s...] where r is the number
// of spatial axes of image.
template <class T>
TensorT<T> grid_sample(const TensorT<T> &image, const TensorT<T> &disp);

} // namespace minereg::ad
