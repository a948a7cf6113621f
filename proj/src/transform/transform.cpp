#include "minereg/transform/transform.hpp"

#include <algorithm>
#include <cmath>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::transform {

template <class T, class Tag>
VectorField<T, Tag>::VectorField(TensorT<T> tensor) : tensor_(std::move(tensor)) {
    const auto &s = tensor_.shape();
    if (s.size() < 2 || s.size() > 4 || s[0] != static_cast<int64_t>(s.size()) - 1) {
        throw ConfigError("vector field needs one channel per spatial axis, got shape " + ad::shape_str(s));
    }
    for (auto v : tensor_.data()) {
        if (!std::isfinite(v)) throw NumericError("vector field contains non-finite values");
    }
}

template <class T, class Tag>
VectorField<T, Tag> VectorField<T, Tag>::zeros(const Shape &lattice, bool requires_grad) {
    Shape s{static_cast<int64_t>(lattice.size())};
    s.insert(s.end(), lattice.begin(), lattice.end());
    return VectorField(TensorT<T>::zeros(std::move(s), requires_grad));
}

template <class T>
TensorT<T> warp(const TensorT<T> &image, const DisplacementField<T> &phi) {
    if (image.rank() < 2 || Shape(image.shape().begin() + 1, image.shape().end()) != phi.lattice()) {
        throw ConfigError("warp: image " + ad::shape_str(image.shape()) + " does not match field lattice " +
                          ad::shape_str(phi.lattice()));
    }
    return ad::grid_sample(image, phi.tensor());
}

template <class T>
DisplacementField<T> integrate_velocity(const VelocityField<T> &v, int steps) {
    if (steps < 1) throw ConfigError("integrate_velocity: need at least one squaring step");
    auto u = ad::mul_scalar(v.tensor(), static_cast<T>(std::ldexp(1.0, -steps)));
    for (int i = 0; i < steps; ++i) u = ad::add(u, ad::grid_sample(u, u));
    return DisplacementField<T>(u);
}

template <class T>
DisplacementField<T> compose(const DisplacementField<T> &first, const DisplacementField<T> &second) {
    if (first.tensor().shape() != second.tensor().shape()) {
        throw ConfigError("compose: field shapes differ");
    }
    return DisplacementField<T>(ad::add(second.tensor(), ad::grid_sample(first.tensor(), second.tensor())));
}

std::vector<bool> interior_mask(const Shape &lattice) {
    const auto n = ad::shape_numel(lattice);
    std::vector<bool> mask(static_cast<size_t>(n), true);
    for (int64_t v = 0; v < n; ++v) {
        int64_t rest = v;
        for (int a = static_cast<int>(lattice.size()) - 1; a >= 0; --a) {
            const int64_t i = rest % lattice[a];
            rest /= lattice[a];
            if (i == 0 || i == lattice[a] - 1) mask[v] = false;
        }
    }
    return mask;
}

template <class T>
JacobianMap jacobian_determinant(const DisplacementField<T> &phi) {
    const Shape lattice = phi.lattice();
    const int r = phi.ndims();
    for (auto d : lattice) {
        if (d < 3) throw ConfigError("jacobian_determinant: every axis needs at least 3 voxels");
    }
    std::vector<int64_t> stride(r);
    int64_t n = 1;
    for (int a = r - 1; a >= 0; --a) {
        stride[a] = n;
        n *= lattice[a];
    }
    const auto u = phi.tensor().data();
    JacobianMap out{lattice, std::vector<double>(static_cast<size_t>(n))};
    std::vector<int64_t> idx(r);
    for (int64_t v = 0; v < n; ++v) {
        int64_t rest = v;
        for (int a = 0; a < r; ++a) {
            idx[a] = rest / stride[a];
            rest -= idx[a] * stride[a];
        }
        // J[c][a] = d phi_c / d x_a
        double J[3][3] = {};
        for (int a = 0; a < r; ++a) {
            int64_t lo = v, hi = v;
            double h = 2.0;
            if (idx[a] == 0) {
                hi = v + stride[a];
                h = 1.0;
            } else if (idx[a] == lattice[a] - 1) {
                lo = v - stride[a];
                h = 1.0;
            } else {
                lo = v - stride[a];
                hi = v + stride[a];
            }
            for (int c = 0; c < r; ++c) {
                J[c][a] = (static_cast<double>(u[c * n + hi]) - static_cast<double>(u[c * n + lo])) / h;
            }
            J[a][a] += 1.0;
        }
        double det = 0.0;
        if (r == 1) {
            det = J[0][0];
        } else if (r == 2) {
            det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
        } else {
            det = J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1]) -
                  J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0]) +
                  J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0]);
        }
        if (!std::isfinite(det)) throw NumericError("jacobian_determinant: non-finite determinant");
        out.det[v] = det;
    }
    return out;
}

template <class T>
std::vector<uint16_t> warp_labels_nearest(std::span<const uint16_t> labels, const DisplacementField<T> &phi) {
    const Shape lattice = phi.lattice();
    const int r = phi.ndims();
    const auto n = ad::shape_numel(lattice);
    if (static_cast<int64_t>(labels.size()) != n) {
        throw ConfigError("warp_labels_nearest: label count does not match field lattice");
    }
    std::vector<int64_t> stride(r);
    for (int a = r - 1, s = 1; a >= 0; --a) {
        stride[a] = s;
        s *= static_cast<int>(lattice[a]);
    }
    const auto u = phi.tensor().data();
    std::vector<uint16_t> out(static_cast<size_t>(n));
    for (int64_t v = 0; v < n; ++v) {
        int64_t rest = v, src = 0;
        for (int a = 0; a < r; ++a) {
            const int64_t i = rest / stride[a];
            rest -= i * stride[a];
            const double p = static_cast<double>(i) + static_cast<double>(u[a * n + v]);
            const auto q = std::clamp<int64_t>(std::llround(p), 0, lattice[a] - 1);
            src += q * stride[a];
        }
        out[v] = labels[src];
    }
    return out;
}

#define MINEREG_INSTANTIATE_TRANSFORM(T)                                                            \
    template class VectorField<T, VelocityTag>;                                                     \
    template class VectorField<T, DisplacementTag>;                                                 \
    template TensorT<T> warp(const TensorT<T> &, const DisplacementField<T> &);                     \
    template DisplacementField<T> integrate_velocity(const VelocityField<T> &, int);                \
    template DisplacementField<T> compose(const DisplacementField<T> &, const DisplacementField<T> &); \
    template JacobianMap jacobian_determinant(const DisplacementField<T> &);                        \
    template std::vector<uint16_t> warp_labels_nearest(std::span<const uint16_t>, const DisplacementField<T> &);

MINEREG_INSTANTIATE_TRANSFORM(float)
MINEREG_INSTANTIATE_TRANSFORM(double)

} // namespace minereg::transform
