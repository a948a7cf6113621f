#include <algorithm>
#include <array>
#include <cmath>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::ad {

using detail::grad_of;
using detail::make_result;

namespace {

template <int R>
struct Lattice {
    std::array<int64_t, R> dims{};
    std::array<int64_t, R> stride{};
    int64_t voxels = 1;
};

template <int R>
Lattice<R> lattice_of(const Shape &shape) {
    Lattice<R> l;
    for (int a = R - 1; a >= 0; --a) {
        l.dims[a] = shape[1 + a];
        l.stride[a] = l.voxels;
        l.voxels *= l.dims[a];
    }
    return l;
}

// Interpolation stencil at one sample position.
template <int R>
struct Stencil {
    std::array<int64_t, R> lo{}, hi{};
    std::array<double, R> frac{};
    std::array<bool, R> inside{};
};

template <int R, class T>
Stencil<R> stencil_at(const Lattice<R> &l, const std::array<int64_t, R> &idx, const T *disp, int64_t v) {
    Stencil<R> s;
    for (int a = 0; a < R; ++a) {
        const int64_t n = l.dims[a];
        double p = static_cast<double>(idx[a]) + static_cast<double>(disp[a * l.voxels + v]);
        s.inside[a] = p >= 0.0 && p <= static_cast<double>(n - 1);
        p = std::clamp(p, 0.0, static_cast<double>(n - 1));
        if (n == 1) {
            s.lo[a] = s.hi[a] = 0;
            s.frac[a] = 0.0;
            continue;
        }
        int64_t lo = static_cast<int64_t>(std::floor(p));
        if (lo >= n - 1) lo = n - 2;
        s.lo[a] = lo;
        s.hi[a] = lo + 1;
        s.frac[a] = p - static_cast<double>(lo);
    }
    return s;
}

template <int R>
std::array<int64_t, R> unravel(const Lattice<R> &l, int64_t v) {
    std::array<int64_t, R> idx{};
    for (int a = 0; a < R; ++a) {
        idx[a] = v / l.stride[a];
        v -= idx[a] * l.stride[a];
    }
    return idx;
}

template <int R, class T>
TensorT<T> grid_sample_impl(const TensorT<T> &image, const TensorT<T> &disp) {
    const auto l = lattice_of<R>(image.shape());
    const int64_t C = image.dim(0);
    constexpr int corners = 1 << R;
    std::vector<T> out(static_cast<size_t>(C * l.voxels));
    const T *img = image.data().data();
    const T *u = disp.data().data();

    for (int64_t v = 0; v < l.voxels; ++v) {
        const auto st = stencil_at<R>(l, unravel<R>(l, v), u, v);
        for (int k = 0; k < corners; ++k) {
            double w = 1.0;
            int64_t off = 0;
            for (int a = 0; a < R; ++a) {
                const bool up = (k >> a) & 1;
                w *= up ? st.frac[a] : 1.0 - st.frac[a];
                off += (up ? st.hi[a] : st.lo[a]) * l.stride[a];
            }
            if (w == 0.0) continue;
            for (int64_t c = 0; c < C; ++c) {
                out[c * l.voxels + v] += static_cast<T>(w) * img[c * l.voxels + off];
            }
        }
    }

    auto in = image.node(), dn = disp.node();
    return make_result<T>(image.shape(), std::move(out), "grid_sample", {&image, &disp},
                          [in, dn, l, C](const Node<T> &self) {
                              T *gi = grad_of(in);
                              T *gu = grad_of(dn);
                              const T *img = in->data.data();
                              const T *u = dn->data.data();
                              for (int64_t v = 0; v < l.voxels; ++v) {
                                  const auto st = stencil_at<R>(l, unravel<R>(l, v), u, v);
                                  std::array<double, R> dp{};
                                  for (int k = 0; k < corners; ++k) {
                                      double w = 1.0;
                                      int64_t off = 0;
                                      for (int a = 0; a < R; ++a) {
                                          const bool up = (k >> a) & 1;
                                          w *= up ? st.frac[a] : 1.0 - st.frac[a];
                                          off += (up ? st.hi[a] : st.lo[a]) * l.stride[a];
                                      }
                                      double gdot = 0.0;
                                      for (int64_t c = 0; c < C; ++c) {
                                          const double g = self.grad[c * l.voxels + v];
                                          if (gi && w != 0.0) gi[c * l.voxels + off] += static_cast<T>(w * g);
                                          gdot += g * img[c * l.voxels + off];
                                      }
                                      if (!gu) continue;
                                      for (int a = 0; a < R; ++a) {
                                          if (!st.inside[a] || st.hi[a] == st.lo[a]) continue;
                                          double wa = ((k >> a) & 1) ? 1.0 : -1.0;
                                          for (int b = 0; b < R; ++b) {
                                              if (b == a) continue;
                                              wa *= ((k >> b) & 1) ? st.frac[b] : 1.0 - st.frac[b];
                                          }
                                          dp[a] += wa * gdot;
                                      }
                                  }
                                  if (gu) {
                                      for (int a = 0; a < R; ++a) gu[a * l.voxels + v] += static_cast<T>(dp[a]);
                                  }
                              }
                          });
}

} // namespace

template <class T>
TensorT<T> grid_sample(const TensorT<T> &image, const TensorT<T> &disp) {
    const int rank = static_cast<int>(image.rank()) - 1;
    if (rank < 1 || rank > 3) {
        throw ConfigError("grid_sample: image must be [C, spatial...] with 1-3 spatial axes, got " +
                          shape_str(image.shape()));
    }
    Shape expect = image.shape();
    expect[0] = rank;
    if (disp.shape() != expect) {
        throw ConfigError("grid_sample: displacement " + shape_str(disp.shape()) + " does not match image " +
                          shape_str(image.shape()));
    }
    switch (rank) {
    case 1: return grid_sample_impl<1>(image, disp);
    case 2: return grid_sample_impl<2>(image, disp);
    default: return grid_sample_impl<3>(image, disp);
    }
}

template TensorT<float> grid_sample(const TensorT<float> &, const TensorT<float> &);
template TensorT<double> grid_sample(const TensorT<double> &, const TensorT<double> &);

} // namespace minereg::ad
