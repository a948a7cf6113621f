#include <Eigen/Core>

#include <algorithm>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"
#include "spatial.hpp"

namespace minereg::ad {

using detail::grad_of;
using detail::make_result;
using detail::spatial_layout;
using detail::spatial_shape;
using detail::SpatialLayout;

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Eigen dispatches products with a unit output dimension to GEMV, whose
// alignment peeling makes the summation order depend on buffer addresses.
// Those shapes go through a fixed-order loop so results are reproducible.
template <class Dst, class A, class B>
void add_product(Dst &&dst, const A &a, const B &b) {
    if (dst.rows() == 1 || dst.cols() == 1) {
        for (Eigen::Index i = 0; i < dst.rows(); ++i)
            for (Eigen::Index j = 0; j < dst.cols(); ++j) {
                double acc = 0;
                for (Eigen::Index k = 0; k < a.cols(); ++k) acc += double(a(i, k)) * double(b(k, j));
                dst(i, j) += static_cast<typename std::decay_t<Dst>::Scalar>(acc);
            }
    } else {
        dst.noalias() += a * b;
    }
}

template <class Row>
double row_sum(const Row &row) {
    double acc = 0;
    for (Eigen::Index j = 0; j < row.size(); ++j) acc += double(row(j));
    return acc;
}

struct ConvGeometry {
    SpatialLayout in;
    SpatialLayout out;
    std::array<int64_t, 3> kernel{1, 1, 1};
    std::array<int64_t, 3> pad{0, 0, 0};
    int64_t stride = 1;
    int64_t cout = 0;

    int64_t rows() const { return in.channels * kernel[0] * kernel[1] * kernel[2]; }
};

ConvGeometry conv_geometry(const Shape &x, const Shape &w, int stride) {
    ConvGeometry g;
    g.in = spatial_layout(x, "conv");
    if (w.size() != static_cast<size_t>(2 + g.in.rank) || w[1] != g.in.channels) {
        throw ConfigError("conv: weight " + shape_str(w) + " incompatible with input " + shape_str(x));
    }
    if (stride < 1) throw ConfigError("conv: stride must be >= 1");
    g.stride = stride;
    g.cout = w[0];
    g.out = g.in;
    g.out.channels = g.cout;
    for (int i = 0; i < g.in.rank; ++i) {
        const int a = 3 - g.in.rank + i;
        g.kernel[a] = w[2 + i];
        if (g.kernel[a] % 2 == 0) throw ConfigError("conv: kernel extents must be odd");
        g.pad[a] = g.kernel[a] / 2;
        g.out.dims[a] = (g.in.dims[a] + 2 * g.pad[a] - g.kernel[a]) / stride + 1;
    }
    return g;
}

// col[row, p] = x at the input position read by kernel tap `row` for output voxel p.
template <class T>
void im2col(const T *x, const ConvGeometry &g, T *col) {
    const auto &[D, H, W] = g.in.dims;
    const auto &[OD, OH, OW] = g.out.dims;
    const int64_t P = g.out.voxels();
    int64_t row = 0;
    for (int64_t c = 0; c < g.in.channels; ++c) {
        const T *xc = x + c * D * H * W;
        for (int64_t kd = 0; kd < g.kernel[0]; ++kd)
            for (int64_t kh = 0; kh < g.kernel[1]; ++kh)
                for (int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    T *dst = col + row * P;
                    for (int64_t od = 0; od < OD; ++od) {
                        const int64_t id = od * g.stride + kd - g.pad[0];
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * g.stride + kh - g.pad[1];
                            T *line = dst + (od * OH + oh) * OW;
                            if (id < 0 || id >= D || ih < 0 || ih >= H) {
                                std::fill(line, line + OW, T(0));
                                continue;
                            }
                            const T *src = xc + (id * H + ih) * W;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * g.stride + kw - g.pad[2];
                                line[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                            }
                        }
                    }
                }
    }
}

template <class T>
void col2im(const T *col, const ConvGeometry &g, T *x) {
    const auto &[D, H, W] = g.in.dims;
    const auto &[OD, OH, OW] = g.out.dims;
    const int64_t P = g.out.voxels();
    int64_t row = 0;
    for (int64_t c = 0; c < g.in.channels; ++c) {
        T *xc = x + c * D * H * W;
        for (int64_t kd = 0; kd < g.kernel[0]; ++kd)
            for (int64_t kh = 0; kh < g.kernel[1]; ++kh)
                for (int64_t kw = 0; kw < g.kernel[2]; ++kw, ++row) {
                    const T *src = col + row * P;
                    for (int64_t od = 0; od < OD; ++od) {
                        const int64_t id = od * g.stride + kd - g.pad[0];
                        if (id < 0 || id >= D) continue;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * g.stride + kh - g.pad[1];
                            if (ih < 0 || ih >= H) continue;
                            const T *line = src + (od * OH + oh) * OW;
                            T *dst = xc + (id * H + ih) * W;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * g.stride + kw - g.pad[2];
                                if (iw >= 0 && iw < W) dst[iw] += line[ow];
                            }
                        }
                    }
                }
    }
}

} // namespace

template <class T>
TensorT<T> conv1x1(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias) {
    const auto s = spatial_layout(x.shape(), "conv1x1");
    if (weight.rank() != 2 || weight.dim(1) != s.channels || bias.rank() != 1 ||
        bias.dim(0) != weight.dim(0)) {
        throw ConfigError("conv1x1: weight " + shape_str(weight.shape()) + " / bias " +
                          shape_str(bias.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    const int64_t cout = weight.dim(0), cin = s.channels, P = s.voxels();
    std::vector<T> out(static_cast<size_t>(cout * P));
    MatMap<T> Y(out.data(), cout, P);
    ConstMatMap<T> Wm(weight.data().data(), cout, cin);
    ConstMatMap<T> X(x.data().data(), cin, P);
    Y.setZero();
    add_product(Y, Wm, X);
    for (int64_t o = 0; o < cout; ++o) Y.row(o).array() += bias.data()[o];

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_result<T>(spatial_shape(cout, s), std::move(out), "conv1x1", {&x, &weight, &bias},
                          [xn, wn, bn, cout, cin, P](const Node<T> &self) {
                              ConstMatMap<T> G(self.grad.data(), cout, P);
                              if (T *gw = grad_of(wn)) {
                                  ConstMatMap<T> X(xn->data.data(), cin, P);
                                  add_product(MatMap<T>(gw, cout, cin), G, X.transpose());
                              }
                              if (T *gb = grad_of(bn)) {
                                  for (int64_t o = 0; o < cout; ++o) gb[o] += static_cast<T>(row_sum(G.row(o)));
                              }
                              if (T *gx = grad_of(xn)) {
                                  ConstMatMap<T> Wm(wn->data.data(), cout, cin);
                                  add_product(MatMap<T>(gx, cin, P), Wm.transpose(), G);
                              }
                          });
}

namespace {

template <class T>
TensorT<T> conv_im2col(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias,
                       const ConvGeometry &g) {
    const int64_t K = g.rows(), P = g.out.voxels();
    auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(K * P));
    im2col(x.data().data(), g, col->data());

    std::vector<T> out(static_cast<size_t>(g.cout * P));
    MatMap<T> Y(out.data(), g.cout, P);
    Y.setZero();
    add_product(Y, ConstMatMap<T>(weight.data().data(), g.cout, K), ConstMatMap<T>(col->data(), K, P));
    for (int64_t o = 0; o < g.cout; ++o) Y.row(o).array() += bias.data()[o];

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_result<T>(spatial_shape(g.cout, g.out), std::move(out), "conv", {&x, &weight, &bias},
                          [xn, wn, bn, g, col, K, P](const Node<T> &self) {
                              ConstMatMap<T> G(self.grad.data(), g.cout, P);
                              if (T *gw = grad_of(wn)) {
                                  add_product(MatMap<T>(gw, g.cout, K), G,
                                              ConstMatMap<T>(col->data(), K, P).transpose());
                              }
                              if (T *gb = grad_of(bn)) {
                                  for (int64_t o = 0; o < g.cout; ++o) gb[o] += static_cast<T>(row_sum(G.row(o)));
                              }
                              if (T *gx = grad_of(xn)) {
                                  RowMat<T> dcol =
                                      ConstMatMap<T>(wn->data.data(), g.cout, K).transpose() * G;
                                  col2im(dcol.data(), g, gx);
                              }
                          });
}

// Stride-1 convolution as a sum over kernel taps. The input is zero padded
// and flattened; for every tap the needed input columns form one contiguous
// range shifted by a constant offset, so each tap is a single GEMM without
// an im2col buffer. Columns that land in the padding are computed and
// discarded.
template <class T>
struct ShiftedConvPlan {
    ConvGeometry g;
    std::array<int64_t, 3> padded{};
    int64_t padded_voxels = 0;
    int64_t first = 0; // flattened padded index of the first output centre
    int64_t span = 0;  // number of columns from the first to the last centre
    std::vector<int64_t> offsets;

    explicit ShiftedConvPlan(const ConvGeometry &geom) : g(geom) {
        for (int a = 0; a < 3; ++a) padded[a] = g.in.dims[a] + 2 * g.pad[a];
        padded_voxels = padded[0] * padded[1] * padded[2];
        first = (g.pad[0] * padded[1] + g.pad[1]) * padded[2] + g.pad[2];
        const int64_t last = ((g.pad[0] + g.in.dims[0] - 1) * padded[1] + g.pad[1] + g.in.dims[1] - 1) * padded[2] +
                             g.pad[2] + g.in.dims[2] - 1;
        span = last - first + 1;
        for (int64_t kd = 0; kd < g.kernel[0]; ++kd)
            for (int64_t kh = 0; kh < g.kernel[1]; ++kh)
                for (int64_t kw = 0; kw < g.kernel[2]; ++kw)
                    offsets.push_back(((kd - g.pad[0]) * padded[1] + (kh - g.pad[1])) * padded[2] + (kw - g.pad[2]));
    }

    int64_t padded_index(int64_t d, int64_t h, int64_t w) const {
        return ((d + g.pad[0]) * padded[1] + h + g.pad[1]) * padded[2] + w + g.pad[2];
    }

    // Copies between the unpadded [C, D, H, W] layout and padded rows.
    template <class F>
    void for_each_line(int64_t channels, F f) const {
        const auto &[D, H, W] = g.in.dims;
        for (int64_t c = 0; c < channels; ++c)
            for (int64_t d = 0; d < D; ++d)
                for (int64_t h = 0; h < H; ++h) f(c * padded_voxels + padded_index(d, h, 0), ((c * D + d) * H + h) * W, W);
    }
};

template <class T>
using StridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using MutStridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
TensorT<T> conv_shifted(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias,
                        const ConvGeometry &g) {
    auto plan = std::make_shared<const ShiftedConvPlan<T>>(g);
    const int64_t cin = g.in.channels, cout = g.cout, taps = static_cast<int64_t>(plan->offsets.size());
    const int64_t Pp = plan->padded_voxels;

    auto xpad = std::make_shared<std::vector<T>>(static_cast<size_t>(cin * Pp), T(0));
    const T *xs = x.data().data();
    plan->for_each_line(cin, [&](int64_t dst, int64_t src, int64_t n) {
        std::copy(xs + src, xs + src + n, xpad->data() + dst);
    });

    // Tap-major weights: wt[t] is a [cout, cin] block.
    auto tap_major = [cout, cin, taps](const T *w) {
        std::vector<T> wt(static_cast<size_t>(taps * cout * cin));
        for (int64_t o = 0; o < cout; ++o)
            for (int64_t c = 0; c < cin; ++c)
                for (int64_t t = 0; t < taps; ++t) wt[(t * cout + o) * cin + c] = w[(o * cin + c) * taps + t];
        return wt;
    };
    const auto wt = tap_major(weight.data().data());

    RowMat<T> ypad = RowMat<T>::Zero(cout, plan->span);
    for (int64_t t = 0; t < taps; ++t) {
        add_product(ypad, ConstMatMap<T>(wt.data() + t * cout * cin, cout, cin),
                    StridedMap<T>(xpad->data() + plan->first + plan->offsets[t], cin, plan->span,
                                  Eigen::OuterStride<>(Pp)));
    }

    const int64_t P = g.out.voxels();
    std::vector<T> out(static_cast<size_t>(cout * P));
    plan->for_each_line(cout, [&](int64_t dst, int64_t src, int64_t n) {
        // dst indexes a padded [cout, Pp] layout; ypad starts at `first`.
        const int64_t o = dst / Pp, col = dst % Pp - plan->first;
        const T b = bias.data()[o];
        for (int64_t i = 0; i < n; ++i) out[src + i] = ypad(o, col + i) + b;
    });

    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make_result<T>(spatial_shape(cout, g.out), std::move(out), "conv", {&x, &weight, &bias},
                          [xn, wn, bn, plan, xpad, tap_major, cin, cout, taps, Pp](const Node<T> &self) {
                              RowMat<T> gpad = RowMat<T>::Zero(cout, plan->span);
                              plan->for_each_line(cout, [&](int64_t dst, int64_t src, int64_t n) {
                                  const int64_t o = dst / Pp, col = dst % Pp - plan->first;
                                  for (int64_t i = 0; i < n; ++i) gpad(o, col + i) = self.grad[src + i];
                              });
                              if (T *gb = grad_of(bn)) {
                                  for (int64_t o = 0; o < cout; ++o) gb[o] += static_cast<T>(row_sum(gpad.row(o)));
                              }
                              if (T *gw = grad_of(wn)) {
                                  RowMat<T> block(cout, cin);
                                  for (int64_t t = 0; t < taps; ++t) {
                                      block.setZero();
                                      add_product(block, gpad,
                                                  StridedMap<T>(xpad->data() + plan->first + plan->offsets[t], cin,
                                                                plan->span, Eigen::OuterStride<>(Pp))
                                                      .transpose());
                                      for (int64_t o = 0; o < cout; ++o)
                                          for (int64_t c = 0; c < cin; ++c) gw[(o * cin + c) * taps + t] += block(o, c);
                                  }
                              }
                              if (T *gx = grad_of(xn)) {
                                  const auto wt = tap_major(wn->data.data());
                                  std::vector<T> dxpad(static_cast<size_t>(cin * Pp), T(0));
                                  for (int64_t t = 0; t < taps; ++t) {
                                      add_product(MutStridedMap<T>(dxpad.data() + plan->first + plan->offsets[t], cin,
                                                                   plan->span, Eigen::OuterStride<>(Pp)),
                                                  ConstMatMap<T>(wt.data() + t * cout * cin, cout, cin).transpose(), gpad);
                                  }
                                  plan->for_each_line(cin, [&](int64_t src_pad, int64_t dst, int64_t n) {
                                      for (int64_t i = 0; i < n; ++i) gx[dst + i] += dxpad[src_pad + i];
                                  });
                              }
                          });
}

} // namespace

template <class T>
TensorT<T> conv(const TensorT<T> &x, const TensorT<T> &weight, const TensorT<T> &bias, int stride) {
    const auto g = conv_geometry(x.shape(), weight.shape(), stride);
    if (bias.rank() != 1 || bias.dim(0) != g.cout) {
        throw ConfigError("conv: bias " + shape_str(bias.shape()) + " does not match weight");
    }
    return stride == 1 ? conv_shifted(x, weight, bias, g) : conv_im2col(x, weight, bias, g);
}

template <class T>
TensorT<T> upsample_nearest2(const TensorT<T> &x) {
    const auto s = spatial_layout(x.shape(), "upsample_nearest2");
    SpatialLayout o = s;
    std::array<int64_t, 3> f{1, 1, 1};
    for (int a = 3 - s.rank; a < 3; ++a) {
        f[a] = 2;
        o.dims[a] = 2 * s.dims[a];
    }
    const int64_t C = s.channels;
    std::vector<T> out(static_cast<size_t>(C * o.voxels()));
    const auto xs = x.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t d = 0; d < o.dims[0]; ++d)
            for (int64_t h = 0; h < o.dims[1]; ++h)
                for (int64_t w = 0; w < o.dims[2]; ++w) {
                    const int64_t src = ((c * s.dims[0] + d / f[0]) * s.dims[1] + h / f[1]) * s.dims[2] + w / f[2];
                    out[((c * o.dims[0] + d) * o.dims[1] + h) * o.dims[2] + w] = xs[src];
                }
    auto xn = x.node();
    return make_result<T>(spatial_shape(C, o), std::move(out), "upsample_nearest2", {&x},
                          [xn, s, o, f, C](const Node<T> &self) {
                              T *g = grad_of(xn);
                              for (int64_t c = 0; c < C; ++c)
                                  for (int64_t d = 0; d < o.dims[0]; ++d)
                                      for (int64_t h = 0; h < o.dims[1]; ++h)
                                          for (int64_t w = 0; w < o.dims[2]; ++w) {
                                              const int64_t src =
                                                  ((c * s.dims[0] + d / f[0]) * s.dims[1] + h / f[1]) * s.dims[2] + w / f[2];
                                              g[src] += self.grad[((c * o.dims[0] + d) * o.dims[1] + h) * o.dims[2] + w];
                                          }
                          });
}

template <class T>
TensorT<T> forward_diff(const TensorT<T> &x, int axis) {
    const auto s = spatial_layout(x.shape(), "forward_diff");
    if (axis < 0 || axis >= s.rank) throw ConfigError("forward_diff: axis out of range");
    const int a = 3 - s.rank + axis;
    if (s.dims[a] < 2) throw ConfigError("forward_diff: axis extent < 2");
    SpatialLayout o = s;
    o.dims[a] -= 1;
    std::array<int64_t, 3> step{s.dims[1] * s.dims[2], s.dims[2], 1};
    const int64_t C = s.channels;
    const auto xs = x.data();
    std::vector<T> out(static_cast<size_t>(C * o.voxels()));
    int64_t k = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t d = 0; d < o.dims[0]; ++d)
            for (int64_t h = 0; h < o.dims[1]; ++h)
                for (int64_t w = 0; w < o.dims[2]; ++w, ++k) {
                    const int64_t i = c * s.voxels() + d * step[0] + h * step[1] + w;
                    out[k] = xs[i + step[a]] - xs[i];
                }
    auto xn = x.node();
    return make_result<T>(spatial_shape(C, o), std::move(out), "forward_diff", {&x},
                          [xn, s, o, step, a, C](const Node<T> &self) {
                              T *g = grad_of(xn);
                              int64_t k = 0;
                              for (int64_t c = 0; c < C; ++c)
                                  for (int64_t d = 0; d < o.dims[0]; ++d)
                                      for (int64_t h = 0; h < o.dims[1]; ++h)
                                          for (int64_t w = 0; w < o.dims[2]; ++w, ++k) {
                                              const int64_t i = c * s.voxels() + d * step[0] + h * step[1] + w;
                                              g[i + step[a]] += self.grad[k];
                                              g[i] -= self.grad[k];
                                          }
                          });
}

namespace {

// In-place clipped window sum along padded axis a.
template <class T>
void box_pass(std::vector<T> &v, const SpatialLayout &s, int a, int radius) {
    const std::array<int64_t, 3> step{s.dims[1] * s.dims[2], s.dims[2], 1};
    const int64_t n = s.dims[a];
    if (n == 1) return;
    std::vector<double> prefix(static_cast<size_t>(n + 1));
    std::array<int64_t, 3> other = s.dims;
    other[a] = 1;
    for (int64_t c = 0; c < s.channels; ++c)
        for (int64_t d = 0; d < other[0]; ++d)
            for (int64_t h = 0; h < other[1]; ++h)
                for (int64_t w = 0; w < other[2]; ++w) {
                    T *base = v.data() + c * s.voxels() + d * step[0] + h * step[1] + w;
                    prefix[0] = 0;
                    for (int64_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + base[i * step[a]];
                    for (int64_t i = 0; i < n; ++i) {
                        const int64_t lo = std::max<int64_t>(0, i - radius);
                        const int64_t hi = std::min<int64_t>(n - 1, i + radius);
                        base[i * step[a]] = static_cast<T>(prefix[hi + 1] - prefix[lo]);
                    }
                }
}

template <class T>
std::vector<T> box_sum_values(std::span<const T> x, const SpatialLayout &s, int radius) {
    std::vector<T> v(x.begin(), x.end());
    for (int a = 3 - s.rank; a < 3; ++a) box_pass(v, s, a, radius);
    return v;
}

} // namespace

template <class T>
TensorT<T> box_sum(const TensorT<T> &x, int radius) {
    const auto s = spatial_layout(x.shape(), "box_sum");
    if (radius < 0) throw ConfigError("box_sum: negative radius");
    auto out = box_sum_values<T>(x.data(), s, radius);
    auto xn = x.node();
    return make_result<T>(x.shape(), std::move(out), "box_sum", {&x}, [xn, s, radius](const Node<T> &self) {
        // The clipped window operator is symmetric, so its adjoint is itself.
        const auto back = box_sum_values<T>(self.grad, s, radius);
        T *g = grad_of(xn);
        for (size_t i = 0; i < back.size(); ++i) g[i] += back[i];
    });
}

#define MINEREG_INSTANTIATE_SPATIAL(T)                                                             \
    template TensorT<T> conv1x1(const TensorT<T> &, const TensorT<T> &, const TensorT<T> &);       \
    template TensorT<T> conv(const TensorT<T> &, const TensorT<T> &, const TensorT<T> &, int);     \
    template TensorT<T> upsample_nearest2(const TensorT<T> &);                                     \
    template TensorT<T> forward_diff(const TensorT<T> &, int);                                     \
    template TensorT<T> box_sum(const TensorT<T> &, int);

MINEREG_INSTANTIATE_SPATIAL(float)
MINEREG_INSTANTIATE_SPATIAL(double)

} // namespace minereg::ad
