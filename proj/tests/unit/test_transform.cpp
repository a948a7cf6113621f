#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "fields.hpp"
#include "gradcheck.hpp"

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"
#include "minereg/transform/transform.hpp"

using namespace minereg;
using namespace minereg::transform;
using minereg::testing::in_core;
using minereg::testing::sample_field;
using minereg::testing::SmoothField2D;
using ad::Tensor;
using ad::Tensor64;

namespace {

// 2x2 matrix exponential by Taylor series (oracle, float64).
std::array<double, 4> expm2(const std::array<double, 4> &A) {
    std::array<double, 4> result{1, 0, 0, 1}, term{1, 0, 0, 1};
    for (int k = 1; k < 30; ++k) {
        std::array<double, 4> next{
            (term[0] * A[0] + term[1] * A[2]) / k, (term[0] * A[1] + term[1] * A[3]) / k,
            (term[2] * A[0] + term[3] * A[2]) / k, (term[2] * A[1] + term[3] * A[3]) / k};
        term = next;
        for (int i = 0; i < 4; ++i) result[i] += term[i];
    }
    return result;
}

double core_max_abs(const Tensor &u, int64_t margin) {
    const int64_t h = u.dim(1), w = u.dim(2);
    double m = 0;
    for (int c = 0; c < 2; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                if (in_core(y, x, h, w, margin)) m = std::max(m, double(std::abs(u.data()[(c * h + y) * w + x])));
    return m;
}

} // namespace

TEST_CASE("grid_sample: identity is exact") {
    std::mt19937_64 rng(1);
    auto img = minereg::testing::random_tensor({3, 9, 11}, rng, 0, 1, false).cast<float>();
    auto id = DisplacementField<float>::zeros({9, 11});
    auto out = warp(img, id);
    CHECK(std::equal(out.data().begin(), out.data().end(), img.data().begin()));
}

TEST_CASE("grid_sample: integer shift clamps the border") {
    const int64_t h = 4, w = 3;
    std::vector<float> v(h * w);
    for (size_t i = 0; i < v.size(); ++i) v[i] = float(i);
    auto img = Tensor::from({1, h, w}, v);
    std::vector<float> u(2 * h * w, 0.0f);
    std::fill(u.begin(), u.begin() + h * w, 1.0f); // +1 along axis 0
    auto out = warp(img, DisplacementField<float>(Tensor::from({2, h, w}, u)));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            const int64_t src = std::min<int64_t>(y + 1, h - 1);
            CHECK(out.data()[y * w + x] == v[src * w + x]);
        }
}

TEST_CASE("grid_sample: 1D midpoint") {
    auto ramp = Tensor::from({1, 3}, {0, 1, 2});
    auto out = warp(ramp, DisplacementField<float>(Tensor::from({1, 3}, {0.5f, 0.5f, 0.5f})));
    CHECK(out.data()[1] == doctest::Approx(1.5));
}

TEST_CASE("warp rejects lattice mismatch") {
    auto img = Tensor::zeros({1, 5, 5});
    CHECK_THROWS_AS(warp(img, DisplacementField<float>::zeros({5, 6})), ConfigError);
    CHECK_THROWS_AS(DisplacementField<float>(Tensor::zeros({3, 5, 5})), ConfigError);
}

TEST_CASE("integrate_velocity: zero field gives identity") {
    auto u = integrate_velocity(VelocityField<float>::zeros({16, 16}));
    CHECK(std::all_of(u.tensor().data().begin(), u.tensor().data().end(), [](float x) { return x == 0.0f; }));
}

TEST_CASE("integrate_velocity: constant field is an exact translation") {
    const float c = 1.5f;
    std::vector<float> v(2 * 24 * 24, 0.0f);
    std::fill(v.begin(), v.begin() + 24 * 24, c);
    auto u = integrate_velocity(VelocityField<float>(Tensor::from({2, 24, 24}, v)));
    for (int64_t y = 3; y < 21; ++y)
        for (int64_t x = 3; x < 21; ++x) {
            CHECK(u.tensor().data()[y * 24 + x] == c);
            CHECK(u.tensor().data()[24 * 24 + y * 24 + x] == 0.0f);
        }
}

TEST_CASE("integrate_velocity: linear field matches matrix exponential") {
    const int64_t n = 33;
    const double ctr = 16.0;
    for (auto A : {std::array<double, 4>{0.05, 0, 0, 0.05}, std::array<double, 4>{0.05, 0.03, -0.02, 0.04}}) {
        auto v = sample_field<float>(n, n, [&](int c, double y, double x) {
            const double p[2] = {y - ctr, x - ctr};
            return A[2 * c] * p[0] + A[2 * c + 1] * p[1];
        });
        auto u = integrate_velocity(VelocityField<float>(v));
        const auto E = expm2(A);
        double worst = 0;
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) {
                if (!in_core(y, x, n, n, 6)) continue;
                const double p[2] = {y - ctr, x - ctr};
                for (int c = 0; c < 2; ++c) {
                    const double expect = E[2 * c] * p[0] + E[2 * c + 1] * p[1] - p[c];
                    worst = std::max(worst, std::abs(u.tensor().data()[(c * n + y) * n + x] - expect));
                }
            }
        CHECK(worst <= 1e-3);
    }
}

TEST_CASE("compose: identity law and translation group") {
    std::mt19937_64 rng(2);
    SmoothField2D f(rng, 2.0, 20.0);
    auto phi = DisplacementField<float>(sample_field<float>(20, 20, std::cref(f)));
    auto left = compose(DisplacementField<float>::zeros({20, 20}), phi);
    CHECK(std::equal(left.tensor().data().begin(), left.tensor().data().end(), phi.tensor().data().begin()));

    auto shift = [](double a, double b) {
        return DisplacementField<float>(sample_field<float>(20, 20, [=](int c, double, double) { return c ? b : a; }));
    };
    auto ab = compose(shift(0.75, -0.5), shift(1.25, 0.25));
    for (int64_t y = 3; y < 17; ++y)
        for (int64_t x = 3; x < 17; ++x) {
            CHECK(ab.tensor().data()[y * 20 + x] == doctest::Approx(2.0));
            CHECK(ab.tensor().data()[400 + y * 20 + x] == doctest::Approx(-0.25));
        }
}

TEST_CASE("compose: integrate(v) o integrate(-v) is close to identity") {
    std::mt19937_64 rng(3);
    for (int rep = 0; rep < 5; ++rep) {
        SmoothField2D f(rng, 2.0, 40.0);
        auto v = sample_field<float>(48, 48, std::cref(f));
        auto fwd = integrate_velocity(VelocityField<float>(v));
        auto inv = integrate_velocity(VelocityField<float>(ad::mul_scalar(v, -1.0f)));
        CHECK(core_max_abs(compose(fwd, inv).tensor(), 6) <= 0.05);
        CHECK(core_max_abs(compose(inv, fwd).tensor(), 6) <= 0.05);
    }
}

TEST_CASE("compose: associative within interpolation tolerance") {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 5; ++rep) {
        SmoothField2D f1(rng, 0.3, 96.0), f2(rng, 0.3, 96.0), f3(rng, 0.3, 96.0);
        auto a = DisplacementField<double>(sample_field<double>(40, 40, std::cref(f1)));
        auto b = DisplacementField<double>(sample_field<double>(40, 40, std::cref(f2)));
        auto c = DisplacementField<double>(sample_field<double>(40, 40, std::cref(f3)));
        auto lhs = compose(compose(a, b), c).tensor();
        auto rhs = compose(a, compose(b, c)).tensor();
        double worst = 0;
        for (int ch = 0; ch < 2; ++ch)
            for (int64_t y = 4; y < 36; ++y)
                for (int64_t x = 4; x < 36; ++x) {
                    const auto i = (ch * 40 + y) * 40 + x;
                    worst = std::max(worst, std::abs(lhs.data()[i] - rhs.data()[i]));
                }
        CHECK(worst <= 1e-4);
    }
}

TEST_CASE("jacobian: identity and uniform scaling") {
    auto id = jacobian_determinant(DisplacementField<float>::zeros({7, 8}));
    CHECK(std::all_of(id.det.begin(), id.det.end(), [](double d) { return d == 1.0; }));

    // phi(w) = 1.1 w  ->  u = 0.1 w
    auto scaled = jacobian_determinant(
        DisplacementField<double>(sample_field<double>(9, 9, [](int c, double y, double x) { return 0.1 * (c ? x : y); })));
    auto mask = interior_mask({9, 9});
    for (size_t i = 0; i < scaled.det.size(); ++i) {
        if (mask[i]) CHECK(scaled.det[i] == doctest::Approx(1.21).epsilon(1e-12));
    }
    CHECK_THROWS_AS(jacobian_determinant(DisplacementField<float>::zeros({2, 8})), ConfigError);
}

TEST_CASE("jacobian: smooth field matches refined-stencil oracle") {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 5; ++rep) {
        SmoothField2D f(rng, 1.0, 64.0);
        const int64_t n = 40;
        auto jm = jacobian_determinant(DisplacementField<double>(sample_field<double>(n, n, std::cref(f))));
        const double h = 1e-4;
        double worst = 0;
        for (int64_t y = 1; y < n - 1; ++y)
            for (int64_t x = 1; x < n - 1; ++x) {
                double J[2][2];
                for (int c = 0; c < 2; ++c) {
                    J[c][0] = (f(c, y + h, x) - f(c, y - h, x)) / (2 * h) + (c == 0);
                    J[c][1] = (f(c, y, x + h) - f(c, y, x - h)) / (2 * h) + (c == 1);
                }
                const double det = J[0][0] * J[1][1] - J[0][1] * J[1][0];
                worst = std::max(worst, std::abs(det - jm.det[y * n + x]));
            }
        CHECK(worst <= 1e-3);
    }
}

TEST_CASE("integrated smooth fields are diffeomorphic on the interior") {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 6; ++rep) {
        SmoothField2D f(rng, 6.0 + 3.0 * rep, 48.0, 4);
        auto v = sample_field<float>(64, 64, std::cref(f));
        auto u = integrate_velocity(VelocityField<float>(v));
        auto jm = jacobian_determinant(u);
        auto mask = interior_mask({64, 64});
        double min_det = 1e9;
        for (size_t i = 0; i < jm.det.size(); ++i)
            if (mask[i]) min_det = std::min(min_det, jm.det[i]);
        CHECK(min_det > 0.0);
    }
}

TEST_CASE("warp_labels_nearest introduces no new labels") {
    std::mt19937_64 rng(7);
    std::vector<uint16_t> labels(30 * 30);
    for (size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<uint16_t>((i / 30) / 10 + 2 * ((i % 30) / 15));
    SmoothField2D f(rng, 3.0, 20.0);
    auto out = warp_labels_nearest<float>(labels, DisplacementField<float>(sample_field<float>(30, 30, std::cref(f))));
    std::set<uint16_t> src(labels.begin(), labels.end()), dst(out.begin(), out.end());
    CHECK(std::includes(src.begin(), src.end(), dst.begin(), dst.end()));
    auto same = warp_labels_nearest<float>(labels, DisplacementField<float>::zeros({30, 30}));
    CHECK(same == labels);
}

TEST_CASE("transform ops pass finite-difference gradient checks") {
    using minereg::testing::check_gradients;
    using minereg::testing::random_tensor;
    std::mt19937_64 rng(8);
    auto proj = [](const Tensor64 &t) {
        std::mt19937_64 r(11);
        return ad::sum(ad::mul(t, random_tensor(t.shape(), r, -1, 1, false)));
    };
    for (int rep = 0; rep < 10; ++rep) {
        // |v| in [0.05, 0.9]: sample positions never cross an integer during squaring.
        auto v = random_tensor({2, 6, 6}, rng, -0.9, 0.9, true, {0.0}, 0.05);
        auto rep1 = check_gradients(
            [&](const auto &in) { return proj(integrate_velocity(VelocityField<double>(in[0]), 4).tensor()); }, {v});
        CHECK(rep1.max_rel_err <= 1e-3);

        auto img = random_tensor({1, 6, 6}, rng);
        auto d = random_tensor({2, 6, 6}, rng, -1.4, 1.4, true, {-1.0, 0.0, 1.0}, 0.05);
        auto rep2 = check_gradients([&](const auto &in) { return proj(warp(in[0], DisplacementField<double>(in[1]))); },
                                    {img, d});
        CHECK(rep2.max_rel_err <= 1e-3);

        auto a = random_tensor({2, 6, 6}, rng, -0.45, 0.45, true, {0.0}, 0.05);
        auto b = random_tensor({2, 6, 6}, rng, -0.45, 0.45, true, {0.0}, 0.05);
        auto rep3 = check_gradients(
            [&](const auto &in) {
                return proj(compose(DisplacementField<double>(in[0]), DisplacementField<double>(in[1])).tensor());
            },
            {a, b});
        CHECK(rep3.max_rel_err <= 1e-3);
    }
}
