#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"
#include "minereg/regnet/regnet.hpp"

using namespace minereg;
using namespace minereg::regnet;
using ad::Tensor;
using ad::Tensor64;

namespace {

template <class T>
ad::TensorT<T> random_image(int64_t h, int64_t w, std::mt19937_64 &rng) {
    return minereg::testing::random_tensor({1, h, w}, rng, 0, 1, false).cast<T>();
}

RegNetConfig small_config(int64_t h, int64_t w, uint64_t seed = 3) {
    RegNetConfig cfg;
    cfg.channels = {4, 6, 6};
    cfg.dims = {h, w};
    cfg.seed = seed;
    return cfg;
}

// Float64 re-evaluation of R straight from the formula.
double kl_oracle(const std::vector<double> &mu, const std::vector<double> &lv, int64_t h, int64_t w, double lambda) {
    const double V = double(h * w);
    double smooth = 0, var = 0, logvar = 0;
    for (int c = 0; c < 2; ++c)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const auto at = [&](int64_t yy, int64_t xx) { return mu[(c * h + yy) * w + xx]; };
                if (y + 1 < h) smooth += std::pow(at(y + 1, x) - at(y, x), 2);
                if (x + 1 < w) smooth += std::pow(at(y, x + 1) - at(y, x), 2);
                const double l = lv[(c * h + y) * w + x];
                var += std::exp(l);
                logvar += l;
            }
    return (lambda * smooth + lambda * 4.0 * var - logvar) / (2.0 * V);
}

} // namespace

TEST_CASE("regnet: config validation") {
    auto cfg = small_config(18, 16);
    CHECK_THROWS_AS(RegNet<float>{cfg}, ConfigError);
    cfg = small_config(16, 16);
    cfg.channels = {4, 0};
    CHECK_THROWS_AS(RegNet<float>{cfg}, ConfigError);
    cfg.channels = {};
    CHECK_THROWS_AS(RegNet<float>{cfg}, ConfigError);
}

TEST_CASE("regnet: posterior shapes match the lattice and are finite") {
    std::mt19937_64 rng(1);
    RegNet<float> net(small_config(32, 24));
    auto f = random_image<float>(32, 24, rng), m = random_image<float>(32, 24, rng);
    auto p = net.predict_posterior(f, m);
    CHECK(p.mu.shape() == ad::Shape{2, 32, 24});
    CHECK(p.log_var.shape() == ad::Shape{2, 32, 24});
    for (auto v : p.mu.data()) REQUIRE(std::isfinite(v));
    for (auto v : p.log_var.data()) REQUIRE(std::isfinite(v));

    auto wrong = random_image<float>(24, 32, rng);
    CHECK_THROWS_AS(net.predict_posterior(f, wrong), ConfigError);
}

TEST_CASE("regnet: default architecture starts near the identity") {
    std::mt19937_64 rng(2);
    RegNetConfig cfg;
    cfg.dims = {64, 64};
    RegNet<float> net(cfg);
    ad::NoGradGuard guard;
    auto p = net.predict_posterior(random_image<float>(64, 64, rng), random_image<float>(64, 64, rng));
    double mu_max = 0, lv_mean = 0;
    for (auto v : p.mu.data()) mu_max = std::max(mu_max, double(std::abs(v)));
    for (auto v : p.log_var.data()) lv_mean += v / double(p.log_var.numel());
    CHECK(mu_max < 0.1);
    CHECK(lv_mean == doctest::Approx(-10.0).epsilon(0.1));
}

TEST_CASE("regnet: identical parameters and inputs give bit-identical outputs") {
    std::mt19937_64 rng(3);
    RegNet<float> a(small_config(16, 16, 9)), b(small_config(16, 16, 9));
    auto f = random_image<float>(16, 16, rng), m = random_image<float>(16, 16, rng);
    auto pa = a.predict_posterior(f, m), pa2 = a.predict_posterior(f, m), pb = b.predict_posterior(f, m);
    CHECK(std::equal(pa.mu.data().begin(), pa.mu.data().end(), pa2.mu.data().begin()));
    CHECK(std::equal(pa.mu.data().begin(), pa.mu.data().end(), pb.mu.data().begin()));
    CHECK(std::equal(pa.log_var.data().begin(), pa.log_var.data().end(), pb.log_var.data().begin()));
}

TEST_CASE("regnet: parameter names are unique and ordered") {
    RegNet<float> net(small_config(16, 16));
    const auto &ps = net.parameters();
    CHECK(ps.front().name == "enc0.weight");
    CHECK(ps.back().name == "log_var.bias");
    CHECK(ps.size() == 2 * (3 + 3) + 4);
}

TEST_CASE("regnet: translation covariance on the interior") {
    // A shift by 2^(levels-1) keeps the stride-2 sampling phase, so interior
    // outputs shift exactly.
    const int64_t h = 64, w = 64, k = 4, margin = 24;
    std::mt19937_64 rng(4);
    RegNet<double> net(small_config(h, w));
    auto f = random_image<double>(h, w, rng), m = random_image<double>(h, w, rng);
    auto shift = [&](const Tensor64 &img) {
        std::vector<double> out(static_cast<size_t>(h * w), 0.0);
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = k; x < w; ++x) out[y * w + x] = img.data()[y * w + x - k];
        return Tensor64::from({1, h, w}, std::move(out));
    };
    ad::NoGradGuard guard;
    auto p = net.predict_posterior(f, m);
    auto q = net.predict_posterior(shift(f), shift(m));
    double worst = 0;
    for (int c = 0; c < 2; ++c)
        for (int64_t y = margin; y < h - margin; ++y)
            for (int64_t x = margin; x < w - margin; ++x) {
                const auto i = (c * h + y) * w + x;
                worst = std::max(worst, std::abs(q.mu.data()[i + k] - p.mu.data()[i]));
                worst = std::max(worst, std::abs(q.log_var.data()[i + k] - p.log_var.data()[i]));
            }
    CHECK(worst <= 1e-12);
}

TEST_CASE("sample_velocity: vanishing variance collapses onto the mean") {
    std::mt19937_64 rng(5);
    PosteriorParams<float> p{minereg::testing::random_tensor({2, 6, 5}, rng).cast<float>(),
                             Tensor::full({2, 6, 5}, -40.0f)};
    auto v = sample_velocity(p, rng);
    for (int64_t i = 0; i < p.mu.numel(); ++i) CHECK(v.tensor().data()[i] == doctest::Approx(p.mu.data()[i]).epsilon(1e-7));
}

TEST_CASE("sample_velocity: Monte Carlo moments of the standard posterior") {
    const int draws = 100000;
    PosteriorParams<double> p{Tensor64::zeros({2, 3, 3}), Tensor64::zeros({2, 3, 3})};
    const auto n = static_cast<size_t>(p.mu.numel());
    std::vector<double> s1(n, 0.0), s2(n, 0.0);
    std::mt19937_64 rng(6);
    ad::NoGradGuard guard;
    for (int d = 0; d < draws; ++d) {
        auto v = sample_velocity(p, rng);
        for (size_t i = 0; i < n; ++i) {
            s1[i] += v.tensor().data()[i];
            s2[i] += v.tensor().data()[i] * v.tensor().data()[i];
        }
    }
    for (size_t i = 0; i < n; ++i) {
        const double mean = s1[i] / draws, var = s2[i] / draws - mean * mean;
        CHECK(std::abs(mean) <= 0.02);
        CHECK(var >= 0.95);
        CHECK(var <= 1.05);
    }
}

TEST_CASE("sample_velocity: fixed seed reproduces the draw") {
    PosteriorParams<float> p{Tensor::zeros({2, 4, 4}), Tensor::zeros({2, 4, 4})};
    std::mt19937_64 a(11), b(11);
    auto va = sample_velocity(p, a), vb = sample_velocity(p, b);
    CHECK(std::equal(va.tensor().data().begin(), va.tensor().data().end(), vb.tensor().data().begin()));
}

TEST_CASE("sample_velocity: gradients reach mu and log_var") {
    std::mt19937_64 rng(7);
    auto mu = minereg::testing::random_tensor({2, 4, 3}, rng);
    auto lv = minereg::testing::random_tensor({2, 4, 3}, rng, -1, 0);
    auto report = minereg::testing::check_gradients(
        [](const std::vector<Tensor64> &in) {
            std::mt19937_64 local(99);
            auto v = sample_velocity(PosteriorParams<double>{in[0], in[1]}, local);
            return ad::sum(ad::square(v.tensor()));
        },
        {mu, lv});
    CHECK(report.max_rel_err <= 1e-4);
}

TEST_CASE("kl_regularizer: standard posterior in 2D gives 4 lambda") {
    for (double lambda : {0.5, 1.0, 10.0}) {
        PosteriorParams<double> p{Tensor64::zeros({2, 7, 5}), Tensor64::zeros({2, 7, 5})};
        CHECK(kl_regularizer(p, lambda).item() == doctest::Approx(4.0 * lambda).epsilon(1e-12));
    }
}

TEST_CASE("kl_regularizer: constant mean adds no smoothness cost") {
    PosteriorParams<double> zero{Tensor64::zeros({2, 6, 6}), Tensor64::full({2, 6, 6}, -3.0)};
    PosteriorParams<double> shifted{Tensor64::full({2, 6, 6}, 2.5), Tensor64::full({2, 6, 6}, -3.0)};
    CHECK(kl_regularizer(shifted, 10.0).item() == doctest::Approx(kl_regularizer(zero, 10.0).item()).epsilon(1e-12));
}

TEST_CASE("kl_regularizer: matches the float64 formula") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        const int64_t h = 5 + trial, w = 7;
        auto mu = minereg::testing::random_tensor({2, h, w}, rng, -0.5, 0.5, false);
        auto lv = minereg::testing::random_tensor({2, h, w}, rng, -4, 1, false);
        const double lambda = 0.1 + trial;
        const double expect = kl_oracle({mu.data().begin(), mu.data().end()},
                                        {lv.data().begin(), lv.data().end()}, h, w, lambda);
        CHECK(kl_regularizer(PosteriorParams<double>{mu, lv}, lambda).item() ==
              doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("kl_regularizer: mean gradient vanishes at zero mean") {
    auto mu = Tensor64::zeros({2, 6, 6}, true);
    auto lv = Tensor64::full({2, 6, 6}, -2.0, true);
    auto r = kl_regularizer(PosteriorParams<double>{mu, lv}, 10.0);
    CHECK(std::isfinite(r.item()));
    ad::backward(r);
    for (auto g : mu.grad()) CHECK(g == 0.0);
}

TEST_CASE("kl_regularizer: rejects non-positive lambda") {
    PosteriorParams<float> p{Tensor::zeros({2, 4, 4}), Tensor::zeros({2, 4, 4})};
    CHECK_THROWS_AS(kl_regularizer(p, 0.0), ConfigError);
    CHECK_THROWS_AS(kl_regularizer(p, -1.0), ConfigError);
}

TEST_CASE("regnet: end-to-end finite differences on network weights") {
    const int64_t h = 12, w = 12;
    std::mt19937_64 rng(10);
    auto cfg = small_config(h, w, 21);
    cfg.channels = {3, 4};
    cfg.mu_head_std = 0.3;
    cfg.log_var_head_std = 0.3;
    // Finite differences see the log-variance path through the decoder too.
    cfg.detach_log_var_features = false;
    RegNet<double> net(cfg);
    auto f = random_image<double>(h, w, rng), m = random_image<double>(h, w, rng);

    auto loss = [&](const std::vector<Tensor64> &) {
        auto p = net.predict_posterior(f, m);
        auto phi = transform::integrate_velocity(transform::VelocityField<double>(p.mu), 4);
        auto diff = ad::sub(transform::warp(m, phi), f);
        return ad::add(ad::mean(ad::square(diff)), kl_regularizer(p, 10.0));
    };

    std::vector<Tensor64> probes;
    for (auto &param : net.parameters()) probes.push_back(param.tensor);
    for (auto &param : net.parameters()) param.tensor.zero_grad();
    // Two coordinates per tensor covers every layer, far more than five weights.
    auto report = minereg::testing::check_gradients(loss, probes, 1e-5, 2, 13);
    CHECK(report.checked >= 5);
    CHECK(report.max_rel_err <= 1e-3);
}

TEST_CASE("regnet: detached log-variance head only trains its own weights") {
    std::mt19937_64 rng(12);
    auto f = random_image<float>(16, 16, rng), m = random_image<float>(16, 16, rng);
    for (bool detach : {true, false}) {
        auto cfg = small_config(16, 16, 5);
        cfg.log_var_head_std = 0.3;
        cfg.detach_log_var_features = detach;
        RegNet<float> net(cfg);
        ad::backward(ad::sum(net.predict_posterior(f, m).log_var));
        double shared = 0, head = 0;
        for (const auto &param : net.parameters()) {
            double g = 0;
            for (auto x : param.tensor.grad()) g += std::abs(x);
            (param.name.rfind("log_var.", 0) == 0 ? head : shared) += g;
        }
        CHECK(head > 0);
        if (detach) CHECK(shared == 0.0);
        else CHECK(shared > 0);
    }
}

TEST_CASE("regnet: log-variance head starts at its bias") {
    std::mt19937_64 rng(13);
    auto cfg = small_config(16, 16, 6);
    RegNet<float> net(cfg);
    const auto p = net.predict_posterior(random_image<float>(16, 16, rng), random_image<float>(16, 16, rng));
    for (auto v : p.log_var.data()) CHECK(v == doctest::Approx(cfg.log_var_bias).epsilon(1e-6));
}
