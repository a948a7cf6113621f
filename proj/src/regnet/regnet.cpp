#include "minereg/regnet/regnet.hpp"

#include <cmath>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::regnet {

using namespace minereg::ad;

void RegNetConfig::validate() const {
    if (channels.empty()) throw ConfigError("regnet: need at least one level");
    for (auto c : channels) {
        if (c < 1) throw ConfigError("regnet: channel counts must be >= 1");
    }
    if (dims.empty() || dims.size() > 3) throw ConfigError("regnet: 1-3 spatial axes supported");
    const int64_t factor = int64_t{1} << (levels() - 1);
    for (auto d : dims) {
        if (d < 1 || d % factor != 0) {
            throw ConfigError("regnet: lattice " + shape_str(dims) + " not divisible by " + std::to_string(factor));
        }
    }
}

namespace {

Shape kernel_shape(int64_t cout, int64_t cin, size_t ndims) {
    Shape s{cout, cin};
    s.insert(s.end(), ndims, 3);
    return s;
}

} // namespace

template <class T>
RegNet<T>::RegNet(RegNetConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.seed);
    const size_t nd = config_.dims.size();
    const int64_t taps = static_cast<int64_t>(std::pow(3, nd));
    const auto slope = config_.negative_slope;
    const auto &ch = config_.channels;
    const int L = config_.levels();

    auto add_conv = [&](const std::string &name, int64_t cout, int64_t cin) {
        params_.push_back({name + ".weight", kaiming_normal<T>(kernel_shape(cout, cin, nd), cin * taps, slope, rng)});
        params_.push_back({name + ".bias", TensorT<T>::zeros({cout}, true)});
    };

    for (int i = 0; i < L; ++i) add_conv("enc" + std::to_string(i), ch[i], i == 0 ? 2 : ch[i - 1]);
    add_conv("dec" + std::to_string(L - 1), ch[L - 1], ch[L - 1]);
    for (int i = L - 2; i >= 0; --i) add_conv("dec" + std::to_string(i), ch[i], ch[i + 1] + ch[i]);

    const auto nd64 = static_cast<int64_t>(nd);
    auto head_weight = [&](double std) {
        if (std <= 0) return kaiming_normal<T>({nd64, ch[0]}, ch[0], slope, rng);
        std::normal_distribution<double> dist(0.0, std);
        std::vector<T> w(static_cast<size_t>(nd64 * ch[0]));
        for (auto &x : w) x = static_cast<T>(dist(rng));
        return TensorT<T>::from({nd64, ch[0]}, std::move(w), true);
    };
    params_.push_back({"mu.weight", head_weight(config_.mu_head_std)});
    params_.push_back({"mu.bias", TensorT<T>::zeros({nd64}, true)});
    params_.push_back({"log_var.weight", head_weight(config_.log_var_head_std)});
    params_.push_back({"log_var.bias", TensorT<T>::full({nd64}, static_cast<T>(config_.log_var_bias), true)});
    check_unique_names<T>(params_);
}

template <class T>
PosteriorParams<T> RegNet<T>::predict_posterior(const TensorT<T> &fixed, const TensorT<T> &moving) const {
    Shape expect{1};
    expect.insert(expect.end(), config_.dims.begin(), config_.dims.end());
    if (fixed.shape() != expect || moving.shape() != expect) {
        throw ConfigError("predict_posterior: inputs " + shape_str(fixed.shape()) + " / " +
                          shape_str(moving.shape()) + " do not match lattice " + shape_str(expect));
    }
    const T slope = static_cast<T>(config_.negative_slope);
    const int L = config_.levels();

    std::vector<TensorT<T>> skips;
    auto x = concat_channels(fixed, moving);
    size_t p = 0;
    for (int i = 0; i < L; ++i, p += 2) {
        x = leaky_relu(conv(x, param(p), param(p + 1), i == 0 ? 1 : 2), slope);
        skips.push_back(x);
    }
    x = leaky_relu(conv(x, param(p), param(p + 1), 1), slope);
    p += 2;
    for (int i = L - 2; i >= 0; --i, p += 2) {
        x = concat_channels(upsample_nearest2(x), skips[static_cast<size_t>(i)]);
        x = leaky_relu(conv(x, param(p), param(p + 1), 1), slope);
    }
    PosteriorParams<T> out;
    out.mu = conv1x1(x, param(p), param(p + 1));
    out.log_var = conv1x1(config_.detach_log_var_features ? x.detach() : x, param(p + 2), param(p + 3));
    return out;
}

template <class T>
transform::VelocityField<T> sample_velocity(const PosteriorParams<T> &p, std::mt19937_64 &rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> eps(static_cast<size_t>(p.mu.numel()));
    for (auto &e : eps) e = static_cast<T>(dist(rng));
    auto noise = TensorT<T>::from(p.mu.shape(), std::move(eps));
    auto sigma = exp(mul_scalar(p.log_var, static_cast<T>(0.5)));
    return transform::VelocityField<T>(add(p.mu, mul(sigma, noise)));
}

template <class T>
TensorT<T> kl_regularizer(const PosteriorParams<T> &p, double lambda) {
    if (!(lambda > 0)) throw ConfigError("kl_regularizer: lambda must be > 0");
    if (p.mu.shape() != p.log_var.shape()) throw ConfigError("kl_regularizer: posterior shapes differ");
    const int nd = static_cast<int>(p.mu.rank()) - 1;
    const double voxels = static_cast<double>(p.mu.numel() / p.mu.dim(0));
    const double lattice_degree = 2.0 * nd;

    TensorT<T> smooth;
    for (int d = 0; d < nd; ++d) {
        auto term = sum(square(forward_diff(p.mu, d)));
        smooth = smooth.defined() ? add(smooth, term) : term;
    }
    auto variance = sum(exp(p.log_var));
    auto log_variance = sum(p.log_var);
    auto total = add(mul_scalar(smooth, static_cast<T>(lambda)), mul_scalar(variance, static_cast<T>(lambda * lattice_degree)));
    total = sub(total, log_variance);
    return mul_scalar(total, static_cast<T>(1.0 / (2.0 * voxels)));
}

template class RegNet<float>;
template class RegNet<double>;
template transform::VelocityField<float> sample_velocity(const PosteriorParams<float> &, std::mt19937_64 &);
template transform::VelocityField<double> sample_velocity(const PosteriorParams<double> &, std::mt19937_64 &);
template TensorT<float> kl_regularizer(const PosteriorParams<float> &, double);
template TensorT<double> kl_regularizer(const PosteriorParams<double> &, double);

} // namespace minereg::regnet
