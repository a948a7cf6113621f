#include "minereg/similarity/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::similarity {

using namespace minereg::ad;

template <class T>
StatNet<T>::StatNet(StatNetConfig config) : config_(config) {
    if (config_.hidden < 1) throw ConfigError("statnet: hidden width must be >= 1");
    std::mt19937_64 rng(config_.seed);
    const int64_t L = config_.hidden;
    params_.push_back({"critic.l1.weight", kaiming_normal<T>({L, 2}, 2, config_.negative_slope, rng)});
    params_.push_back({"critic.l1.bias", TensorT<T>::zeros({L}, true)});
    params_.push_back({"critic.l2.weight", kaiming_normal<T>({1, L}, L, 1.0, rng)});
    params_.push_back({"critic.l2.bias", TensorT<T>::zeros({1}, true)});
}

template <class T>
TensorT<T> StatNet<T>::operator()(const TensorT<T> &a, const TensorT<T> &b) const {
    if (a.shape() != b.shape() || a.rank() < 2 || a.dim(0) != 1) {
        throw ConfigError("statnet: inputs " + shape_str(a.shape()) + " / " + shape_str(b.shape()) +
                          " must be matching single-channel images");
    }
    auto h = conv1x1(concat_channels(a, b), params_[0].tensor, params_[1].tensor);
    h = leaky_relu(h, static_cast<T>(config_.negative_slope));
    return conv1x1(h, params_[2].tensor, params_[3].tensor);
}

std::vector<int64_t> shuffle_indices(const Shape &lattice, const ShuffleSpec &spec, std::mt19937_64 &rng) {
    const int64_t n = shape_numel(lattice);
    std::vector<int64_t> idx(static_cast<size_t>(n));
    if (spec.mode == ShuffleMode::global) {
        std::iota(idx.begin(), idx.end(), int64_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        return idx;
    }
    if (spec.radius < 0) throw ConfigError("shuffle: radius must be >= 0");
    const int r = static_cast<int>(lattice.size());
    std::vector<int64_t> stride(r);
    for (int a = r - 1, s = 1; a >= 0; --a) {
        stride[a] = s;
        s *= static_cast<int>(lattice[a]);
    }
    std::uniform_int_distribution<int64_t> delta(-spec.radius, spec.radius);
    for (int64_t v = 0; v < n; ++v) {
        int64_t rest = v, src = 0;
        for (int a = 0; a < r; ++a) {
            const int64_t i = rest / stride[a];
            rest -= i * stride[a];
            src += std::clamp<int64_t>(i + delta(rng), 0, lattice[a] - 1) * stride[a];
        }
        idx[v] = src;
    }
    return idx;
}

template <class T>
TensorT<T> shuffle(const TensorT<T> &image, const ShuffleSpec &spec, std::mt19937_64 &rng) {
    if (image.rank() < 2 || image.dim(0) != 1) throw ConfigError("shuffle: expects a single-channel image");
    const Shape lattice(image.shape().begin() + 1, image.shape().end());
    const auto idx = shuffle_indices(lattice, spec, rng);
    return gather(image, idx, image.shape());
}

namespace {

template <class T>
TensorT<T> critic_term(const StatNet<T> &critic, const TensorT<T> &a, const TensorT<T> &b, const char *term) {
    try {
        return critic(a, b);
    } catch (const NumericError &e) {
        throw NumericError(std::string("dv_bound: ") + term + " term: " + e.what());
    }
}

double log_add(double a, double b) {
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

} // namespace

template <class T>
TensorT<T> dv_bound(const StatNet<T> &critic, const TensorT<T> &fixed, const TensorT<T> &joint,
                    const TensorT<T> &shuffled, DenominatorEma *ema) {
    if (fixed.shape() != joint.shape() || fixed.shape() != shuffled.shape()) {
        throw ConfigError("dv_bound: volume shapes differ");
    }
    auto fp = critic_term(critic, fixed, joint, "E_P");
    auto fq = critic_term(critic, fixed, shuffled, "E_Q");
    TensorT<T> denom;
    if (ema && ema->rate > 0) {
        const double batch = log_mean_exp(fq.detach()).item();
        if (!std::isfinite(batch)) throw NumericError("dv_bound: E_Q term is not finite");
        ema->log_value = ema->initialized
                             ? log_add(std::log1p(-ema->rate) + ema->log_value, std::log(ema->rate) + batch)
                             : batch;
        ema->initialized = true;
        denom = log_mean_exp_with_denominator(fq, static_cast<T>(ema->log_value));
    } else {
        denom = log_mean_exp(fq);
    }
    return sub(mean(fp), denom);
}

template <class T>
TensorT<T> mse_loss(const TensorT<T> &fixed, const TensorT<T> &warped) {
    if (fixed.shape() != warped.shape()) throw ConfigError("mse_loss: shapes differ");
    return mean(square(sub(fixed, warped)));
}

template <class T>
TensorT<T> ncc_loss(const TensorT<T> &fixed, const TensorT<T> &warped, int window) {
    if (fixed.shape() != warped.shape()) throw ConfigError("ncc_loss: shapes differ");
    if (window < 1 || window % 2 == 0) throw ConfigError("ncc_loss: window must be odd and positive");
    const int radius = window / 2;
    const auto count = box_sum(TensorT<T>::full(fixed.shape(), T(1)), radius);
    auto local_mean = [&](const TensorT<T> &x) { return div(box_sum(x, radius), count); };

    const auto mf = local_mean(fixed), mm = local_mean(warped);
    const auto cov = sub(local_mean(mul(fixed, warped)), mul(mf, mm));
    const auto var_f = sub(local_mean(square(fixed)), square(mf));
    const auto var_m = sub(local_mean(square(warped)), square(mm));
    const T floor = static_cast<T>(kNccVarianceFloor);
    const auto r = div(cov, sqrt(mul(add_scalar(var_f, floor), add_scalar(var_m, floor))));
    return mul_scalar(mean(r), T(-1));
}

std::string_view loss_name(LossKind kind) {
    switch (kind) {
    case LossKind::mine_global: return "mine-global";
    case LossKind::mine_local: return "mine-local";
    case LossKind::mse: return "mse";
    case LossKind::ncc: return "ncc";
    }
    return "?";
}

LossKind parse_loss(std::string_view name) {
    for (auto k : {LossKind::mine_global, LossKind::mine_local, LossKind::mse, LossKind::ncc}) {
        if (loss_name(k) == name) return k;
    }
    throw ConfigError("unknown loss '" + std::string(name) + "' (mine-local, mine-global, mse, ncc)");
}

void LossConfig::validate() const {
    if (!(alpha >= 0) || !std::isfinite(alpha)) throw ConfigError("loss: alpha must be >= 0");
    if (!(lambda > 0) || !std::isfinite(lambda)) throw ConfigError("loss: lambda must be > 0");
    if (radius < 0) throw ConfigError("loss: shuffle radius must be >= 0");
    if (ncc_window < 1 || ncc_window % 2 == 0) throw ConfigError("loss: ncc window must be odd and positive");
    if (!(ema_rate >= 0 && ema_rate < 1)) throw ConfigError("loss: ema rate must lie in [0, 1)");
}

template <class T>
LossTerms<T> total_loss(const TensorT<T> &fixed, const TensorT<T> &moving, const regnet::PosteriorParams<T> &posterior,
                        const transform::DisplacementField<T> &phi, const StatNet<T> &critic, const LossConfig &cfg,
                        std::mt19937_64 &rng, DenominatorEma *ema) {
    cfg.validate();
    auto reg = regnet::kl_regularizer(posterior, cfg.lambda);
    LossTerms<T> out;
    out.regularizer = reg.item();
    if (cfg.alpha == 0) {
        out.total = reg;
        return out;
    }
    const auto warped = transform::warp(moving, phi);
    TensorT<T> sim;
    T sign = 1;
    switch (cfg.kind) {
    case LossKind::mse: sim = mse_loss(fixed, warped); break;
    case LossKind::ncc: sim = ncc_loss(fixed, warped, cfg.ncc_window); break;
    case LossKind::mine_global:
    case LossKind::mine_local: {
        const ShuffleSpec spec{cfg.kind == LossKind::mine_global ? ShuffleMode::global : ShuffleMode::local,
                               cfg.radius};
        const auto shuffled =
            cfg.shuffle_before_warp ? transform::warp(shuffle(moving, spec, rng), phi) : shuffle(warped, spec, rng);
        sim = dv_bound(critic, fixed, warped, shuffled, ema);
        sign = -1;
        break;
    }
    }
    out.similarity = sim.item();
    out.total = add(mul_scalar(sim, static_cast<T>(sign * cfg.alpha)), reg);
    return out;
}

double ResponseMap::entropy() const {
    double h = 0;
    for (double p : values) {
        if (p > 0) h -= p * std::log(p);
    }
    return h;
}

template <class T>
ResponseMap joint_response_map(const StatNet<T> &critic, int grid_res) {
    if (grid_res < 2) throw ConfigError("response map: grid_res must be >= 2");
    const int64_t g = grid_res, n = g * g;
    std::vector<T> a(static_cast<size_t>(n)), b(static_cast<size_t>(n));
    for (int64_t i = 0; i < g; ++i)
        for (int64_t j = 0; j < g; ++j) {
            a[i * g + j] = static_cast<T>(static_cast<double>(i) / (g - 1));
            b[i * g + j] = static_cast<T>(static_cast<double>(j) / (g - 1));
        }
    NoGradGuard guard;
    const auto f = critic(TensorT<T>::from({1, n}, std::move(a)), TensorT<T>::from({1, n}, std::move(b)));
    const auto fv = f.data();
    const double mx = *std::max_element(fv.begin(), fv.end());
    ResponseMap map{grid_res, std::vector<double>(static_cast<size_t>(n))};
    double total = 0;
    for (int64_t k = 0; k < n; ++k) total += map.values[k] = std::exp(static_cast<double>(fv[k]) - mx);
    for (auto &v : map.values) v /= total;
    return map;
}

void write_response_map_csv(std::ostream &out, const ResponseMap &map) {
    out.precision(17);
    out << "a\\b";
    for (int j = 0; j < map.grid_res; ++j) out << ',' << map.intensity(j);
    out << '\n';
    for (int i = 0; i < map.grid_res; ++i) {
        out << map.intensity(i);
        for (int j = 0; j < map.grid_res; ++j) out << ',' << map.at(i, j);
        out << '\n';
    }
}

#define MINEREG_INSTANTIATE_SIMILARITY(T)                                                                    \
    template class StatNet<T>;                                                                               \
    template TensorT<T> shuffle(const TensorT<T> &, const ShuffleSpec &, std::mt19937_64 &);                  \
    template TensorT<T> dv_bound(const StatNet<T> &, const TensorT<T> &, const TensorT<T> &, const TensorT<T> &, \
                                 DenominatorEma *);                                                          \
    template TensorT<T> mse_loss(const TensorT<T> &, const TensorT<T> &);                                    \
    template TensorT<T> ncc_loss(const TensorT<T> &, const TensorT<T> &, int);                               \
    template LossTerms<T> total_loss(const TensorT<T> &, const TensorT<T> &, const regnet::PosteriorParams<T> &, \
                                     const transform::DisplacementField<T> &, const StatNet<T> &,              \
                                     const LossConfig &, std::mt19937_64 &, DenominatorEma *);               \
    template ResponseMap joint_response_map(const StatNet<T> &, int);

MINEREG_INSTANTIATE_SIMILARITY(float)
MINEREG_INSTANTIATE_SIMILARITY(double)

} // namespace minereg::similarity
