#include "minereg/evalkit/evalkit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "json.hpp"
#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::evalkit {

DiceResult dice(const synthdata::LabelMap &a, const synthdata::LabelMap &b) {
    if (a.dims != b.dims || a.labels.size() != b.labels.size()) throw ConfigError("dice: label map dims differ");
    std::map<uint16_t, int64_t> size_a, size_b, overlap;
    for (size_t i = 0; i < a.labels.size(); ++i) {
        const auto la = a.labels[i], lb = b.labels[i];
        if (la) ++size_a[la];
        if (lb) ++size_b[lb];
        if (la && la == lb) ++overlap[la];
    }
    DiceResult out;
    for (const auto *sizes : {&size_a, &size_b}) {
        for (const auto &[label, _] : *sizes) {
            if (out.per_label.count(label)) continue;
            const double denom = static_cast<double>(size_a[label] + size_b[label]);
            out.per_label[label] = 2.0 * static_cast<double>(overlap[label]) / denom;
        }
    }
    if (out.per_label.empty()) throw FormatError("dice: neither label map has a foreground label");
    for (const auto &[_, d] : out.per_label) out.mean += d;
    out.mean /= static_cast<double>(out.per_label.size());
    return out;
}

template <class T>
JacobianCount count_nonpositive_jacobian(const transform::DisplacementField<T> &phi) {
    const auto jac = transform::jacobian_determinant(phi);
    const auto interior = transform::interior_mask(phi.lattice());
    JacobianCount out;
    int64_t total = 0;
    for (size_t v = 0; v < jac.det.size(); ++v) {
        if (!interior[v]) continue;
        ++total;
        out.count += jac.det[v] <= 0;
    }
    out.fraction = total ? static_cast<double>(out.count) / static_cast<double>(total) : 0.0;
    return out;
}

double binned_mi(std::span<const float> a, std::span<const float> b, int bins) {
    if (a.size() != b.size() || a.empty()) throw ConfigError("binned_mi: inputs must be non-empty and equal length");
    if (bins < 2) throw ConfigError("binned_mi: need at least 2 bins");
    auto bin = [bins](float v) { return std::clamp(static_cast<int>(std::floor(double(v) * bins)), 0, bins - 1); };
    std::vector<double> joint(static_cast<size_t>(bins) * bins, 0.0), pa(bins, 0.0), pb(bins, 0.0);
    for (size_t i = 0; i < a.size(); ++i) {
        const int ia = bin(a[i]), ib = bin(b[i]);
        joint[static_cast<size_t>(ia) * bins + ib] += 1;
        pa[ia] += 1;
        pb[ib] += 1;
    }
    const double n = static_cast<double>(a.size());
    double mi = 0;
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            const double c = joint[static_cast<size_t>(i) * bins + j];
            if (c > 0) mi += c / n * std::log(c * n / (pa[i] * pb[j]));
        }
    return std::max(mi, 0.0);
}

double pearson(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size() || a.size() < 2) throw ConfigError("pearson: inputs must have equal length >= 2");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
    ma /= n, mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db, saa += da * da, sbb += db * db;
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

Registration register_pair(const regnet::RegNet<float> &net, const ad::Tensor &fixed, const ad::Tensor &moving,
                           int squaring_steps) {
    ad::NoGradGuard guard;
    const auto posterior = net.predict_posterior(fixed, moving);
    auto phi = transform::integrate_velocity(transform::VelocityField<float>(posterior.mu), squaring_steps);
    auto warped = transform::warp(moving, phi);
    return {std::move(phi), std::move(warped)};
}

double steady_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

RuntimeStats benchmark_runtime(const regnet::RegNet<float> &net, const ad::Tensor &fixed, const ad::Tensor &moving,
                               int repeats, const Clock &clock) {
    if (repeats < 1) throw ConfigError("benchmark_runtime: repeats must be >= 1");
    std::vector<double> times;
    for (int r = 0; r < repeats; ++r) {
        const double start = clock();
        register_pair(net, fixed, moving);
        times.push_back(clock() - start);
    }
    RuntimeStats out;
    std::vector<double> sorted = times;
    std::sort(sorted.begin(), sorted.end());
    const size_t m = sorted.size() / 2;
    out.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
    if (repeats > 1) {
        const double mean = std::accumulate(times.begin(), times.end(), 0.0) / repeats;
        double ss = 0;
        for (double t : times) ss += (t - mean) * (t - mean);
        out.sd = std::sqrt(ss / (repeats - 1));
    }
    return out;
}

// ---- records ---------------------------------------------------------------

namespace {

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(std::string_view line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                fields.back() += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                fields.back() += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.emplace_back();
        } else {
            fields.back() += c;
        }
    }
    if (quoted) throw FormatError("csv: unterminated quote");
    return fields;
}

std::string quote(const std::string &s) {
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + '"';
}

template <class V>
V parse_number(const std::string &s, const char *column) {
    try {
        size_t used = 0;
        V v{};
        if constexpr (std::is_same_v<V, double>) {
            v = std::stod(s, &used);
        } else if constexpr (std::is_same_v<V, uint64_t>) {
            v = std::stoull(s, &used);
        } else {
            v = std::stoll(s, &used);
        }
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception &) {
        throw FormatError(std::string("csv: bad value '") + s + "' in column " + column);
    }
}

} // namespace

std::string_view csv_header() {
    return "method,alpha,lambda,seed,mean_dice,dice_per_label_json,nonpos_jac_count,nonpos_jac_frac,"
           "runtime_s_median,runtime_s_sd";
}

std::string to_csv_row(const EvalRecord &r) {
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto &[label, d] : r.dice_per_label) per[std::to_string(label)] = d;
    std::string row = r.method + ',' + number(r.alpha) + ',' + number(r.lambda) + ',' + std::to_string(r.seed) + ',' +
                      number(r.mean_dice) + ',' + quote(per.dump()) + ',' + std::to_string(r.nonpos_jac_count) + ',' +
                      number(r.nonpos_jac_frac) + ',' + number(r.runtime_s_median) + ',' + number(r.runtime_s_sd);
    return row;
}

EvalRecord parse_csv_row(std::string_view line) {
    const auto f = split_csv(line);
    if (f.size() != 10) throw FormatError("csv: expected 10 columns, got " + std::to_string(f.size()));
    EvalRecord r;
    r.method = f[0];
    r.alpha = parse_number<double>(f[1], "alpha");
    r.lambda = parse_number<double>(f[2], "lambda");
    r.seed = parse_number<uint64_t>(f[3], "seed");
    r.mean_dice = parse_number<double>(f[4], "mean_dice");
    try {
        const auto per = nlohmann::json::parse(f[5]);
        for (const auto &[k, v] : per.items()) {
            r.dice_per_label[static_cast<uint16_t>(std::stoul(k))] = v.get<double>();
        }
    } catch (const std::exception &e) {
        throw FormatError(std::string("csv: bad dice_per_label_json: ") + e.what());
    }
    r.nonpos_jac_count = parse_number<int64_t>(f[6], "nonpos_jac_count");
    r.nonpos_jac_frac = parse_number<double>(f[7], "nonpos_jac_frac");
    r.runtime_s_median = parse_number<double>(f[8], "runtime_s_median");
    r.runtime_s_sd = parse_number<double>(f[9], "runtime_s_sd");
    return r;
}

std::vector<EvalRecord> sweep_alpha(const std::vector<double> &alphas, const std::vector<std::string> &methods,
                                    const SweepRunner &train_and_evaluate) {
    if (alphas.size() < 2) throw ConfigError("sweep_alpha: need at least two alpha values");
    if (methods.empty()) throw ConfigError("sweep_alpha: need at least one method");
    std::vector<EvalRecord> out;
    for (double alpha : alphas) {
        for (const auto &method : methods) {
            auto r = train_and_evaluate(method, alpha);
            r.method = method;
            r.alpha = alpha;
            out.push_back(std::move(r));
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const EvalRecord &a, const EvalRecord &b) {
        return a.alpha != b.alpha ? a.alpha < b.alpha : a.method < b.method;
    });
    return out;
}

template JacobianCount count_nonpositive_jacobian(const transform::DisplacementField<float> &);
template JacobianCount count_nonpositive_jacobian(const transform::DisplacementField<double> &);

} // namespace minereg::evalkit
