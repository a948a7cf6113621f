#include "minereg/synthdata/synthdata.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::synthdata {

namespace {

std::vector<int64_t> strides_of(const Shape &dims) {
    std::vector<int64_t> s(dims.size());
    int64_t n = 1;
    for (int a = static_cast<int>(dims.size()) - 1; a >= 0; --a) {
        s[a] = n;
        n *= dims[a];
    }
    return s;
}

void check_dims(const Shape &dims, const char *what) {
    if (dims.empty() || dims.size() > 3) throw ConfigError(std::string(what) + ": 1-3 spatial axes supported");
    for (auto d : dims) {
        if (d < 8) throw ConfigError(std::string(what) + ": every axis needs at least 8 voxels");
    }
}

// Gaussian-smoothed white noise rescaled to max |value| = 1.
std::vector<double> smooth_noise(std::mt19937_64 &rng, const Shape &dims, double sigma) {
    std::normal_distribution<double> normal;
    std::vector<double> v(static_cast<size_t>(ad::shape_numel(dims)));
    for (auto &x : v) x = normal(rng);
    v = gaussian_smooth(std::move(v), dims, sigma);
    double mx = 0;
    for (double x : v) mx = std::max(mx, std::abs(x));
    if (mx > 0) {
        for (auto &x : v) x /= mx;
    }
    return v;
}

} // namespace

std::vector<double> gaussian_smooth(std::vector<double> values, const Shape &dims, double sigma) {
    if (!(sigma > 0)) return values;
    const int radius = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (auto &k : kernel) k /= norm;

    const auto stride = strides_of(dims);
    const int64_t n = static_cast<int64_t>(values.size());
    std::vector<double> out(values.size());
    for (size_t a = 0; a < dims.size(); ++a) {
        const int64_t len = dims[a], s = stride[a];
        for (int64_t v = 0; v < n; ++v) {
            const int64_t i = (v / s) % len, base = v - i * s;
            double acc = 0;
            for (int k = -radius; k <= radius; ++k) {
                const int64_t j = std::clamp<int64_t>(i + k, 0, len - 1);
                acc += kernel[k + radius] * values[base + j * s];
            }
            out[v] = acc;
        }
        values.swap(out);
    }
    return values;
}

uint64_t derive_seed(uint64_t master, uint64_t index) {
    uint64_t z = master ^ (index + 0x9e3779b97f4a7c15ULL * (index + 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void TransferCurve::validate() const {
    if (breakpoints.size() < 2) throw ConfigError("transfer curve: need at least two breakpoints");
    for (size_t i = 0; i < breakpoints.size(); ++i) {
        const auto [x, y] = breakpoints[i];
        if (!(x >= 0 && x <= 1 && y >= 0 && y <= 1)) throw ConfigError("transfer curve: breakpoints must lie in [0,1]^2");
        if (i > 0 && !(x > breakpoints[i - 1].first)) throw ConfigError("transfer curve: inputs must increase");
    }
    if (!(noise_sd >= 0) || !(bias_amplitude >= 0) || bias_amplitude >= 1) {
        throw ConfigError("transfer curve: noise_sd >= 0 and 0 <= bias_amplitude < 1 required");
    }
}

double TransferCurve::operator()(double x) const {
    if (x <= breakpoints.front().first) return breakpoints.front().second;
    if (x >= breakpoints.back().first) return breakpoints.back().second;
    auto hi = std::upper_bound(breakpoints.begin(), breakpoints.end(), x,
                               [](double v, const auto &bp) { return v < bp.first; });
    auto lo = hi - 1;
    return lo->second + (x - lo->first) * (hi->second - lo->second) / (hi->first - lo->first);
}

TransferCurve TransferCurve::identity() { return {{{0, 0}, {1, 1}}}; }
TransferCurve TransferCurve::inversion() { return {{{0, 1}, {1, 0}}}; }
TransferCurve TransferCurve::v_curve() { return {{{0, 1}, {0.5, 0}, {1, 1}}}; }
TransferCurve TransferCurve::zigzag() { return {{{0, 0.4}, {0.5, 1.0}, {0.85, 0.0}, {1, 0.7}}, 0.01, 0.05}; }

constexpr std::array<double, 2> kTissueLevels{0.4, 0.75};

LabeledVolume gen_labeled_shape(std::mt19937_64 &rng, const Shape &dims, int n_labels) {
    check_dims(dims, "gen_labeled_shape");
    if (n_labels < 2) throw ConfigError("gen_labeled_shape: need background plus at least one structure");
    const int64_t n = ad::shape_numel(dims);
    if (n < 6 * kMinLabelVoxels * n_labels) {
        throw ConfigError("gen_labeled_shape: " + std::to_string(n_labels) + " labels of >= " +
                          std::to_string(kMinLabelVoxels) + " voxels do not fit in " + ad::shape_str(dims));
    }
    const int nd = static_cast<int>(dims.size());
    const auto stride = strides_of(dims);
    const double min_dim = static_cast<double>(*std::min_element(dims.begin(), dims.end()));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    for (int attempt = 0; attempt < 25; ++attempt) {
        // Label 1 is an ellipsoidal body; labels 2.. are smaller blobs nested
        // inside it. Overlapping blobs split along their normalized distance,
        // so neighbouring structures share smooth borders.
        std::array<double, 3> centre{}, radius{};
        for (int a = 0; a < nd; ++a) {
            centre[a] = (dims[a] - 1) / 2.0 + (unit(rng) - 0.5) * 0.06 * dims[a];
            radius[a] = dims[a] * (0.38 + 0.05 * unit(rng));
        }
        const auto boundary = smooth_noise(rng, dims, min_dim / 12);
        auto coords = [&](int64_t v) {
            std::array<double, 3> x{};
            for (int a = 0; a < nd; ++a) x[a] = static_cast<double>((v / stride[a]) % dims[a]);
            return x;
        };
        auto radial = [&](const std::array<double, 3> &x) {
            double s = 0;
            for (int a = 0; a < nd; ++a) s += std::pow((x[a] - centre[a]) / radius[a], 2);
            return std::sqrt(s);
        };

        const int blobs = n_labels - 2;
        std::vector<std::array<double, 3>> seeds;
        std::vector<double> blob_radius;
        while (static_cast<int>(seeds.size()) < blobs) {
            std::array<double, 3> x{};
            for (int a = 0; a < nd; ++a) x[a] = centre[a] + (2 * unit(rng) - 1) * radius[a];
            if (radial(x) > 0.7) continue;
            seeds.push_back(x);
            // Floor keeps a blob above kMinLabelVoxels on small lattices.
            const double floor = nd == 2 ? 6.5 : 3.5;
            blob_radius.push_back(std::max(min_dim * 0.032, floor) + min_dim * 0.01 * unit(rng));
        }
        std::vector<std::vector<double>> wobble;
        for (int k = 0; k < blobs; ++k) wobble.push_back(smooth_noise(rng, dims, min_dim / 24));

        LabelMap labels{dims, std::vector<uint16_t>(static_cast<size_t>(n), 0)};
        for (int64_t v = 0; v < n; ++v) {
            const auto x = coords(v);
            if (radial(x) + 0.08 * boundary[v] >= 1) continue;
            labels.labels[v] = 1;
            double best = 1;
            for (int k = 0; k < blobs; ++k) {
                double d = 0;
                for (int a = 0; a < nd; ++a) d += std::pow(x[a] - seeds[k][a], 2);
                d = std::sqrt(d) / blob_radius[k] + 0.35 * wobble[k][v];
                if (d < best) {
                    best = d;
                    labels.labels[v] = static_cast<uint16_t>(2 + k);
                }
            }
        }
        std::vector<int64_t> counts(n_labels, 0);
        for (auto l : labels.labels) ++counts[l];
        if (*std::min_element(counts.begin(), counts.end()) < kMinLabelVoxels) continue;

        // The body splits into two unlabeled tissue classes along a smooth
        // random field; blobs are spread over [0.15, 0.95].
        std::vector<double> level{0.0};
        for (int k = 0; k < blobs; ++k) level.push_back(0.15 + 0.8 * k / std::max(1, blobs - 1));
        std::shuffle(level.begin() + 1, level.end(), rng);
        const auto tissue = smooth_noise(rng, dims, min_dim / 32);
        const auto texture = smooth_noise(rng, dims, 3.0);
        Volume image{dims, std::vector<float>(static_cast<size_t>(n), 0.0f)};
        for (int64_t v = 0; v < n; ++v) {
            const auto l = labels.labels[v];
            if (l == 0) continue;
            const double base = l == 1 ? (tissue[v] > 0 ? kTissueLevels[1] : kTissueLevels[0]) : level[l - 1];
            image.data[v] = static_cast<float>(std::clamp(base + 0.2 * texture[v], 0.0, 1.0));
        }
        return {std::move(image), std::move(labels)};
    }
    throw ConfigError("gen_labeled_shape: could not place every label with >= " + std::to_string(kMinLabelVoxels) +
                      " voxels in " + ad::shape_str(dims));
}

ad::Tensor to_tensor(const Volume &vol) {
    Shape s{1};
    s.insert(s.end(), vol.dims.begin(), vol.dims.end());
    return ad::Tensor::from(std::move(s), vol.data);
}

Volume from_tensor(const ad::Tensor &image) {
    if (image.rank() < 2 || image.dim(0) != 1) throw ConfigError("from_tensor: expects a single-channel image");
    return {Shape(image.shape().begin() + 1, image.shape().end()), {image.data().begin(), image.data().end()}};
}

GeneratedPair gen_pair(std::mt19937_64 &rng, const LabeledVolume &base, double magnitude, double smoothness) {
    const Shape &dims = base.image.dims;
    check_dims(dims, "gen_pair");
    if (base.labels.dims != dims) throw ConfigError("gen_pair: image and label dims differ");
    if (!(magnitude >= 0) || !(smoothness > 0)) throw ConfigError("gen_pair: need magnitude >= 0 and smoothness > 0");
    const int nd = static_cast<int>(dims.size());
    const int64_t n = ad::shape_numel(dims);
    const auto interior = transform::interior_mask(dims);
    ad::NoGradGuard guard;

    auto mean_length = [&](std::span<const float> u) {
        double total = 0;
        for (int64_t v = 0; v < n; ++v) {
            double s = 0;
            for (int c = 0; c < nd; ++c) s += double(u[c * n + v]) * u[c * n + v];
            total += std::sqrt(s);
        }
        return total / n;
    };

    Shape field_shape{nd};
    field_shape.insert(field_shape.end(), dims.begin(), dims.end());
    std::normal_distribution<double> normal;
    for (int attempt = 0; attempt < 5; ++attempt) {
        std::vector<double> raw(static_cast<size_t>(nd * n));
        for (int c = 0; c < nd; ++c) {
            std::vector<double> noise(static_cast<size_t>(n));
            for (auto &x : noise) x = normal(rng);
            noise = gaussian_smooth(std::move(noise), dims, smoothness);
            std::copy(noise.begin(), noise.end(), raw.begin() + c * n);
        }
        // Scale the velocity, then correct twice for the nonlinearity of the
        // exponential so the displacement has the requested mean length.
        double scale = 0;
        if (magnitude > 0) {
            std::vector<float> tmp(raw.begin(), raw.end());
            scale = magnitude / mean_length(tmp);
        }
        transform::VelocityField<float> velocity;
        transform::DisplacementField<float> disp;
        for (int refine = 0; refine < 3; ++refine) {
            std::vector<float> vdata(raw.size());
            for (size_t i = 0; i < raw.size(); ++i) vdata[i] = static_cast<float>(raw[i] * scale);
            velocity = transform::VelocityField<float>(ad::Tensor::from(field_shape, std::move(vdata)));
            disp = transform::integrate_velocity(velocity);
            if (magnitude == 0) break;
            scale *= magnitude / mean_length(disp.tensor().data());
        }
        const auto jac = transform::jacobian_determinant(disp);
        bool folded = false;
        for (int64_t v = 0; v < n; ++v) folded |= interior[v] && jac.det[v] <= 0;
        if (folded) continue;

        GeneratedPair out;
        out.image = from_tensor(transform::warp(to_tensor(base.image), disp));
        out.labels = {dims, transform::warp_labels_nearest(base.labels.labels, disp)};
        out.velocity = velocity;
        out.displacement = disp;
        return out;
    }
    throw ConfigError("gen_pair: no fold-free deformation after 5 attempts; lower the magnitude or raise the smoothness");
}

Volume apply_modality(const Volume &vol, const TransferCurve &curve, std::mt19937_64 &rng) {
    curve.validate();
    const int64_t n = static_cast<int64_t>(vol.data.size());
    std::vector<double> bias;
    if (curve.bias_amplitude > 0) {
        const double sigma = static_cast<double>(*std::max_element(vol.dims.begin(), vol.dims.end())) / 4;
        bias = smooth_noise(rng, vol.dims, sigma);
    }
    std::normal_distribution<double> normal(0.0, curve.noise_sd);
    Volume out = vol;
    for (int64_t v = 0; v < n; ++v) {
        double y = curve(vol.data[v]);
        if (!bias.empty()) y *= 1 + curve.bias_amplitude * bias[v];
        if (curve.noise_sd > 0) y += normal(rng);
        out.data[v] = static_cast<float>(std::clamp(y, 0.0, 1.0));
    }
    return out;
}

// ---- MVOL container -------------------------------------------------------

namespace {

constexpr std::array<char, 4> kMagic{'M', 'V', 'O', 'L'};
constexpr uint8_t kVersion = 1;
constexpr uint8_t kFloatKind = 0;
constexpr uint8_t kLabelKind = 1;
constexpr int64_t kMaxElements = int64_t{1} << 31;

void put_u32(std::vector<char> &buf, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char *p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(p[i])) << (8 * i);
    return v;
}

std::vector<char> header(uint8_t kind, const Shape &dims) {
    if (dims.empty() || dims.size() > 255) throw ConfigError("mvol: unsupported rank");
    std::vector<char> buf(kMagic.begin(), kMagic.end());
    buf.push_back(static_cast<char>(kVersion));
    buf.push_back(static_cast<char>(kind));
    buf.push_back(static_cast<char>(dims.size()));
    buf.push_back(0);
    for (auto d : dims) {
        if (d < 1 || d > 0xffffffffLL) throw ConfigError("mvol: dimension out of range");
        put_u32(buf, static_cast<uint32_t>(d));
    }
    return buf;
}

void write_file(const std::filesystem::path &path, const std::vector<char> &buf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("write failed for " + path.string());
}

struct Decoded {
    uint8_t kind = 0;
    Shape dims;
    std::vector<char> bytes;
    size_t payload = 0;
};

Decoded decode(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    Decoded d;
    d.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    const auto &b = d.bytes;
    const std::string where = path.string() + ": ";
    if (b.size() < 8) throw FormatError(where + "truncated header at byte " + std::to_string(b.size()));
    if (!std::equal(kMagic.begin(), kMagic.end(), b.begin())) throw FormatError(where + "bad magic at byte 0");
    if (static_cast<uint8_t>(b[4]) != kVersion) throw FormatError(where + "unsupported version at byte 4");
    d.kind = static_cast<uint8_t>(b[5]);
    if (d.kind != kFloatKind && d.kind != kLabelKind) throw FormatError(where + "unknown kind at byte 5");
    const int nd = static_cast<uint8_t>(b[6]);
    if (nd == 0) throw FormatError(where + "zero dimensions at byte 6");
    if (b[7] != 0) throw FormatError(where + "reserved byte 7 is not zero");
    d.payload = 8 + 4 * static_cast<size_t>(nd);
    if (b.size() < d.payload) throw FormatError(where + "truncated dims at byte " + std::to_string(b.size()));
    int64_t count = 1;
    for (int a = 0; a < nd; ++a) {
        const auto offset = 8 + 4 * static_cast<size_t>(a);
        const int64_t dim = get_u32(b.data() + offset);
        if (dim == 0) throw FormatError(where + "zero extent at byte " + std::to_string(offset));
        count *= dim;
        if (count > kMaxElements) throw FormatError(where + "dims overflow at byte " + std::to_string(offset));
        d.dims.push_back(dim);
    }
    const size_t elem = d.kind == kFloatKind ? 4 : 2;
    const size_t expect = d.payload + elem * static_cast<size_t>(count);
    if (b.size() != expect) {
        throw FormatError(where + "payload ends at byte " + std::to_string(b.size()) + ", dims require " +
                          std::to_string(expect));
    }
    return d;
}

std::vector<float> float_payload(const Decoded &d, const std::filesystem::path &path) {
    if (d.kind != kFloatKind) throw FormatError(path.string() + ": expected a float volume (kind byte 5)");
    const size_t n = (d.bytes.size() - d.payload) / 4;
    std::vector<float> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i] = std::bit_cast<float>(get_u32(d.bytes.data() + d.payload + 4 * i));
        if (!std::isfinite(out[i])) {
            throw FormatError(path.string() + ": non-finite value at byte " + std::to_string(d.payload + 4 * i));
        }
    }
    return out;
}

} // namespace

void write_volume(const std::filesystem::path &path, const Volume &vol) {
    if (static_cast<int64_t>(vol.data.size()) != ad::shape_numel(vol.dims)) throw ConfigError("write_volume: size mismatch");
    auto buf = header(kFloatKind, vol.dims);
    for (float v : vol.data) put_u32(buf, std::bit_cast<uint32_t>(v));
    write_file(path, buf);
}

void write_labels(const std::filesystem::path &path, const LabelMap &labels) {
    if (static_cast<int64_t>(labels.labels.size()) != ad::shape_numel(labels.dims)) {
        throw ConfigError("write_labels: size mismatch");
    }
    auto buf = header(kLabelKind, labels.dims);
    for (auto l : labels.labels) {
        buf.push_back(static_cast<char>(l & 0xff));
        buf.push_back(static_cast<char>(l >> 8));
    }
    write_file(path, buf);
}

void write_field(const std::filesystem::path &path, const transform::DisplacementField<float> &field) {
    const auto &t = field.tensor();
    write_volume(path, Volume{t.shape(), {t.data().begin(), t.data().end()}});
}

Volume read_volume(const std::filesystem::path &path) {
    const auto d = decode(path);
    Volume vol{d.dims, float_payload(d, path)};
    for (size_t i = 0; i < vol.data.size(); ++i) {
        if (vol.data[i] < 0 || vol.data[i] > 1) {
            throw FormatError(path.string() + ": intensity outside [0,1] at byte " + std::to_string(d.payload + 4 * i));
        }
    }
    return vol;
}

LabelMap read_labels(const std::filesystem::path &path) {
    const auto d = decode(path);
    if (d.kind != kLabelKind) throw FormatError(path.string() + ": expected a label map (kind byte 5)");
    LabelMap out{d.dims, std::vector<uint16_t>((d.bytes.size() - d.payload) / 2)};
    for (size_t i = 0; i < out.labels.size(); ++i) {
        const auto *p = d.bytes.data() + d.payload + 2 * i;
        out.labels[i] = static_cast<uint16_t>(static_cast<uint8_t>(p[0]) | (static_cast<uint8_t>(p[1]) << 8));
    }
    return out;
}

transform::DisplacementField<float> read_field(const std::filesystem::path &path) {
    const auto d = decode(path);
    auto values = float_payload(d, path);
    if (d.dims.size() < 2 || d.dims[0] != static_cast<int64_t>(d.dims.size()) - 1) {
        throw FormatError(path.string() + ": field dims " + ad::shape_str(d.dims) + " lack one channel per axis");
    }
    return transform::DisplacementField<float>(ad::Tensor::from(d.dims, std::move(values)));
}

} // namespace minereg::synthdata
