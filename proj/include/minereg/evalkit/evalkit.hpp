#pragma once

// Registration evaluation: Dice overlap, folding counts, histogram mutual
// information, inference timing, and result records.

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "minereg/regnet/regnet.hpp"
#include "minereg/synthdata/synthdata.hpp"
#include "minereg/transform/transform.hpp"

namespace minereg::evalkit {

struct DiceResult {
    std::map<uint16_t, double> per_label;
    double mean = 0.0;
};

// Per foreground label present in either map; background excluded. Throws
// FormatError when neither map has a foreground label.
DiceResult dice(const synthdata::LabelMap &a, const synthdata::LabelMap &b);

struct JacobianCount {
    int64_t count = 0;
    double fraction = 0.0; // of interior voxels
};

template <class T>
JacobianCount count_nonpositive_jacobian(const transform::DisplacementField<T> &phi);

// Plug-in mutual information (nats) of the joint histogram with `bins`
// equal bins over [0, 1] per variable; values are clamped into range.
double binned_mi(std::span<const float> a, std::span<const float> b, int bins);
double pearson(std::span<const float> a, std::span<const float> b);

// Inference path: posterior mean (no sampling), integration, warp.
struct Registration {
    transform::DisplacementField<float> displacement;
    ad::Tensor warped;
};
Registration register_pair(const regnet::RegNet<float> &net, const ad::Tensor &fixed, const ad::Tensor &moving,
                           int squaring_steps = transform::kDefaultSquaringSteps);

struct RuntimeStats {
    double median = 0.0;
    double sd = 0.0; // sample standard deviation; 0 for a single repeat
};

// Seconds from an arbitrary origin.
using Clock = std::function<double()>;
double steady_seconds();

// Times register_pair only: inputs are already in memory and no similarity
// term is evaluated. The clock is read once before and once after each run.
RuntimeStats benchmark_runtime(const regnet::RegNet<float> &net, const ad::Tensor &fixed, const ad::Tensor &moving,
                               int repeats, const Clock &clock = steady_seconds);

struct EvalRecord {
    std::string method;
    double alpha = 0.0;
    double lambda = 0.0;
    uint64_t seed = 0;
    double mean_dice = 0.0;
    std::map<uint16_t, double> dice_per_label;
    int64_t nonpos_jac_count = 0;
    double nonpos_jac_frac = 0.0;
    double runtime_s_median = 0.0;
    double runtime_s_sd = 0.0;

    bool operator==(const EvalRecord &) const = default;
};

std::string_view csv_header();
std::string to_csv_row(const EvalRecord &r);
// Throws FormatError on malformed rows.
EvalRecord parse_csv_row(std::string_view line);

// Runs `train_and_evaluate` once per (alpha, method) and returns the records
// sorted by alpha, then method. Needs at least two alpha values.
using SweepRunner = std::function<EvalRecord(const std::string &method, double alpha)>;
std::vector<EvalRecord> sweep_alpha(const std::vector<double> &alphas, const std::vector<std::string> &methods,
                                    const SweepRunner &train_and_evaluate);

} // namespace minereg::evalkit
