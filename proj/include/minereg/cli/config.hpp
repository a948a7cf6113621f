#pragma once

// Declarative run configuration shared by every command. Serialized as flat
// JSON; unknown keys are rejected so typos do not silently fall back to
// defaults.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "minereg/similarity/similarity.hpp"
#include "minereg/synthdata/synthdata.hpp"

namespace minereg::cli {

enum class Task { mono, multi };

struct RunConfig {
    Task task = Task::multi;
    similarity::LossKind loss = similarity::LossKind::mine_local;
    double alpha = 1.0;
    double lambda = 10.0;
    int64_t hidden = 30;          // L, critic width
    int64_t radius = 8;           // N, local shuffle radius
    int squaring_steps = 7;       // T
    int epochs = 300;
    double lr = 1e-3;
    double critic_lr = 3e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch = 1;
    uint64_t seed = 0;

    std::vector<int64_t> dims{192, 192};
    std::vector<int64_t> channels{16, 32, 32};
    int n_labels = 8;
    int subjects = 10;
    double split_train = 0.7;
    double split_val = 0.1;
    double deform_magnitude = 4.0;
    double deform_smoothness = 16.0;
    std::vector<std::pair<double, double>> curve;
    double curve_noise_sd = 0.0;
    double curve_bias_amplitude = 0.0;

    int ncc_window = 9;
    double ema_rate = 0.0;
    bool shuffle_before_warp = false;
    int grid_res = 64;
    int runtime_repeats = 5;
    std::vector<double> sweep_alphas{0.5, 1, 2, 5, 10};
    std::vector<std::string> sweep_methods{"mine-local", "mse"};

    RunConfig();

    // Throws ConfigError on any invalid field.
    void validate() const;
    similarity::LossConfig loss_config() const;
    synthdata::TransferCurve transfer_curve() const;
};

inline constexpr int kFullScheduleEpochs = 1500;

std::string task_name(Task t);
Task parse_task(const std::string &name);

nlohmann::ordered_json to_json(const RunConfig &cfg);
// Starts from defaults, overrides every key present in j, then validates.
RunConfig config_from_json(const nlohmann::json &j);
RunConfig load_config(const std::filesystem::path &path);

// Single-line JSON echo used as the first line of every CSV artifact.
std::string config_echo(const RunConfig &cfg);

} // namespace minereg::cli
