#pragma once

// End-to-end workflow behind the command-line tool: dataset generation and
// loading, training, checkpoints, evaluation and the alpha sweep.

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "minereg/cli/config.hpp"
#include "minereg/evalkit/evalkit.hpp"
#include "minereg/regnet/regnet.hpp"
#include "minereg/similarity/similarity.hpp"
#include "minereg/synthdata/synthdata.hpp"

namespace minereg::cli {

struct Subject {
    std::string id;
    uint64_t seed = 0;
    std::string split; // train, val or test
    synthdata::Volume image_a;
    synthdata::Volume image_b;
    synthdata::LabelMap labels;
    transform::DisplacementField<float> truth; // subject = atlas warped by truth
};

// Every subject is the atlas warped by a random diffeomorphism. Registration
// maps a subject (moving) onto the atlas (fixed, modality A); the multi-modal
// task presents the subject in modality B.
struct Dataset {
    RunConfig config; // generation settings
    synthdata::LabeledVolume atlas;
    synthdata::Volume atlas_b;
    std::vector<Subject> subjects;

    std::vector<const Subject *> split(std::string_view name) const;
    const synthdata::Volume &moving_image(const Subject &s, Task task) const;
};

// Split sizes: round(n * split_train) train, round(n * split_val) val, the
// rest test, in subject order.
Dataset generate_dataset(const RunConfig &cfg);
void write_dataset(const Dataset &ds, const std::filesystem::path &dir);
// Throws FormatError when the manifest or any volume is missing or
// inconsistent.
Dataset load_dataset(const std::filesystem::path &dir);

// Binary checkpoint: "MRCK", u32 version, u64 header length, JSON header
// (config, metadata, tensor table), little-endian float32 payload.
struct Checkpoint {
    RunConfig config;
    nlohmann::ordered_json meta;
    std::unique_ptr<regnet::RegNet<float>> net;
    std::unique_ptr<similarity::StatNet<float>> critic; // null unless requested and present
};

void save_checkpoint(const std::filesystem::path &path, const RunConfig &cfg, const regnet::RegNet<float> &net,
                     const similarity::StatNet<float> *critic, const nlohmann::ordered_json &meta = {});
Checkpoint load_checkpoint(const std::filesystem::path &path, bool with_critic);

regnet::RegNetConfig regnet_config(const RunConfig &cfg);
similarity::StatNetConfig statnet_config(const RunConfig &cfg);

struct EpochLog {
    int epoch = 0;
    double total_loss = 0.0;
    double similarity = 0.0; // DV bound for MINE losses
    double regularizer = 0.0;
    double val_dice = 0.0;
};

struct TrainResult {
    std::unique_ptr<regnet::RegNet<float>> final_net;
    std::unique_ptr<regnet::RegNet<float>> best_net; // highest validation Dice, earliest on ties
    std::unique_ptr<similarity::StatNet<float>> critic;
    int best_epoch = 0;
    double best_val_dice = 0.0;
    std::vector<EpochLog> log;
};

// One Adam step per training subject per epoch. When out_dir is non-empty,
// writes train_log.csv, final.ckpt and best.ckpt there. Throws NumericError
// naming the epoch and subject when a loss term becomes non-finite.
TrainResult train(const RunConfig &cfg, const Dataset &ds, const std::filesystem::path &out_dir = {},
                  std::ostream *progress = nullptr);

std::string train_log_header();

// Mean Dice of the warped subject labels against the atlas over a split,
// using the posterior mean. Runtime is measured on the split's first pair.
// A null net evaluates the identity transform (method "identity").
evalkit::EvalRecord evaluate(const RunConfig &cfg, const regnet::RegNet<float> *net, const Dataset &ds,
                             std::string_view split, bool measure_runtime = true);
double mean_dice(const RunConfig &cfg, const regnet::RegNet<float> *net, const Dataset &ds, std::string_view split);

// CSV with the config echo, header, and one row per record.
void write_records(const std::filesystem::path &path, const RunConfig &cfg,
                   const std::vector<evalkit::EvalRecord> &records);
std::vector<evalkit::EvalRecord> read_records(const std::filesystem::path &path);

// Trains each (alpha, method) in cfg.sweep_alphas x cfg.sweep_methods and
// evaluates the final network on the test split. Per-run artifacts go to
// out_dir/<method>_a<alpha>/ when out_dir is non-empty.
std::vector<evalkit::EvalRecord> run_sweep(const RunConfig &cfg, const Dataset &ds,
                                           const std::filesystem::path &out_dir = {},
                                           std::ostream *progress = nullptr);

// Command entry points used by the executable.
void cmd_gen(const RunConfig &cfg, const std::filesystem::path &out);
void cmd_train(RunConfig cfg, const std::filesystem::path &data, const std::filesystem::path &out,
               std::ostream &progress);
struct RegisterArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path fixed;
    std::filesystem::path moving;
    std::filesystem::path fixed_labels;  // optional
    std::filesystem::path moving_labels; // optional
    std::filesystem::path out;
    bool zero_velocity = false;
};
void cmd_register(const RegisterArgs &args);
void cmd_eval(const std::filesystem::path &checkpoint, const std::filesystem::path &data, const std::string &split,
              const std::filesystem::path &out);
void cmd_sweep(RunConfig cfg, const std::filesystem::path &data, const std::filesystem::path &out,
               std::ostream &progress);
void cmd_response_map(const std::filesystem::path &checkpoint, int grid_res, const std::filesystem::path &out);

} // namespace minereg::cli
