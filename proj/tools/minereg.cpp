#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "minereg/cli/config.hpp"
#include "minereg/cli/pipeline.hpp"
#include "minereg/errors.hpp"

namespace fs = std::filesystem;
using namespace minereg;
using namespace minereg::cli;

namespace {

struct Overrides {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<std::string> loss;
    std::optional<double> alpha;
    std::optional<int> epochs;
    bool full_schedule = false;
};

void add_config_options(CLI::App &cmd, Overrides &o) {
    cmd.add_option("--config", o.config, "JSON run configuration");
    cmd.add_option("--seed", o.seed, "Master seed");
    cmd.add_option("--loss", o.loss, "mine-local, mine-global, mse or ncc");
    cmd.add_option("--alpha", o.alpha, "Similarity weight");
    cmd.add_option("--epochs", o.epochs, "Training epochs");
    cmd.add_flag("--full-schedule", o.full_schedule, "Train for the long schedule (1500 epochs)");
}

RunConfig resolve(const Overrides &o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (o.loss) cfg.loss = similarity::parse_loss(*o.loss);
    if (o.alpha) cfg.alpha = *o.alpha;
    if (o.full_schedule) cfg.epochs = kFullScheduleEpochs;
    if (o.epochs) cfg.epochs = *o.epochs;
    cfg.validate();
    return cfg;
}

int run(int argc, char **argv) {
    CLI::App app{"Unsupervised deformable registration with a mutual-information critic"};
    app.require_subcommand(1);
    Overrides o;
    std::string out, data, checkpoint, split = "test";
    int grid_res = 64;
    RegisterArgs reg;

    auto *gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    add_config_options(*gen, o);
    gen->add_option("--out", out, "Dataset directory")->required();

    auto *train = app.add_subcommand("train", "Train a registration network");
    add_config_options(*train, o);
    train->add_option("--data", data, "Dataset directory")->required();
    train->add_option("--out", out, "Run directory")->required();

    auto *reg_cmd = app.add_subcommand("register", "Register one pair with a trained network");
    reg_cmd->add_option("--checkpoint", reg.checkpoint)->required();
    reg_cmd->add_option("--fixed", reg.fixed)->required();
    reg_cmd->add_option("--moving", reg.moving)->required();
    reg_cmd->add_option("--fixed-labels", reg.fixed_labels);
    reg_cmd->add_option("--moving-labels", reg.moving_labels);
    reg_cmd->add_option("--out", reg.out, "Output directory")->required();
    reg_cmd->add_flag("--zero-velocity", reg.zero_velocity, "Use the identity transform");

    auto *eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--data", data)->required();
    eval->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--out", out, "Results CSV")->required();

    auto *sweep = app.add_subcommand("sweep", "Train and evaluate every (alpha, method) pair");
    add_config_options(*sweep, o);
    sweep->add_option("--data", data)->required();
    sweep->add_option("--out", out, "Sweep directory")->required();

    auto *rmap = app.add_subcommand("response-map", "Critic response over the intensity square");
    rmap->add_option("--checkpoint", checkpoint)->required();
    rmap->add_option("--grid-res", grid_res);
    rmap->add_option("--out", out, "Map CSV")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ExitCode::config);
    }

    if (gen->parsed()) {
        cmd_gen(resolve(o), out);
    } else if (train->parsed()) {
        cmd_train(resolve(o), data, out, std::cout);
    } else if (reg_cmd->parsed()) {
        cmd_register(reg);
    } else if (eval->parsed()) {
        cmd_eval(checkpoint, data, split, out);
    } else if (sweep->parsed()) {
        cmd_sweep(resolve(o), data, out, std::cout);
    } else if (rmap->parsed()) {
        cmd_response_map(checkpoint, grid_res, out);
    }
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError &e) {
        std::cerr << "config error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::config);
    } catch (const FormatError &e) {
        std::cerr << "data error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::data);
    } catch (const NumericError &e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::numeric);
    } catch (const fs::filesystem_error &e) {
        std::cerr << "data error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::data);
    }
}
