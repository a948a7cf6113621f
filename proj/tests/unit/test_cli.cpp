#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "doctest.h"

#include "minereg/cli/config.hpp"
#include "minereg/cli/pipeline.hpp"
#include "minereg/errors.hpp"

using namespace minereg;
using namespace minereg::cli;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
    RunConfig c;
    c.dims = {64, 64};
    c.channels = {4, 8};
    c.n_labels = 4;
    c.subjects = 5;
    c.split_train = 0.6;
    c.split_val = 0.2;
    c.deform_smoothness = 8;
    c.epochs = 2;
    c.seed = 17;
    c.runtime_repeats = 1;
    return c;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string &tag) {
        std::random_device rd;
        path = fs::temp_directory_path() / ("minereg_" + tag + "_" + std::to_string(rd()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_file(const fs::path &p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Drops the runtime columns, which are the only nondeterministic fields.
std::string strip_runtime(const std::string &csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        if (line.rfind("# config=", 0) != 0) {
            for (int k = 0; k < 2; ++k) line = line.substr(0, line.rfind(','));
        }
        out += line + '\n';
    }
    return out;
}

int run_tool(const std::string &args) {
    const std::string cmd = std::string(MINEREG_EXE) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("config: defaults, JSON round trip and rejection of unknown keys") {
    const RunConfig d;
    CHECK(d.alpha == 1.0);
    CHECK(d.lambda == 10.0);
    CHECK(d.hidden == 30);
    CHECK(d.radius == 8);
    CHECK(d.squaring_steps == 7);
    CHECK(d.epochs == 300);
    CHECK(d.beta2 == 0.999);
    CHECK(d.batch == 1);
    d.validate();

    auto c = tiny_config();
    c.task = Task::mono;
    c.loss = similarity::LossKind::ncc;
    c.alpha = 2.5;
    const auto back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_echo(c).rfind("# config={", 0) == 0);
    CHECK(config_echo(c).find('\n') == std::string::npos);

    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"alhpa", 1}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"alpha", "one"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"loss", "cosine"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"radius", -1}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(nlohmann::json{{"alpha", -1}}), ConfigError);
}

TEST_CASE("dataset: splits, shared labels across modalities and disk round trip") {
    const auto cfg = tiny_config();
    const auto ds = generate_dataset(cfg);
    CHECK(ds.subjects.size() == 5);
    CHECK(ds.split("train").size() == 3);
    CHECK(ds.split("val").size() == 1);
    CHECK(ds.split("test").size() == 1);
    for (const auto &s : ds.subjects) {
        CHECK(s.image_a.dims == s.image_b.dims);
        CHECK(s.labels.dims == s.image_a.dims);
        CHECK(s.image_a.data != s.image_b.data);
        CHECK(&ds.moving_image(s, Task::mono) == &s.image_a);
        CHECK(&ds.moving_image(s, Task::multi) == &s.image_b);
    }

    TempDir dir("ds");
    write_dataset(ds, dir.path);
    const auto back = load_dataset(dir.path);
    REQUIRE(back.subjects.size() == ds.subjects.size());
    CHECK(back.atlas.image.data == ds.atlas.image.data);
    CHECK(back.atlas_b.data == ds.atlas_b.data);
    for (size_t i = 0; i < ds.subjects.size(); ++i) {
        CHECK(back.subjects[i].id == ds.subjects[i].id);
        CHECK(back.subjects[i].split == ds.subjects[i].split);
        CHECK(back.subjects[i].labels.labels == ds.subjects[i].labels.labels);
        CHECK(back.subjects[i].image_b.data == ds.subjects[i].image_b.data);
    }

    fs::remove(dir.path / "s001_b.mvol");
    CHECK_THROWS_AS(load_dataset(dir.path), FormatError);
    CHECK_THROWS_AS(load_dataset(dir.path / "missing"), FormatError);
}

TEST_CASE("checkpoint: round trip with and without the critic") {
    const auto cfg = tiny_config();
    regnet::RegNet<float> net(regnet_config(cfg));
    similarity::StatNet<float> critic(statnet_config(cfg));
    TempDir dir("ck");
    save_checkpoint(dir.path / "a.ckpt", cfg, net, &critic, {{"epoch", 3}});
    const auto full = load_checkpoint(dir.path / "a.ckpt", true);
    CHECK(to_json(full.config) == to_json(cfg));
    CHECK(full.meta.at("epoch") == 3);
    REQUIRE(full.critic);
    for (size_t i = 0; i < net.parameters().size(); ++i) {
        const auto &a = net.parameters()[i].tensor.data();
        const auto &b = full.net->parameters()[i].tensor.data();
        CHECK(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
    CHECK_FALSE(load_checkpoint(dir.path / "a.ckpt", false).critic);

    save_checkpoint(dir.path / "b.ckpt", cfg, net, nullptr);
    CHECK_FALSE(load_checkpoint(dir.path / "b.ckpt", true).critic);

    std::ofstream(dir.path / "bad.ckpt", std::ios::binary) << "MRCX";
    CHECK_THROWS_AS(load_checkpoint(dir.path / "bad.ckpt", false), FormatError);
}

TEST_CASE("train: alpha 0 leaves validation Dice at its initial value") {
    auto cfg = tiny_config();
    cfg.alpha = 0;
    cfg.epochs = 3;
    const auto ds = generate_dataset(cfg);
    const double before = mean_dice(cfg, nullptr, ds, "val");
    const auto result = train(cfg, ds);
    REQUIRE(result.log.size() == 3);
    for (const auto &row : result.log) {
        CHECK(row.similarity == 0.0);
        CHECK(row.val_dice == doctest::Approx(before).epsilon(0.005));
    }
}

TEST_CASE("train and eval: artifacts and determinism apart from runtime") {
    auto cfg = tiny_config();
    TempDir dir("train");
    const auto ds = generate_dataset(cfg);
    write_dataset(ds, dir.path / "data");

    std::ostringstream progress;
    cmd_train(cfg, dir.path / "data", dir.path / "r1", progress);
    cmd_train(cfg, dir.path / "data", dir.path / "r2", progress);
    for (const char *f : {"train_log.csv", "final.ckpt", "best.ckpt", "run_config.json"}) {
        CHECK(fs::exists(dir.path / "r1" / f));
    }
    const auto log = read_file(dir.path / "r1" / "train_log.csv");
    CHECK(log.rfind("# config=", 0) == 0);
    CHECK(log.find(train_log_header()) != std::string::npos);
    CHECK(log == read_file(dir.path / "r2" / "train_log.csv"));

    cmd_eval(dir.path / "r1" / "final.ckpt", dir.path / "data", "test", dir.path / "e1.csv");
    cmd_eval(dir.path / "r2" / "final.ckpt", dir.path / "data", "test", dir.path / "e2.csv");
    CHECK(strip_runtime(read_file(dir.path / "e1.csv")) == strip_runtime(read_file(dir.path / "e2.csv")));
    const auto records = read_records(dir.path / "e1.csv");
    REQUIRE(records.size() == 2);
    CHECK(records[0].method == "identity");
    CHECK(records[1].method == "mine-local");
    CHECK(records[0].mean_dice > 0);
}

TEST_CASE("register: zero velocity returns the moving image") {
    const auto cfg = tiny_config();
    const auto ds = generate_dataset(cfg);
    TempDir dir("reg");
    regnet::RegNet<float> net(regnet_config(cfg));
    save_checkpoint(dir.path / "n.ckpt", cfg, net, nullptr);
    const auto &s = ds.subjects.front();
    synthdata::write_volume(dir.path / "fixed.mvol", ds.atlas.image);
    synthdata::write_volume(dir.path / "moving.mvol", s.image_a);
    synthdata::write_labels(dir.path / "fixed_labels.mvol", ds.atlas.labels);
    synthdata::write_labels(dir.path / "moving_labels.mvol", s.labels);

    RegisterArgs args;
    args.checkpoint = dir.path / "n.ckpt";
    args.fixed = dir.path / "fixed.mvol";
    args.moving = dir.path / "moving.mvol";
    args.fixed_labels = dir.path / "fixed_labels.mvol";
    args.moving_labels = dir.path / "moving_labels.mvol";
    args.out = dir.path / "out";
    args.zero_velocity = true;
    cmd_register(args);
    CHECK(synthdata::read_volume(args.out / "warped.mvol").data == s.image_a.data);
    const auto r = read_records(args.out / "register.csv").at(0);
    CHECK(r.method == "identity");
    CHECK(r.nonpos_jac_count == 0);
    CHECK(r.mean_dice == doctest::Approx(evalkit::dice(ds.atlas.labels, s.labels).mean));

    args.zero_velocity = false;
    args.fixed_labels.clear();
    args.out = dir.path / "out2";
    cmd_register(args);
    CHECK(std::isnan(read_records(args.out / "register.csv").at(0).mean_dice));
}

TEST_CASE("executable: exit codes") {
    TempDir dir("exe");
    const auto p = dir.path.string();
    CHECK(run_tool("--help") == 0);
    CHECK(run_tool("frobnicate") == 2);
    std::ofstream(dir.path / "bad.json") << R"({"alhpa": 1})";
    CHECK(run_tool("gen --config " + p + "/bad.json --out " + p + "/d") == 2);
    CHECK(run_tool("train --data " + p + "/nowhere --out " + p + "/r") == 3);

    auto cfg = tiny_config();
    write_dataset(generate_dataset(cfg), dir.path / "data");
    // A huge step size overflows the weights after the first update.
    std::ofstream(dir.path / "blowup.json") << R"({"lr": 1e30, "epochs": 2})";
    CHECK(run_tool("train --config " + p + "/blowup.json --data " + p + "/data --out " + p + "/r") == 4);
}
