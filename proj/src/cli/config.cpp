#include "minereg/cli/config.hpp"

#include <cmath>
#include <fstream>

#include "minereg/errors.hpp"

namespace minereg::cli {

RunConfig::RunConfig() {
    const auto v = synthdata::TransferCurve::zigzag();
    curve = v.breakpoints;
    curve_noise_sd = v.noise_sd;
    curve_bias_amplitude = v.bias_amplitude;
}

void RunConfig::validate() const {
    loss_config().validate();
    transfer_curve().validate();
    auto require = [](bool ok, const char *msg) {
        if (!ok) throw ConfigError(std::string("config: ") + msg);
    };
    require(hidden >= 1, "hidden must be >= 1");
    require(squaring_steps >= 1, "squaring_steps must be >= 1");
    require(epochs >= 1, "epochs must be >= 1");
    require(lr > 0 && critic_lr > 0 && beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0, "invalid Adam settings");
    require(batch == 1, "only batch = 1 is supported");
    require(subjects >= 3, "subjects must be >= 3");
    require(split_train > 0 && split_val >= 0 && split_train + split_val < 1, "split fractions must leave a test set");
    require(deform_magnitude >= 0 && deform_smoothness > 0, "invalid deformation settings");
    require(grid_res >= 2, "grid_res must be >= 2");
    require(runtime_repeats >= 1, "runtime_repeats must be >= 1");
    require(n_labels >= 2, "n_labels must be >= 2");
    for (const auto &m : sweep_methods) similarity::parse_loss(m);
    regnet::RegNetConfig net;
    net.channels = channels;
    net.dims = dims;
    net.validate();
}

similarity::LossConfig RunConfig::loss_config() const {
    similarity::LossConfig c;
    c.kind = loss;
    c.alpha = alpha;
    c.lambda = lambda;
    c.radius = radius;
    c.ncc_window = ncc_window;
    c.ema_rate = ema_rate;
    c.shuffle_before_warp = shuffle_before_warp;
    return c;
}

synthdata::TransferCurve RunConfig::transfer_curve() const {
    return {curve, curve_noise_sd, curve_bias_amplitude};
}

std::string task_name(Task t) { return t == Task::mono ? "mono" : "multi"; }

Task parse_task(const std::string &name) {
    if (name == "mono") return Task::mono;
    if (name == "multi") return Task::multi;
    throw ConfigError("unknown task '" + name + "' (mono, multi)");
}

nlohmann::ordered_json to_json(const RunConfig &c) {
    nlohmann::ordered_json j;
    j["task"] = task_name(c.task);
    j["loss"] = std::string(similarity::loss_name(c.loss));
    j["alpha"] = c.alpha;
    j["lambda"] = c.lambda;
    j["hidden"] = c.hidden;
    j["radius"] = c.radius;
    j["squaring_steps"] = c.squaring_steps;
    j["epochs"] = c.epochs;
    j["lr"] = c.lr;
    j["critic_lr"] = c.critic_lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["batch"] = c.batch;
    j["seed"] = c.seed;
    j["dims"] = c.dims;
    j["channels"] = c.channels;
    j["n_labels"] = c.n_labels;
    j["subjects"] = c.subjects;
    j["split_train"] = c.split_train;
    j["split_val"] = c.split_val;
    j["deform_magnitude"] = c.deform_magnitude;
    j["deform_smoothness"] = c.deform_smoothness;
    j["curve"] = c.curve;
    j["curve_noise_sd"] = c.curve_noise_sd;
    j["curve_bias_amplitude"] = c.curve_bias_amplitude;
    j["ncc_window"] = c.ncc_window;
    j["ema_rate"] = c.ema_rate;
    j["shuffle_before_warp"] = c.shuffle_before_warp;
    j["grid_res"] = c.grid_res;
    j["runtime_repeats"] = c.runtime_repeats;
    j["sweep_alphas"] = c.sweep_alphas;
    j["sweep_methods"] = c.sweep_methods;
    return j;
}

RunConfig config_from_json(const nlohmann::json &j) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    RunConfig c;
    const auto known = to_json(c);
    for (const auto &[key, _] : j.items()) {
        if (!known.contains(key)) throw ConfigError("config: unknown key '" + key + "'");
    }
    auto get = [&](const char *key, auto &field) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(field);
        } catch (const nlohmann::json::exception &e) {
            throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
        }
    };
    std::string task = task_name(c.task), loss(similarity::loss_name(c.loss));
    get("task", task);
    get("loss", loss);
    c.task = parse_task(task);
    c.loss = similarity::parse_loss(loss);
    get("alpha", c.alpha);
    get("lambda", c.lambda);
    get("hidden", c.hidden);
    get("radius", c.radius);
    get("squaring_steps", c.squaring_steps);
    get("epochs", c.epochs);
    get("lr", c.lr);
    get("critic_lr", c.critic_lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("batch", c.batch);
    get("seed", c.seed);
    get("dims", c.dims);
    get("channels", c.channels);
    get("n_labels", c.n_labels);
    get("subjects", c.subjects);
    get("split_train", c.split_train);
    get("split_val", c.split_val);
    get("deform_magnitude", c.deform_magnitude);
    get("deform_smoothness", c.deform_smoothness);
    get("curve", c.curve);
    get("curve_noise_sd", c.curve_noise_sd);
    get("curve_bias_amplitude", c.curve_bias_amplitude);
    get("ncc_window", c.ncc_window);
    get("ema_rate", c.ema_rate);
    get("shuffle_before_warp", c.shuffle_before_warp);
    get("grid_res", c.grid_res);
    get("runtime_repeats", c.runtime_repeats);
    get("sweep_alphas", c.sweep_alphas);
    get("sweep_methods", c.sweep_methods);
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
        return config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error &e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
}

std::string config_echo(const RunConfig &cfg) { return "# config=" + to_json(cfg).dump(); }

} // namespace minereg::cli
