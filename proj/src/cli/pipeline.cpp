#include "minereg/cli/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "minereg/autodiff/ops.hpp"
#include "minereg/errors.hpp"

namespace minereg::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using ad::Shape;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr uint64_t kAtlasStream = 0xA71A5;
constexpr uint64_t kTrainStream = 0x7EA1;

std::string subject_id(size_t i) {
    std::ostringstream id;
    id << 's' << std::setw(3) << std::setfill('0') << i;
    return id.str();
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw FormatError("cannot write " + path.string());
}

// Atlas voxels and subject-specific labels both come in on the same lattice.
void require_lattice(const Shape &expected, const Shape &got, const std::string &what) {
    if (expected != got) {
        throw FormatError(what + ": lattice " + ad::shape_str(got) + " does not match " + ad::shape_str(expected));
    }
}

int64_t interior_voxels(const Shape &lattice) {
    const auto mask = transform::interior_mask(lattice);
    return std::count(mask.begin(), mask.end(), true);
}

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

// ---- dataset ---------------------------------------------------------------

std::vector<const Subject *> Dataset::split(std::string_view name) const {
    if (name != "train" && name != "val" && name != "test") {
        throw ConfigError("unknown split '" + std::string(name) + "' (train, val, test)");
    }
    std::vector<const Subject *> out;
    for (const auto &s : subjects) {
        if (s.split == name) out.push_back(&s);
    }
    return out;
}

const synthdata::Volume &Dataset::moving_image(const Subject &s, Task task) const {
    return task == Task::mono ? s.image_a : s.image_b;
}

Dataset generate_dataset(const RunConfig &cfg) {
    cfg.validate();
    const auto n = static_cast<size_t>(cfg.subjects);
    const auto n_train = static_cast<size_t>(std::max(1.0, std::round(n * cfg.split_train)));
    const auto n_val = static_cast<size_t>(std::round(n * cfg.split_val));
    if (n_train + n_val >= n) throw ConfigError("split leaves no test subjects for " + std::to_string(n) + " subjects");

    Dataset ds;
    ds.config = cfg;
    const auto curve = cfg.transfer_curve();
    std::mt19937_64 atlas_rng(synthdata::derive_seed(cfg.seed, kAtlasStream));
    ds.atlas = synthdata::gen_labeled_shape(atlas_rng, cfg.dims, cfg.n_labels);
    ds.atlas_b = synthdata::apply_modality(ds.atlas.image, curve, atlas_rng);
    for (size_t i = 0; i < n; ++i) {
        Subject s;
        s.id = subject_id(i);
        s.seed = synthdata::derive_seed(cfg.seed, i);
        s.split = i < n_train ? "train" : i < n_train + n_val ? "val" : "test";
        std::mt19937_64 rng(s.seed);
        auto pair = synthdata::gen_pair(rng, ds.atlas, cfg.deform_magnitude, cfg.deform_smoothness);
        s.image_b = synthdata::apply_modality(pair.image, curve, rng);
        s.image_a = std::move(pair.image);
        s.labels = std::move(pair.labels);
        s.truth = std::move(pair.displacement);
        ds.subjects.push_back(std::move(s));
    }
    return ds;
}

void write_dataset(const Dataset &ds, const fs::path &dir) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["config"] = to_json(ds.config);
    manifest["atlas"] = {{"image_a", "atlas_a.mvol"}, {"image_b", "atlas_b.mvol"}, {"labels", "atlas_labels.mvol"}};
    synthdata::write_volume(dir / "atlas_a.mvol", ds.atlas.image);
    synthdata::write_volume(dir / "atlas_b.mvol", ds.atlas_b);
    synthdata::write_labels(dir / "atlas_labels.mvol", ds.atlas.labels);
    manifest["subjects"] = ordered_json::array();
    for (const auto &s : ds.subjects) {
        ordered_json e;
        e["id"] = s.id;
        e["seed"] = s.seed;
        e["split"] = s.split;
        e["image_a"] = s.id + "_a.mvol";
        e["image_b"] = s.id + "_b.mvol";
        e["labels"] = s.id + "_labels.mvol";
        e["truth"] = s.id + "_truth.mvol";
        synthdata::write_volume(dir / (s.id + "_a.mvol"), s.image_a);
        synthdata::write_volume(dir / (s.id + "_b.mvol"), s.image_b);
        synthdata::write_labels(dir / (s.id + "_labels.mvol"), s.labels);
        synthdata::write_field(dir / (s.id + "_truth.mvol"), s.truth);
        manifest["subjects"].push_back(std::move(e));
    }
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path &dir) {
    const auto path = dir / "manifest.json";
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open dataset manifest " + path.string());
    Dataset ds;
    try {
        const auto m = json::parse(in);
        try {
            ds.config = config_from_json(m.at("config"));
        } catch (const ConfigError &e) {
            throw FormatError(path.string() + ": " + e.what());
        }
        const auto &atlas = m.at("atlas");
        ds.atlas.image = synthdata::read_volume(dir / atlas.at("image_a").get<std::string>());
        ds.atlas_b = synthdata::read_volume(dir / atlas.at("image_b").get<std::string>());
        ds.atlas.labels = synthdata::read_labels(dir / atlas.at("labels").get<std::string>());
        const auto &lattice = ds.atlas.image.dims;
        require_lattice(lattice, ds.atlas_b.dims, "atlas_b");
        require_lattice(lattice, ds.atlas.labels.dims, "atlas labels");
        for (const auto &e : m.at("subjects")) {
            Subject s;
            s.id = e.at("id").get<std::string>();
            s.seed = e.at("seed").get<uint64_t>();
            s.split = e.at("split").get<std::string>();
            if (s.split != "train" && s.split != "val" && s.split != "test") {
                throw FormatError(path.string() + ": subject " + s.id + " has unknown split '" + s.split + "'");
            }
            s.image_a = synthdata::read_volume(dir / e.at("image_a").get<std::string>());
            s.image_b = synthdata::read_volume(dir / e.at("image_b").get<std::string>());
            s.labels = synthdata::read_labels(dir / e.at("labels").get<std::string>());
            s.truth = synthdata::read_field(dir / e.at("truth").get<std::string>());
            require_lattice(lattice, s.image_a.dims, s.id + " image_a");
            require_lattice(lattice, s.image_b.dims, s.id + " image_b");
            require_lattice(lattice, s.labels.dims, s.id + " labels");
            require_lattice(lattice, s.truth.lattice(), s.id + " truth");
            ds.subjects.push_back(std::move(s));
        }
    } catch (const json::exception &e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    if (ds.split("train").empty() || ds.split("test").empty()) {
        throw FormatError(path.string() + ": dataset needs train and test subjects");
    }
    return ds;
}

// ---- checkpoints -----------------------------------------------------------

regnet::RegNetConfig regnet_config(const RunConfig &cfg) {
    regnet::RegNetConfig c;
    c.channels = cfg.channels;
    c.dims = cfg.dims;
    c.seed = synthdata::derive_seed(cfg.seed, 0x4E37);
    return c;
}

similarity::StatNetConfig statnet_config(const RunConfig &cfg) {
    similarity::StatNetConfig c;
    c.hidden = cfg.hidden;
    c.seed = synthdata::derive_seed(cfg.seed, 0xC417);
    return c;
}

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'R', 'C', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

void assign(std::vector<ad::Parameter<float>> &params, const ordered_json &table, const std::vector<float> &payload,
            const std::string &path, bool required) {
    for (auto &p : params) {
        const auto it = std::find_if(table.begin(), table.end(), [&](const auto &e) { return e.at("name") == p.name; });
        if (it == table.end()) {
            if (!required) continue;
            throw FormatError(path + ": checkpoint has no tensor '" + p.name + "'");
        }
        const auto shape = it->at("shape").get<Shape>();
        const auto offset = it->at("offset").get<size_t>();
        if (shape != p.tensor.shape()) {
            throw FormatError(path + ": tensor '" + p.name + "' has shape " + ad::shape_str(shape) + ", expected " +
                              ad::shape_str(p.tensor.shape()));
        }
        const auto count = static_cast<size_t>(ad::shape_numel(shape));
        if (offset > payload.size() || payload.size() - offset < count) {
            throw FormatError(path + ": tensor '" + p.name + "' runs past the payload");
        }
        std::vector<float> data(payload.begin() + offset, payload.begin() + offset + count);
        p.tensor = ad::Tensor::from(shape, std::move(data), true);
    }
}

} // namespace

void save_checkpoint(const fs::path &path, const RunConfig &cfg, const regnet::RegNet<float> &net,
                     const similarity::StatNet<float> *critic, const ordered_json &meta) {
    std::vector<const ad::Parameter<float> *> all;
    for (const auto &p : net.parameters()) all.push_back(&p);
    if (critic) {
        for (const auto &p : critic->parameters()) all.push_back(&p);
    }
    ordered_json header;
    header["config"] = to_json(cfg);
    header["meta"] = meta.is_null() ? ordered_json::object() : meta;
    header["tensors"] = ordered_json::array();
    std::vector<float> payload;
    for (const auto *p : all) {
        header["tensors"].push_back({{"name", p->name}, {"shape", p->tensor.shape()}, {"offset", payload.size()}});
        payload.insert(payload.end(), p->tensor.data().begin(), p->tensor.data().end());
    }
    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
    const uint64_t header_len = text.size();
    out.write(kCheckpointMagic, 4);
    out.write(reinterpret_cast<const char *>(&kCheckpointVersion), 4);
    out.write(reinterpret_cast<const char *>(&header_len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char *>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
    if (!out) throw FormatError("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path &path, bool with_critic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string where = path.string();
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError(where + ": not a checkpoint (bad magic at byte 0)");
    }
    uint32_t version = 0;
    uint64_t header_len = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (version != kCheckpointVersion) throw FormatError(where + ": unsupported checkpoint version at byte 4");
    if (header_len > bytes.size() - 16) throw FormatError(where + ": header runs past end of file at byte 8");
    const size_t payload_bytes = bytes.size() - 16 - header_len;
    if (payload_bytes % 4) throw FormatError(where + ": payload is not a whole number of float32 values");
    std::vector<float> payload(payload_bytes / 4);
    std::memcpy(payload.data(), bytes.data() + 16 + header_len, payload_bytes);

    Checkpoint ck;
    try {
        const auto header = ordered_json::parse(bytes.substr(16, header_len));
        try {
            ck.config = config_from_json(json(header.at("config")));
        } catch (const ConfigError &e) {
            throw FormatError(where + ": " + e.what());
        }
        ck.meta = header.at("meta");
        const auto &table = header.at("tensors");
        ck.net = std::make_unique<regnet::RegNet<float>>(regnet_config(ck.config));
        assign(ck.net->parameters(), table, payload, where, true);
        if (with_critic) {
            const bool present = std::any_of(table.begin(), table.end(), [](const auto &e) {
                return e.at("name").template get<std::string>().rfind("critic.", 0) == 0;
            });
            if (present) {
                ck.critic = std::make_unique<similarity::StatNet<float>>(statnet_config(ck.config));
                assign(ck.critic->parameters(), table, payload, where, true);
            }
        }
    } catch (const json::exception &e) {
        throw FormatError(where + ": bad checkpoint header: " + e.what());
    }
    return ck;
}

// ---- training --------------------------------------------------------------

std::string train_log_header() { return "epoch,total_loss,similarity,regularizer,val_dice"; }

TrainResult train(const RunConfig &cfg, const Dataset &ds, const fs::path &out_dir, std::ostream *progress) {
    cfg.validate();
    if (cfg.dims != ds.atlas.image.dims) {
        throw ConfigError("train: config dims " + ad::shape_str(cfg.dims) + " differ from dataset lattice " +
                          ad::shape_str(ds.atlas.image.dims));
    }
    const auto train_set = ds.split("train");
    if (train_set.empty()) throw ConfigError("train: dataset has no training subjects");
    const bool has_val = !ds.split("val").empty();
    const auto loss_cfg = cfg.loss_config();

    TrainResult result;
    result.final_net = std::make_unique<regnet::RegNet<float>>(regnet_config(cfg));
    result.critic = std::make_unique<similarity::StatNet<float>>(statnet_config(cfg));
    auto &net = *result.final_net;
    auto &critic = *result.critic;

    // Parameters share their storage with the networks. The critic gets its
    // own Adam state so it can run at a different learning rate.
    std::vector<ad::Parameter<float>> params = net.parameters();
    std::vector<ad::Parameter<float>> critic_params;
    // With alpha = 0 the critic receives no gradient and stays at its init.
    if (similarity::is_mine(cfg.loss) && cfg.alpha > 0) critic_params = critic.parameters();
    {
        auto all = params;
        all.insert(all.end(), critic_params.begin(), critic_params.end());
        ad::check_unique_names<float>(all);
    }
    ad::AdamState<float> opt, critic_opt;
    opt.config = {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
    critic_opt.config = {cfg.critic_lr, cfg.beta1, cfg.beta2, cfg.adam_eps};
    similarity::DenominatorEma ema;
    ema.rate = cfg.ema_rate;
    auto *ema_ptr = cfg.ema_rate > 0 ? &ema : nullptr;

    std::mt19937_64 rng(synthdata::derive_seed(cfg.seed, kTrainStream));
    const auto fixed = synthdata::to_tensor(ds.atlas.image);
    std::vector<ad::Tensor> moving;
    for (const auto *s : train_set) moving.push_back(synthdata::to_tensor(ds.moving_image(*s, cfg.task)));

    std::vector<size_t> order(train_set.size());
    result.best_val_dice = -1;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        EpochLog row;
        row.epoch = epoch;
        for (size_t i : order) {
            try {
                ad::zero_grads<float>(params);
                ad::zero_grads<float>(critic_params);
                const auto posterior = net.predict_posterior(fixed, moving[i]);
                const auto v = regnet::sample_velocity(posterior, rng);
                const auto phi = transform::integrate_velocity(v, cfg.squaring_steps);
                auto terms = similarity::total_loss(fixed, moving[i], posterior, phi, critic, loss_cfg, rng, ema_ptr);
                ad::backward(terms.total);
                ad::adam_step<float>(params, opt);
                if (!critic_params.empty()) ad::adam_step<float>(critic_params, critic_opt);
                row.total_loss += terms.total.item();
                row.similarity += terms.similarity;
                row.regularizer += terms.regularizer;
            } catch (const NumericError &e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", subject " + train_set[i]->id + ": " +
                                   e.what());
            }
        }
        const double steps = static_cast<double>(order.size());
        row.total_loss /= steps;
        row.similarity /= steps;
        row.regularizer /= steps;
        row.val_dice = has_val ? mean_dice(cfg, &net, ds, "val") : std::nan("");
        if (!has_val || row.val_dice > result.best_val_dice) {
            result.best_val_dice = row.val_dice;
            result.best_epoch = epoch;
            result.best_net = std::make_unique<regnet::RegNet<float>>(net.cast<float>());
        }
        result.log.push_back(row);
        if (progress) {
            *progress << "epoch " << epoch << '/' << cfg.epochs << " loss " << number(row.total_loss) << " sim "
                       << number(row.similarity) << " R " << number(row.regularizer) << " val_dice "
                       << number(row.val_dice) << std::endl;
        }
    }

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ostringstream log;
        log << config_echo(cfg) << '\n' << train_log_header() << '\n';
        for (const auto &r : result.log) {
            log << r.epoch << ',' << number(r.total_loss) << ',' << number(r.similarity) << ','
                << number(r.regularizer) << ',' << number(r.val_dice) << '\n';
        }
        write_text(out_dir / "train_log.csv", log.str());
        const auto *critic_ptr = similarity::is_mine(cfg.loss) ? &critic : nullptr;
        save_checkpoint(out_dir / "final.ckpt", cfg, net, critic_ptr,
                        {{"epoch", cfg.epochs}, {"val_dice", result.log.back().val_dice}});
        save_checkpoint(out_dir / "best.ckpt", cfg, *result.best_net, critic_ptr,
                        {{"epoch", result.best_epoch}, {"val_dice", result.best_val_dice}});
        write_text(out_dir / "run_config.json", to_json(cfg).dump(2) + "\n");
    }
    return result;
}

// ---- evaluation ------------------------------------------------------------

namespace {

struct PairResult {
    evalkit::DiceResult dice;
    evalkit::JacobianCount jac;
};

PairResult evaluate_pair(const RunConfig &cfg, const regnet::RegNet<float> *net, const Dataset &ds,
                         const Subject &s) {
    transform::DisplacementField<float> phi;
    if (net) {
        const auto fixed = synthdata::to_tensor(ds.atlas.image);
        const auto moving = synthdata::to_tensor(ds.moving_image(s, cfg.task));
        phi = evalkit::register_pair(*net, fixed, moving, cfg.squaring_steps).displacement;
    } else {
        phi = transform::DisplacementField<float>::zeros(ds.atlas.image.dims);
    }
    synthdata::LabelMap warped{s.labels.dims, transform::warp_labels_nearest<float>(s.labels.labels, phi)};
    return {evalkit::dice(ds.atlas.labels, warped), evalkit::count_nonpositive_jacobian(phi)};
}

} // namespace

double mean_dice(const RunConfig &cfg, const regnet::RegNet<float> *net, const Dataset &ds, std::string_view split) {
    const auto subjects = ds.split(split);
    if (subjects.empty()) throw ConfigError("split '" + std::string(split) + "' has no subjects");
    double total = 0;
    for (const auto *s : subjects) total += evaluate_pair(cfg, net, ds, *s).dice.mean;
    return total / static_cast<double>(subjects.size());
}

evalkit::EvalRecord evaluate(const RunConfig &cfg, const regnet::RegNet<float> *net, const Dataset &ds,
                             std::string_view split, bool measure_runtime) {
    const auto subjects = ds.split(split);
    if (subjects.empty()) throw ConfigError("split '" + std::string(split) + "' has no subjects");
    evalkit::EvalRecord r;
    r.method = net ? std::string(similarity::loss_name(cfg.loss)) : "identity";
    r.alpha = net ? cfg.alpha : 0.0;
    r.lambda = net ? cfg.lambda : 0.0;
    r.seed = cfg.seed;
    std::map<uint16_t, int> label_pairs;
    for (const auto *s : subjects) {
        const auto p = evaluate_pair(cfg, net, ds, *s);
        r.mean_dice += p.dice.mean;
        for (const auto &[label, d] : p.dice.per_label) {
            r.dice_per_label[label] += d;
            ++label_pairs[label];
        }
        r.nonpos_jac_count += p.jac.count;
    }
    const double n = static_cast<double>(subjects.size());
    r.mean_dice /= n;
    for (auto &[label, d] : r.dice_per_label) d /= label_pairs[label];
    r.nonpos_jac_frac = static_cast<double>(r.nonpos_jac_count) /
                        (n * static_cast<double>(interior_voxels(ds.atlas.image.dims)));
    if (net && measure_runtime) {
        const auto stats = evalkit::benchmark_runtime(*net, synthdata::to_tensor(ds.atlas.image),
                                                      synthdata::to_tensor(ds.moving_image(*subjects[0], cfg.task)),
                                                      cfg.runtime_repeats);
        r.runtime_s_median = stats.median;
        r.runtime_s_sd = stats.sd;
    }
    return r;
}

void write_records(const fs::path &path, const RunConfig &cfg, const std::vector<evalkit::EvalRecord> &records) {
    std::ostringstream out;
    out << config_echo(cfg) << '\n' << evalkit::csv_header() << '\n';
    for (const auto &r : records) out << evalkit::to_csv_row(r) << '\n';
    write_text(path, out.str());
}

std::vector<evalkit::EvalRecord> read_records(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<evalkit::EvalRecord> out;
    std::string line;
    bool header = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != evalkit::csv_header()) throw FormatError(path.string() + ": unexpected CSV header");
            header = true;
            continue;
        }
        out.push_back(evalkit::parse_csv_row(line));
    }
    if (!header) throw FormatError(path.string() + ": missing CSV header");
    return out;
}

std::vector<evalkit::EvalRecord> run_sweep(const RunConfig &cfg, const Dataset &ds, const fs::path &out_dir,
                                           std::ostream *progress) {
    return evalkit::sweep_alpha(cfg.sweep_alphas, cfg.sweep_methods, [&](const std::string &method, double alpha) {
        RunConfig run = cfg;
        run.loss = similarity::parse_loss(method);
        run.alpha = alpha;
        fs::path dir;
        if (!out_dir.empty()) dir = out_dir / (method + "_a" + number(alpha));
        if (progress) *progress << "sweep: " << method << " alpha " << number(alpha) << std::endl;
        const auto trained = train(run, ds, dir, progress);
        return evaluate(run, trained.final_net.get(), ds, "test");
    });
}

// ---- commands --------------------------------------------------------------

namespace {

// Generation settings come from the dataset so the echoed config describes
// the data actually used.
RunConfig adopt_dataset(RunConfig cfg, const Dataset &ds) {
    const auto &g = ds.config;
    cfg.dims = g.dims;
    cfg.n_labels = g.n_labels;
    cfg.subjects = g.subjects;
    cfg.split_train = g.split_train;
    cfg.split_val = g.split_val;
    cfg.deform_magnitude = g.deform_magnitude;
    cfg.deform_smoothness = g.deform_smoothness;
    cfg.curve = g.curve;
    cfg.curve_noise_sd = g.curve_noise_sd;
    cfg.curve_bias_amplitude = g.curve_bias_amplitude;
    return cfg;
}

} // namespace

void cmd_gen(const RunConfig &cfg, const fs::path &out) { write_dataset(generate_dataset(cfg), out); }

void cmd_train(RunConfig cfg, const fs::path &data, const fs::path &out, std::ostream &progress) {
    const auto ds = load_dataset(data);
    cfg = adopt_dataset(std::move(cfg), ds);
    train(cfg, ds, out, &progress);
}

void cmd_register(const RegisterArgs &args) {
    const auto ck = load_checkpoint(args.checkpoint, false);
    const auto fixed = synthdata::read_volume(args.fixed);
    const auto moving = synthdata::read_volume(args.moving);
    if (fixed.dims != moving.dims) throw FormatError("register: fixed and moving lattices differ");
    if (fixed.dims != ck.config.dims) {
        throw ConfigError("register: checkpoint expects lattice " + ad::shape_str(ck.config.dims) + ", got " +
                          ad::shape_str(fixed.dims));
    }
    const auto moving_t = synthdata::to_tensor(moving);
    transform::DisplacementField<float> phi;
    ad::Tensor warped;
    if (args.zero_velocity) {
        ad::NoGradGuard guard;
        phi = transform::integrate_velocity(transform::VelocityField<float>::zeros(fixed.dims),
                                            ck.config.squaring_steps);
        warped = transform::warp(moving_t, phi);
    } else {
        auto reg = evalkit::register_pair(*ck.net, synthdata::to_tensor(fixed), moving_t, ck.config.squaring_steps);
        phi = std::move(reg.displacement);
        warped = std::move(reg.warped);
    }
    fs::create_directories(args.out);
    synthdata::write_volume(args.out / "warped.mvol", synthdata::from_tensor(warped));
    synthdata::write_field(args.out / "displacement.mvol", phi);
    write_text(args.out / "run_config.json", to_json(ck.config).dump(2) + "\n");

    evalkit::EvalRecord r;
    r.method = args.zero_velocity ? "identity" : std::string(similarity::loss_name(ck.config.loss));
    r.alpha = ck.config.alpha;
    r.lambda = ck.config.lambda;
    r.seed = ck.config.seed;
    r.mean_dice = std::nan("");
    if (!args.fixed_labels.empty() && !args.moving_labels.empty()) {
        const auto fl = synthdata::read_labels(args.fixed_labels);
        const auto ml = synthdata::read_labels(args.moving_labels);
        require_lattice(fixed.dims, fl.dims, "fixed labels");
        require_lattice(fixed.dims, ml.dims, "moving labels");
        const auto d = evalkit::dice(fl, {ml.dims, transform::warp_labels_nearest<float>(ml.labels, phi)});
        r.mean_dice = d.mean;
        r.dice_per_label = d.per_label;
    }
    const auto jac = evalkit::count_nonpositive_jacobian(phi);
    r.nonpos_jac_count = jac.count;
    r.nonpos_jac_frac = jac.fraction;
    write_records(args.out / "register.csv", ck.config, {r});
}

void cmd_eval(const fs::path &checkpoint, const fs::path &data, const std::string &split, const fs::path &out) {
    const auto ck = load_checkpoint(checkpoint, false);
    const auto ds = load_dataset(data);
    const auto cfg = adopt_dataset(ck.config, ds);
    if (cfg.dims != ck.config.dims) throw ConfigError("eval: checkpoint lattice differs from the dataset");
    write_records(out, cfg, {evaluate(cfg, nullptr, ds, split), evaluate(cfg, ck.net.get(), ds, split)});
}

void cmd_sweep(RunConfig cfg, const fs::path &data, const fs::path &out, std::ostream &progress) {
    const auto ds = load_dataset(data);
    cfg = adopt_dataset(std::move(cfg), ds);
    cfg.validate();
    fs::create_directories(out);
    const auto records = run_sweep(cfg, ds, out, &progress);
    write_records(out / "sweep.csv", cfg, records);
}

void cmd_response_map(const fs::path &checkpoint, int grid_res, const fs::path &out) {
    const auto ck = load_checkpoint(checkpoint, true);
    if (!ck.critic) throw ConfigError("response-map: checkpoint has no critic (trained with a non-MINE loss)");
    const auto map = similarity::joint_response_map(*ck.critic, grid_res);
    std::ostringstream text;
    text << config_echo(ck.config) << '\n';
    similarity::write_response_map_csv(text, map);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_text(out, text.str());
}

} // namespace minereg::cli
