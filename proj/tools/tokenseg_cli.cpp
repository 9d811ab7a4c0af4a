// tokenseg command-line tool: phantom generation, training, inference,
// evaluation and ablation sweeps over TSV3 volumes.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tokenseg/dataset.hpp"
#include "tokenseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace tokenseg;

namespace {

constexpr const char* kToolVersion = "tokenseg 1.0.0";

// Raised for bad inputs/config so main can map them to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string fnv1a_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (f.read(buf, sizeof buf) || f.gcount() > 0)
        for (std::streamsize i = 0; i < f.gcount(); ++i) {
            h ^= std::uint8_t(buf[i]);
            h *= 0x100000001b3ULL;
        }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

// The manifest is written before any computation so a run can be reproduced
// from it alone.
void write_manifest(const std::string& out_dir, const std::string& command,
                    const KvConfig& resolved, std::uint64_t seed,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
    std::ostringstream os;
    os << "command = " << command << "\n";
    os << "version = " << kToolVersion << "\n";
    os << "seed = " << seed << "\n";
    for (const std::string& in : inputs)
        os << "input." << fs::path(in).filename().string() << " = " << fnv1a_hex(in) << "\n";
    for (const std::string& out : outputs) os << "output = " << out << "\n";
    os << "# resolved config\n" << resolved.to_text();

    fs::path path = fs::path(out_dir) / "manifest.txt";
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << os.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path);
}

// defaults < config file < explicit flag overrides
TrainConfig resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides,
                           std::uint64_t seed, bool seed_given, KvConfig* resolved_out) {
    KvConfig kv;
    if (!config_path.empty()) {
        if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
        kv = KvConfig::load(config_path);
    }
    for (const std::string& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos) throw UsageError("--set expects key=value, got: " + ov);
        kv.set(ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (seed_given) kv.set_int("seed", (long long)seed);
    TrainConfig cfg;
    try {
        cfg = config_from_kv(kv);
        cfg.validate();
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    if (resolved_out) *resolved_out = config_to_kv(cfg);
    return cfg;
}

Dims parse_dims(const std::string& text) {
    Dims d;
    unsigned a = 0, b = 0, c = 0;
    char comma1 = 0, comma2 = 0;
    std::istringstream is(text);
    if (is >> a) {
        if (is >> comma1 >> b >> comma2 >> c && comma1 == ',' && comma2 == ',')
            d = {a, b, c};
        else if (comma1 == 0)
            d = {a, a, a};
        else
            throw UsageError("bad --dim value: " + text);
    } else {
        throw UsageError("bad --dim value: " + text);
    }
    if (d.count() == 0) throw UsageError("--dim must be positive");
    return d;
}

struct PhantomArgs {
    std::string out, spec;
    int count = 4;
    std::string dim = "32";
    std::uint64_t seed = 0;
};

int cmd_phantom(const PhantomArgs& a) {
    if (a.count <= 0) throw UsageError("--count must be positive");
    Dims dims = parse_dims(a.dim);
    double background = 0.1, noise_sigma = 0.05;
    if (!a.spec.empty()) {
        if (!fs::exists(a.spec)) throw UsageError("spec file not found: " + a.spec);
        KvConfig sp = KvConfig::load(a.spec);
        auto dl = sp.get_int_list("dims", {int(dims.d), int(dims.h), int(dims.w)});
        if (dl.size() != 3 || dl[0] <= 0 || dl[1] <= 0 || dl[2] <= 0)
            throw UsageError("spec dims must be three positive integers");
        dims = {unsigned(dl[0]), unsigned(dl[1]), unsigned(dl[2])};
        background = sp.get_double("background", background);
        noise_sigma = sp.get_double("noise_sigma", noise_sigma);
    }
    fs::create_directories(a.out);

    KvConfig resolved;
    resolved.set_int("count", a.count);
    resolved.set("dims", std::to_string(dims.d) + "," + std::to_string(dims.h) + "," +
                             std::to_string(dims.w));
    resolved.set_double("background", background);
    resolved.set_double("noise_sigma", noise_sigma);
    std::vector<std::string> outputs;
    std::vector<DatasetEntry> entries;
    for (int i = 0; i < a.count; ++i) {
        char vol[32], mask[32];
        std::snprintf(vol, sizeof vol, "vol_%03d.tsv3", i);
        std::snprintf(mask, sizeof mask, "mask_%03d.tsv3", i);
        entries.push_back({vol, mask});
        outputs.push_back((fs::path(a.out) / vol).string());
        outputs.push_back((fs::path(a.out) / mask).string());
    }
    outputs.push_back((fs::path(a.out) / "index.txt").string());
    write_manifest(a.out, "phantom", resolved, a.seed, {}, outputs);

    auto specs = make_phantom_specs(a.count, dims, a.seed);
    for (int i = 0; i < a.count; ++i) {
        PhantomSpec spec = specs[std::size_t(i)];
        spec.background = background;
        spec.noise_sigma = noise_sigma;
        Phantom ph = generate_phantom(spec);
        save_volume(ph.volume, (fs::path(a.out) / entries[std::size_t(i)].volume_path).string());
        save_mask(ph.mask, (fs::path(a.out) / entries[std::size_t(i)].mask_path).string());
    }
    write_dataset_index(a.out, entries);
    return 0;
}

struct TrainArgs {
    std::string config, data, val_data, out;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
};

int cmd_train(const TrainArgs& a) {
    if (!fs::exists(fs::path(a.data) / "index.txt"))
        throw UsageError("dataset index not found in " + a.data);
    KvConfig resolved;
    TrainConfig cfg = resolve_config(a.config, a.overrides, a.seed, a.seed_given, &resolved);
    fs::create_directories(a.out);

    std::vector<std::string> inputs;
    for (const DatasetEntry& e : read_dataset_index(a.data)) {
        inputs.push_back((fs::path(a.data) / e.volume_path).string());
        inputs.push_back((fs::path(a.data) / e.mask_path).string());
    }
    std::string best_path = (fs::path(a.out) / "best.ckpt").string();
    std::string final_path = (fs::path(a.out) / "final.ckpt").string();
    std::string log_path = (fs::path(a.out) / "runlog.csv").string();
    write_manifest(a.out, "train", resolved, cfg.seed, inputs,
                   {best_path, final_path, log_path});

    std::vector<Case> train_set = load_dataset(a.data);
    std::vector<Case> val_set = a.val_data.empty() ? train_set : load_dataset(a.val_data);

    Model model;
    model.init(cfg.model);
    TrainResult res = train(model, cfg, train_set, val_set,
                            a.verbose ? &std::cerr : nullptr);
    write_text(log_path, runlog_to_csv(res.log));
    save_checkpoint(final_path, model, cfg);
    restore_snapshot(model, res.best_values);
    save_checkpoint(best_path, model, cfg);
    if (res.aborted_non_finite) {
        std::cerr << "error: training aborted on non-finite loss\n";
        return 1;
    }
    if (a.verbose)
        std::cerr << "best epoch " << res.best_epoch << " val_dice " << res.best_dice << "\n";
    return 0;
}

struct InferArgs {
    std::string ckpt, in, out, emit_tokens;
    double theta = -1.0;  // <0 means use checkpoint value
};

int cmd_infer(const InferArgs& a) {
    if (!fs::exists(a.ckpt)) throw UsageError("checkpoint not found: " + a.ckpt);
    if (!fs::exists(a.in)) throw UsageError("input volume not found: " + a.in);
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);
    double theta = a.theta < 0.0 ? lc.cfg.model.theta : a.theta;
    if (theta < 0.0 || theta > 1.0) throw UsageError("--theta must be in [0, 1]");

    Volume3D vol = load_volume(a.in);
    Graph g;
    ForwardResult fwd;
    try {
        fwd = forward(g, lc.model, vol, nullptr, lc.cfg.seed);
    } catch (const std::exception& e) {
        std::ostringstream os;
        os << e.what() << " (input " << vol.dims.d << "x" << vol.dims.h << "x" << vol.dims.w
           << ", checkpoint levels " << lc.cfg.model.encoder.levels << ")";
        throw std::runtime_error(os.str());
    }
    Volume3D prob = probability_volume(g, fwd.prob, vol);
    save_mask(binarize(prob, theta), a.out);

    if (!a.emit_tokens.empty()) {
        std::ostringstream os;
        os.precision(17);
        os << "level,d,h,w,code,score\n";
        for (const SelectedToken& t : fwd.selected)
            os << t.level << "," << t.d << "," << t.h << "," << t.w << "," << t.code << ","
               << t.score << "\n";
        write_text(a.emit_tokens, os.str());
    }
    return 0;
}

struct EvalArgs {
    std::string ckpt, data, out;
};

int cmd_eval(const EvalArgs& a) {
    if (!fs::exists(a.ckpt)) throw UsageError("checkpoint not found: " + a.ckpt);
    if (!fs::exists(fs::path(a.data) / "index.txt"))
        throw UsageError("dataset index not found in " + a.data);
    LoadedCheckpoint lc = load_checkpoint(a.ckpt);

    std::vector<Case> cases;
    std::vector<std::string> skipped;
    for (const DatasetEntry& e : read_dataset_index(a.data)) {
        try {
            Case c;
            c.volume = load_volume((fs::path(a.data) / e.volume_path).string());
            c.mask = load_mask((fs::path(a.data) / e.mask_path).string());
            cases.push_back(std::move(c));
        } catch (const std::exception& err) {
            skipped.push_back(e.volume_path + ": " + err.what());
        }
    }
    if (cases.empty()) throw std::runtime_error("no readable cases in " + a.data);

    EvalOutcome out = evaluate(lc.model, cases, lc.cfg.model.theta);
    std::ostringstream os;
    for (std::size_t i = 0; i < out.per_case.size(); ++i) {
        std::istringstream lines(out.per_case[i].to_kv_text());
        std::string line;
        while (std::getline(lines, line)) os << "case" << i << "." << line << "\n";
    }
    {
        std::istringstream lines(out.aggregate.to_kv_text());
        std::string line;
        while (std::getline(lines, line)) os << "aggregate." << line << "\n";
    }
    for (const std::string& s : skipped) os << "# skipped " << s << "\n";
    write_text(a.out, os.str());
    if (!skipped.empty()) {
        for (const std::string& s : skipped) std::cerr << "error: skipped " << s << "\n";
        return 1;
    }
    return 0;
}

struct AblateArgs {
    std::string axis, values, config, data, out;
    std::vector<std::string> overrides;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool verbose = false;
};

int cmd_ablate(const AblateArgs& a) {
    if (a.axis != "tokens" && a.axis != "codebook" && a.axis != "strategy")
        throw UsageError("--axis must be tokens, codebook or strategy");
    if (!fs::exists(fs::path(a.data) / "index.txt"))
        throw UsageError("dataset index not found in " + a.data);

    std::vector<std::string> values;
    {
        std::istringstream is(a.values);
        std::string tok;
        while (std::getline(is, tok, ',')) values.push_back(tok);
    }
    if (values.empty()) throw UsageError("--values must be a nonempty comma list");
    for (const std::string& v : values) {
        if (a.axis == "strategy") {
            try {
                parse_strategy(v);
            } catch (const std::exception& e) {
                throw UsageError(e.what());
            }
        } else if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
            throw UsageError("--values for axis " + a.axis + " must be integers, got: " + v);
        }
    }

    KvConfig resolved;
    TrainConfig base = resolve_config(a.config, a.overrides, a.seed, a.seed_given, &resolved);
    fs::create_directories(fs::path(a.out).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(a.out).parent_path());
    resolved.set("ablate_axis", a.axis);
    resolved.set("ablate_values", a.values);
    std::vector<std::string> inputs;
    for (const DatasetEntry& e : read_dataset_index(a.data)) {
        inputs.push_back((fs::path(a.data) / e.volume_path).string());
        inputs.push_back((fs::path(a.data) / e.mask_path).string());
    }
    fs::path manifest_dir = fs::path(a.out).parent_path();
    write_manifest(manifest_dir.empty() ? "." : manifest_dir.string(), "ablate", resolved,
                   base.seed, inputs, {a.out});

    std::vector<Case> dataset = load_dataset(a.data);
    std::ostringstream csv;
    csv.precision(17);
    csv << "value,dice,iou,hd95,time_ms,util,boundary_ratio\n";
    for (const std::string& v : values) {
        TrainConfig cfg = base;  // shared seed and dataset isolate the swept axis
        if (a.axis == "tokens")
            cfg.model.k = std::stoi(v);
        else if (a.axis == "codebook")
            cfg.model.codebook_size = std::stoi(v);
        else
            cfg.model.strategy = parse_strategy(v);
        try {
            cfg.validate();
        } catch (const std::exception& e) {
            throw UsageError(e.what());
        }

        Model model;
        model.init(cfg.model);
        TrainResult res = train(model, cfg, dataset, dataset,
                                a.verbose ? &std::cerr : nullptr);
        if (res.aborted_non_finite)
            throw std::runtime_error("ablation run " + v + " aborted on non-finite loss");
        restore_snapshot(model, res.best_values);
        EvalOutcome out = evaluate(model, dataset, cfg.model.theta);
        const MetricsReport& m = out.aggregate;
        csv << v << "," << m.dice.value_or(0.0) << "," << m.iou.value_or(0.0) << ",";
        if (m.hd95)
            csv << *m.hd95;
        else
            csv << "undefined";
        csv << "," << m.inference_ms << "," << m.codebook_utilization << ",";
        if (m.boundary_token_ratio)
            csv << *m.boundary_token_ratio;
        else
            csv << "undefined";
        csv << "\n";
        if (a.verbose) std::cerr << a.axis << "=" << v << " dice " << m.dice.value_or(0.0) << "\n";
    }
    write_text(a.out, csv.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse-token volumetric segmentation pipeline"};
    app.require_subcommand(1);

    PhantomArgs pa;
    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
    phantom->add_option("--out", pa.out, "Output directory")->required();
    phantom->add_option("--count", pa.count, "Number of cases");
    phantom->add_option("--dim", pa.dim, "Volume dims: N or D,H,W");
    phantom->add_option("--spec", pa.spec, "Phantom spec file (key = value)");
    phantom->add_option("--seed", pa.seed, "Random seed");

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "Train a model on a dataset");
    train_cmd->add_option("--config", ta.config, "Config file (key = value)");
    train_cmd->add_option("--data", ta.data, "Training dataset directory")->required();
    train_cmd->add_option("--val-data", ta.val_data, "Validation dataset directory");
    train_cmd->add_option("--out", ta.out, "Output directory")->required();
    train_cmd->add_option("--set", ta.overrides, "Config override key=value (repeatable)");
    auto* ts = train_cmd->add_option("--seed", ta.seed, "Random seed");
    train_cmd->add_flag("--verbose", ta.verbose, "Per-epoch progress on stderr");

    InferArgs ia;
    auto* infer = app.add_subcommand("infer", "Segment one volume with a checkpoint");
    infer->add_option("--ckpt", ia.ckpt, "Checkpoint file")->required();
    infer->add_option("--in", ia.in, "Input TSV3 volume")->required();
    infer->add_option("--out", ia.out, "Output TSV3 mask")->required();
    infer->add_option("--theta", ia.theta, "Binarization threshold");
    infer->add_option("--emit-tokens", ia.emit_tokens, "Write selected tokens as CSV");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a labeled dataset");
    eval_cmd->add_option("--ckpt", ea.ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--data", ea.data, "Dataset directory")->required();
    eval_cmd->add_option("--out", ea.out, "Report file")->required();

    AblateArgs aa;
    auto* ablate = app.add_subcommand("ablate", "Sweep one config axis");
    ablate->add_option("--axis", aa.axis, "tokens | codebook | strategy")->required();
    ablate->add_option("--values", aa.values, "Comma-separated sweep values")->required();
    ablate->add_option("--config", aa.config, "Config file (key = value)");
    ablate->add_option("--data", aa.data, "Dataset directory")->required();
    ablate->add_option("--out", aa.out, "Sweep CSV path")->required();
    ablate->add_option("--set", aa.overrides, "Config override key=value (repeatable)");
    auto* as = ablate->add_option("--seed", aa.seed, "Random seed");
    ablate->add_flag("--verbose", aa.verbose, "Per-epoch progress on stderr");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    ta.seed_given = ts->count() > 0;
    aa.seed_given = as->count() > 0;

    try {
        if (phantom->parsed()) return cmd_phantom(pa);
        if (train_cmd->parsed()) return cmd_train(ta);
        if (infer->parsed()) return cmd_infer(ia);
        if (eval_cmd->parsed()) return cmd_eval(ea);
        if (ablate->parsed()) return cmd_ablate(aa);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
