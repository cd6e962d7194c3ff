// Command-line entry point: synth, extract, train, eval, baseline, sweep-alpha.

#include "spo2/config.hpp"
#include "spo2/errors.hpp"
#include "spo2/harness.hpp"
#include "spo2/io.hpp"
#include "spo2/stmap.hpp"
#include "spo2/synth.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace spo2;

namespace {

[[noreturn]] void usage(const std::string& message) { throw UsageError(message); }

RunConfig load_config(const std::string& path) {
    RunConfig cfg;
    if (!path.empty()) {
        from_json(io::read_json(path), cfg);
    }
    return cfg;
}

/// Falls back to the config saved with a checkpoint when --config is absent.
RunConfig load_config_near(const std::string& path, const fs::path& ckpt) {
    if (!path.empty()) {
        return load_config(path);
    }
    RunConfig cfg;
    const fs::path saved = ckpt / "resolved_config.json";
    if (fs::exists(saved)) {
        from_json(io::read_json(saved).at("config"), cfg);
    }
    return cfg;
}

void require_empty_dir(const fs::path& dir, bool force) {
    if (!io::directory_is_empty(dir) && !force) {
        throw InputError("output directory '" + dir.string() +
                         "' exists and is not empty (pass --force to overwrite)");
    }
}

void write_provenance(const fs::path& path, const std::string& command, const json& args,
                      const RunConfig& cfg) {
    io::write_json(path, {{"command", command}, {"args", args}, {"config", cfg}});
}

fs::path beside(const fs::path& file, const std::string& suffix) {
    return fs::path(file.string() + suffix);
}

struct FoldData {
    Fold fold;
    std::vector<SubjectRecord> train;
    std::vector<SubjectRecord> validation;
    std::vector<SubjectRecord> test;
};

FoldData load_fold(const fs::path& data, const HarnessOptions& h) {
    validate(h);
    const FoldPlan plan = kfold_split(io::dataset_subjects(data), h.k, h.split_seed, h.val_fraction);
    FoldData fd;
    fd.fold = plan.folds.at(h.fold);
    for (const auto& id : fd.fold.train) fd.train.push_back(io::read_subject(data, id));
    for (const auto& id : fd.fold.validation) fd.validation.push_back(io::read_subject(data, id));
    for (const auto& id : fd.fold.test) fd.test.push_back(io::read_subject(data, id));
    return fd;
}

TrainResult train_fold(const RunConfig& cfg, const FoldData& fd, bool verbose) {
    const auto& h = cfg.harness;
    const PreparedSet tr = prepare_subjects(fd.train, WindowMode::train, h.train_step_s);
    const PreparedSet va = prepare_subjects(fd.validation, WindowMode::train, h.train_step_s);
    TrainOptions opts;
    opts.epochs = h.epochs;
    opts.batch_size = h.batch_size;
    opts.lr = h.lr;
    opts.shuffle_seed = h.shuffle_seed;
    if (verbose) {
        opts.on_epoch = [](std::size_t e, double tl, double vl) {
            std::fprintf(stderr, "epoch %zu train %.6f val %.6f\n", e, tl, vl);
        };
    }
    return train(cfg.model, tr, va, opts);
}

int cmd_synth(std::size_t subjects, std::uint64_t seed, const std::string& out,
              const std::string& params_path, bool force) {
    if (subjects == 0) {
        usage("--subjects must be at least 1");
    }
    SynthParams base;
    if (!params_path.empty()) {
        from_json(io::read_json(params_path), base);
    }
    validate(base);
    require_empty_dir(out, force);
    if (force && fs::exists(out)) {
        fs::remove_all(out);
    }
    std::vector<SubjectRecord> records;
    char id[32];
    for (std::size_t i = 0; i < subjects; ++i) {
        SynthParams p = base;
        p.seed = subject_seed(seed, i);
        std::snprintf(id, sizeof id, "s%03zu", i);
        records.push_back(gen_subject(p, id));
    }
    io::write_dataset(out, records, {{"master_seed", seed}});
    RunConfig cfg;
    cfg.synth = base;
    write_provenance(fs::path(out) / "resolved_config.json", "synth",
                     {{"subjects", subjects}, {"seed", seed}, {"out", out}, {"params", params_path}},
                     cfg);
    std::cout << io::read_json(fs::path(out) / "manifest.json").dump(2) << '\n';
    return 0;
}

PixelRect parse_rect(const std::string& text) {
    PixelRect r;
    char tail = 0;
    if (std::sscanf(text.c_str(), "%d,%d,%d,%d%c", &r.x0, &r.y0, &r.width, &r.height, &tail) != 4) {
        usage("--rect must be \"x,y,w,h\", got '" + text + "'");
    }
    return r;
}

int cmd_extract(const std::string& frames_dir, const std::string& rect_text, const std::string& out,
                const std::string& subject_id) {
    const PixelRect rect = parse_rect(rect_text);
    const FrameSequence frames = io::read_frames(frames_dir);
    if (frames.frames.empty()) {
        throw InputError("frame dump '" + frames_dir + "' holds no frames");
    }
    const RoiGrid grid = make_grid(rect);
    SpatioTemporalMap map = build_map(frames, grid);
    map.set_subject_id(subject_id);
    io::write_stm(out, map);
    RunConfig cfg;
    write_provenance(beside(out, ".config.json"), "extract",
                     {{"frames", frames_dir}, {"rect", rect_text}, {"out", out}, {"subject_id", subject_id}},
                     cfg);
    std::cout << json{{"out", out}, {"n_rois", map.n_rois()}, {"n_frames", map.n_frames()}}.dump()
              << '\n';
    return 0;
}

int cmd_train(const std::string& data, const std::string& variant, std::size_t fold,
              const std::string& config_path, const std::string& out, bool force, bool verbose) {
    RunConfig cfg = load_config(config_path);
    cfg.model.variant = parse_variant(variant);
    cfg.harness.fold = fold;
    validate(cfg.model);
    validate(cfg.harness);
    require_empty_dir(out, force);
    const FoldData fd = load_fold(data, cfg.harness);
    const TrainResult result = train_fold(cfg, fd, verbose);
    io::save_checkpoint(out, *result.model);
    io::write_json(fs::path(out) / "history.json", {{"history", result.history},
                                                   {"best_epoch", result.best_epoch},
                                                   {"best_val_loss", result.best_val_loss},
                                                   {"fold", fd.fold}});
    write_provenance(fs::path(out) / "resolved_config.json", "train",
                     {{"data", data}, {"variant", variant}, {"fold", fold}, {"config", config_path},
                      {"out", out}},
                     cfg);
    std::cout << json{{"out", out}, {"best_epoch", result.best_epoch},
                      {"best_val_loss", result.best_val_loss}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& data, std::size_t fold,
             const std::string& out, const std::string& trace_csv, const std::string& config_path) {
    RunConfig cfg = load_config_near(config_path, model_dir);
    cfg.harness.fold = fold;
    auto model = io::load_checkpoint(model_dir);
    cfg.model = model->config();
    const FoldData fd = load_fold(data, cfg.harness);
    const PreparedSet test = prepare_subjects(fd.test, WindowMode::test, cfg.harness.test_step_s);
    const Evaluation ev = evaluate(*model, test, cfg.harness.batch_size);
    io::write_json(out, {{"metrics", ev.metrics},
                         {"variant", to_string(cfg.model.variant)},
                         {"fold", fold},
                         {"test_subjects", fd.fold.test},
                         {"seconds", ev.rows.size()}});
    if (!trace_csv.empty()) {
        write_predictions_csv(trace_csv, ev.rows);
    }
    write_provenance(beside(out, ".config.json"), "eval",
                     {{"model", model_dir}, {"data", data}, {"fold", fold}, {"out", out},
                      {"trace_csv", trace_csv}, {"config", config_path}},
                     cfg);
    std::cout << json(ev.metrics).dump() << '\n';
    return 0;
}

int cmd_baseline(const std::string& data, std::size_t fold, const std::string& method_name,
                 const std::string& out, const std::string& trace_csv,
                 const std::string& config_path) {
    RunConfig cfg = load_config(config_path);
    cfg.harness.fold = fold;
    const BaselineMethod method = parse_baseline(method_name);
    const FoldData fd = load_fold(data, cfg.harness);
    // Validation subjects carry no selection role here, so they join training.
    std::vector<SubjectRecord> fit = fd.train;
    fit.insert(fit.end(), fd.validation.begin(), fd.validation.end());
    const RoiMask mask = default_roi_mask(fit.front().map.n_rois());
    const BaselineResult r = run_baseline(method, fit, fd.test, mask, cfg.harness.train_step_s);
    io::write_json(out, {{"metrics", r.evaluation.metrics},
                         {"method", method_name},
                         {"model", r.model},
                         {"fold", fold},
                         {"test_subjects", fd.fold.test},
                         {"flagged_windows", r.flagged_windows},
                         {"seconds", r.evaluation.rows.size()}});
    if (!trace_csv.empty()) {
        write_predictions_csv(trace_csv, r.evaluation.rows);
    }
    write_provenance(beside(out, ".config.json"), "baseline",
                     {{"data", data}, {"fold", fold}, {"method", method_name}, {"out", out},
                      {"trace_csv", trace_csv}, {"config", config_path}},
                     cfg);
    std::cout << json(r.evaluation.metrics).dump() << '\n';
    return 0;
}

std::vector<double> parse_alphas(const std::string& text) {
    std::vector<double> alphas;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const double a = std::stod(item, &used);
            if (used != item.size() || !(a >= 0.0)) throw std::invalid_argument(item);
            alphas.push_back(a);
        } catch (const std::logic_error&) {
            usage("--alphas must be a comma-separated list of non-negative numbers, got '" + text + "'");
        }
    }
    if (alphas.empty()) {
        usage("--alphas is empty");
    }
    return alphas;
}

int cmd_sweep_alpha(const std::string& data, const std::string& alphas_text, std::size_t seeds,
                    std::size_t fold, const std::string& config_path, const std::string& out,
                    bool verbose) {
    if (seeds == 0) {
        usage("--seeds must be at least 1");
    }
    const std::vector<double> alphas = parse_alphas(alphas_text);
    RunConfig cfg = load_config(config_path);
    cfg.harness.fold = fold;
    cfg.model.variant = Variant::end2end;
    const FoldData fd = load_fold(data, cfg.harness);
    const PreparedSet test = prepare_subjects(fd.test, WindowMode::test, cfg.harness.test_step_s);

    std::ofstream csv(out, std::ios::trunc);
    if (!csv) {
        throw InputError("cannot open '" + out + "' for writing");
    }
    csv.precision(10);
    csv << "alpha,seed,corrcoef,mae,rmse\n";
    for (const double alpha : alphas) {
        for (std::size_t s = 0; s < seeds; ++s) {
            RunConfig run = cfg;
            run.model.alpha = alpha;
            run.model.seed = cfg.model.seed + s;
            run.harness.shuffle_seed = cfg.harness.shuffle_seed + s;
            const TrainResult tr = train_fold(run, fd, verbose);
            const Evaluation ev = evaluate(*tr.model, test, run.harness.batch_size);
            csv << alpha << ',' << run.model.seed << ',' << ev.metrics.corrcoef << ','
                << ev.metrics.mae << ',' << ev.metrics.rmse << '\n';
            csv.flush();
        }
    }
    write_provenance(beside(out, ".config.json"), "sweep-alpha",
                     {{"data", data}, {"alphas", alphas}, {"seeds", seeds}, {"fold", fold},
                      {"config", config_path}, {"out", out}},
                     cfg);
    std::cout << json{{"out", out}, {"rows", alphas.size() * seeds}}.dump() << '\n';
    return 0;
}

int report(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SpO2 estimation from spatio-temporal maps"};
    app.require_subcommand(1);

    std::size_t subjects = 0;
    std::uint64_t seed = 0;
    std::string out, params, frames, rect, data, variant, config, model, trace_csv, method,
        alphas = "0,0.01,0.05,0.1,0.5,1", subject_id = "subject";
    std::size_t fold = 0, seeds = 3;
    bool force = false, verbose = false;

    auto* synth = app.add_subcommand("synth", "Generate synthetic subjects");
    synth->add_option("--subjects", subjects, "Number of subjects")->required();
    synth->add_option("--seed", seed, "Master seed")->required();
    synth->add_option("--out", out, "Output directory")->required();
    synth->add_option("--params", params, "SynthParams JSON");
    synth->add_flag("--force", force, "Overwrite a non-empty output directory");

    auto* extract = app.add_subcommand("extract", "Build an STM file from a frame dump");
    extract->add_option("--frames", frames, "Frame dump directory")->required();
    extract->add_option("--rect", rect, "Face rectangle x,y,w,h")->required();
    extract->add_option("--out", out, "Output .stm file")->required();
    extract->add_option("--subject-id", subject_id, "Subject id stored in the header");

    auto* train_cmd = app.add_subcommand("train", "Train one fold");
    train_cmd->add_option("--data", data, "Dataset directory")->required();
    train_cmd->add_option("--variant", variant, "plain|early|filter|end2end")->required();
    train_cmd->add_option("--fold", fold, "Fold index");
    train_cmd->add_option("--config", config, "RunConfig JSON");
    train_cmd->add_option("--out", out, "Checkpoint directory")->required();
    train_cmd->add_flag("--force", force, "Overwrite a non-empty checkpoint directory");
    train_cmd->add_flag("--verbose", verbose, "Per-epoch losses on stderr");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a fold's test subjects");
    eval_cmd->add_option("--model", model, "Checkpoint directory")->required();
    eval_cmd->add_option("--data", data, "Dataset directory")->required();
    eval_cmd->add_option("--fold", fold, "Fold index");
    eval_cmd->add_option("--out", out, "Metrics JSON")->required();
    eval_cmd->add_option("--trace-csv", trace_csv, "Per-second predictions CSV");
    eval_cmd->add_option("--config", config, "RunConfig JSON");

    auto* base_cmd = app.add_subcommand("baseline", "Fit and evaluate a ratio baseline");
    base_cmd->add_option("--data", data, "Dataset directory")->required();
    base_cmd->add_option("--fold", fold, "Fold index");
    base_cmd->add_option("--method", method, "ror|lr")->required();
    base_cmd->add_option("--out", out, "Metrics JSON")->required();
    base_cmd->add_option("--trace-csv", trace_csv, "Per-second predictions CSV");
    base_cmd->add_option("--config", config, "RunConfig JSON");

    auto* sweep = app.add_subcommand("sweep-alpha", "Train end2end over alpha values and seeds");
    sweep->add_option("--data", data, "Dataset directory")->required();
    sweep->add_option("--alphas", alphas, "Comma-separated alpha values");
    sweep->add_option("--seeds", seeds, "Seeds per alpha");
    sweep->add_option("--fold", fold, "Fold index");
    sweep->add_option("--config", config, "RunConfig JSON");
    sweep->add_option("--out", out, "Output CSV")->required();
    sweep->add_flag("--verbose", verbose, "Per-epoch losses on stderr");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        return report("usage", e.what(), 2);
    }

    try {
        if (synth->parsed()) return cmd_synth(subjects, seed, out, params, force);
        if (extract->parsed()) return cmd_extract(frames, rect, out, subject_id);
        if (train_cmd->parsed())
            return cmd_train(data, variant, fold, config, out, force, verbose);
        if (eval_cmd->parsed()) return cmd_eval(model, data, fold, out, trace_csv, config);
        if (base_cmd->parsed()) return cmd_baseline(data, fold, method, out, trace_csv, config);
        if (sweep->parsed())
            return cmd_sweep_alpha(data, alphas, seeds, fold, config, out, verbose);
    } catch (const UsageError& e) {
        return report(e.kind(), e.what(), 2);
    } catch (const Error& e) {
        return report(e.kind(), e.what(), 1);
    } catch (const nlohmann::json::exception& e) {
        return report("config", e.what(), 1);
    } catch (const std::filesystem::filesystem_error& e) {
        return report("input", e.what(), 1);
    } catch (const std::exception& e) {
        return report("internal", e.what(), 1);
    }
    return report("usage", "no command given", 2);
}
