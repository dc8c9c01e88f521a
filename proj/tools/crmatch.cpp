// Command-line surface: training runs, evaluation, analysis probes, the
// gradient oracle suite, augmentation previews and data export.
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "crmatch/config.hpp"
#include "crmatch/data.hpp"
#include "crmatch/gradcheck.hpp"
#include "crmatch/probe.hpp"
#include "crmatch/trainer.hpp"

namespace fs = std::filesystem;
using namespace crmatch;

namespace {

struct ConfigArgs {
    std::string config_path;
    std::vector<std::string> sets;
    bool desk = false;
    std::string out_dir; // overrides cfg.out_dir when set
};

void add_config_flags(CLI::App* cmd, ConfigArgs& args) {
    cmd->add_option("--config", args.config_path, "configuration file (key = value lines)");
    cmd->add_option("--set", args.sets, "override one key, e.g. --set dist_metric=none")
        ->take_all();
    cmd->add_flag("--desk", args.desk, "desk profile: B_s=16, mu=4, total_steps=2000");
    cmd->add_option("--out", args.out_dir, "output directory (overrides out_dir)");
}

TrainConfig build_config(const ConfigArgs& args) {
    TrainConfig cfg;
    if (!args.config_path.empty()) load_config_file(cfg, args.config_path);
    if (args.desk) apply_config(cfg, "desk_profile", "true");
    for (const auto& s : args.sets) apply_config_override(cfg, s);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

ModelState<float> load_model(const TrainConfig& cfg, const std::string& ckpt, bool use_ema,
                             EmaState<float>* ema_out = nullptr) {
    auto model = init_model<float>(model_config_for(cfg), cfg.seed);
    auto ema = make_ema(model, cfg.ema_decay);
    load_checkpoint(ckpt, model, ema);
    if (ema_out) *ema_out = ema;
    if (!use_ema) return model;
    return with_ema_weights(model, ema);
}

int cmd_train(const ConfigArgs& args) {
    TrainConfig cfg = build_config(args);
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream f(fs::path(cfg.out_dir) / "config.resolved");
        if (!f) fail("cannot write to '", cfg.out_dir, "'");
        f << resolved_config(cfg);
    }
    auto [train, test] = load_datasets(cfg);
    Trainer trainer(cfg, std::move(train), std::move(test));

    std::ofstream csv(fs::path(cfg.out_dir) / "metrics.csv");
    if (!csv) fail("cannot write metrics.csv under '", cfg.out_dir, "'");
    trainer.run(&csv);
    trainer.save((fs::path(cfg.out_dir) / "checkpoint.bin").string());

    std::cout << "final error: raw " << trainer.evaluate(false) << ", ema "
              << trainer.evaluate(true) << "\n";
    std::cout << "wrote " << (fs::path(cfg.out_dir) / "metrics.csv").string() << " and "
              << (fs::path(cfg.out_dir) / "checkpoint.bin").string() << "\n";
    return 0;
}

int cmd_eval(const ConfigArgs& args, const std::string& ckpt, bool raw) {
    TrainConfig cfg = build_config(args);
    auto [train, test] = load_datasets(cfg);
    Trainer trainer(cfg, std::move(train), std::move(test));
    trainer.load(ckpt);
    std::cout << "error rate (" << (raw ? "raw" : "ema")
              << " weights): " << trainer.evaluate(!raw) << "\n";
    return 0;
}

int cmd_grad_check(uint64_t seed, int rounds) {
    const auto reports = run_grad_check_suite(seed, rounds);
    bool ok = true;
    for (const auto& rep : reports) {
        const bool pass = rep.max_rel_err < 1e-4;
        ok = ok && pass;
        std::printf("%-34s max_rel_err %.3e over %d seeds  [%s]\n", rep.name.c_str(),
                    rep.max_rel_err, rep.rounds, pass ? "ok" : "FAIL");
    }
    return ok ? 0 : 1;
}

int cmd_probe(const ConfigArgs& args, const std::string& ckpt, const std::string& transform,
              double train_fraction, int epochs, double lr, uint64_t seed, bool unpooled,
              bool raw, std::string tag, const std::string& results_path) {
    TrainConfig cfg = build_config(args);
    auto model = load_model(cfg, ckpt, !raw);
    auto [train, test] = load_datasets(cfg);

    ProbeConfig pc;
    pc.transform = parse_probe_transform(transform);
    pc.train_fraction = train_fraction;
    pc.epochs = epochs;
    pc.lr = lr;
    pc.seed = seed;
    pc.pooled_features = !unpooled;
    const double err = equivariance_probe(model, test.images, pc);

    if (tag.empty()) tag = fs::path(ckpt).stem().string();
    std::cout << tag << "," << transform << "," << err << "\n";
    if (!results_path.empty()) {
        const bool fresh = !fs::exists(results_path);
        std::ofstream f(results_path, std::ios::app);
        if (!f) fail("cannot append to '", results_path, "'");
        if (fresh) f << "model_tag,transform,probe_error\n";
        f << tag << "," << transform << "," << err << "\n";
    }
    return 0;
}

int cmd_feature_stats(const ConfigArgs& args, const std::string& ckpt, int n, uint64_t seed,
                      bool raw) {
    TrainConfig cfg = build_config(args);
    auto model = load_model(cfg, ckpt, !raw);
    auto [train, test] = load_datasets(cfg);
    const int count = n > 0 ? n : static_cast<int>(std::min<size_t>(500, test.size()));
    auto stats = feature_distance_stats(model, test.images, count, seed);
    auto line = [](const char* name, const DistanceStats& s) {
        std::printf("cos-distance(%s): %.4f +- %.4f\n", name, s.mean, s.stddev);
    };
    line("weak, orig", stats.weak_orig);
    line("strong, orig", stats.strong_orig);
    line("weak, strong", stats.weak_strong);
    return 0;
}

int cmd_augment_preview(const ConfigArgs& args, uint64_t seed, int n, const std::string& kind,
                        int index) {
    TrainConfig cfg = build_config(args);
    if (kind != "strong" && kind != "weak")
        fail_config("--kind must be strong or weak, got '", kind, "'");
    auto [train, test] = load_datasets(cfg);
    if (index < 0 || static_cast<size_t>(index) >= train.size())
        fail_config("--index outside the training set");
    const Image& src = train.images[static_cast<size_t>(index)];

    fs::create_directories(cfg.out_dir);
    StrongOptions opt;
    opt.cutout_side = cfg.cutout_side;
    for (int k = 0; k < n; ++k) {
        Rng rng = Rng(seed).stream({0x70726576ULL, static_cast<uint64_t>(k)});
        const Image out = kind == "strong" ? strong_augment(src, rng, opt)
                                           : weak_augment(src, rng, cfg.crop_pad);
        char name[64];
        std::snprintf(name, sizeof(name), "preview_%s_%03d.ppm", kind.c_str(), k);
        write_ppm((fs::path(cfg.out_dir) / name).string(), out);
    }
    std::cout << "wrote " << n << " " << kind << "-augmented previews to " << cfg.out_dir
              << "\n";
    return 0;
}

int cmd_make_splits(const ConfigArgs& args, const std::string& out_path) {
    TrainConfig cfg = build_config(args);
    auto [train, test] = load_datasets(cfg);
    auto splits = make_splits(train.labels, cfg.labels_per_class, 5, cfg.seed);

    std::ostream* os = &std::cout;
    std::ofstream file;
    if (!out_path.empty()) {
        file.open(out_path);
        if (!file) fail("cannot write '", out_path, "'");
        os = &file;
    }
    for (size_t s = 0; s < splits.size(); ++s) {
        *os << "split " << s << " labeled:";
        for (int i : splits[s].labeled) *os << ' ' << i;
        *os << "\n";
    }
    std::cout << "5 splits, " << splits[0].labeled.size() << " labeled / "
              << splits[0].unlabeled.size() << " unlabeled each\n";
    return 0;
}

int cmd_export_features(const ConfigArgs& args, const std::string& ckpt,
                        const std::string& out_path, bool raw) {
    TrainConfig cfg = build_config(args);
    auto model = load_model(cfg, ckpt, !raw);
    auto [train, test] = load_datasets(cfg);
    export_features(model, test.images, test.labels, out_path);
    std::cout << "wrote " << test.size() << " feature rows to " << out_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"semi-supervised consistency training with a feature-distance term"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "run training per the configuration");
    add_config_flags(train_cmd, train_args);

    ConfigArgs eval_args;
    std::string eval_ckpt;
    bool eval_raw = false;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test set");
    add_config_flags(eval_cmd, eval_args);
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_flag("--raw", eval_raw, "use raw weights instead of the EMA shadow");

    uint64_t gc_seed = 20240; // suite salt
    int gc_rounds = 20;
    auto* gc_cmd = app.add_subcommand("grad-check", "run the gradient oracle suite");
    gc_cmd->add_option("--seed", gc_seed, "base seed");
    gc_cmd->add_option("--rounds", gc_rounds, "random seeds per entry");

    ConfigArgs probe_args;
    std::string probe_ckpt, probe_transform = "strong-vs-weak", probe_tag, probe_results;
    double probe_fraction = 0.1, probe_lr = 0.001;
    int probe_epochs = 50;
    uint64_t probe_seed = 1;
    bool probe_unpooled = false, probe_raw = false;
    auto* probe_cmd = app.add_subcommand("probe", "linear augmentation-detection probe");
    add_config_flags(probe_cmd, probe_args);
    probe_cmd->add_option("--ckpt", probe_ckpt, "checkpoint path")->required();
    probe_cmd->add_option("--transform", probe_transform,
                          "translation|scaling|rotation|color_jitter|strong-vs-weak");
    probe_cmd->add_option("--train-fraction", probe_fraction, "image-level train fraction");
    probe_cmd->add_option("--epochs", probe_epochs, "probe SGD epochs");
    probe_cmd->add_option("--lr", probe_lr, "probe SGD learning rate");
    probe_cmd->add_option("--seed", probe_seed, "probe seed");
    probe_cmd->add_flag("--unpooled", probe_unpooled, "probe un-pooled features");
    probe_cmd->add_flag("--raw", probe_raw, "use raw weights instead of EMA");
    probe_cmd->add_option("--tag", probe_tag, "model tag for the results row");
    probe_cmd->add_option("--results", probe_results, "CSV file to append results to");

    ConfigArgs fs_args;
    std::string fs_ckpt;
    int fs_n = 0;
    uint64_t fs_seed = 1;
    bool fs_raw = false;
    auto* fs_cmd = app.add_subcommand("feature-stats",
                                      "cosine distances between augmented-feature pairs");
    add_config_flags(fs_cmd, fs_args);
    fs_cmd->add_option("--ckpt", fs_ckpt, "checkpoint path")->required();
    fs_cmd->add_option("--n", fs_n, "number of test images (default min(500, all))");
    fs_cmd->add_option("--seed", fs_seed, "augmentation seed");
    fs_cmd->add_flag("--raw", fs_raw, "use raw weights instead of EMA");

    ConfigArgs prev_args;
    uint64_t prev_seed = 7;
    int prev_n = 16, prev_index = 0;
    std::string prev_kind = "strong";
    auto* prev_cmd = app.add_subcommand("augment-preview", "write augmented samples as PPM");
    add_config_flags(prev_cmd, prev_args);
    prev_cmd->add_option("--seed", prev_seed, "augmentation seed");
    prev_cmd->add_option("--n", prev_n, "number of previews");
    prev_cmd->add_option("--kind", prev_kind, "strong|weak");
    prev_cmd->add_option("--index", prev_index, "source image index in the training set");

    ConfigArgs split_args;
    std::string split_out;
    auto* split_cmd = app.add_subcommand("make-splits", "emit the five labeled splits");
    add_config_flags(split_cmd, split_args);
    split_cmd->add_option("--splits-out", split_out, "write splits to this file");

    ConfigArgs exp_args;
    std::string exp_ckpt, exp_out = "features.bin";
    bool exp_raw = false;
    auto* exp_cmd = app.add_subcommand("export-features", "dump test-set encoder features");
    add_config_flags(exp_cmd, exp_args);
    exp_cmd->add_option("--ckpt", exp_ckpt, "checkpoint path")->required();
    exp_cmd->add_option("--features-out", exp_out, "output file");
    exp_cmd->add_flag("--raw", exp_raw, "use raw weights instead of EMA");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (*train_cmd) return cmd_train(train_args);
        if (*eval_cmd) return cmd_eval(eval_args, eval_ckpt, eval_raw);
        if (*gc_cmd) return cmd_grad_check(gc_seed, gc_rounds);
        if (*probe_cmd)
            return cmd_probe(probe_args, probe_ckpt, probe_transform, probe_fraction,
                             probe_epochs, probe_lr, probe_seed, probe_unpooled, probe_raw,
                             probe_tag, probe_results);
        if (*fs_cmd) return cmd_feature_stats(fs_args, fs_ckpt, fs_n, fs_seed, fs_raw);
        if (*prev_cmd)
            return cmd_augment_preview(prev_args, prev_seed, prev_n, prev_kind, prev_index);
        if (*split_cmd) return cmd_make_splits(split_args, split_out);
        if (*exp_cmd) return cmd_export_features(exp_args, exp_ckpt, exp_out, exp_raw);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
