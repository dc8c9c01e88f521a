#include "crmatch/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace crmatch {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    fail_config(key, ": expected true/false, got '", v, "'");
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail_config(key, ": expected an integer, got '", v, "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail_config(key, ": expected a number, got '", v, "'");
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const char* placement_name(DistPlacement p) { return p == DistPlacement::A ? "a" : "b"; }

const char* proj_head_name(ProjHead h) {
    switch (h) {
    case ProjHead::Linear: return "linear";
    case ProjHead::None: return "none";
    case ProjHead::Mlp: return "mlp";
    }
    return "?";
}

const char* pairing_name(Pairing p) {
    switch (p) {
    case Pairing::WeakStrong: return "weak-strong";
    case Pairing::WeakWeak: return "weak-weak";
    case Pairing::StrongStrong: return "strong-strong";
    }
    return "?";
}

} // namespace

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "dataset",      "data_path",    "num_classes",  "labels_per_class",
        "split_index",  "seed",         "B_s",          "mu",
        "tau",          "lambda_u",     "lambda_r",     "lr0",
        "momentum",     "weight_decay", "nesterov",     "ema_decay",
        "total_steps",  "dist_metric",  "dist_placement", "proj_head",
        "pairing",      "detach_weak",  "rot_includes_labeled", "cutout_side",
        "crop_pad",     "desk_profile", "log_every",    "eval_every",
        "out_dir",
    };
    return keys;
}

void apply_config(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "dataset") {
        if (value != "synthetic" && value != "cifar10")
            fail_config("dataset: expected synthetic or cifar10, got '", value, "'");
        cfg.dataset = value;
    } else if (key == "data_path") {
        cfg.data_path = value;
    } else if (key == "num_classes") {
        cfg.num_classes = static_cast<int>(parse_int(key, value));
    } else if (key == "labels_per_class") {
        cfg.labels_per_class = static_cast<int>(parse_int(key, value));
    } else if (key == "split_index") {
        const int idx = static_cast<int>(parse_int(key, value));
        if (idx < 0 || idx > 4) fail_config("split_index: must be in 0..4, got ", idx);
        cfg.split_index = idx;
    } else if (key == "seed") {
        cfg.seed = static_cast<uint64_t>(parse_int(key, value));
    } else if (key == "B_s") {
        cfg.batch_labeled = static_cast<int>(parse_int(key, value));
    } else if (key == "mu") {
        cfg.mu = static_cast<int>(parse_int(key, value));
    } else if (key == "tau") {
        cfg.tau = parse_double(key, value);
    } else if (key == "lambda_u") {
        cfg.lambda_u = parse_double(key, value);
    } else if (key == "lambda_r") {
        cfg.lambda_r = parse_double(key, value);
    } else if (key == "lr0") {
        cfg.lr0 = parse_double(key, value);
    } else if (key == "momentum") {
        cfg.momentum = parse_double(key, value);
    } else if (key == "weight_decay") {
        cfg.weight_decay = parse_double(key, value);
    } else if (key == "nesterov") {
        cfg.nesterov = parse_bool(key, value);
    } else if (key == "ema_decay") {
        cfg.ema_decay = parse_double(key, value);
    } else if (key == "total_steps") {
        cfg.total_steps = parse_int(key, value);
    } else if (key == "dist_metric") {
        cfg.dist_metric = parse_metric(value);
    } else if (key == "dist_placement") {
        if (value == "a") cfg.dist_placement = DistPlacement::A;
        else if (value == "b") cfg.dist_placement = DistPlacement::B;
        else fail_config("dist_placement: expected a or b, got '", value, "'");
    } else if (key == "proj_head") {
        if (value == "linear") cfg.proj_head = ProjHead::Linear;
        else if (value == "none") cfg.proj_head = ProjHead::None;
        else if (value == "mlp") cfg.proj_head = ProjHead::Mlp;
        else fail_config("proj_head: expected linear/none/mlp, got '", value, "'");
    } else if (key == "pairing") {
        if (value == "weak-strong") cfg.pairing = Pairing::WeakStrong;
        else if (value == "weak-weak") cfg.pairing = Pairing::WeakWeak;
        else if (value == "strong-strong") cfg.pairing = Pairing::StrongStrong;
        else fail_config("pairing: expected weak-strong/weak-weak/strong-strong, got '",
                         value, "'");
    } else if (key == "detach_weak") {
        cfg.detach_weak = parse_bool(key, value);
    } else if (key == "rot_includes_labeled") {
        cfg.rot_includes_labeled = parse_bool(key, value);
    } else if (key == "cutout_side") {
        cfg.cutout_side = static_cast<int>(parse_int(key, value));
    } else if (key == "crop_pad") {
        cfg.crop_pad = static_cast<int>(parse_int(key, value));
    } else if (key == "desk_profile") {
        cfg.desk_profile = parse_bool(key, value);
        if (cfg.desk_profile) {
            cfg.batch_labeled = 16;
            cfg.mu = 4;
            cfg.total_steps = 2000;
        }
    } else if (key == "log_every") {
        cfg.log_every = static_cast<int>(parse_int(key, value));
    } else if (key == "eval_every") {
        cfg.eval_every = static_cast<int>(parse_int(key, value));
    } else if (key == "out_dir") {
        cfg.out_dir = value;
    } else {
        fail_config("unknown config key '", key, "'");
    }
}

void load_config_file(TrainConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) fail_config("cannot open config file '", path, "'");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            fail_config(path, ":", lineno, ": expected 'key = value', got '", line, "'");
        apply_config(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void apply_config_override(TrainConfig& cfg, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        fail_config("--set expects key=value, got '", assignment, "'");
    apply_config(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string resolved_config(const TrainConfig& cfg) {
    std::ostringstream os;
    auto emit = [&](const std::string& key, const std::string& value) {
        os << key << " = " << value << "\n";
    };
    emit("dataset", cfg.dataset);
    emit("data_path", cfg.data_path);
    emit("num_classes", std::to_string(cfg.num_classes));
    emit("labels_per_class", std::to_string(cfg.labels_per_class));
    emit("split_index", std::to_string(cfg.split_index));
    emit("seed", std::to_string(cfg.seed));
    emit("B_s", std::to_string(cfg.batch_labeled));
    emit("mu", std::to_string(cfg.mu));
    emit("tau", fmt_double(cfg.tau));
    emit("lambda_u", fmt_double(cfg.lambda_u));
    emit("lambda_r", fmt_double(cfg.lambda_r));
    emit("lr0", fmt_double(cfg.lr0));
    emit("momentum", fmt_double(cfg.momentum));
    emit("weight_decay", fmt_double(cfg.weight_decay));
    emit("nesterov", cfg.nesterov ? "true" : "false");
    emit("ema_decay", fmt_double(cfg.ema_decay));
    emit("total_steps", std::to_string(cfg.total_steps));
    emit("dist_metric", cfg.dist_metric ? metric_name(*cfg.dist_metric) : "none");
    emit("dist_placement", placement_name(cfg.dist_placement));
    emit("proj_head", proj_head_name(cfg.proj_head));
    emit("pairing", pairing_name(cfg.pairing));
    emit("detach_weak", cfg.detach_weak ? "true" : "false");
    emit("rot_includes_labeled", cfg.rot_includes_labeled ? "true" : "false");
    emit("cutout_side", std::to_string(cfg.cutout_side));
    emit("crop_pad", std::to_string(cfg.crop_pad));
    emit("desk_profile", "false"); // expansion already baked into B_s/mu/total_steps
    emit("log_every", std::to_string(cfg.log_every));
    emit("eval_every", std::to_string(cfg.eval_every));
    emit("out_dir", cfg.out_dir);
    return os.str();
}

ModelConfig model_config_for(const TrainConfig& cfg) {
    ModelConfig mc;
    mc.input_size = 32;
    mc.width = 16;
    mc.num_classes = cfg.num_classes;
    mc.proj_dim = 128;
    mc.placement = cfg.dist_placement;
    mc.proj_head = cfg.proj_head;
    return mc;
}

} // namespace crmatch
