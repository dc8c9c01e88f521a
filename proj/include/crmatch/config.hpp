#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crmatch/losses.hpp"
#include "crmatch/model.hpp"

namespace crmatch {

enum class Pairing { WeakStrong, WeakWeak, StrongStrong };
enum class LrSchedule { SevenSixteenths, HalfCosine };

/// Everything that drives a run. File-configurable keys are listed in
/// kConfigKeys; the remaining fields are code-level switches.
struct TrainConfig {
    // file keys
    std::string dataset = "synthetic";
    std::string data_path;
    int num_classes = 4;
    int labels_per_class = 4;
    int split_index = 0;
    uint64_t seed = 1;
    int batch_labeled = 64; // B_s
    int mu = 7;             // B_u = mu * B_s
    double tau = 0.95;
    double lambda_u = 1.0;
    double lambda_r = 1.0;
    double lr0 = 0.03;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    bool nesterov = true;
    double ema_decay = 0.999;
    int64_t total_steps = 2000;
    std::optional<DistanceMetric> dist_metric = DistanceMetric::CosineSimilarity;
    DistPlacement dist_placement = DistPlacement::A;
    ProjHead proj_head = ProjHead::Linear;
    Pairing pairing = Pairing::WeakStrong;
    bool detach_weak = false;
    bool rot_includes_labeled = false;
    int cutout_side = 16;
    int crop_pad = 4;
    bool desk_profile = false;
    int log_every = 20;
    int eval_every = 250;
    std::string out_dir = "out";

    // code-level switches
    LrSchedule lr_schedule = LrSchedule::SevenSixteenths;
    bool rotate_before_weak = true; // rotate the original, then weak-augment

    int batch_unlabeled() const { return batch_labeled * mu; }
};

/// The exhaustive set of config-file keys, in canonical order.
const std::vector<std::string>& config_keys();

/// Applies one key=value pair; unknown keys and malformed values raise
/// ConfigError. desk_profile=true immediately sets B_s=16, mu=4,
/// total_steps=2000 (later keys can still override them).
void apply_config(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Flat "key = value" lines, '#' comments.
void load_config_file(TrainConfig& cfg, const std::string& path);

/// "key=value" (one '='), as accepted by the CLI --set flag.
void apply_config_override(TrainConfig& cfg, const std::string& assignment);

/// Effective configuration, one "key = value" line per key. desk_profile is
/// echoed as false because its expansion is already baked into the concrete
/// keys; re-running from this text reproduces the run exactly.
std::string resolved_config(const TrainConfig& cfg);

ModelConfig model_config_for(const TrainConfig& cfg);

} // namespace crmatch
