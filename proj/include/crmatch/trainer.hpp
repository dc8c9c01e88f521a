#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crmatch/config.hpp"
#include "crmatch/data.hpp"
#include "crmatch/losses.hpp"
#include "crmatch/model.hpp"

namespace crmatch {

/// One labeled/unlabeled partition of a training set. Labels of unlabeled
/// samples are kept in the dataset for pseudo-label error metrics only.
struct Split {
    std::vector<int> labeled;
    std::vector<int> unlabeled;
};

/// n_splits independent splits with exactly labels_per_class labeled samples
/// per class, drawn without replacement; deterministic in the seed.
std::vector<Split> make_splits(const std::vector<int>& labels, int labels_per_class,
                               int n_splits, uint64_t seed);

/// Cosine schedule lr0 * cos(7 pi k / (16 K)) (or the plain half cosine when
/// configured). k must lie in [0, K).
double lr_at(int64_t k, const TrainConfig& cfg);

/// One SGD step with momentum:
///   v <- momentum * v + g
///   p <- p - lr * (nesterov ? g + momentum * v : v) - lr * weight_decay * p
/// where the decay term uses the pre-step value of p.
void sgd_momentum_step(std::vector<float>& p, const std::vector<float>& g,
                       std::vector<float>& v, double lr, double momentum, bool nesterov,
                       double weight_decay);

struct StepMetrics {
    int64_t step = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    double loss_sup = 0.0;
    double loss_pseudo = 0.0;
    double loss_dist = 0.0;
    double loss_rot = 0.0;
    double mask_rate = 0.0;
    double pseudo_err_all = 0.0;
    double pseudo_err_masked = 0.0; // 0 when no sample passes the threshold
};

extern const char* const kMetricsCsvHeader;

/// Owns the model, EMA shadow, optimizer state and the data streams of one
/// run. A whole run is a pure function of (config, datasets).
class Trainer {
public:
    /// `model_override` substitutes a smaller architecture (tests); the
    /// default is the 16-32-64 encoder on 32x32 input.
    Trainer(TrainConfig cfg, Dataset train, Dataset test,
            std::optional<ModelConfig> model_override = std::nullopt);

    StepMetrics train_step();

    /// Top-1 error rate on the test set (EMA weights by default).
    double evaluate(bool use_ema = true) const;

    /// Runs the remaining steps. When `metrics_out` is given, writes the
    /// CSV header plus one row per log interval; eval columns are filled on
    /// eval intervals and at the final step, empty otherwise.
    void run(std::ostream* metrics_out = nullptr);

    int64_t step() const { return step_; }
    ModelState<float>& model() { return model_; }
    const ModelState<float>& model() const { return model_; }
    EmaState<float>& ema() { return ema_; }
    const TrainConfig& config() const { return cfg_; }
    const Split& split() const { return split_; }
    const Dataset& train_set() const { return train_; }
    const Dataset& test_set() const { return test_; }

    /// EMA-weight copy of the model (for probing and evaluation).
    ModelState<float> ema_model() const { return with_ema_weights(model_, ema_); }

    void save(const std::string& path) const { save_checkpoint(path, model_, ema_); }
    void load(const std::string& path) { load_checkpoint(path, model_, ema_); }

private:
    std::vector<int> next_labeled_batch();
    std::vector<int> next_unlabeled_batch();
    Tensor<float> augmented_batch(const std::vector<int>& idx, int branch_tag,
                                  bool strong) const;
    void sgd_update(double lr);

    TrainConfig cfg_;
    Dataset train_;
    Dataset test_;
    Split split_;
    ModelState<float> model_;
    EmaState<float> ema_;
    std::vector<std::vector<float>> momentum_;
    int64_t step_ = 0;

    // labeled-pool cycling with a reshuffle per epoch-equivalent
    std::vector<int> labeled_order_;
    size_t labeled_pos_ = 0;
    int64_t labeled_epoch_ = 0;
};

/// Loads the dataset pair named by the config: the synthetic shape set
/// (train pool sized so that 4 classes x 4 labels leaves 2000 unlabeled)
/// or CIFAR-10 binary files under data_path.
std::pair<Dataset, Dataset> load_datasets(const TrainConfig& cfg);

} // namespace crmatch
