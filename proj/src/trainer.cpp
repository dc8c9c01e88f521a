#include "crmatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>

namespace crmatch {

namespace {

// substream tags
constexpr uint64_t kTagSplit = 1;
constexpr uint64_t kTagLabeledShuffle = 2;
constexpr uint64_t kTagUnlabeledDraw = 3;
constexpr uint64_t kTagAugment = 4;

// augmentation branches
constexpr uint64_t kBranchLabeled = 0;
constexpr uint64_t kBranchFirst = 1;
constexpr uint64_t kBranchSecond = 2;
constexpr uint64_t kBranchRot = 3;

void shuffle_with(std::vector<int>& v, Rng rng) {
    for (size_t i = v.size(); i > 1; --i) {
        const size_t j = rng.uniform_int(static_cast<uint32_t>(i));
        std::swap(v[i - 1], v[j]);
    }
}

std::string fmt_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace

const char* const kMetricsCsvHeader =
    "step,lr,loss_total,loss_sup,loss_pseudo,loss_dist,loss_rot,mask_rate,"
    "pseudo_err_all,pseudo_err_masked,eval_err_raw,eval_err_ema";

std::vector<Split> make_splits(const std::vector<int>& labels, int labels_per_class,
                               int n_splits, uint64_t seed) {
    if (labels.empty()) fail("make_splits: empty label list");
    if (labels_per_class < 1) fail("make_splits: labels_per_class must be >= 1");
    int num_classes = 0;
    for (int l : labels) num_classes = std::max(num_classes, l + 1);

    std::vector<std::vector<int>> by_class(static_cast<size_t>(num_classes));
    for (size_t i = 0; i < labels.size(); ++i)
        by_class[static_cast<size_t>(labels[i])].push_back(static_cast<int>(i));
    for (int c = 0; c < num_classes; ++c)
        if (static_cast<int>(by_class[static_cast<size_t>(c)].size()) < labels_per_class)
            fail("make_splits: class ", c, " has only ",
                 by_class[static_cast<size_t>(c)].size(), " samples, need ",
                 labels_per_class);

    std::vector<Split> out;
    out.reserve(static_cast<size_t>(n_splits));
    for (int s = 0; s < n_splits; ++s) {
        Split split;
        for (int c = 0; c < num_classes; ++c) {
            std::vector<int> pool = by_class[static_cast<size_t>(c)];
            shuffle_with(pool, Rng(seed).stream({kTagSplit, static_cast<uint64_t>(s),
                                                 static_cast<uint64_t>(c)}));
            split.labeled.insert(split.labeled.end(), pool.begin(),
                                 pool.begin() + labels_per_class);
            split.unlabeled.insert(split.unlabeled.end(), pool.begin() + labels_per_class,
                                   pool.end());
        }
        std::sort(split.labeled.begin(), split.labeled.end());
        std::sort(split.unlabeled.begin(), split.unlabeled.end());
        out.push_back(std::move(split));
    }
    return out;
}

double lr_at(int64_t k, const TrainConfig& cfg) {
    if (k < 0 || k >= cfg.total_steps)
        fail("lr_at: step ", k, " outside [0, ", cfg.total_steps, ")");
    const double t = static_cast<double>(k) / static_cast<double>(cfg.total_steps);
    const double pi = 3.14159265358979323846;
    switch (cfg.lr_schedule) {
    case LrSchedule::SevenSixteenths: return cfg.lr0 * std::cos(7.0 * pi * t / 16.0);
    case LrSchedule::HalfCosine: return cfg.lr0 * std::cos(pi * t / 2.0);
    }
    fail("lr_at: bad schedule");
}

Trainer::Trainer(TrainConfig cfg, Dataset train, Dataset test,
                 std::optional<ModelConfig> model_override)
    : cfg_(std::move(cfg)), train_(std::move(train)), test_(std::move(test)) {
    if (cfg_.tau <= 0.0 || cfg_.tau >= 1.0) fail("trainer: tau must be in (0,1)");
    if (cfg_.batch_labeled < 1 || cfg_.mu < 1) fail("trainer: B_s and mu must be >= 1");
    if (cfg_.total_steps < 1) fail("trainer: total_steps must be >= 1");

    ModelConfig mc = model_override ? *model_override : model_config_for(cfg_);
    for (const auto& img : train_.images)
        if (img.height != mc.input_size || img.width != mc.input_size)
            fail("trainer: training image is ", img.height, "x", img.width, ", model wants ",
                 mc.input_size);

    auto splits = make_splits(train_.labels, cfg_.labels_per_class, 5, cfg_.seed);
    split_ = std::move(splits[static_cast<size_t>(cfg_.split_index)]);

    model_ = init_model<float>(mc, cfg_.seed);
    ema_ = make_ema(model_, cfg_.ema_decay);
    momentum_.reserve(model_.params.size());
    for (const auto& [name, t] : model_.params)
        momentum_.emplace_back(t.vals().size(), 0.0f);

    labeled_order_ = split_.labeled;
    shuffle_with(labeled_order_, Rng(cfg_.seed).stream({kTagLabeledShuffle, 0}));
}

std::vector<int> Trainer::next_labeled_batch() {
    std::vector<int> out;
    out.reserve(static_cast<size_t>(cfg_.batch_labeled));
    for (int b = 0; b < cfg_.batch_labeled; ++b) {
        if (labeled_pos_ == labeled_order_.size()) {
            ++labeled_epoch_;
            labeled_order_ = split_.labeled;
            shuffle_with(labeled_order_,
                         Rng(cfg_.seed).stream({kTagLabeledShuffle,
                                                static_cast<uint64_t>(labeled_epoch_)}));
            labeled_pos_ = 0;
        }
        out.push_back(labeled_order_[labeled_pos_++]);
    }
    return out;
}

std::vector<int> Trainer::next_unlabeled_batch() {
    Rng rng = Rng(cfg_.seed).stream({kTagUnlabeledDraw, static_cast<uint64_t>(step_)});
    std::vector<int> out;
    const int bu = cfg_.batch_unlabeled();
    out.reserve(static_cast<size_t>(bu));
    for (int b = 0; b < bu; ++b)
        out.push_back(split_.unlabeled[rng.uniform_int(
            static_cast<uint32_t>(split_.unlabeled.size()))]);
    return out;
}

Tensor<float> Trainer::augmented_batch(const std::vector<int>& idx, int branch_tag,
                                       bool strong) const {
    std::vector<Image> images;
    images.reserve(idx.size());
    StrongOptions opt;
    opt.cutout_side = cfg_.cutout_side;
    for (size_t i = 0; i < idx.size(); ++i) {
        Rng rng = Rng(cfg_.seed).stream({kTagAugment, static_cast<uint64_t>(branch_tag),
                                         static_cast<uint64_t>(step_),
                                         static_cast<uint64_t>(i)});
        const Image& src = train_.images[static_cast<size_t>(idx[i])];
        images.push_back(strong ? strong_augment(src, rng, opt)
                                : weak_augment(src, rng, cfg_.crop_pad));
    }
    return images_to_tensor<float>(images);
}

void sgd_momentum_step(std::vector<float>& p, const std::vector<float>& g,
                       std::vector<float>& v, double lr, double momentum, bool nesterov,
                       double weight_decay) {
    const float m = static_cast<float>(momentum);
    const float flr = static_cast<float>(lr);
    const float wd = static_cast<float>(weight_decay);
    for (size_t j = 0; j < p.size(); ++j) {
        v[j] = m * v[j] + g[j];
        const float dir = nesterov ? g[j] + m * v[j] : v[j];
        p[j] -= flr * dir + flr * wd * p[j];
    }
}

void Trainer::sgd_update(double lr) {
    for (size_t i = 0; i < model_.params.size(); ++i) {
        auto& [name, p] = model_.params[i];
        // decoupled weight decay applies to weights only
        const double wd = is_weight_param(name) ? cfg_.weight_decay : 0.0;
        sgd_momentum_step(p.vals(), *p.grad, momentum_[i], lr, cfg_.momentum, cfg_.nesterov,
                          wd);
    }
}

StepMetrics Trainer::train_step() {
    if (step_ >= cfg_.total_steps)
        fail("train_step: run already finished (", cfg_.total_steps, " steps)");
    const double lr = lr_at(step_, cfg_);

    const auto lab_idx = next_labeled_batch();
    const auto unlab_idx = next_unlabeled_batch();

    Tape<float> tape;

    // supervised term on weakly augmented labeled images
    auto lab_batch = augmented_batch(lab_idx, kBranchLabeled, false);
    auto lab_fb = forward(tape, model_, lab_batch);
    std::vector<int> lab_labels;
    lab_labels.reserve(lab_idx.size());
    for (int i : lab_idx) lab_labels.push_back(train_.labels[static_cast<size_t>(i)]);
    auto loss_sup = supervised_loss(tape, lab_fb.logits, lab_labels);

    // unlabeled branches; the pairing decides each branch's augmentation and
    // the pseudo-label always comes from the first branch
    const bool first_strong = cfg_.pairing == Pairing::StrongStrong;
    const bool second_strong = cfg_.pairing != Pairing::WeakWeak;
    auto u1 = augmented_batch(unlab_idx, kBranchFirst, first_strong);
    auto fb1 = forward(tape, model_, u1);

    UnlabeledLoss<float> ul;
    if (cfg_.lambda_u > 0.0) {
        auto u2 = augmented_batch(unlab_idx, kBranchSecond, second_strong);
        auto fb2 = forward(tape, model_, u2);
        ul = unlabeled_loss(tape, fb1, fb2, cfg_.tau, cfg_.dist_metric, cfg_.detach_weak);
    } else {
        // keep the confidence-mask metrics without building the loss
        ul.pls = pseudo_labels(fb1.logits);
        int passing = 0;
        ul.mask.resize(ul.pls.size());
        for (size_t i = 0; i < ul.pls.size(); ++i) {
            ul.mask[i] = ul.pls[i].confidence > cfg_.tau ? 1 : 0;
            passing += ul.mask[i];
        }
        ul.mask_rate = static_cast<double>(passing) / static_cast<double>(ul.pls.size());
        ul.total = scalar_tensor<float>(0.0f);
        ul.pseudo_part = scalar_tensor<float>(0.0f);
        ul.dist_part = scalar_tensor<float>(0.0f);
    }

    // rotation prediction on the unlabeled batch (plus the labeled batch
    // when configured): rotate the original, then weak-augment (the
    // alternative order weak-augments once per image, then rotates)
    Tensor<float> loss_rot = scalar_tensor<float>(0.0f);
    if (cfg_.lambda_r > 0.0) {
        std::vector<int> rot_src = unlab_idx;
        if (cfg_.rot_includes_labeled)
            rot_src.insert(rot_src.end(), lab_idx.begin(), lab_idx.end());
        std::vector<Image> rot_images;
        std::vector<int> rot_targets;
        rot_images.reserve(rot_src.size() * 4);
        rot_targets.reserve(rot_src.size() * 4);
        for (size_t i = 0; i < rot_src.size(); ++i) {
            const Image& orig = train_.images[static_cast<size_t>(rot_src[i])];
            if (cfg_.rotate_before_weak) {
                for (int r = 0; r < 4; ++r) {
                    Rng rng = Rng(cfg_.seed).stream({kTagAugment, kBranchRot,
                                                     static_cast<uint64_t>(step_),
                                                     static_cast<uint64_t>(i * 4 + r)});
                    rot_images.push_back(weak_augment(rotate90(orig, r), rng, cfg_.crop_pad));
                    rot_targets.push_back(r);
                }
            } else {
                Rng rng = Rng(cfg_.seed).stream({kTagAugment, kBranchRot,
                                                 static_cast<uint64_t>(step_),
                                                 static_cast<uint64_t>(i * 4)});
                const Image weak = weak_augment(orig, rng, cfg_.crop_pad);
                for (int r = 0; r < 4; ++r) {
                    rot_images.push_back(rotate90(weak, r));
                    rot_targets.push_back(r);
                }
            }
        }
        auto rot_batch = images_to_tensor<float>(rot_images);
        auto rot_fb = forward(tape, model_, rot_batch);
        auto rot_logits = rot_forward(tape, model_, rot_fb.feat_b);
        loss_rot = rotation_loss(tape, rot_logits, rot_targets);
    }

    auto total =
        total_objective(tape, loss_sup, ul.total, loss_rot, cfg_.lambda_u, cfg_.lambda_r);
    if (!std::isfinite(total.item()))
        fail("training diverged: loss is NaN at step ", step_);

    model_.zero_grad();
    if (total.tape_id == &tape) tape.backward(total);
    sgd_update(lr);
    ema_update(ema_, model_, cfg_.ema_decay);

    StepMetrics metrics;
    metrics.step = step_;
    metrics.lr = lr;
    metrics.loss_total = total.item();
    metrics.loss_sup = loss_sup.item();
    metrics.loss_pseudo = ul.pseudo_part.item();
    metrics.loss_dist = ul.dist_part.item();
    metrics.loss_rot = loss_rot.item();
    metrics.mask_rate = ul.mask_rate;
    int wrong_all = 0, wrong_masked = 0, masked = 0;
    for (size_t i = 0; i < unlab_idx.size(); ++i) {
        const bool wrong =
            ul.pls[i].label != train_.labels[static_cast<size_t>(unlab_idx[i])];
        wrong_all += wrong ? 1 : 0;
        if (ul.mask[i]) {
            ++masked;
            wrong_masked += wrong ? 1 : 0;
        }
    }
    metrics.pseudo_err_all = static_cast<double>(wrong_all) / unlab_idx.size();
    metrics.pseudo_err_masked =
        masked > 0 ? static_cast<double>(wrong_masked) / masked : 0.0;

    ++step_;
    return metrics;
}

double Trainer::evaluate(bool use_ema) const {
    if (test_.size() == 0) fail("evaluate: empty test set");
    // handle copy; forward() only reads parameters
    ModelState<float> eval_model = use_ema ? with_ema_weights(model_, ema_) : model_;

    const int C = eval_model.cfg.num_classes;
    size_t wrong = 0;
    constexpr size_t kChunk = 128;
    Tape<float> tape(false);
    for (size_t start = 0; start < test_.size(); start += kChunk) {
        const size_t end = std::min(test_.size(), start + kChunk);
        auto batch = images_to_tensor<float>(
            std::span<const Image>(test_.images.data() + start, end - start));
        auto fb = forward(tape, eval_model, batch);
        for (size_t i = 0; i < end - start; ++i) {
            const float* row = fb.logits.data() + i * static_cast<size_t>(C);
            int arg = 0;
            for (int c = 1; c < C; ++c)
                if (row[c] > row[arg]) arg = c;
            if (arg != test_.labels[start + i]) ++wrong;
        }
    }
    return static_cast<double>(wrong) / static_cast<double>(test_.size());
}

void Trainer::run(std::ostream* metrics_out) {
    if (metrics_out) *metrics_out << kMetricsCsvHeader << "\n";
    while (step_ < cfg_.total_steps) {
        const StepMetrics m = train_step();
        const bool last = m.step + 1 == cfg_.total_steps;
        const bool log = cfg_.log_every > 0 && (m.step + 1) % cfg_.log_every == 0;
        const bool eval = last || (cfg_.eval_every > 0 && (m.step + 1) % cfg_.eval_every == 0);
        if (!metrics_out || (!log && !eval)) continue;
        *metrics_out << m.step << ',' << fmt_g(m.lr) << ',' << fmt_g(m.loss_total) << ','
                     << fmt_g(m.loss_sup) << ',' << fmt_g(m.loss_pseudo) << ','
                     << fmt_g(m.loss_dist) << ',' << fmt_g(m.loss_rot) << ','
                     << fmt_g(m.mask_rate) << ',' << fmt_g(m.pseudo_err_all) << ','
                     << fmt_g(m.pseudo_err_masked) << ',';
        if (eval)
            *metrics_out << fmt_g(evaluate(false)) << ',' << fmt_g(evaluate(true));
        else
            *metrics_out << ',';
        *metrics_out << '\n';
    }
}

std::pair<Dataset, Dataset> load_datasets(const TrainConfig& cfg) {
    if (cfg.dataset == "synthetic") {
        SyntheticSpec spec;
        spec.num_classes = cfg.num_classes;
        spec.samples_per_class = 504;
        spec.seed = 0xDA7A;
        Dataset train = generate_synthetic(spec);
        spec.samples_per_class = 250;
        spec.seed = 0xDA7A + 1;
        Dataset test = generate_synthetic(spec);
        return {std::move(train), std::move(test)};
    }
    if (cfg.dataset == "cifar10") {
        namespace fs = std::filesystem;
        if (cfg.data_path.empty()) fail_config("cifar10 dataset needs data_path");
        Dataset train;
        for (int i = 1; i <= 5; ++i) {
            const fs::path p = fs::path(cfg.data_path) / ("data_batch_" + std::to_string(i) +
                                                          ".bin");
            if (!fs::exists(p)) {
                if (i == 1) fail("missing '", p.string(), "'");
                break; // accept fewer batches for smoke runs
            }
            Dataset part = read_cifar_binary(p.string());
            train.images.insert(train.images.end(), part.images.begin(), part.images.end());
            train.labels.insert(train.labels.end(), part.labels.begin(), part.labels.end());
        }
        Dataset test = read_cifar_binary(
            (std::filesystem::path(cfg.data_path) / "test_batch.bin").string());
        return {std::move(train), std::move(test)};
    }
    fail_config("unknown dataset '", cfg.dataset, "'");
}

} // namespace crmatch
