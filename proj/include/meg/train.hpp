#pragma once

#include <string>
#include <vector>

#include "meg/data.hpp"
#include "meg/model.hpp"

namespace meg {

struct TrainConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int epochs = 20; // desk-scale default; 50 reproduces the full regime
    double focal_gamma = 2.0;
    int batch_size = 8;
    uint64_t seed = 1;
    bool augment = false; // hflip + rotations; expands the train split 6x
    bool hist_eq = false;
    std::string encoder = "mesti"; // or "dynamic"
    int jobs = 1;                  // fold-level parallelism

    void validate() const;
};

struct Metrics {
    double acc = 0.0, uf1 = 0.0, uar = 0.0;
};

struct Prediction {
    std::string clip_id;
    int true_label = -1;
    int predicted = -1;
};

struct FoldReport {
    std::string held_out_subject;
    std::vector<std::vector<int64_t>> confusion; // rows = true class
    std::vector<Prediction> predictions;
    double train_seconds = 0.0;
};

struct EvalReport {
    MegaNetConfig model_config;
    TrainConfig train_config;
    std::vector<std::string> class_names;
    std::vector<FoldReport> per_fold;
    std::vector<std::vector<int64_t>> aggregate;
    Metrics metrics;
    double wall_seconds = 0.0;

    // include_timing=false yields the deterministic, seed-reproducible view.
    std::string to_json(bool include_timing = true) const;
    void write_json(const std::string& path, bool include_timing = true) const;
    void write_predictions_csv(const std::string& path) const;
};

// Mean over the batch of -(1 - p_t)^gamma * ln(p_t), p_t clamped at 1e-12.
// Differentiable via Tape::focal_loss; this wrapper just evaluates.
double focal_loss_value(const Tensor& probs, const std::vector<int>& targets,
                        double gamma);

// Classic Adam with L2-coupled weight decay (decay folded into the gradient
// before the moment updates) and bias-corrected moments. Parameters are
// snapped back onto the f32 grid after each step so checkpoints round-trip.
class Adam {
public:
    Adam(double lr, double weight_decay, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8);

    // params/grads are parallel vectors in a stable order across calls.
    void step(const std::vector<ParamTensor*>& params,
              const std::vector<const Tensor*>& grads);

    int64_t steps_taken() const { return t_; }

private:
    double lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<real>> m_, v_;
};

// [original, hflip, rot +5, rot -5, rot +10, rot -10]; rotations are about
// the image center with bilinear sampling and edge replication.
std::vector<ImageU8> augment_clip(const ImageU8& view);

ImageU8 flip_horizontal(const ImageU8& im);
ImageU8 rotate_bilinear(const ImageU8& im, double degrees);

struct LosoFold {
    std::string held_out_subject;
    std::vector<int> train_rows; // indices into manifest.rows
    std::vector<int> test_rows;
};

// One fold per distinct subject, ordered by subject id.
std::vector<LosoFold> loso_folds(const DatasetManifest& m);

// acc / UF1 / UAR from a confusion matrix (rows = true class). Zero-support
// classes contribute 0 to the unweighted means.
Metrics metrics_from_confusion(const std::vector<std::vector<int64_t>>& confusion);

// Full LOSO protocol: per fold, encode every clip, optionally augment the
// train split, train a fresh model and evaluate the held-out subject.
// checkpoint_dir, when non-empty, receives one checkpoint per fold.
EvalReport train_loso(const DatasetManifest& manifest,
                      const MegaNetConfig& model_config,
                      const TrainConfig& train_config,
                      const std::string& checkpoint_dir = "");

} // namespace meg
