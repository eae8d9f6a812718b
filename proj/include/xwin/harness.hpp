#pragma once

// Downstream evaluation: frozen-feature linear probes, few-shot fine-tuning,
// AUROC, domain similarity of cluster centres and patch correspondence maps.

#include "xwin/config.hpp"
#include "xwin/dataset.hpp"
#include "xwin/model.hpp"
#include "xwin/trainer.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace xwin::harness {

using ag::Mat;

enum class Task { lesion_present, lesion_count_ge2, laterality };

Task parse_task(const std::string& s);
std::string to_string(Task t);
int label_of(const LabelSet& labels, Task task);

/// Images with labels. Images are nv x nu display matrices.
struct LabeledSet {
  std::vector<Mat> images;
  std::vector<LabelSet> labels;
  std::vector<std::uint64_t> ids;

  std::vector<int> task_labels(Task task) const;
  std::size_t size() const { return images.size(); }
};

/// Phantoms first_id .. first_id + count - 1 at yaw `beta`, display
/// transformed and, when `styled`, passed through the pseudo-real style.
LabeledSet make_eval_set(const TrainConfig& cfg, ProjectionCache& cache, std::uint64_t first_id, int count,
                         double beta = 0.0, bool styled = true);

/// Per-image pooled features (global average of the final encoder tokens),
/// one row per image. Parallel over images.
Mat extract_features(const nn::ParamStore& encoder, const nn::ModelConfig& model, const std::vector<Mat>& images);

enum class FeatureSource { teacher, student };

/// Features from a training state; the EMA teacher by default.
Mat extract_features(const TrainState& state, const nn::ModelConfig& model, const std::vector<Mat>& images,
                     FeatureSource source = FeatureSource::teacher);

/// Mann-Whitney U / (n_pos * n_neg), ties counted as one half. Throws when
/// either class is empty.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct ProbeOptions {
  double lr = 0.1;
  int max_iters = 5000;
  double tolerance = 1e-6;  // on the change of the training loss
};

/// Logistic regression on standardised features (train statistics).
struct LogisticModel {
  Eigen::RowVectorXd mean, scale, w;
  double b = 0.0;
  int iterations = 0;
  double final_loss = 0.0;

  std::vector<double> decision(const Mat& x) const;
};

/// Full-batch gradient descent on the mean binary cross-entropy.
LogisticModel fit_logistic(const Mat& x, std::span<const int> y, const ProbeOptions& opts = {});

struct ProbeResult {
  double auroc = 0.0;
  int iterations = 0;
  double train_loss = 0.0;
};

ProbeResult linear_probe(const Mat& train_x, std::span<const int> train_y, const Mat& test_x,
                         std::span<const int> test_y, const ProbeOptions& opts = {});

/// Per-seed AUROCs of one task and their mean; written as one JSON line.
struct EvalReport {
  std::string task;
  std::string method;
  std::vector<std::uint64_t> seeds;
  std::vector<double> auroc;
  double mean = 0.0;
  std::string extra;  // optional JSON object text with additional fields

  void finalize();
  std::string to_json() const;
};

/// Stratified split: for each seed, `train_per_class` samples of each class
/// go to training and the rest to testing.
struct Split {
  std::vector<std::size_t> train, test;
};
Split stratified_split(std::span<const int> labels, int train_per_class, std::uint64_t seed);

/// Linear probes over the given seeds (one stratified split per seed).
EvalReport probe_report(const Mat& features, std::span<const int> labels, int train_per_class,
                        std::span<const std::uint64_t> seeds, const std::string& task, const std::string& method,
                        const ProbeOptions& opts = {});

struct FinetuneOptions {
  int k = 16;
  int steps = 60;
  double lr = 1e-3;
  double head_lr = 1e-2;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

/// Unfreezes the encoder plus a linear head on the pooled features, trains
/// with Adam on exactly k samples per class (full batch), and scores the rest
/// of the set. One entry per seed. Throws when k exceeds a class population.
EvalReport few_shot_finetune(const nn::ParamStore& encoder, const nn::ModelConfig& model, const LabeledSet& data,
                             Task task, const FinetuneOptions& opts, const std::string& method = "finetune");

struct DomainSimilarity {
  double cosine = 0.0;
  double l2 = 0.0;
};

/// Cosine similarity and L2 distance of the two cluster centres (row means).
DomainSimilarity domain_similarity(const Mat& features_sim, const Mat& features_real);

/// Cosine similarity of one token of the simulated image against every token
/// of the real image, as a grid x grid map.
Mat patch_correspondence(const Mat& sim_image, const Mat& real_image, const nn::ParamStore& encoder,
                         const nn::ModelConfig& model, int landmark_token);

/// Held-out evaluation protocol for a pretrained encoder. Phantom ids start
/// far above the training and real-pool ids.
struct EvalSetup {
  std::uint64_t first_id = 100000;
  int count = 400;  // balanced 200 / 200
  int train_per_class = 100;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  Task task = Task::lesion_present;
  bool permute_labels = false;
};

struct PretrainEval {
  DomainSimilarity domain;  // clean vs pseudo-real renders of the held-out phantoms
  EvalReport probe;         // on the pseudo-real renders
};

PretrainEval evaluate_encoder(const TrainConfig& cfg, ProjectionCache& cache, const nn::ParamStore& encoder,
                              const EvalSetup& setup, const std::string& method);

}  // namespace xwin::harness
