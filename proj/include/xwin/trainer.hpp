#pragma once

// The training loop: action sampling, the four-loss step with its
// stop-gradient wiring, AdamW, EMA, checkpoints and metrics.

#include "xwin/config.hpp"
#include "xwin/dataset.hpp"
#include "xwin/model.hpp"
#include "xwin/objectives.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <vector>

namespace xwin {

/// end + (start - end) * (1 + cos(pi * step / total)) / 2, with step clamped
/// to [0, total].
double cosine_schedule(std::int64_t step, std::int64_t total, double start, double end);

/// N distinct k drawn uniformly from {-bound/dphi, ..., bound/dphi}. In euler3
/// mode each action also gets pitch and roll uniform in [-euler_range, euler_range].
std::vector<Action> sample_actions(const TrainConfig& cfg, std::uint64_t seed);

/// 1 x action_dim input of the view predictor, in radians.
ag::Mat action_vector(const Action& a, int action_dim);

/// Applies predict_view |k| times with action sign(k) * delta_phi, feeding
/// each output back as context. k = 0 returns the context unchanged.
ag::Var stepwise_predict(const ag::Var& ctx_tokens, int k, double delta_phi_deg, const nn::Binding& p,
                         const nn::ModelConfig& cfg);

struct TrainState {
  nn::ParamStore student;  // encoder, predictors, classifier, temperatures
  nn::ParamStore teacher;  // EMA copy of the encoder
  nn::ParamStore adam_m, adam_v;
  std::int64_t step = 0;
};

/// Gradient norms the stop-gradient contract requires to be exactly zero.
struct GradientAudit {
  double teacher = 0.0;           // theta' under L_overall
  double classifier_domain = 0.0; // f_c under L_domain
  double encoder_cls = 0.0;       // theta (and predictors) under L_cls
};

struct StepResult {
  std::int64_t step = 0;  // index of the step just taken
  obj::LossReport report;
  double lr = 0.0, weight_decay = 0.0, momentum = 0.0;
  double tau = 0.0;
  GradientAudit audit;  // filled when debug_checks is on
};

/// True when a parameter is excluded from weight decay (biases, norm
/// parameters, temperatures, the mask token).
bool no_weight_decay(const std::string& name);

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);

  StepResult step();
  std::vector<StepResult> run(std::int64_t steps);

  const TrainConfig& config() const { return cfg_; }
  const TrainState& state() const { return state_; }
  TrainState& mutable_state() { return state_; }
  ProjectionCache& cache() { return *cache_; }
  const std::vector<Eigen::MatrixXd>& real_pool() const { return real_pool_; }

  void save_checkpoint(const std::filesystem::path& path) const;
  static Trainer from_checkpoint(const std::filesystem::path& path);

 private:
  TrainConfig cfg_;
  TrainState state_;
  std::shared_ptr<ProjectionCache> cache_;
  std::vector<Eigen::MatrixXd> real_pool_;
};

/// Checkpoint file: text header with the config snapshot and a tensor
/// manifest (name rows cols dtype offset), then a little-endian f64 blob.
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state);
std::pair<TrainConfig, TrainState> load_checkpoint(const std::filesystem::path& path);

/// Append-only metrics CSV.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  ~MetricsWriter();
  void write(const StepResult& r);
  static const char* header();

 private:
  std::unique_ptr<std::ostream> out_;
};

}  // namespace xwin
