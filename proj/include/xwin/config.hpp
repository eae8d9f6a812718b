#pragma once

// Flat `key = value` training configuration. Every key has a default; files
// and `--set key=value` overrides only need to name what they change.

#include "xwin/masking.hpp"
#include "xwin/model.hpp"
#include "xwin/objectives.hpp"
#include "xwin/projector.hpp"
#include "xwin/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace xwin {

enum class ActionMode { direct_yaw, stepwise_yaw, euler3 };

ActionMode parse_action_mode(const std::string& s);
std::string to_string(ActionMode m);

struct TrainConfig {
  std::uint64_t seed = 0;

  nn::ModelConfig model;

  // Synthetic data.
  std::uint64_t phantom_seed = 1000;
  int num_phantoms = 8;
  int num_real = 16;  // pseudo-real images in the real-domain pool
  int volume_grid = 64;
  double volume_spacing = 4.0;
  int max_lesions = 2;
  DomainStyle real_style{1.0, 1.5, 0.03, 0.15, 0};

  // Rig and rendering.
  ConeBeamGeometry rig;
  double step_mm = 2.0;
  std::string cache_dir;  // empty: in-memory cache only

  // Actions.
  int n_views = 8;
  double delta_phi = 3.0;
  double action_bound = 90.0;
  ActionMode action_mode = ActionMode::direct_yaw;
  double euler_range = 15.0;

  // Batching and schedules.
  int batch_volumes = 4;
  int mim_views = 1;  // simulated targets per volume that enter the MIM stream
  int epochs = 100;
  int iters_per_epoch = 50;
  double lr_start = 1e-3, lr_end = 1e-5;
  double wd_start = 0.04, wd_end = 0.4;
  double momentum_start = 0.994, momentum_end = 1.0;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

  // Losses.
  obj::LossWeights weights;
  double tau_init = 0.07;
  double tau_affinity_init = 0.07;
  bool normalize_sim = true;
  obj::MimReduction mim_reduction = obj::MimReduction::element_mean;
  bool mim_target_norm = true;

  MultiBlockParams mask;

  bool debug_checks = false;

  std::int64_t total_steps() const { return static_cast<std::int64_t>(epochs) * iters_per_epoch; }

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Applies a "key=value" override.
  void apply_override(const std::string& assignment);

  /// Lines of `key = value`, one per key, in documented order.
  std::string to_text() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);

  void validate() const;
};

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace xwin
