#include "xwin/config.hpp"

#include "xwin/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

namespace xwin {

ActionMode parse_action_mode(const std::string& s) {
  if (s == "direct_yaw") return ActionMode::direct_yaw;
  if (s == "stepwise_yaw") return ActionMode::stepwise_yaw;
  if (s == "euler3") return ActionMode::euler3;
  throw InvalidArgument("unknown action_mode: " + s);
}

std::string to_string(ActionMode m) {
  switch (m) {
    case ActionMode::direct_yaw: return "direct_yaw";
    case ActionMode::stepwise_yaw: return "stepwise_yaw";
    case ActionMode::euler3: return "euler3";
  }
  return "direct_yaw";
}

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InvalidArgument(key + ": not a number: " + v);
  return out;
}

template <typename Int>
Int to_int(const std::string& key, const std::string& v) {
  Int out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw InvalidArgument(key + ": not an integer: " + v);
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw InvalidArgument(key + ": not a boolean: " + v);
}

struct Field {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define XWIN_FIELD_DOUBLE(KEY, EXPR)                                                                \
  Field {                                                                                           \
    KEY, [](TrainConfig& c, const std::string& v) { c.EXPR = to_double(KEY, v); },                 \
        [](const TrainConfig& c) { return format_double(c.EXPR); }                                  \
  }
#define XWIN_FIELD_INT(KEY, EXPR)                                                                   \
  Field {                                                                                           \
    KEY, [](TrainConfig& c, const std::string& v) { c.EXPR = to_int<decltype(c.EXPR)>(KEY, v); },  \
        [](const TrainConfig& c) { return std::to_string(c.EXPR); }                                 \
  }
#define XWIN_FIELD_BOOL(KEY, EXPR)                                                                  \
  Field {                                                                                           \
    KEY, [](TrainConfig& c, const std::string& v) { c.EXPR = to_bool(KEY, v); },                   \
        [](const TrainConfig& c) { return std::string(c.EXPR ? "true" : "false"); }                \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      XWIN_FIELD_INT("seed", seed),
      XWIN_FIELD_INT("model.image_size", model.image_size),
      XWIN_FIELD_INT("model.patch_size", model.patch_size),
      XWIN_FIELD_INT("model.embed_dim", model.embed_dim),
      XWIN_FIELD_INT("model.encoder_depth", model.encoder_depth),
      XWIN_FIELD_INT("model.num_heads", model.num_heads),
      XWIN_FIELD_INT("model.mlp_ratio", model.mlp_ratio),
      XWIN_FIELD_INT("model.predictor_dim", model.predictor_dim),
      XWIN_FIELD_INT("model.predictor_depth", model.predictor_depth),
      XWIN_FIELD_INT("model.classifier_depth", model.classifier_depth),
      XWIN_FIELD_INT("data.phantom_seed", phantom_seed),
      XWIN_FIELD_INT("data.num_phantoms", num_phantoms),
      XWIN_FIELD_INT("data.num_real", num_real),
      XWIN_FIELD_INT("data.volume_grid", volume_grid),
      XWIN_FIELD_DOUBLE("data.volume_spacing", volume_spacing),
      XWIN_FIELD_INT("data.max_lesions", max_lesions),
      XWIN_FIELD_DOUBLE("domain.blur_sigma", real_style.blur_sigma),
      XWIN_FIELD_DOUBLE("domain.gamma", real_style.gamma),
      XWIN_FIELD_DOUBLE("domain.noise_sigma", real_style.noise_sigma),
      XWIN_FIELD_DOUBLE("domain.bias_amplitude", real_style.bias_amplitude),
      XWIN_FIELD_INT("domain.seed", real_style.seed),
      XWIN_FIELD_DOUBLE("rig.sod", rig.sod),
      XWIN_FIELD_DOUBLE("rig.sdd", rig.sdd),
      XWIN_FIELD_INT("rig.nu", rig.nu),
      XWIN_FIELD_INT("rig.nv", rig.nv),
      XWIN_FIELD_DOUBLE("rig.pitch", rig.pitch),
      XWIN_FIELD_DOUBLE("rig.step_mm", step_mm),
      Field{"rig.cache_dir", [](TrainConfig& c, const std::string& v) { c.cache_dir = v; },
            [](const TrainConfig& c) { return c.cache_dir; }},
      XWIN_FIELD_INT("action.n_views", n_views),
      XWIN_FIELD_DOUBLE("action.delta_phi", delta_phi),
      XWIN_FIELD_DOUBLE("action.bound", action_bound),
      Field{"action.mode", [](TrainConfig& c, const std::string& v) { c.action_mode = parse_action_mode(v); },
            [](const TrainConfig& c) { return to_string(c.action_mode); }},
      XWIN_FIELD_DOUBLE("action.euler_range", euler_range),
      XWIN_FIELD_INT("train.batch_volumes", batch_volumes),
      XWIN_FIELD_INT("train.mim_views", mim_views),
      XWIN_FIELD_INT("train.epochs", epochs),
      XWIN_FIELD_INT("train.iters_per_epoch", iters_per_epoch),
      XWIN_FIELD_DOUBLE("train.lr_start", lr_start),
      XWIN_FIELD_DOUBLE("train.lr_end", lr_end),
      XWIN_FIELD_DOUBLE("train.wd_start", wd_start),
      XWIN_FIELD_DOUBLE("train.wd_end", wd_end),
      XWIN_FIELD_DOUBLE("train.momentum_start", momentum_start),
      XWIN_FIELD_DOUBLE("train.momentum_end", momentum_end),
      XWIN_FIELD_DOUBLE("train.adam_beta1", adam_beta1),
      XWIN_FIELD_DOUBLE("train.adam_beta2", adam_beta2),
      XWIN_FIELD_DOUBLE("train.adam_eps", adam_eps),
      XWIN_FIELD_BOOL("train.debug_checks", debug_checks),
      XWIN_FIELD_DOUBLE("loss.lambda_affinity", weights.affinity),
      XWIN_FIELD_DOUBLE("loss.lambda_mim", weights.mim),
      XWIN_FIELD_DOUBLE("loss.lambda_domain", weights.domain),
      XWIN_FIELD_DOUBLE("loss.lambda_cls", weights.cls),
      XWIN_FIELD_DOUBLE("loss.tau_init", tau_init),
      XWIN_FIELD_DOUBLE("loss.tau_affinity_init", tau_affinity_init),
      XWIN_FIELD_BOOL("loss.normalize_sim", normalize_sim),
      Field{"loss.mim_reduction",
            [](TrainConfig& c, const std::string& v) { c.mim_reduction = obj::parse_mim_reduction(v); },
            [](const TrainConfig& c) { return obj::to_string(c.mim_reduction); }},
      XWIN_FIELD_BOOL("loss.mim_target_norm", mim_target_norm),
      XWIN_FIELD_INT("mask.n_blocks", mask.n_blocks),
      XWIN_FIELD_DOUBLE("mask.scale_min", mask.scale_range.first),
      XWIN_FIELD_DOUBLE("mask.scale_max", mask.scale_range.second),
      XWIN_FIELD_DOUBLE("mask.aspect_min", mask.aspect_range.first),
      XWIN_FIELD_DOUBLE("mask.aspect_max", mask.aspect_range.second),
      XWIN_FIELD_DOUBLE("mask.min_ratio", mask.min_ratio),
      XWIN_FIELD_DOUBLE("mask.max_ratio", mask.max_ratio),
  };
  return f;
}

#undef XWIN_FIELD_DOUBLE
#undef XWIN_FIELD_INT
#undef XWIN_FIELD_BOOL

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw InvalidArgument("unknown config key: " + key);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, trim(value)); }

std::string TrainConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

void TrainConfig::apply_override(const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("override must look like key=value: " + assignment);
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string TrainConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void TrainConfig::validate() const {
  model.validate();
  rig.validate();
  require(rig.nu == model.image_size && rig.nv == model.image_size, "detector size must equal model.image_size");
  require(n_views >= 2, "action.n_views must be >= 2");
  require(delta_phi > 0.0, "action.delta_phi must be positive");
  double steps = action_bound / delta_phi;
  require(std::abs(steps - std::round(steps)) < 1e-9, "action.delta_phi must divide action.bound");
  require(2 * static_cast<int>(std::lround(steps)) + 1 >= n_views, "not enough candidate angles for n_views");
  require(num_phantoms >= batch_volumes && batch_volumes >= 1, "need at least batch_volumes phantoms");
  require(num_real >= 1, "data.num_real must be >= 1");
  require(mim_views >= 1 && mim_views <= n_views, "train.mim_views must lie in [1, n_views]");
  require(epochs >= 1 && iters_per_epoch >= 1, "schedule lengths must be positive");
  require(step_mm > 0.0, "rig.step_mm must be positive");
  require(tau_init > 0.0 && tau_affinity_init > 0.0, "temperatures must be positive");
}

}  // namespace xwin
