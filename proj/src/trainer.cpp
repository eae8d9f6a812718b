#include "xwin/trainer.hpp"

#include "xwin/error.hpp"
#include "xwin/masking.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace xwin {

using ag::Mat;
using ag::Var;
using nn::Binding;
using nn::EncoderRole;

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

std::vector<std::uint64_t> choose(std::mt19937_64& rng, std::uint64_t n, std::size_t k) {
  std::vector<std::uint64_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::uint64_t> d(i, n - 1);
    std::swap(idx[i], idx[d(rng)]);
  }
  idx.resize(k);
  return idx;
}

struct MimSample {
  Var pred, target, prob;
};

}  // namespace

double cosine_schedule(std::int64_t step, std::int64_t total, double start, double end) {
  require(total > 0, "cosine_schedule: total must be positive");
  if (step <= 0) return start;
  if (step >= total) return end;
  double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total));
  return end + (start - end) * (1.0 + c) / 2.0;
}

std::vector<Action> sample_actions(const TrainConfig& cfg, std::uint64_t seed) {
  const int kmax = static_cast<int>(std::lround(cfg.action_bound / cfg.delta_phi));
  const int candidates = 2 * kmax + 1;
  require(cfg.n_views <= candidates, "sample_actions: more views than candidate angles");
  std::mt19937_64 rng(seed);
  auto picks = choose(rng, static_cast<std::uint64_t>(candidates), static_cast<std::size_t>(cfg.n_views));
  std::uniform_real_distribution<double> tilt(-cfg.euler_range, cfg.euler_range);
  std::vector<Action> out;
  for (auto p : picks) {
    Action a;
    a.k = static_cast<int>(p) - kmax;
    a.delta_phi = cfg.delta_phi;
    if (cfg.action_mode == ActionMode::euler3) {
      a.pitch = tilt(rng);
      a.roll = tilt(rng);
    }
    out.push_back(a);
  }
  return out;
}

Mat action_vector(const Action& a, int action_dim) {
  Mat v = Mat::Zero(1, action_dim);
  v(0, 0) = a.angle_deg() * kDegToRad;
  if (action_dim == 3) {
    v(0, 1) = a.pitch * kDegToRad;
    v(0, 2) = a.roll * kDegToRad;
  }
  return v;
}

Var stepwise_predict(const Var& ctx_tokens, int k, double delta_phi_deg, const Binding& p,
                     const nn::ModelConfig& cfg) {
  Var x = ctx_tokens;
  const double a = (k > 0 ? 1.0 : -1.0) * delta_phi_deg * kDegToRad;
  for (int i = 0; i < std::abs(k); ++i) x = nn::predict_view(x, a, p, cfg);
  return x;
}

bool no_weight_decay(const std::string& name) {
  auto ends_with = [&](const char* s) {
    std::size_t n = std::strlen(s);
    return name.size() >= n && name.compare(name.size() - n, n, s) == 0;
  };
  return ends_with("bias") || ends_with("gamma") || ends_with("beta") || name.rfind("loss.", 0) == 0 ||
         ends_with("mask_token");
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.model.action_dim = cfg_.action_mode == ActionMode::euler3 ? 3 : 1;
  cfg_.validate();
  state_.student = nn::init_params(cfg_.model, derive_seed(cfg_.seed, 0x696e6974ULL), cfg_.tau_init,
                                   cfg_.tau_affinity_init);
  state_.teacher = state_.student.subset(nn::encoder_prefixes());
  for (const auto& [name, m] : state_.student) {
    state_.adam_m.set(name, Mat::Zero(m.rows(), m.cols()));
    state_.adam_v.set(name, Mat::Zero(m.rows(), m.cols()));
  }
  cache_ = std::make_shared<ProjectionCache>(cfg_);
  real_pool_ = build_real_pool(cfg_, *cache_);
}

StepResult Trainer::step() {
  const TrainConfig& c = cfg_;
  const nn::ModelConfig& mc = c.model;
  const std::int64_t t = state_.step;
  const std::int64_t total = c.total_steps();
  const std::int64_t epoch = t / c.iters_per_epoch;

  StepResult res;
  res.step = t;
  res.lr = cosine_schedule(t, total, c.lr_start, c.lr_end);
  res.weight_decay = cosine_schedule(t, total, c.wd_start, c.wd_end);
  res.momentum = cosine_schedule(t, total, c.momentum_start, c.momentum_end);

  std::mt19937_64 rng(derive_seed(c.seed, 1, t));
  auto volumes = choose(rng, static_cast<std::uint64_t>(c.num_phantoms), static_cast<std::size_t>(c.batch_volumes));
  const std::size_t n_mim = static_cast<std::size_t>(c.batch_volumes * c.mim_views);
  std::vector<std::uint64_t> reals;
  if (real_pool_.size() >= n_mim) {
    reals = choose(rng, real_pool_.size(), n_mim);
  } else {
    std::uniform_int_distribution<std::uint64_t> d(0, real_pool_.size() - 1);
    for (std::size_t i = 0; i < n_mim; ++i) reals.push_back(d(rng));
  }

  Binding student(state_.student, true);
  Binding teacher(state_.teacher, c.debug_checks);  // leaves only so the audit can observe them
  Binding frozen_cls = Binding::detached(student);
  Var tau = ag::exp(student("loss.log_tau"));
  const double tau_aff = std::exp(state_.student.get("loss.log_tau_affinity")(0, 0));
  res.tau = tau.scalar();

  auto mim_sample = [&](const Mat& img, std::uint64_t mask_seed) {
    MaskSpec mask = sample_multiblock(mc.grid(), mc.grid(), c.mask, mask_seed);
    Var vis = nn::encode_visible(img, mask.visible, student, mc, EncoderRole::student);
    Var pred = nn::predict_mask(vis, mask.visible, mask.masked, student, mc);
    Var full_t = nn::encode_image(img, teacher, mc, EncoderRole::teacher);
    if (c.mim_target_norm) full_t = ag::layer_norm_rows(full_t);
    Var target = ag::gather_rows(full_t, mask.masked);
    // Visible encodings and reconstructions back in grid order, detached for f_c.
    std::vector<int> order(static_cast<std::size_t>(mc.num_tokens()));
    for (std::size_t i = 0; i < mask.visible.size(); ++i) order[static_cast<std::size_t>(mask.visible[i])] = static_cast<int>(i);
    for (std::size_t i = 0; i < mask.masked.size(); ++i)
      order[static_cast<std::size_t>(mask.masked[i])] = static_cast<int>(mask.visible.size() + i);
    std::vector<Var> parts{vis, pred};
    Var tokens = ag::detach(ag::gather_rows(ag::concat_rows(parts), order));
    return MimSample{pred, target, nn::classify_domain(tokens, student, mc)};
  };

  std::vector<Var> align_totals, infonces, affinities;
  std::vector<Var> z_all, t_all, p_dom;
  std::vector<Var> pred_sim, tgt_sim, prob_sim, pred_real, tgt_real, prob_real;

  for (std::size_t b = 0; b < volumes.size(); ++b) {
    const std::uint64_t id = volumes[b];
    std::mt19937_64 view_rng(derive_seed(c.seed, 2, epoch, id));
    BaseView base = std::uniform_int_distribution<int>(0, 1)(view_rng) == 0 ? BaseView::frontal : BaseView::lateral;
    const double base_beta = base_angle(base);
    Var ctx = nn::encode_image(cache_->display(id, base_beta), student, mc, EncoderRole::student);

    auto actions = sample_actions(c, derive_seed(c.seed, 3, t, b));
    std::vector<Var> z_pool, t_pool;
    for (std::size_t i = 0; i < actions.size(); ++i) {
      const Action& a = actions[i];
      Mat target = cache_->display(id, base_beta + a.angle_deg(), a.pitch, a.roll);
      Var t_patch = nn::encode_image(target, teacher, mc, EncoderRole::teacher);
      Var z_patch = c.action_mode == ActionMode::stepwise_yaw
                        ? stepwise_predict(ctx, a.k, c.delta_phi, student, mc)
                        : nn::predict_view(ctx, ag::constant(action_vector(a, mc.action_dim)), student, mc);
      z_pool.push_back(nn::global_avg_pool(z_patch));
      t_pool.push_back(nn::global_avg_pool(t_patch));
      z_all.push_back(z_patch);
      t_all.push_back(t_patch);
      p_dom.push_back(nn::classify_domain(z_patch, frozen_cls, mc));
      if (static_cast<int>(i) < c.mim_views) {
        auto s = mim_sample(target, derive_seed(c.seed, 4, t, b, i));
        pred_sim.push_back(s.pred);
        tgt_sim.push_back(s.target);
        prob_sim.push_back(s.prob);
      }
    }
    auto terms = obj::align_loss(ag::concat_rows(z_pool), ag::concat_rows(t_pool), tau, tau_aff, c.weights.affinity,
                                 c.normalize_sim);
    align_totals.push_back(terms.total);
    infonces.push_back(terms.infonce);
    affinities.push_back(terms.affinity);
  }
  for (std::size_t j = 0; j < reals.size(); ++j) {
    auto s = mim_sample(real_pool_[reals[j]], derive_seed(c.seed, 5, t, j));
    pred_real.push_back(s.pred);
    tgt_real.push_back(s.target);
    prob_real.push_back(s.prob);
  }

  auto batch_mean = [](const std::vector<Var>& v) {
    Var acc = v.front();
    for (std::size_t i = 1; i < v.size(); ++i) acc = ag::add(acc, v[i]);
    return ag::scale(acc, 1.0 / static_cast<double>(v.size()));
  };
  Var l_align = batch_mean(align_totals);
  Var l_infonce = batch_mean(infonces);
  Var l_affinity = batch_mean(affinities);
  Var l_mim = obj::mim_loss(pred_real, tgt_real, pred_sim, tgt_sim, c.mim_reduction);
  Var l_cls = obj::cls_loss(prob_real, prob_sim);
  Var l_domain = obj::domain_loss(z_all, t_all, p_dom);
  Var overall = obj::overall_loss(l_align, l_mim, l_domain, l_cls, c.weights);

  res.report = obj::make_report(l_infonce.scalar(), l_affinity.scalar(), l_mim.scalar(), l_domain.scalar(),
                                l_cls.scalar(), c.weights);
  if (!res.report.all_finite() || !std::isfinite(overall.scalar())) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << t << "; volumes";
    for (auto v : volumes) msg << ' ' << v;
    msg << "; real images";
    for (auto r : reals) msg << ' ' << r;
    throw NumericalError(msg.str());
  }

  if (c.debug_checks) {
    ag::backward(l_cls);
    auto g = student.gradients();
    res.audit.encoder_cls = nn::grad_sq_norm(g) - nn::grad_sq_norm(g, "classifier.");
    student.zero_grad();
    ag::backward(l_domain);
    res.audit.classifier_domain = nn::grad_sq_norm(student.gradients(), "classifier.");
    student.zero_grad();
  }
  ag::backward(overall);
  if (c.debug_checks) res.audit.teacher = nn::grad_sq_norm(teacher.gradients());

  // Decoupled weight decay Adam.
  const auto grads = student.gradients();
  const double b1 = c.adam_beta1, b2 = c.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t + 1));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t + 1));
  for (auto& [name, p] : state_.student) {
    auto it = grads.find(name);
    Mat g = it != grads.end() ? it->second : Mat::Zero(p.rows(), p.cols());
    Mat& m = state_.adam_m.get_mut(name);
    Mat& v = state_.adam_v.get_mut(name);
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    Mat update = ((m / bc1).array() / ((v / bc2).array().sqrt() + c.adam_eps)).matrix();
    if (!no_weight_decay(name)) update += res.weight_decay * p;
    p -= res.lr * update;
  }
  nn::ema_update(state_.teacher, state_.student, res.momentum);
  ++state_.step;
  return res;
}

std::vector<StepResult> Trainer::run(std::int64_t steps) {
  std::vector<StepResult> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t i = 0; i < steps; ++i) out.push_back(step());
  return out;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const { xwin::save_checkpoint(path, cfg_, state_); }

Trainer Trainer::from_checkpoint(const std::filesystem::path& path) {
  auto [cfg, state] = load_checkpoint(path);
  Trainer t(cfg);
  require(state.student.size() == t.state_.student.size(), "checkpoint does not match the configured model");
  for (const auto& [name, m] : state.student) {
    require(t.state_.student.contains(name) && t.state_.student.get(name).rows() == m.rows() &&
                t.state_.student.get(name).cols() == m.cols(),
            "checkpoint tensor does not match the configured model: " + name);
  }
  t.state_ = std::move(state);
  return t;
}

// Checkpoint format.

namespace {

constexpr const char* kCkptMagic = "XWINCKPT1";

const std::vector<std::pair<std::string, nn::ParamStore TrainState::*>>& sections() {
  static const std::vector<std::pair<std::string, nn::ParamStore TrainState::*>> s{
      {"student/", &TrainState::student},
      {"teacher/", &TrainState::teacher},
      {"adam_m/", &TrainState::adam_m},
      {"adam_v/", &TrainState::adam_v},
  };
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& state) {
  std::ostringstream head;
  std::string blob;
  head << kCkptMagic << '\n' << "step " << state.step << '\n';
  std::string cfg_text = cfg.to_text();
  head << "config " << std::count(cfg_text.begin(), cfg_text.end(), '\n') << '\n' << cfg_text;
  std::size_t count = 0;
  for (const auto& [prefix, member] : sections()) count += (state.*member).size();
  head << "tensors " << count << '\n';
  for (const auto& [prefix, member] : sections()) {
    for (const auto& [name, m] : state.*member) {
      head << prefix << name << ' ' << m.rows() << ' ' << m.cols() << " f64 " << blob.size() << '\n';
      // Column-major doubles; the host is little-endian (checked in volume.cpp).
      blob.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
    }
  }
  head << "blob " << blob.size() << '\n';
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint: " + path.string());
  std::string h = head.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

std::pair<TrainConfig, TrainState> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path.string());
  auto line = [&](const char* what) {
    std::string s;
    if (!std::getline(in, s)) throw FormatError(std::string("checkpoint truncated before ") + what);
    return s;
  };
  auto expect_count = [&](const std::string& s, const std::string& tag) {
    if (s.rfind(tag + " ", 0) != 0) throw FormatError("checkpoint: expected '" + tag + "' line");
    try {
      return std::stoll(s.substr(tag.size() + 1));
    } catch (const std::exception&) {
      throw FormatError("checkpoint: bad '" + tag + "' count");
    }
  };

  if (line("magic") != kCkptMagic) throw FormatError("not a checkpoint file (bad magic)");
  TrainState state;
  state.step = expect_count(line("step"), "step");
  long long n_cfg = expect_count(line("config"), "config");
  std::string cfg_text;
  for (long long i = 0; i < n_cfg; ++i) cfg_text += line("config entries") + "\n";
  TrainConfig cfg = TrainConfig::parse(cfg_text);

  struct Entry {
    std::string name;
    long long rows, cols, offset;
  };
  std::vector<Entry> entries;
  long long n_tensors = expect_count(line("tensors"), "tensors");
  long long expected_offset = 0;
  for (long long i = 0; i < n_tensors; ++i) {
    std::istringstream ls(line("tensor manifest"));
    Entry e;
    std::string dtype;
    if (!(ls >> e.name >> e.rows >> e.cols >> dtype >> e.offset) || dtype != "f64" || e.rows < 0 || e.cols < 0)
      throw FormatError("checkpoint: malformed manifest row " + std::to_string(i));
    if (e.offset != expected_offset) throw FormatError("checkpoint: non-contiguous tensor offset for " + e.name);
    expected_offset += e.rows * e.cols * static_cast<long long>(sizeof(double));
    entries.push_back(e);
  }
  long long blob_size = expect_count(line("blob"), "blob");
  if (blob_size != expected_offset) throw FormatError("checkpoint: blob size disagrees with the manifest");
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (static_cast<long long>(blob.size()) != blob_size)
    throw FormatError("checkpoint: blob length " + std::to_string(blob.size()) + " != declared " +
                      std::to_string(blob_size));

  for (const auto& e : entries) {
    Mat m(e.rows, e.cols);
    std::memcpy(m.data(), blob.data() + e.offset, static_cast<std::size_t>(m.size()) * sizeof(double));
    bool placed = false;
    for (const auto& [prefix, member] : sections()) {
      if (e.name.rfind(prefix, 0) == 0) {
        std::string name = e.name.substr(prefix.size());
        if ((state.*member).contains(name)) throw FormatError("checkpoint: duplicate tensor " + e.name);
        (state.*member).set(name, std::move(m));
        placed = true;
        break;
      }
    }
    if (!placed) throw FormatError("checkpoint: unknown tensor section in " + e.name);
  }
  return {std::move(cfg), std::move(state)};
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) {
  bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  auto f = std::make_unique<std::ofstream>(path, std::ios::app);
  if (!*f) throw Error("cannot open metrics file: " + path.string());
  if (fresh) *f << header() << '\n';
  out_ = std::move(f);
}

MetricsWriter::~MetricsWriter() = default;

const char* MetricsWriter::header() {
  return "step,loss_total,loss_align,loss_infonce,loss_affinity,loss_mim,loss_cls,loss_domain,lr,momentum";
}

void MetricsWriter::write(const StepResult& r) {
  const auto& p = r.report;
  *out_ << r.step << ',' << format_double(p.overall) << ',' << format_double(p.align) << ','
        << format_double(p.infonce) << ',' << format_double(p.affinity) << ',' << format_double(p.mim) << ','
        << format_double(p.cls) << ',' << format_double(p.domain) << ',' << format_double(r.lr) << ','
        << format_double(r.momentum) << '\n';
  out_->flush();
}

}  // namespace xwin
