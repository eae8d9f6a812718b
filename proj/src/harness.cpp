#include "xwin/harness.hpp"

#include "xwin/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace xwin::harness {

Task parse_task(const std::string& s) {
  if (s == "lesion_present") return Task::lesion_present;
  if (s == "lesion_count_ge2") return Task::lesion_count_ge2;
  if (s == "laterality") return Task::laterality;
  throw InvalidArgument("unknown task: " + s);
}

std::string to_string(Task t) {
  switch (t) {
    case Task::lesion_present: return "lesion_present";
    case Task::lesion_count_ge2: return "lesion_count_ge2";
    case Task::laterality: return "laterality";
  }
  return "";
}

int label_of(const LabelSet& labels, Task task) {
  switch (task) {
    case Task::lesion_present: return labels.lesion_present ? 1 : 0;
    case Task::lesion_count_ge2: return labels.lesion_count_ge2 ? 1 : 0;
    case Task::laterality: return labels.largest_on_left ? 1 : 0;
  }
  return 0;
}

std::vector<int> LabeledSet::task_labels(Task task) const {
  std::vector<int> y;
  y.reserve(labels.size());
  for (const auto& l : labels) y.push_back(label_of(l, task));
  return y;
}

LabeledSet make_eval_set(const TrainConfig& cfg, ProjectionCache& cache, std::uint64_t first_id, int count,
                         double beta, bool styled) {
  require(count > 0, "evaluation set must be non-empty");
  LabeledSet set;
  for (int i = 0; i < count; ++i) {
    std::uint64_t id = first_id + static_cast<std::uint64_t>(i);
    Mat img = cache.display(id, beta);
    if (styled) img = pseudo_real(img, cfg.real_style, id);
    set.images.push_back(std::move(img));
    set.labels.push_back(cache.phantom(id).labels);
    set.ids.push_back(id);
  }
  return set;
}

Mat extract_features(const nn::ParamStore& encoder, const nn::ModelConfig& model, const std::vector<Mat>& images) {
  Mat out(static_cast<Eigen::Index>(images.size()), model.embed_dim);
  const int n = static_cast<int>(images.size());
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    nn::Binding p(encoder, false);
    out.row(i) = nn::global_avg_pool(nn::encode_image(images[static_cast<std::size_t>(i)], p, model,
                                                      nn::EncoderRole::teacher))
                     .value();
  }
  return out;
}

Mat extract_features(const TrainState& state, const nn::ModelConfig& model, const std::vector<Mat>& images,
                     FeatureSource source) {
  return extract_features(source == FeatureSource::teacher ? state.teacher : state.student, model, images);
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), "scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks over tie groups; U = sum of positive ranks - n_pos (n_pos + 1) / 2.
  double rank_sum = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) {
        rank_sum += mid;
        ++n_pos;
      } else {
        ++n_neg;
      }
    }
    i = j;
  }
  if (n_pos == 0 || n_neg == 0) throw InvalidArgument("auroc needs both positive and negative labels");
  double u = rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::vector<double> LogisticModel::decision(const Mat& x) const {
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::RowVectorXd z = (x.row(i) - mean).cwiseQuotient(scale);
    out[static_cast<std::size_t>(i)] = z.dot(w) + b;
  }
  return out;
}

LogisticModel fit_logistic(const Mat& x, std::span<const int> y, const ProbeOptions& opts) {
  require(x.rows() == static_cast<Eigen::Index>(y.size()) && x.rows() > 0, "probe inputs differ in length");
  LogisticModel m;
  const double n = static_cast<double>(x.rows());
  m.mean = x.colwise().mean();
  Mat centered = x.rowwise() - m.mean;
  m.scale = (centered.array().square().colwise().sum() / n).sqrt().matrix();
  for (Eigen::Index j = 0; j < m.scale.size(); ++j)
    if (!(m.scale(j) > 1e-12)) m.scale(j) = 1.0;
  Mat z = centered.array().rowwise() / m.scale.array();
  Eigen::VectorXd t(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) t(i) = y[static_cast<std::size_t>(i)] == 1 ? 1.0 : 0.0;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
  double b = 0.0;
  auto loss_of = [&](const Eigen::VectorXd& logits) {
    // mean of softplus(l) - t * l, computed stably
    double s = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      double l = logits(i);
      s += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - t(i) * l;
    }
    return s / n;
  };
  Eigen::VectorXd logits = Eigen::VectorXd::Constant(x.rows(), 0.0);
  double prev = loss_of(logits);
  int it = 0;
  for (; it < opts.max_iters; ++it) {
    Eigen::VectorXd p = logits.unaryExpr([](double l) { return 1.0 / (1.0 + std::exp(-l)); });
    Eigen::VectorXd r = p - t;
    w -= opts.lr * (z.transpose() * r) / n;
    b -= opts.lr * r.sum() / n;
    logits = (z * w).array() + b;
    double cur = loss_of(logits);
    if (std::abs(prev - cur) < opts.tolerance) {
      prev = cur;
      ++it;
      break;
    }
    prev = cur;
  }
  m.w = w.transpose();
  m.b = b;
  m.iterations = it;
  m.final_loss = prev;
  return m;
}

ProbeResult linear_probe(const Mat& train_x, std::span<const int> train_y, const Mat& test_x,
                         std::span<const int> test_y, const ProbeOptions& opts) {
  LogisticModel m = fit_logistic(train_x, train_y, opts);
  ProbeResult r;
  r.auroc = auroc(m.decision(test_x), test_y);
  r.iterations = m.iterations;
  r.train_loss = m.final_loss;
  return r;
}

void EvalReport::finalize() {
  require(!auroc.empty(), "report has no runs");
  mean = std::accumulate(auroc.begin(), auroc.end(), 0.0) / static_cast<double>(auroc.size());
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["method"] = method;
  j["seeds"] = seeds;
  j["auroc"] = auroc;
  j["mean_auroc"] = mean;
  if (!extra.empty()) j["extra"] = nlohmann::ordered_json::parse(extra);
  return j.dump();
}

Split stratified_split(std::span<const int> labels, int train_per_class, std::uint64_t seed) {
  require(train_per_class > 0, "samples per class must be positive");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  if (static_cast<int>(pos.size()) < train_per_class || static_cast<int>(neg.size()) < train_per_class)
    throw InvalidArgument("requested samples per class exceed the class population");
  std::mt19937_64 rng(derive_seed(seed, 0x73706c6974ULL));
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  Split s;
  const auto k = static_cast<std::size_t>(train_per_class);
  s.train.insert(s.train.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(k));
  s.train.insert(s.train.end(), pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k));
  s.test.insert(s.test.end(), neg.begin() + static_cast<std::ptrdiff_t>(k), neg.end());
  s.test.insert(s.test.end(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

namespace {

Mat take_rows(const Mat& x, const std::vector<std::size_t>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

std::vector<int> take(std::span<const int> y, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(y[i]);
  return out;
}

}  // namespace

EvalReport probe_report(const Mat& features, std::span<const int> labels, int train_per_class,
                        std::span<const std::uint64_t> seeds, const std::string& task, const std::string& method,
                        const ProbeOptions& opts) {
  EvalReport rep;
  rep.task = task;
  rep.method = method;
  for (auto seed : seeds) {
    Split s = stratified_split(labels, train_per_class, seed);
    auto ytr = take(labels, s.train), yte = take(labels, s.test);
    rep.seeds.push_back(seed);
    rep.auroc.push_back(linear_probe(take_rows(features, s.train), ytr, take_rows(features, s.test), yte, opts).auroc);
  }
  rep.finalize();
  return rep;
}

EvalReport few_shot_finetune(const nn::ParamStore& encoder, const nn::ModelConfig& model, const LabeledSet& data,
                             Task task, const FinetuneOptions& opts, const std::string& method) {
  require(!opts.seeds.empty(), "fine-tuning needs at least one seed");
  const std::vector<int> labels = data.task_labels(task);
  EvalReport rep;
  rep.task = to_string(task);
  rep.method = method;
  for (auto seed : opts.seeds) {
    Split split = stratified_split(labels, opts.k, seed);
    nn::ParamStore params = encoder.subset(nn::encoder_prefixes());
    params.set("head.weight", Mat::Zero(model.embed_dim, 1));
    params.set("head.bias", Mat::Zero(1, 1));
    nn::ParamStore m1, m2;
    for (const auto& [name, p] : params) {
      m1.set(name, Mat::Zero(p.rows(), p.cols()));
      m2.set(name, Mat::Zero(p.rows(), p.cols()));
    }
    auto logit = [&](const Mat& image, const nn::Binding& p) {
      ag::Var pooled = nn::global_avg_pool(nn::encode_image(image, p, model, nn::EncoderRole::student));
      return ag::add(ag::matmul(pooled, p("head.weight")), p("head.bias"));
    };
    for (int step = 0; step < opts.steps; ++step) {
      nn::Binding p(params, true);
      std::vector<ag::Var> terms;
      for (auto i : split.train) {
        ag::Var prob = ag::clamp(ag::sigmoid(logit(data.images[i], p)), nn::kProbClamp, 1.0 - nn::kProbClamp);
        ag::Var term = labels[i] == 1 ? ag::log(prob) : ag::log(ag::add_constant(ag::scale(prob, -1.0), 1.0));
        terms.push_back(term);
      }
      ag::Var loss = ag::scale(ag::sum(ag::concat_rows(terms)), -1.0 / static_cast<double>(terms.size()));
      ag::backward(loss);
      const auto grads = p.gradients();
      const double bc1 = 1.0 - std::pow(0.9, step + 1), bc2 = 1.0 - std::pow(0.999, step + 1);
      for (auto& [name, w] : params) {
        auto it = grads.find(name);
        if (it == grads.end()) continue;
        Mat& a = m1.get_mut(name);
        Mat& v = m2.get_mut(name);
        a = 0.9 * a + 0.1 * it->second;
        v = 0.999 * v + 0.001 * it->second.cwiseProduct(it->second);
        const double lr = name.rfind("head.", 0) == 0 ? opts.head_lr : opts.lr;
        w -= lr * ((a / bc1).array() / ((v / bc2).array().sqrt() + 1e-8)).matrix();
      }
    }
    nn::Binding frozen(params, false);
    std::vector<double> scores;
    std::vector<int> yte;
    for (auto i : split.test) {
      scores.push_back(logit(data.images[i], frozen).scalar());
      yte.push_back(labels[i]);
    }
    rep.seeds.push_back(seed);
    rep.auroc.push_back(auroc(scores, yte));
  }
  rep.finalize();
  return rep;
}

DomainSimilarity domain_similarity(const Mat& features_sim, const Mat& features_real) {
  require(features_sim.rows() > 0 && features_real.rows() > 0, "feature sets must be non-empty");
  require(features_sim.cols() == features_real.cols(), "feature dimensions differ");
  Eigen::RowVectorXd a = features_sim.colwise().mean(), b = features_real.colwise().mean();
  DomainSimilarity d;
  double na = a.norm(), nb = b.norm();
  d.cosine = (na > 0.0 && nb > 0.0) ? a.dot(b) / (na * nb) : 0.0;
  d.l2 = (a - b).norm();
  return d;
}

Mat patch_correspondence(const Mat& sim_image, const Mat& real_image, const nn::ParamStore& encoder,
                         const nn::ModelConfig& model, int landmark_token) {
  require(landmark_token >= 0 && landmark_token < model.num_tokens(), "landmark token out of range");
  nn::Binding p(encoder, false);
  Mat s = nn::encode_image(sim_image, p, model, nn::EncoderRole::teacher).value();
  Mat r = nn::encode_image(real_image, p, model, nn::EncoderRole::teacher).value();
  Eigen::RowVectorXd q = s.row(landmark_token);
  const int g = model.grid();
  Mat heat(g, g);
  for (int t = 0; t < model.num_tokens(); ++t) {
    double denom = q.norm() * r.row(t).norm();
    heat(t / g, t % g) = denom > 0.0 ? std::clamp(q.dot(r.row(t)) / denom, -1.0, 1.0) : 0.0;
  }
  return heat;
}

PretrainEval evaluate_encoder(const TrainConfig& cfg, ProjectionCache& cache, const nn::ParamStore& encoder,
                              const EvalSetup& setup, const std::string& method) {
  LabeledSet clean = make_eval_set(cfg, cache, setup.first_id, setup.count, 0.0, false);
  LabeledSet styled = make_eval_set(cfg, cache, setup.first_id, setup.count, 0.0, true);
  Mat f_clean = extract_features(encoder, cfg.model, clean.images);
  Mat f_styled = extract_features(encoder, cfg.model, styled.images);
  PretrainEval ev;
  ev.domain = domain_similarity(f_clean, f_styled);
  std::vector<int> y = styled.task_labels(setup.task);
  if (setup.permute_labels) std::shuffle(y.begin(), y.end(), std::mt19937_64(derive_seed(cfg.seed, 0x7065726dULL)));
  ev.probe = probe_report(f_styled, y, setup.train_per_class, setup.seeds, to_string(setup.task), method);
  return ev;
}

}  // namespace xwin::harness
