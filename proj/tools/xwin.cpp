// Command-line front end: phantom, render, train, probe, finetune,
// reconstruct, metrics, ablate.

#include "xwin/error.hpp"
#include "xwin/harness.hpp"
#include "xwin/recon.hpp"
#include "xwin/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace xwin;
using json = nlohmann::ordered_json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "flat key = value config file");
    app->add_option("--seed", seed, "overrides the config seed");
    app->add_option("--set", sets, "key=value override (repeatable)");
  }

  TrainConfig load() const {
    TrainConfig c = config.empty() ? TrainConfig{} : TrainConfig::load(config);
    if (seed) c.seed = *seed;
    for (const auto& s : sets) c.apply_override(s);
    c.validate();
    return c;
  }
};

void append_line(const fs::path& path, const std::string& line) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw FormatError("cannot write " + path.string());
  out << line << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

json labels_json(const LabelSet& l) {
  return {{"lesion_present", l.lesion_present},
          {"lesion_count_ge2", l.lesion_count_ge2},
          {"largest_on_left", l.largest_on_left}};
}

// Binary 8-bit PGM of a display image, for quick viewing.
void write_pgm(const fs::path& path, const ProjectionImage& img) {
  std::ofstream out(path, std::ios::binary);
  out << "P5\n" << img.nu << ' ' << img.nv << "\n255\n";
  for (int v = 0; v < img.nv; ++v)
    for (int u = 0; u < img.nu; ++u) {
      double x = std::clamp(static_cast<double>(img.at(u, v)), 0.0, 1.0);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * x))));
    }
}

nn::ParamStore load_stack(const std::string& checkpoint, const TrainConfig& cfg, bool teacher) {
  if (checkpoint.empty()) return nn::init_params(cfg.model, derive_seed(cfg.seed, 0x72616e64ULL));
  auto [ckcfg, state] = load_checkpoint(checkpoint);
  return teacher ? state.teacher : state.student;
}

TrainConfig config_for_checkpoint(const Common& common, const std::string& checkpoint) {
  if (checkpoint.empty()) return common.load();
  // The checkpoint's own config, then command-line overrides on top.
  TrainConfig c = load_checkpoint(checkpoint).first;
  if (!common.config.empty()) c = TrainConfig::load(common.config);
  if (common.seed) c.seed = *common.seed;
  for (const auto& s : common.sets) c.apply_override(s);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

int cmd_phantom(const Common& common, std::uint64_t id, const std::string& output) {
  TrainConfig cfg = common.load();
  PhantomSpec spec = phantom_spec(cfg, id);
  Phantom ph = generate_phantom(spec);
  save_volume(output, ph.volume);
  json j{{"id", id},
         {"output", output},
         {"grid", cfg.volume_grid},
         {"spacing_mm", cfg.volume_spacing},
         {"lesions", spec.lesions.size()},
         {"checksum", checksum(ph.volume)},
         {"labels", labels_json(ph.labels)}};
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_render(const Common& common, std::uint64_t id, const std::string& volume, int views, double delta_phi,
               const std::string& base, const std::string& out_dir, bool pgm) {
  TrainConfig cfg = common.load();
  VoxelVolume vol = volume.empty() ? generate_phantom(phantom_spec(cfg, id)).volume : load_volume(volume);
  const BaseView bv = base == "lateral" ? BaseView::lateral : BaseView::frontal;
  if (base != "frontal" && base != "lateral") throw InvalidArgument("--base must be frontal or lateral");
  fs::create_directories(out_dir);
  for (int k = 0; k < views; ++k) {
    ConeBeamGeometry g = cfg.rig;
    g.beta = base_angle(bv) + k * delta_phi;
    ProjectionImage p = render_drr(vol, g, cfg.step_mm);
    char name[64];
    std::snprintf(name, sizeof name, "view_%03d.xwp", k);
    save_projection(fs::path(out_dir) / name, p);
    if (pgm) {
      std::snprintf(name, sizeof name, "view_%03d.pgm", k);
      write_pgm(fs::path(out_dir) / name, to_display(p));
    }
    std::cout << json{{"view", k}, {"beta", g.beta}, {"file", (fs::path(out_dir) / name).string()}}.dump() << '\n';
  }
  return 0;
}

int cmd_train(const Common& common, const std::string& out_dir, std::int64_t steps, const std::string& resume,
              std::int64_t ckpt_every, bool quiet) {
  fs::create_directories(out_dir);
  Trainer tr = resume.empty() ? Trainer(common.load()) : Trainer::from_checkpoint(resume);
  write_text(fs::path(out_dir) / "config.txt", tr.config().to_text());
  if (steps <= 0) steps = tr.config().total_steps() - tr.state().step;
  MetricsWriter metrics(fs::path(out_dir) / "metrics.csv");
  const fs::path ckpt = fs::path(out_dir) / "checkpoint.bin";
  for (std::int64_t i = 0; i < steps; ++i) {
    StepResult r = tr.step();
    metrics.write(r);
    if (!quiet && (r.step % 50 == 0 || i + 1 == steps)) {
      std::cerr << "step " << r.step << " total " << r.report.overall << " align " << r.report.align << " mim "
                << r.report.mim << " cls " << r.report.cls << " domain " << r.report.domain << '\n';
    }
    if (ckpt_every > 0 && (i + 1) % ckpt_every == 0) tr.save_checkpoint(ckpt);
  }
  tr.save_checkpoint(ckpt);
  std::cout << json{{"checkpoint", ckpt.string()}, {"step", tr.state().step}}.dump() << '\n';
  return 0;
}

int cmd_probe(const Common& common, const std::string& checkpoint, const std::string& task, int count,
              int per_class, int n_seeds, const std::string& features, bool permute, const std::string& output) {
  TrainConfig cfg = config_for_checkpoint(common, checkpoint);
  ProjectionCache cache(cfg);
  harness::EvalSetup es;
  es.count = count;
  es.train_per_class = per_class;
  es.task = harness::parse_task(task);
  es.permute_labels = permute;
  es.seeds.clear();
  for (int s = 0; s < n_seeds; ++s) es.seeds.push_back(derive_seed(cfg.seed, 0x70726f6265ULL, s));
  nn::ParamStore enc = load_stack(checkpoint, cfg, features == "teacher").subset(nn::encoder_prefixes());
  auto ev = harness::evaluate_encoder(cfg, cache, enc, es, checkpoint.empty() ? "probe_random_init" : "probe");
  ev.probe.extra = json{{"features", features},
                        {"permuted_labels", permute},
                        {"domain_cosine", ev.domain.cosine},
                        {"domain_l2", ev.domain.l2}}
                       .dump();
  std::string line = ev.probe.to_json();
  if (!output.empty()) append_line(output, line);
  std::cout << line << '\n';
  return 0;
}

int cmd_finetune(const Common& common, const std::string& checkpoint, const std::string& task,
                 const std::vector<int>& ks, int count, int steps, const std::string& output) {
  TrainConfig cfg = config_for_checkpoint(common, checkpoint);
  ProjectionCache cache(cfg);
  auto data = harness::make_eval_set(cfg, cache, harness::EvalSetup{}.first_id, count, 0.0, true);
  nn::ParamStore enc = load_stack(checkpoint, cfg, true);
  for (int k : ks) {
    harness::FinetuneOptions opts;
    opts.k = k;
    opts.steps = steps;
    opts.seeds.clear();
    for (int s = 0; s < 5; ++s) opts.seeds.push_back(derive_seed(cfg.seed, 0x66696e65ULL, s));
    auto rep = harness::few_shot_finetune(enc, cfg.model, data, harness::parse_task(task), opts,
                                          checkpoint.empty() ? "finetune_random_init" : "finetune");
    rep.extra = json{{"k", k}, {"steps", steps}}.dump();
    std::string line = rep.to_json();
    if (!output.empty()) append_line(output, line);
    std::cout << line << '\n';
  }
  return 0;
}

int cmd_reconstruct(const Common& common, const std::string& source, int views, std::uint64_t id,
                    const std::string& output, const std::string& metrics_path, const std::string& checkpoint,
                    int decoder_steps, int decoder_phantoms, int codebook_size, int codebook_dim) {
  if (source != "groundtruth" && source != "latent") throw InvalidArgument("--source must be groundtruth or latent");
  TrainConfig cfg = source == "latent" ? config_for_checkpoint(common, checkpoint) : common.load();
  require(views > 0, "--views must be positive");
  ProjectionCache cache(cfg);
  const Phantom& ph = cache.phantom(id);

  std::optional<recon::DecoderParams> decoder;
  nn::ParamStore stack;
  if (source == "latent") {
    stack = load_stack(checkpoint, cfg, false);
    auto samples = recon::make_decoder_samples(cfg, cache, 0, decoder_phantoms, 8, cfg.seed);
    recon::DecoderConfig dc;
    dc.steps = decoder_steps;
    dc.codebook_size = codebook_size;
    dc.codebook_dim = codebook_dim;
    dc.seed = cfg.seed;
    auto res = recon::train_decoder(stack, cfg.model, samples, dc);
    for (const auto& w : res.warnings) std::cerr << "warning: " << w << '\n';
    decoder = std::move(res.decoder);
  }

  std::vector<ProjectionImage> projs;
  std::vector<ConeBeamGeometry> geoms;
  std::vector<int> all_indices;
  const ag::Mat context = cache.display(id, 0.0);
  for (int i = 0; i < views; ++i) {
    ConeBeamGeometry g = cfg.rig;
    g.beta = 360.0 * i / views;
    ProjectionImage truth = render_drr(ph.volume, g, cfg.step_mm);
    ProjectionImage used = truth;
    if (decoder) {
      // Relative yaw in (-180, 180]; views beyond the training bound are
      // extrapolations of the view predictor.
      double rel = g.beta > 180.0 ? g.beta - 360.0 : g.beta;
      Action a{0, cfg.delta_phi};
      a.k = static_cast<int>(std::lround(rel / cfg.delta_phi));
      g.beta = a.angle_deg() < 0 ? a.angle_deg() + 360.0 : a.angle_deg();
      truth = render_drr(ph.volume, g, cfg.step_mm);
      std::vector<int> idx;
      used = recon::render_latent_projection(context, a, stack, *decoder, cfg.rig, &idx);
      all_indices.insert(all_indices.end(), idx.begin(), idx.end());
    }
    ag::Mat t = to_matrix(truth), u = to_matrix(used);
    double range = t.maxCoeff() - t.minCoeff();
    if (range <= 0.0) range = 1.0;
    double p = recon::psnr(std::span<const double>(t.data(), static_cast<std::size_t>(t.size())),
                           std::span<const double>(u.data(), static_cast<std::size_t>(u.size())), range);
    double s = t.rows() >= 7 ? recon::ssim(t, u, range) : 0.0;
    json line{{"kind", "projection"}, {"view", i}, {"beta", g.beta}, {"psnr", p}, {"ssim", s},
              {"in_training_range", std::abs(g.beta > 180 ? g.beta - 360 : g.beta) <= cfg.action_bound + 1e-9}};
    if (!metrics_path.empty()) append_line(metrics_path, line.dump());
    projs.push_back(std::move(used));
    geoms.push_back(g);
  }
  recon::GridSpec grid{ph.volume.nx, ph.volume.ny, ph.volume.nz, ph.volume.spacing};
  VoxelVolume vol = recon::fdk_reconstruct(projs, geoms, grid);
  save_volume(output, vol);
  auto region = recon::central_region(ph.volume, 0.8);
  json fin{{"kind", "volume"},
           {"source", source},
           {"views", views},
           {"psnr", recon::volume_psnr(ph.volume, vol, region)},
           {"ssim", recon::volume_ssim(ph.volume, vol, 0.8)},
           {"output", output}};
  if (!all_indices.empty() && decoder) fin["codebook_usage"] = recon::codebook_usage(all_indices, codebook_size);
  if (!metrics_path.empty()) append_line(metrics_path, fin.dump());
  std::cout << fin.dump() << '\n';
  return 0;
}

int cmd_metrics(const std::string& truth, const std::string& test, double fraction, bool projections) {
  json j;
  if (projections) {
    ProjectionImage a = load_projection(truth), b = load_projection(test);
    ag::Mat ma = to_matrix(a), mb = to_matrix(b);
    require(ma.rows() == mb.rows() && ma.cols() == mb.cols(), "projections differ in size");
    double range = ma.maxCoeff() - ma.minCoeff();
    if (range <= 0.0) range = 1.0;
    j = {{"psnr", recon::psnr(std::span<const double>(ma.data(), static_cast<std::size_t>(ma.size())),
                              std::span<const double>(mb.data(), static_cast<std::size_t>(mb.size())), range)},
         {"ssim", recon::ssim(ma, mb, range)}};
  } else {
    VoxelVolume a = load_volume(truth), b = load_volume(test);
    auto region = recon::central_region(a, fraction);
    j = {{"psnr", recon::volume_psnr(a, b, region)}, {"ssim", recon::volume_ssim(a, b, fraction)}, {"fraction", fraction}};
  }
  std::cout << j.dump() << '\n';
  return 0;
}

// Each ablation row: train, then probe and domain similarity on held-out phantoms.
struct AblationRow {
  std::string label;
  TrainConfig cfg;
};

int cmd_ablate(const Common& common, const std::string& sweep, std::int64_t steps, const std::string& output,
               int eval_count, int decoder_steps) {
  TrainConfig base = common.load();
  std::ostringstream csv;
  if (sweep == "codebook") {
    ProjectionCache cache(base);
    auto stack = nn::init_params(base.model, derive_seed(base.seed, 0x72616e64ULL));
    if (steps > 0) {
      Trainer tr(base);
      tr.run(steps);
      stack = tr.state().student;
    }
    auto train = recon::make_decoder_samples(base, cache, 0, base.num_phantoms, 8, base.seed);
    auto test = recon::make_decoder_samples(base, cache, static_cast<int>(harness::EvalSetup{}.first_id), 4, 4,
                                            base.seed + 1);
    recon::DecoderConfig dc;
    dc.steps = decoder_steps;
    dc.seed = base.seed;
    std::vector<int> ks{1024, 2048}, ds{128, 256};
    csv << recon::codebook_sweep_csv(recon::codebook_sweep(stack, base.model, train, test, dc, ks, ds));
  } else {
    std::vector<AblationRow> rows;
    auto with = [&](const std::string& label, const std::vector<std::string>& sets) {
      TrainConfig c = base;
      for (const auto& s : sets) c.apply_override(s);
      c.validate();
      rows.push_back({label, c});
    };
    if (sweep == "action") {
      with("direct_yaw", {"action.mode=direct_yaw"});
      with("stepwise_yaw", {"action.mode=stepwise_yaw", "action.bound=15"});
      with("euler3", {"action.mode=euler3"});
    } else if (sweep == "step_size") {
      for (const char* d : {"1", "3", "5", "9"}) with(std::string("delta_phi=") + d, {std::string("action.delta_phi=") + d});
    } else if (sweep == "loss_weights") {
      for (const char* a : {"0", "0.4", "1"})
        for (const char* d : {"0", "0.6", "1"})
          with(std::string("affinity=") + a + ";domain=" + d,
               {std::string("loss.lambda_affinity=") + a, std::string("loss.lambda_domain=") + d});
    } else {
      throw InvalidArgument("unknown sweep: " + sweep + " (codebook, action, step_size, loss_weights)");
    }
    csv << "label,steps,final_align,final_total,probe_auroc,domain_cosine,domain_l2\n";
    for (auto& row : rows) {
      Trainer tr(row.cfg);
      const std::int64_t n = steps > 0 ? steps : row.cfg.total_steps();
      double align = 0.0, total = 0.0;
      const std::int64_t tail = std::max<std::int64_t>(1, n / 10);
      for (std::int64_t i = 0; i < n; ++i) {
        StepResult r = tr.step();
        if (i >= n - tail) {
          align += r.report.align / static_cast<double>(tail);
          total += r.report.overall / static_cast<double>(tail);
        }
      }
      harness::EvalSetup es;
      es.count = eval_count;
      es.train_per_class = eval_count / 4;
      auto ev = harness::evaluate_encoder(row.cfg, tr.cache(), tr.state().teacher, es, row.label);
      csv << '"' << row.label << '"' << ',' << n << ',' << format_double(align) << ',' << format_double(total) << ','
          << format_double(ev.probe.mean) << ',' << format_double(ev.domain.cosine) << ','
          << format_double(ev.domain.l2) << '\n';
      std::cerr << "done " << row.label << '\n';
    }
  }
  if (output.empty())
    std::cout << csv.str();
  else
    write_text(output, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xwin: cross-view world-model pretraining on synthetic chest radiographs"};
  app.require_subcommand(1);

  Common c_phantom, c_render, c_train, c_probe, c_finetune, c_recon, c_metrics, c_ablate;

  auto* phantom = app.add_subcommand("phantom", "generate one seeded phantom volume");
  c_phantom.attach(phantom);
  std::uint64_t ph_id = 0;
  std::string ph_out = "phantom.xwv";
  phantom->add_option("--id", ph_id, "phantom index within the collection");
  phantom->add_option("--output,-o", ph_out, "output volume file");

  auto* render = app.add_subcommand("render", "render DRR views of a phantom");
  c_render.attach(render);
  std::uint64_t r_id = 0;
  std::string r_volume, r_base = "frontal", r_out = "views";
  int r_views = 8;
  double r_dphi = 3.0;
  bool r_pgm = false;
  render->add_option("--id", r_id, "phantom index (ignored with --volume)");
  render->add_option("--volume", r_volume, "render an existing volume file");
  render->add_option("--views", r_views, "number of views");
  render->add_option("--delta-phi", r_dphi, "yaw step between views (degrees)");
  render->add_option("--base", r_base, "frontal or lateral");
  render->add_option("--output-dir,-o", r_out, "output directory");
  render->add_flag("--pgm", r_pgm, "also write display images as PGM");

  auto* train = app.add_subcommand("train", "pretrain the encoder");
  c_train.attach(train);
  std::string t_out = "run", t_resume;
  std::int64_t t_steps = 0, t_every = 0;
  bool t_quiet = false;
  train->add_option("--output-dir,-o", t_out, "run directory (config, metrics.csv, checkpoint.bin)");
  train->add_option("--steps", t_steps, "steps to run (default: rest of the schedule)");
  train->add_option("--resume", t_resume, "checkpoint to resume from");
  train->add_option("--checkpoint-every", t_every, "save a checkpoint every N steps");
  train->add_flag("--quiet", t_quiet, "no progress lines");

  auto* probe = app.add_subcommand("probe", "linear probe on frozen features");
  c_probe.attach(probe);
  std::string p_ckpt, p_task = "lesion_present", p_features = "teacher", p_out;
  int p_count = 400, p_per_class = 100, p_seeds = 5;
  bool p_perm = false;
  probe->add_option("--checkpoint", p_ckpt, "pretrained checkpoint (omit for a random-init encoder)");
  probe->add_option("--task", p_task, "lesion_present, lesion_count_ge2 or laterality");
  probe->add_option("--eval-count", p_count, "held-out phantoms");
  probe->add_option("--train-per-class", p_per_class, "probe training samples per class");
  probe->add_option("--seeds", p_seeds, "number of split seeds");
  probe->add_option("--features", p_features, "teacher or student");
  probe->add_flag("--permute-labels", p_perm, "shuffle labels (chance baseline)");
  probe->add_option("--output,-o", p_out, "append the report to a JSON lines file");

  auto* finetune = app.add_subcommand("finetune", "few-shot fine-tuning of the encoder");
  c_finetune.attach(finetune);
  std::string f_ckpt, f_task = "lesion_present", f_out;
  std::vector<int> f_k{4, 8, 16};
  int f_count = 400, f_steps = 60;
  finetune->add_option("--checkpoint", f_ckpt, "pretrained checkpoint (omit for a random-init encoder)");
  finetune->add_option("--task", f_task, "task name");
  finetune->add_option("--k", f_k, "shots per class (repeatable)");
  finetune->add_option("--eval-count", f_count, "held-out phantoms");
  finetune->add_option("--steps", f_steps, "optimisation steps per run");
  finetune->add_option("--output,-o", f_out, "append reports to a JSON lines file");

  auto* reconstruct = app.add_subcommand("reconstruct", "FDK reconstruction from ground-truth or decoded views");
  c_recon.attach(reconstruct);
  std::string rc_source = "groundtruth", rc_out = "recon.xwv", rc_metrics = "recon_metrics.jsonl", rc_ckpt;
  int rc_views = 120, rc_dsteps = 500, rc_dph = 8, rc_k = 1024, rc_d = 128;
  std::uint64_t rc_id = 0;
  reconstruct->add_option("--source", rc_source, "groundtruth or latent");
  reconstruct->add_option("--views", rc_views, "views over 360 degrees");
  reconstruct->add_option("--id", rc_id, "phantom index");
  reconstruct->add_option("--output,-o", rc_out, "output volume");
  reconstruct->add_option("--metrics", rc_metrics, "JSON lines metrics file");
  reconstruct->add_option("--checkpoint", rc_ckpt, "pretrained stack for --source latent");
  reconstruct->add_option("--decoder-steps", rc_dsteps, "decoder training steps");
  reconstruct->add_option("--decoder-phantoms", rc_dph, "phantoms used to train the decoder");
  reconstruct->add_option("--codebook-size", rc_k, "codebook entries");
  reconstruct->add_option("--codebook-dim", rc_d, "codebook dimension");

  auto* metrics = app.add_subcommand("metrics", "PSNR / SSIM between two volumes or projections");
  c_metrics.attach(metrics);
  std::string m_truth, m_test;
  double m_frac = 0.8;
  bool m_proj = false;
  metrics->add_option("--truth", m_truth, "reference file")->required();
  metrics->add_option("--test", m_test, "compared file")->required();
  metrics->add_option("--fraction", m_frac, "central fraction per axis (volumes)");
  metrics->add_flag("--projections", m_proj, "inputs are projection files");

  auto* ablate = app.add_subcommand("ablate", "sweeps that emit CSV");
  c_ablate.attach(ablate);
  std::string a_sweep = "loss_weights", a_out;
  std::int64_t a_steps = 200;
  int a_eval = 100, a_dsteps = 300;
  ablate->add_option("--sweep", a_sweep, "codebook, action, step_size or loss_weights");
  ablate->add_option("--steps", a_steps, "training steps per run");
  ablate->add_option("--eval-count", a_eval, "held-out phantoms for the probe");
  ablate->add_option("--decoder-steps", a_dsteps, "decoder steps per codebook setting");
  ablate->add_option("--output,-o", a_out, "CSV file (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*phantom) return cmd_phantom(c_phantom, ph_id, ph_out);
    if (*render) return cmd_render(c_render, r_id, r_volume, r_views, r_dphi, r_base, r_out, r_pgm);
    if (*train) return cmd_train(c_train, t_out, t_steps, t_resume, t_every, t_quiet);
    if (*probe) return cmd_probe(c_probe, p_ckpt, p_task, p_count, p_per_class, p_seeds, p_features, p_perm, p_out);
    if (*finetune) return cmd_finetune(c_finetune, f_ckpt, f_task, f_k, f_count, f_steps, f_out);
    if (*reconstruct)
      return cmd_reconstruct(c_recon, rc_source, rc_views, rc_id, rc_out, rc_metrics, rc_ckpt, rc_dsteps, rc_dph,
                             rc_k, rc_d);
    if (*metrics) return cmd_metrics(m_truth, m_test, m_frac, m_proj);
    if (*ablate) return cmd_ablate(c_ablate, a_sweep, a_steps, a_out, a_eval, a_dsteps);
  } catch (const xwin::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
