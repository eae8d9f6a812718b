#include "xwin/config.hpp"
#include "xwin/dataset.hpp"
#include "xwin/error.hpp"
#include "xwin/harness.hpp"
#include "xwin/objectives.hpp"
#include "xwin/projector.hpp"
#include "xwin/recon.hpp"
#include "xwin/trainer.hpp"
#include "xwin/volume.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace xwin;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

// Volumes cross the boundary as (nz, ny, nx) float32 arrays.
F32Array volume_array(const VoxelVolume& v) {
  F32Array a({v.nz, v.ny, v.nx});
  std::copy(v.data.begin(), v.data.end(), a.mutable_data());
  return a;
}

VoxelVolume volume_from_array(const F32Array& a, const Vec3& spacing) {
  if (a.ndim() != 3) throw InvalidArgument("volume array must be 3-D (nz, ny, nx)");
  VoxelVolume v = VoxelVolume::zeros(static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)),
                                     static_cast<int>(a.shape(0)), spacing);
  std::copy(a.data(), a.data() + a.size(), v.data.begin());
  v.validate();
  return v;
}

// Projections as (nv, nu) float32 arrays.
F32Array projection_array(const ProjectionImage& p) {
  F32Array a({p.nv, p.nu});
  std::copy(p.data.begin(), p.data.end(), a.mutable_data());
  return a;
}

ProjectionImage projection_from_array(const F32Array& a, double pitch) {
  if (a.ndim() != 2) throw InvalidArgument("projection array must be 2-D (nv, nu)");
  ProjectionImage p = ProjectionImage::zeros(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)), pitch);
  std::copy(a.data(), a.data() + a.size(), p.data.begin());
  return p;
}

py::dict labels_dict(const LabelSet& l) {
  py::dict d;
  d["lesion_present"] = l.lesion_present;
  d["lesion_count_ge2"] = l.lesion_count_ge2;
  d["largest_on_left"] = l.largest_on_left;
  return d;
}

py::dict step_dict(const StepResult& r) {
  py::dict d;
  d["step"] = r.step;
  d["overall"] = r.report.overall;
  d["align"] = r.report.align;
  d["infonce"] = r.report.infonce;
  d["affinity"] = r.report.affinity;
  d["mim"] = r.report.mim;
  d["cls"] = r.report.cls;
  d["domain"] = r.report.domain;
  d["lr"] = r.lr;
  d["weight_decay"] = r.weight_decay;
  d["momentum"] = r.momentum;
  d["tau"] = r.tau;
  return d;
}

}  // namespace

PYBIND11_MODULE(_xwin, m) {
  m.doc() = "Core bindings: phantoms, projector, losses, trainer, reconstruction and metrics.";

  // Translators run most-recent first, so the base class goes first.
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<InvalidArgument>(m, "InvalidArgument", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());

  py::class_<TrainConfig>(m, "Config")
      .def(py::init<>())
      .def_static("load", [](const std::string& path) { return TrainConfig::load(path); })
      .def_static("parse", &TrainConfig::parse)
      .def_static("keys", &TrainConfig::keys)
      .def("get", &TrainConfig::get)
      .def("set", &TrainConfig::set)
      .def("apply_override", &TrainConfig::apply_override)
      .def("to_text", &TrainConfig::to_text)
      .def("validate", &TrainConfig::validate)
      .def("total_steps", &TrainConfig::total_steps)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<ConeBeamGeometry>(m, "Geometry")
      .def(py::init<>())
      .def_readwrite("sod", &ConeBeamGeometry::sod)
      .def_readwrite("sdd", &ConeBeamGeometry::sdd)
      .def_readwrite("nu", &ConeBeamGeometry::nu)
      .def_readwrite("nv", &ConeBeamGeometry::nv)
      .def_readwrite("pitch", &ConeBeamGeometry::pitch)
      .def_readwrite("beta", &ConeBeamGeometry::beta)
      .def_readwrite("pitch_angle", &ConeBeamGeometry::pitch_angle)
      .def_readwrite("roll_angle", &ConeBeamGeometry::roll_angle);

  py::class_<DomainStyle>(m, "DomainStyle")
      .def(py::init<>())
      .def_readwrite("blur_sigma", &DomainStyle::blur_sigma)
      .def_readwrite("gamma", &DomainStyle::gamma)
      .def_readwrite("noise_sigma", &DomainStyle::noise_sigma)
      .def_readwrite("bias_amplitude", &DomainStyle::bias_amplitude)
      .def_readwrite("seed", &DomainStyle::seed);

  // Phantoms and projection.
  m.def(
      "phantom",
      [](const TrainConfig& cfg, std::uint64_t id) {
        Phantom ph = generate_phantom(phantom_spec(cfg, id));
        py::dict d;
        d["volume"] = volume_array(ph.volume);
        d["spacing"] = ph.volume.spacing;
        d["labels"] = labels_dict(ph.labels);
        d["checksum"] = checksum(ph.volume);
        return d;
      },
      py::arg("config"), py::arg("id"));
  m.def(
      "cylinder",
      [](int n, double spacing, double radius, double mu) {
        return volume_array(make_cylinder_volume(n, spacing, radius, mu));
      },
      py::arg("n"), py::arg("spacing_mm"), py::arg("radius_mm"), py::arg("attenuation"));
  m.def(
      "render_drr",
      [](const F32Array& vol, const Vec3& spacing, const ConeBeamGeometry& g, double step_mm, bool exact) {
        VoxelVolume v = volume_from_array(vol, spacing);
        ProjectionImage p;
        {
          py::gil_scoped_release release;
          p = exact ? render_drr_exact(v, g) : render_drr(v, g, step_mm);
        }
        return projection_array(p);
      },
      py::arg("volume"), py::arg("spacing"), py::arg("geometry"), py::arg("step_mm") = 2.0, py::arg("exact") = false);
  m.def(
      "to_display", [](const F32Array& p) { return projection_array(to_display(projection_from_array(p, 1.0))); },
      py::arg("line_integrals"));
  m.def(
      "pseudo_real",
      [](const F32Array& p, const DomainStyle& s) {
        return projection_array(pseudo_real_transform(projection_from_array(p, 1.0), s));
      },
      py::arg("image"), py::arg("style"));

  // Losses on plain matrices.
  m.def(
      "infonce", [](const ag::Mat& p) { return obj::infonce(ag::constant(p)).scalar(); }, py::arg("p"),
      "InfoNCE of a row-stochastic matching matrix.");
  m.def(
      "affinity", [](const ag::Mat& t, double tau, bool normalize) { return obj::affinity(t, tau, normalize); },
      py::arg("t"), py::arg("tau"), py::arg("normalize") = true);
  m.def(
      "affinity_loss",
      [](const ag::Mat& a, const ag::Mat& p) { return obj::affinity_loss(a, ag::constant(p)).scalar(); },
      py::arg("a"), py::arg("p"));
  m.def(
      "softmax_rows", [](const ag::Mat& s, double tau) { return obj::softmax_rows(s, tau); }, py::arg("s"),
      py::arg("tau"));

  // Training.
  py::class_<Trainer>(m, "Trainer")
      .def(py::init<TrainConfig>(), py::arg("config"))
      .def("step", [](Trainer& t) { return step_dict(t.step()); })
      .def(
          "run",
          [](Trainer& t, std::int64_t n) {
            py::list out;
            for (std::int64_t i = 0; i < n; ++i) out.append(step_dict(t.step()));
            return out;
          },
          py::arg("steps"))
      .def_property_readonly("step_count", [](const Trainer& t) { return t.state().step; })
      .def("save_checkpoint", [](const Trainer& t, const std::string& p) { t.save_checkpoint(p); })
      .def_static("from_checkpoint", [](const std::string& p) { return Trainer::from_checkpoint(p); })
      .def(
          "probe",
          [](Trainer& t, int count, int per_class, const std::string& task, bool permute) {
            harness::EvalSetup es;
            es.count = count;
            es.train_per_class = per_class;
            es.task = harness::parse_task(task);
            es.permute_labels = permute;
            auto ev = harness::evaluate_encoder(t.config(), t.cache(), t.state().teacher, es, "probe");
            py::dict d;
            d["auroc"] = ev.probe.auroc;
            d["mean_auroc"] = ev.probe.mean;
            d["domain_cosine"] = ev.domain.cosine;
            d["domain_l2"] = ev.domain.l2;
            return d;
          },
          py::arg("count") = 400, py::arg("train_per_class") = 100, py::arg("task") = "lesion_present",
          py::arg("permute_labels") = false);

  // Metrics and reconstruction.
  m.def(
      "auroc",
      [](const std::vector<double>& s, const std::vector<int>& y) { return harness::auroc(s, y); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "psnr",
      [](const ag::Mat& a, const ag::Mat& b, double range) {
        if (a.rows() != b.rows() || a.cols() != b.cols()) throw InvalidArgument("psnr: shape mismatch");
        return recon::psnr(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                           std::span<const double>(b.data(), static_cast<std::size_t>(b.size())), range);
      },
      py::arg("a"), py::arg("b"), py::arg("data_range"));
  m.def(
      "ssim", [](const ag::Mat& a, const ag::Mat& b, double range) { return recon::ssim(a, b, range); },
      py::arg("a"), py::arg("b"), py::arg("data_range") = 0.0);
  m.def(
      "volume_metrics",
      [](const F32Array& truth, const F32Array& test, const Vec3& spacing, double fraction) {
        VoxelVolume a = volume_from_array(truth, spacing), b = volume_from_array(test, spacing);
        auto region = recon::central_region(a, fraction);
        py::dict d;
        d["psnr"] = recon::volume_psnr(a, b, region);
        d["ssim"] = recon::volume_ssim(a, b, fraction);
        return d;
      },
      py::arg("truth"), py::arg("test"), py::arg("spacing"), py::arg("fraction") = 0.8);
  m.def(
      "fdk",
      [](const std::vector<F32Array>& projs, const std::vector<ConeBeamGeometry>& geoms, std::array<int, 3> shape,
         const Vec3& spacing, bool use_fft) {
        if (projs.size() != geoms.size()) throw InvalidArgument("fdk: one geometry per projection");
        std::vector<ProjectionImage> images;
        for (std::size_t i = 0; i < projs.size(); ++i) images.push_back(projection_from_array(projs[i], geoms[i].pitch));
        recon::GridSpec grid{shape[2], shape[1], shape[0], spacing};
        VoxelVolume v;
        {
          py::gil_scoped_release release;
          v = recon::fdk_reconstruct(images, geoms, grid, recon::FdkOptions{use_fft});
        }
        return volume_array(v);
      },
      py::arg("projections"), py::arg("geometries"), py::arg("shape"), py::arg("spacing"), py::arg("use_fft") = false);
  m.def(
      "ramp_filter",
      [](const std::vector<double>& row, double pitch, bool use_fft) { return recon::ramp_filter(row, pitch, use_fft); },
      py::arg("row"), py::arg("pitch"), py::arg("use_fft") = false);

  // Vector quantisation.
  m.def("nearest_indices", &recon::nearest_indices, py::arg("tokens"), py::arg("codebook"));
  m.def(
      "codebook_usage",
      [](const std::vector<int>& idx, int k) { return recon::codebook_usage(idx, k); }, py::arg("indices"),
      py::arg("codebook_size"));
}
