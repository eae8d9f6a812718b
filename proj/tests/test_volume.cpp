#include "xwin/error.hpp"
#include "xwin/volume.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace xwin;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("xwin_test_" + name);
}

PhantomSpec empty_spec() {
  PhantomSpec s;
  s.nx = s.ny = s.nz = 16;
  s.spacing = {1, 1, 1};
  s.has_body = false;
  return s;
}

}  // namespace

TEST_CASE("zero shapes give an empty volume and negative labels") {
  auto ph = generate_phantom(empty_spec());
  for (float v : ph.volume.data) CHECK(v == 0.0f);
  CHECK_FALSE(ph.labels.lesion_present);
  CHECK_FALSE(ph.labels.lesion_count_ge2);
  CHECK_FALSE(ph.labels.largest_on_left);
}

TEST_CASE("voxel membership of a centred sphere") {
  PhantomSpec s;
  s.nx = s.ny = s.nz = 64;
  s.spacing = {1, 1, 1};
  s.body = {{0, 0, 0}, {30, 30, 30}, 0.0};
  s.lesions.push_back({{0.5, 0.5, 0.5}, 10.0, 0.02});
  auto ph = generate_phantom(s);
  // 64 voxels centred on the isocentre: voxel 32 sits at +0.5 mm.
  CHECK(ph.volume.at(32, 32, 32) == doctest::Approx(0.02f));
  CHECK(ph.volume.at(52, 32, 32) == 0.0f);  // 20 mm away
  CHECK(ph.labels.lesion_present);
}

TEST_CASE("lesion outside the body is rejected") {
  PhantomSpec s;
  s.nx = s.ny = s.nz = 32;
  s.body = {{0, 0, 0}, {20, 20, 20}, 0.02};
  s.lesions.push_back({{18, 0, 0}, 5.0, 0.015});
  CHECK_THROWS_AS(generate_phantom(s), InvalidArgument);
}

TEST_CASE("phantom generation is deterministic") {
  auto a = generate_phantom(random_chest_spec(42, 2));
  auto b = generate_phantom(random_chest_spec(42, 2));
  CHECK(checksum(a.volume) == checksum(b.volume));
  auto c = generate_phantom(random_chest_spec(43, 2));
  CHECK(checksum(a.volume) != checksum(c.volume));
}

TEST_CASE("labels follow the lesion list") {
  for (int n = 0; n <= 3; ++n) {
    auto spec = random_chest_spec(100 + n, n);
    auto l = labels_for(spec);
    CHECK(l.lesion_present == !spec.lesions.empty());
    CHECK(l.lesion_count_ge2 == (spec.lesions.size() >= 2));
  }
  auto ph = generate_phantom(random_chest_spec(7, 1));
  for (float v : ph.volume.data) CHECK(v >= 0.0f);
}

TEST_CASE("pseudo-real transform") {
  auto img = ProjectionImage::zeros(16, 16, 1.0);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>((i % 7) / 7.0);

  SUBCASE("identity parameters are an exact no-op") {
    auto out = pseudo_real_transform(img, DomainStyle{});
    CHECK(out.data == img.data);
  }
  SUBCASE("gamma acts as a power law") {
    auto c = ProjectionImage::zeros(16, 16, 1.0);
    std::fill(c.data.begin(), c.data.end(), 0.5f);
    DomainStyle st;
    st.gamma = 2.0;
    for (float v : pseudo_real_transform(c, st).data) CHECK(v == 0.25f);
  }
  SUBCASE("seeded noise is reproducible and output stays non-negative") {
    DomainStyle st;
    st.noise_sigma = 0.1;
    st.blur_sigma = 1.0;
    st.bias_amplitude = 0.2;
    st.seed = 9;
    auto a = pseudo_real_transform(img, st);
    auto b = pseudo_real_transform(img, st);
    CHECK(a.data == b.data);
    for (float v : a.data) CHECK(v >= 0.0f);
    st.seed = 10;
    CHECK(pseudo_real_transform(img, st).data != a.data);
  }
}

TEST_CASE("volume file round trip and decode errors") {
  auto vol = generate_phantom(random_chest_spec(5, 1, 16, 8.0)).volume;
  auto path = temp_path("vol.xwv");
  save_volume(path, vol);
  CHECK(std::filesystem::file_size(path) == 64 + vol.data.size() * 4);
  auto back = load_volume(path);
  CHECK(back.nx == vol.nx);
  CHECK(back.spacing == vol.spacing);
  CHECK(back.origin == vol.origin);
  CHECK(back.data == vol.data);

  SUBCASE("truncated payload") {
    std::filesystem::resize_file(path, 64 + 100);
    CHECK_THROWS_AS(load_volume(path), FormatError);
  }
  SUBCASE("zero dimensions") {
    std::ofstream os(path, std::ios::binary);
    std::string h = "XWINVOL1 0 16 16 1 1 1 0 0 0";
    h.append(63 - h.size(), ' ');
    h.push_back('\n');
    os << h;
    os.close();
    CHECK_THROWS_AS(load_volume(path), FormatError);
  }
  SUBCASE("wrong magic") {
    auto prj = ProjectionImage::zeros(8, 8, 2.0);
    save_projection(path, prj);
    CHECK_THROWS_AS(load_volume(path), FormatError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("projection file round trip") {
  auto img = ProjectionImage::zeros(12, 9, 0.75);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(std::sin(i * 0.37));
  auto path = temp_path("prj.xwp");
  save_projection(path, img);
  auto back = load_projection(path);
  CHECK(back.nu == 12);
  CHECK(back.nv == 9);
  CHECK(back.pitch == 0.75);
  CHECK(back.data == img.data);
  std::filesystem::remove(path);
}
