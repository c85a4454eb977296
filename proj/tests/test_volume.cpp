#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qsm/volume.hpp"

using namespace qsm;
namespace fs = std::filesystem;

namespace {
fs::path tmpdir() {
  auto p = fs::temp_directory_path() / "qsm_vol_test";
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("dims count and linear index are x-fastest") {
  Dims d{4, 3, 2};
  CHECK(d.count() == 24);
  CHECK(d.idx(0, 0, 0) == 0);
  CHECK(d.idx(1, 0, 0) == 1);
  CHECK(d.idx(0, 1, 0) == 4);
  CHECK(d.idx(0, 0, 1) == 12);
  CHECK(d.idx(3, 2, 1) == 23);
}

TEST_CASE("volume fill constructor and voxel size") {
  Volume v(Dims{2, 2, 2}, Vec3{0.5, 0.5, 2.0}, 3.25);
  CHECK(v.data.size() == 8);
  for (double x : v.data) CHECK(x == 3.25);
  CHECK(v.voxel_size.z == 2.0);
}

TEST_CASE("volume round trips through .vol file in float32") {
  Volume v(Dims{3, 2, 2}, Vec3{1, 1, 1});
  SeededRng rng(7);
  for (auto& x : v.data) x = rng.normal() * 10.0;
  auto path = (tmpdir() / "rt.vol").string();
  save_volume(v, path);
  Volume back = load_volume(path);
  CHECK(back.dims.nx == 3);
  CHECK(back.dims.ny == 2);
  CHECK(back.voxel_size.x == 1.0);
  // Payload is float32, so the round trip quantizes to float precision.
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    CHECK(back.data[i] == double(float(v.data[i])));
  }
  // Saving the loaded copy again must be byte-identical (f32 is a fixed point
  // of the f64->f32 cast).
  auto path2 = (tmpdir() / "rt2.vol").string();
  save_volume(back, path2);
  std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {});
  std::string sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
}

TEST_CASE("mask round trip preserves every voxel") {
  BinaryMask m(Dims{4, 4, 3}, false);
  SeededRng rng(21);
  for (auto& b : m.data) b = (rng.uniform() < 0.4);
  auto path = (tmpdir() / "mask.vol").string();
  save_mask(m, path);
  BinaryMask back = load_mask(path);
  REQUIRE(back.data.size() == m.data.size());
  for (std::size_t i = 0; i < m.data.size(); ++i) CHECK(back.data[i] == m.data[i]);
}

TEST_CASE("loading rejects corrupt headers and truncated payloads") {
  auto bad = (tmpdir() / "bad.vol").string();
  {
    std::ofstream out(bad, std::ios::binary);
    out << "{\"not\":\"a volume\"}\n";
  }
  CHECK_THROWS_AS(load_volume(bad), std::exception);

  // Valid header but payload cut short.
  Volume v(Dims{4, 4, 4}, Vec3{1, 1, 1}, 1.0);
  auto good = (tmpdir() / "good.vol").string();
  save_volume(v, good);
  std::ifstream in(good, std::ios::binary);
  std::string all((std::istreambuf_iterator<char>(in)), {});
  in.close();
  auto cut = (tmpdir() / "cut.vol").string();
  {
    std::ofstream out(cut, std::ios::binary);
    out.write(all.data(), static_cast<std::streamsize>(all.size() - 17));
  }
  CHECK_THROWS_AS(load_volume(cut), std::exception);
}

TEST_CASE("rng streams are deterministic and child streams are disjoint") {
  SeededRng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  SeededRng root(9);
  SeededRng c0 = root.child(0);
  SeededRng c1 = root.child(1);
  // Distinct child indices must give distinct streams.
  bool all_equal = true;
  SeededRng x0 = root.child(0), x1 = root.child(1);
  for (int i = 0; i < 16; ++i)
    if (x0.next_u64() != x1.next_u64()) all_equal = false;
  CHECK_FALSE(all_equal);
  // Same child index twice gives the same stream.
  SeededRng y0 = root.child(0);
  for (int i = 0; i < 16; ++i) CHECK(c0.next_u64() == y0.next_u64());
  (void)c1;
}

TEST_CASE("rng normal moments match the standard normal") {
  SeededRng rng(4242);
  const int n = 200000;
  double s1 = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    double z = rng.normal();
    s1 += z;
    s2 += z * z;
  }
  const double mean = s1 / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng uniform_pos stays strictly inside (0,1)") {
  SeededRng rng(5);
  for (int i = 0; i < 10000; ++i) {
    double u = rng.uniform_pos();
    CHECK(u > 0.0);
    CHECK(u <= 1.0);
  }
}

TEST_CASE("slice_to_pgm writes a valid P5 image of the requested plane") {
  Volume v(Dims{4, 3, 2}, Vec3{1, 1, 1});
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = double(i);
  auto path = (tmpdir() / "slice.pgm").string();
  slice_to_pgm(v, 2, 1, 0.0, 23.0, path);  // z slice index 1
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  CHECK(magic == "P5");
  CHECK(w == 4);
  CHECK(h == 3);
  CHECK(maxval == 255);
  in.get();  // single whitespace after maxval
  std::string pix((std::istreambuf_iterator<char>(in)), {});
  REQUIRE(pix.size() == std::size_t(w * h));
  // First voxel of slice z=1 has value 12 -> (12-0)/23*255 rounded.
  const unsigned char first = static_cast<unsigned char>(pix[0]);
  CHECK(int(first) == int(std::lround(12.0 / 23.0 * 255.0)));
}
