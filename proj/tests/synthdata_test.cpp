#include "annoboot/synthdata.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "annoboot/blob.hpp"

using namespace annoboot;
using namespace annoboot::synth;
namespace fs = std::filesystem;

namespace {

Scene two_by_two(std::vector<int> cells, int vocab = 4) {
  Scene s;
  s.grid = 2;
  s.vocab = vocab;
  s.cell_px = 8;
  s.cells = std::move(cells);
  return s;
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

blob::ErrorKind read_error_kind(const fs::path& dir) {
  try {
    read_dataset(dir);
  } catch (const blob::BlobError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "read_dataset succeeded";
  return blob::ErrorKind::Io;
}

Dataset sample_dataset(int n) {
  Dataset d;
  d.grid = 4;
  d.vocab = 8;
  d.resolution = 32;
  d.cell_px = 8;
  for (int i = 0; i < n; ++i) d.scenes.push_back(generate_scene(100 + i, SceneConfig{}, i));
  return d;
}

}  // namespace

TEST(GenerateScene, FullDensitySingleGlyph) {
  const Scene s = generate_scene(5, SceneConfig{3, 1, 1.0, 8});
  for (int c : s.cells) EXPECT_EQ(c, 0);
}

TEST(GenerateScene, SeedReplay) {
  EXPECT_EQ(generate_scene(42, SceneConfig{}), generate_scene(42, SceneConfig{}));
  EXPECT_NE(generate_scene(42, SceneConfig{}).cells, generate_scene(43, SceneConfig{}).cells);
}

TEST(GenerateScene, ZeroDensityExhaustsRetries) {
  EXPECT_THROW(generate_scene(1, SceneConfig{4, 8, 0.0, 8}), SceneConfigError);
}

TEST(GenerateScene, InvalidConfigRejected) {
  EXPECT_THROW(generate_scene(1, SceneConfig{1, 8, 0.5, 8}), SceneConfigError);
  EXPECT_THROW(generate_scene(1, SceneConfig{4, 0, 0.5, 8}), SceneConfigError);
  EXPECT_THROW(generate_scene(1, SceneConfig{4, 8, 1.5, 8}), SceneConfigError);
}

TEST(GenerateScene, DensityIsRespected) {
  Rng rng(3);
  int filled = 0, total = 0;
  for (int i = 0; i < 500; ++i) {
    const Scene s = generate_scene(rng, SceneConfig{4, 8, 0.3, 8});
    for (int c : s.cells) {
      EXPECT_LT(c, 8);
      filled += c != kEmpty;
      ++total;
    }
  }
  EXPECT_NEAR(static_cast<double>(filled) / total, 0.3, 0.02);
}

TEST(RenderView, FullCanvasAndDeterminism) {
  const Scene s = generate_scene(9, SceneConfig{});
  const View a = render_view(s, {0, 0, 1, 1}, 32);
  const View b = render_view(s, {0, 0, 1, 1}, 32);
  EXPECT_EQ(a.pixels, b.pixels);
  ASSERT_EQ(a.pixels.size(), 32u * 32u * 3u);
  // At native resolution the render reproduces the canvas.
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      const auto px = canvas_pixel(s, y, x);
      for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(a.pixels[static_cast<std::size_t>((y * 32 + x) * 3 + c)], px[c]);
    }
  }
  for (float v : a.pixels) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(RenderView, SingleCellShowsGlyphPattern) {
  const Scene s = two_by_two({kEmpty, 3, kEmpty, kEmpty});
  const View v = render_view(s, s.cell_box(0, 1), 8);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const auto px = canvas_pixel(s, y, 8 + x);
      for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(v.pixels[static_cast<std::size_t>((y * 8 + x) * 3 + c)], px[c]);
    }
  }
  // Distinct glyphs draw distinct patterns.
  const Scene other = two_by_two({kEmpty, 2, kEmpty, kEmpty});
  EXPECT_NE(render_view(other, other.cell_box(0, 1), 8).pixels, v.pixels);
}

TEST(TrueAnnotationDist, Examples) {
  const Scene s = two_by_two({0, 1, kEmpty, kEmpty}, 2);
  const auto one = true_annotation_dist(s, s.cell_box(0, 0));
  EXPECT_EQ(one, (std::vector<double>{1.0, 0.0, 0.0}));

  const Scene half = two_by_two({0, 1, 0, 1}, 2);
  const auto full = true_annotation_dist(half, {0, 0, 1, 1});
  EXPECT_NEAR(full[0], 0.5, 1e-12);
  EXPECT_NEAR(full[1], 0.5, 1e-12);
  EXPECT_NEAR(full[2], 0.0, 1e-12);

  // 75% of the glyph-0 cell and 25% of the empty cell below it.
  const Scene s2 = two_by_two({0, 1, kEmpty, 1}, 2);
  const auto mixed = true_annotation_dist(s2, {0.125, 0.0, 0.625, 0.5});
  EXPECT_NEAR(mixed[0], 0.75, 1e-12);
  EXPECT_NEAR(mixed[2], 0.25, 1e-12);
}

TEST(TrueAnnotationDist, SumsToOneAndConcentrates) {
  Rng rng(13);
  const geometry::CropConfig crop{0.01, 1.0};
  for (int i = 0; i < 2000; ++i) {
    const Scene s = generate_scene(rng, SceneConfig{});
    const auto p = true_annotation_dist(s, geometry::sample_crop(rng, crop));
    ASSERT_EQ(p.size(), 9u);
    for (double v : p) EXPECT_GE(v, 0.0);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  }
  const Scene s = two_by_two({2, kEmpty, kEmpty, kEmpty});
  const auto p = true_annotation_dist(s, {0.1, 0.1, 0.2, 0.2});
  EXPECT_DOUBLE_EQ(p[2], 1.0);
}

TEST(Dataset, RoundTrip) {
  const auto dir = fresh_dir("annoboot_ds_roundtrip");
  const Dataset d = sample_dataset(10);
  write_dataset(dir, d);
  const Dataset back = read_dataset(dir);
  EXPECT_EQ(back.grid, 4);
  EXPECT_EQ(back.vocab, 8);
  EXPECT_EQ(back.resolution, 32);
  ASSERT_EQ(back.scenes.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(back.scenes[i], d.scenes[i]);
  fs::remove_all(dir);
}

TEST(Dataset, MissingBlob) {
  const auto dir = fresh_dir("annoboot_ds_missing");
  write_dataset(dir, sample_dataset(2));
  fs::remove(dir / "scenes.bin");
  EXPECT_EQ(read_error_kind(dir), blob::ErrorKind::MissingBlob);
  fs::remove_all(dir);
}

TEST(Dataset, BadHeader) {
  const auto dir = fresh_dir("annoboot_ds_header");
  write_dataset(dir, sample_dataset(2));
  {
    std::fstream f(dir / "scenes.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XBT1", 4);
  }
  EXPECT_EQ(read_error_kind(dir), blob::ErrorKind::BadHeader);
  fs::remove_all(dir);
}

TEST(Dataset, Truncated) {
  const auto dir = fresh_dir("annoboot_ds_trunc");
  write_dataset(dir, sample_dataset(2));
  fs::resize_file(dir / "scenes.bin", fs::file_size(dir / "scenes.bin") - 3);
  EXPECT_EQ(read_error_kind(dir), blob::ErrorKind::Truncated);
  fs::remove_all(dir);
}

TEST(Dataset, MalformedManifest) {
  const auto dir = fresh_dir("annoboot_ds_manifest");
  write_dataset(dir, sample_dataset(2));
  std::ofstream(dir / "manifest.json") << "{\"version\": 1, \"G\": ";
  EXPECT_EQ(read_error_kind(dir), blob::ErrorKind::MalformedManifest);
  fs::remove_all(dir);
}

TEST(Dataset, ShapeMismatch) {
  const auto dir = fresh_dir("annoboot_ds_shape");
  Dataset d = sample_dataset(2);
  write_dataset(dir, d);
  // Rewrite only the manifest claiming a different grid.
  std::ifstream in(dir / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  in.close();
  const auto pos = text.find("\"G\": 4");
  ASSERT_NE(pos, std::string::npos) << text;
  text.replace(pos, 6, "\"G\": 5");
  std::ofstream(dir / "manifest.json") << text;
  EXPECT_EQ(read_error_kind(dir), blob::ErrorKind::ShapeMismatch);
  fs::remove_all(dir);
}
