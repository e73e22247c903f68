#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "annoboot/geometry.hpp"
#include "annoboot/rng.hpp"

namespace annoboot::synth {

class SceneConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SceneConfig {
  int grid = 4;         // G: cells per side
  int vocab = 8;        // V: glyph ids in [0, V)
  double density = 0.6; // probability that a cell holds a glyph
  int cell_px = 8;      // P: pattern side in pixels
};

void validate(const SceneConfig& cfg);

inline constexpr int kEmpty = -1;

/// G x G grid of glyph ids (kEmpty for background) on a (G*P) x (G*P) canvas.
struct Scene {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  int grid = 0;
  int vocab = 0;
  int cell_px = 0;
  std::vector<int> cells;  // row-major, size grid*grid

  int at(int row, int col) const { return cells[static_cast<std::size_t>(row * grid + col)]; }
  int canvas_px() const { return grid * cell_px; }
  /// Annotation count: V glyphs plus background.
  int annotations() const { return vocab + 1; }
  int background_index() const { return vocab; }
  geometry::BBox cell_box(int row, int col) const;
  bool operator==(const Scene&) const = default;
};

/// Each cell independently holds a uniform glyph with probability `density`.
/// All-empty draws are redrawn up to 10 times, then rejected.
Scene generate_scene(Rng& rng, const SceneConfig& cfg, std::uint64_t id = 0);

/// Convenience: scene from a seed (rng seeded with `seed`).
Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg, std::uint64_t id = 0);

/// Rendered crop at fixed resolution, R x R x 3 row-major, values in [0, 1].
struct View {
  int resolution = 0;
  std::vector<float> pixels;
  geometry::BBox box;
  std::uint64_t scene_id = 0;
};

/// RGB of canvas pixel (py, px); background cells are a fixed gray.
std::array<float, 3> canvas_pixel(const Scene& scene, int py, int px);

/// Bilinear resampling of the bbox sub-window to R x R.
View render_view(const Scene& scene, const geometry::BBox& box, int resolution);

/// Area-weighted annotation distribution of the window (V glyphs, then background).
std::vector<double> true_annotation_dist(const Scene& scene, const geometry::BBox& box);

/// Scene corpus with its generation parameters, as stored on disk.
struct Dataset {
  int version = 1;
  int grid = 0;
  int vocab = 0;
  int resolution = 0;
  int cell_px = 0;
  std::vector<Scene> scenes;
};

/// Writes manifest.json and scenes.bin into `dir` (created if absent).
void write_dataset(const std::filesystem::path& dir, const Dataset& data);

/// Throws blob::BlobError with a kind naming the failure.
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace annoboot::synth
