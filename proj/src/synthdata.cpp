#include "annoboot/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include <json.hpp>

#include "annoboot/blob.hpp"

namespace annoboot::synth {

using geometry::BBox;
using json = nlohmann::json;

void validate(const SceneConfig& cfg) {
  if (cfg.grid < 2) throw SceneConfigError("grid must be >= 2");
  if (cfg.vocab < 1 || cfg.vocab > 254) throw SceneConfigError("vocab must lie in [1, 254]");
  if (!(cfg.density >= 0.0 && cfg.density <= 1.0)) {
    throw SceneConfigError("density must lie in [0, 1]");
  }
  if (cfg.cell_px < 1) throw SceneConfigError("cell_px must be positive");
}

BBox Scene::cell_box(int row, int col) const {
  const double s = 1.0 / grid;
  return BBox{row * s, col * s, (row + 1) * s, (col + 1) * s};
}

Scene generate_scene(Rng& rng, const SceneConfig& cfg, std::uint64_t id) {
  validate(cfg);
  Scene scene;
  scene.id = id;
  scene.grid = cfg.grid;
  scene.vocab = cfg.vocab;
  scene.cell_px = cfg.cell_px;
  const auto n = static_cast<std::size_t>(cfg.grid * cfg.grid);
  for (int attempt = 0; attempt < 10; ++attempt) {
    scene.cells.assign(n, kEmpty);
    bool any = false;
    for (auto& c : scene.cells) {
      // Always consume two draws per cell so streams stay aligned across densities.
      const bool filled = rng.uniform() < cfg.density;
      const auto glyph = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.vocab)));
      if (filled) {
        c = glyph;
        any = true;
      }
    }
    if (any) return scene;
  }
  throw SceneConfigError("could not draw a non-empty scene in 10 attempts (density too low)");
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& cfg, std::uint64_t id) {
  Rng rng(seed);
  Scene s = generate_scene(rng, cfg, id);
  s.seed = seed;
  return s;
}

namespace {

constexpr float kBackground[3] = {0.5f, 0.5f, 0.5f};

struct GlyphStyle {
  float fg[3];
  float bg[3];
  std::uint64_t mask_seed;
};

GlyphStyle glyph_style(int glyph) {
  GlyphStyle s{};
  const std::uint64_t h = mix64(0xa11ce5ULL + static_cast<std::uint64_t>(glyph) * 7919ULL);
  // Hue spread by the golden angle keeps neighbouring ids far apart in color.
  const double hue = std::fmod(glyph * 0.61803398875, 1.0) * 6.0;
  const double x = 1.0 - std::fabs(std::fmod(hue, 2.0) - 1.0);
  double rgb[3] = {0, 0, 0};
  switch (static_cast<int>(hue)) {
    case 0: rgb[0] = 1; rgb[1] = x; break;
    case 1: rgb[0] = x; rgb[1] = 1; break;
    case 2: rgb[1] = 1; rgb[2] = x; break;
    case 3: rgb[1] = x; rgb[2] = 1; break;
    case 4: rgb[0] = x; rgb[2] = 1; break;
    default: rgb[0] = 1; rgb[2] = x; break;
  }
  const double level = 0.7 + 0.3 * static_cast<double>(h & 0xff) / 255.0;
  for (int c = 0; c < 3; ++c) {
    s.fg[c] = static_cast<float>(0.1 + 0.85 * level * rgb[c]);
    s.bg[c] = static_cast<float>(0.05 + 0.2 * (1.0 - rgb[c]));
  }
  s.mask_seed = h;
  return s;
}

bool glyph_mask(const GlyphStyle& s, int glyph, int py, int px, int cell_px) {
  // Coarse 4x4 bitmap scaled to the cell; every glyph gets a distinct bit pattern.
  const int qy = std::min(3, py * 4 / cell_px);
  const int qx = std::min(3, px * 4 / cell_px);
  const std::uint64_t bits = (s.mask_seed >> 8) ^ (static_cast<std::uint64_t>(glyph) * 0x9249ULL);
  return ((bits >> (qy * 4 + qx)) & 1ULL) != 0;
}

}  // namespace

std::array<float, 3> canvas_pixel(const Scene& scene, int py, int px) {
  const int row = py / scene.cell_px;
  const int col = px / scene.cell_px;
  const int glyph = scene.at(row, col);
  if (glyph == kEmpty) return {kBackground[0], kBackground[1], kBackground[2]};
  const GlyphStyle s = glyph_style(glyph);
  const bool on = glyph_mask(s, glyph, py - row * scene.cell_px, px - col * scene.cell_px,
                             scene.cell_px);
  const float* c = on ? s.fg : s.bg;
  return {c[0], c[1], c[2]};
}

View render_view(const Scene& scene, const BBox& box, int resolution) {
  View view;
  view.resolution = resolution;
  view.box = box;
  view.scene_id = scene.id;
  view.pixels.resize(static_cast<std::size_t>(resolution * resolution * 3));
  const int size = scene.canvas_px();
  const double step_y = box.height() / resolution;
  const double step_x = box.width() / resolution;
  auto coord = [size](double v) {
    return std::clamp(v * size - 0.5, 0.0, static_cast<double>(size - 1));
  };
  for (int u = 0; u < resolution; ++u) {
    const double cy = coord(box.y_min + (u + 0.5) * step_y);
    const int y0 = static_cast<int>(std::floor(cy));
    const int y1 = std::min(y0 + 1, size - 1);
    const double fy = cy - y0;
    for (int v = 0; v < resolution; ++v) {
      const double cx = coord(box.x_min + (v + 0.5) * step_x);
      const int x0 = static_cast<int>(std::floor(cx));
      const int x1 = std::min(x0 + 1, size - 1);
      const double fx = cx - x0;
      const auto p00 = canvas_pixel(scene, y0, x0);
      const auto p01 = canvas_pixel(scene, y0, x1);
      const auto p10 = canvas_pixel(scene, y1, x0);
      const auto p11 = canvas_pixel(scene, y1, x1);
      float* out = &view.pixels[static_cast<std::size_t>((u * resolution + v) * 3)];
      for (int c = 0; c < 3; ++c) {
        const double top = p00[c] * (1.0 - fx) + p01[c] * fx;
        const double bot = p10[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = static_cast<float>(top * (1.0 - fy) + bot * fy);
      }
    }
  }
  return view;
}

std::vector<double> true_annotation_dist(const Scene& scene, const BBox& box) {
  std::vector<double> p(static_cast<std::size_t>(scene.annotations()), 0.0);
  for (int r = 0; r < scene.grid; ++r) {
    for (int c = 0; c < scene.grid; ++c) {
      const double a = geometry::intersection_area(scene.cell_box(r, c), box);
      if (a <= 0.0) continue;
      const int g = scene.at(r, c);
      p[static_cast<std::size_t>(g == kEmpty ? scene.background_index() : g)] += a;
    }
  }
  double total = 0.0;
  for (double v : p) total += v;
  if (total <= 0.0) {
    throw geometry::GeometryError("window does not overlap the canvas: " + geometry::to_string(box));
  }
  for (double& v : p) v /= total;
  return p;
}

namespace {

using blob::BlobError;
using blob::ErrorKind;

constexpr const char* kBlobFile = "scenes.bin";

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw BlobError(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::uint8_t> bytes;
  json entries = json::array();
  for (const auto& s : data.scenes) {
    if (s.grid != data.grid) throw BlobError(ErrorKind::ShapeMismatch, "scene grid differs from dataset grid");
    std::vector<std::uint8_t> cells(s.cells.size());
    std::transform(s.cells.begin(), s.cells.end(), cells.begin(),
                   [](int c) { return static_cast<std::uint8_t>(c == kEmpty ? 0 : c + 1); });
    const std::size_t offset = bytes.size();
    const auto g = static_cast<std::uint32_t>(s.grid);
    blob::encode(blob::make_u8({g, g}, std::move(cells)), bytes);
    entries.push_back({{"scene_id", s.id}, {"seed", s.seed}, {"blob", kBlobFile}, {"offset", offset}});
  }
  blob::write_file(dir / kBlobFile, bytes);
  json manifest = {{"version", data.version}, {"G", data.grid},  {"V", data.vocab},
                   {"R", data.resolution},    {"cell_px", data.cell_px}, {"scenes", entries}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw BlobError(ErrorKind::Io, "cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
  if (!out) throw BlobError(ErrorKind::Io, "short write of manifest in " + dir.string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw BlobError(ErrorKind::Io, "cannot open " + manifest_path.string());
  Dataset data;
  std::vector<std::tuple<std::uint64_t, std::uint64_t, std::string, std::size_t>> entries;
  try {
    const json m = json::parse(in);
    data.version = m.at("version").get<int>();
    data.grid = m.at("G").get<int>();
    data.vocab = m.at("V").get<int>();
    data.resolution = m.at("R").get<int>();
    data.cell_px = m.value("cell_px", 8);
    for (const auto& e : m.at("scenes")) {
      entries.emplace_back(e.at("scene_id").get<std::uint64_t>(), e.at("seed").get<std::uint64_t>(),
                           e.at("blob").get<std::string>(), e.at("offset").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    throw BlobError(ErrorKind::MalformedManifest, manifest_path.string() + ": " + e.what());
  }
  if (data.grid < 2 || data.vocab < 1 || data.cell_px < 1) {
    throw BlobError(ErrorKind::MalformedManifest, "G, V and cell_px must be positive");
  }
  std::map<std::string, std::vector<std::uint8_t>> files;
  for (const auto& [id, seed, file, offset] : entries) {
    auto it = files.find(file);
    if (it == files.end()) {
      const auto path = dir / file;
      if (!std::filesystem::exists(path)) {
        throw BlobError(ErrorKind::MissingBlob, path.string() + " referenced by manifest does not exist");
      }
      it = files.emplace(file, blob::read_file(path)).first;
    }
    const blob::Blob b = blob::decode(it->second, offset);
    const auto g = static_cast<std::uint32_t>(data.grid);
    if (b.dtype != blob::DType::U8 || b.dims != std::vector<std::uint32_t>{g, g}) {
      throw BlobError(ErrorKind::ShapeMismatch, "scene " + std::to_string(id) + " is not a u8 [G, G] grid");
    }
    Scene s;
    s.id = id;
    s.seed = seed;
    s.grid = data.grid;
    s.vocab = data.vocab;
    s.cell_px = data.cell_px;
    s.cells.reserve(b.u8.size());
    for (auto v : b.u8) {
      if (v > data.vocab) {
        throw BlobError(ErrorKind::ShapeMismatch, "scene " + std::to_string(id) + " has glyph id outside vocab");
      }
      s.cells.push_back(v == 0 ? kEmpty : v - 1);
    }
    data.scenes.push_back(std::move(s));
  }
  return data;
}

}  // namespace annoboot::synth
