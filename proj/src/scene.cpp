#include "m2occ/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "m2occ/errors.hpp"
#include "m2occ/rng.hpp"
#include "m2occ/serialize.hpp"

namespace m2occ {

namespace {

constexpr char kSceneMagic[4] = {'M', '2', 'S', 'C'};
constexpr std::uint32_t kSceneVersion = 1;

constexpr std::array<std::array<double, 3>, kNumClasses> kClassColor = {{
    {0.0, 0.0, 0.0},  // free (unused: background)
    {1.0, 0.0, 0.0},
    {0.0, 1.0, 0.0},
    {0.0, 0.0, 1.0},
    {1.0, 1.0, 0.0},
    {0.0, 1.0, 1.0},
}};

struct Footprint {
  long x0, y0, x1, y1;  // inclusive voxel bounds
};

class Placer {
 public:
  Placer(const SceneConfig& cfg, VoxelGrid& grid, CounterRng& rng) : cfg_(cfg), grid_(grid), rng_(rng) {}

  // Centre of voxel i along an axis, metres.
  double centre(long i) const {
    return (static_cast<double>(i) + 0.5) * grid_.spec.voxel_size() - grid_.spec.half_extent_m;
  }

  bool free_above_ground(const Footprint& f, std::size_t z_top) const {
    const auto& s = grid_.spec;
    if (f.x0 < 0 || f.y0 < 0 || f.x1 >= static_cast<long>(s.nx) || f.y1 >= static_cast<long>(s.ny)) return false;
    for (long x = f.x0; x <= f.x1; ++x)
      for (long y = f.y0; y <= f.y1; ++y) {
        // ego keep-out
        if (std::abs(centre(x)) < 1.5 && std::abs(centre(y)) < 1.5) return false;
        for (std::size_t z = 1; z <= z_top; ++z)
          if (grid_.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z) != 0) return false;
      }
    return true;
  }

  void fill(const Footprint& f, std::size_t z_top, SemanticClass c) {
    for (long x = f.x0; x <= f.x1; ++x)
      for (long y = f.y0; y <= f.y1; ++y)
        for (std::size_t z = 1; z <= z_top; ++z)
          grid_.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), z) = static_cast<std::uint8_t>(c);
  }

  Footprint random_box(long len_a, long len_b) {
    const auto& s = grid_.spec;
    const bool along_x = rng_.below(2) == 0;
    const long lx = along_x ? len_a : len_b;
    const long ly = along_x ? len_b : len_a;
    const long x0 = static_cast<long>(rng_.below(s.nx - static_cast<std::size_t>(lx) + 1));
    const long y0 = static_cast<long>(rng_.below(s.ny - static_cast<std::size_t>(ly) + 1));
    return {x0, y0, x0 + lx - 1, y0 + ly - 1};
  }

  // Long side along x when along_x, otherwise along y.
  Footprint aligned_box(long len, long depth, bool along_x) {
    const auto& s = grid_.spec;
    const long lx = along_x ? len : depth;
    const long ly = along_x ? depth : len;
    const long x0 = static_cast<long>(rng_.below(s.nx - static_cast<std::size_t>(lx) + 1));
    const long y0 = static_cast<long>(rng_.below(s.ny - static_cast<std::size_t>(ly) + 1));
    return {x0, y0, x0 + lx - 1, y0 + ly - 1};
  }

  bool touches_road(const Footprint& f) const {
    for (long x = f.x0; x <= f.x1; ++x)
      for (long y = f.y0; y <= f.y1; ++y)
        if (grid_.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), 0) ==
            static_cast<std::uint8_t>(SemanticClass::drivable))
          return true;
    return false;
  }

  double min_centre_range(const Footprint& f) const {
    double best = std::numeric_limits<double>::infinity();
    for (long x = f.x0; x <= f.x1; ++x)
      for (long y = f.y0; y <= f.y1; ++y) best = std::min(best, std::hypot(centre(x), centre(y)));
    return best;
  }

  bool on_road(const Footprint& f) const {
    for (long x = f.x0; x <= f.x1; ++x)
      for (long y = f.y0; y <= f.y1; ++y)
        if (grid_.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), 0) !=
            static_cast<std::uint8_t>(SemanticClass::drivable))
          return false;
    return true;
  }

  template <typename Propose, typename Accept>
  void place(std::size_t count, const char* what, Propose propose, Accept accept, std::size_t z_top,
             SemanticClass c) {
    place(count, what, propose, accept, z_top, c, [z_top] { return z_top; });
  }

  template <typename Propose, typename Accept, typename Height>
  void place(std::size_t count, const char* what, Propose propose, Accept accept, std::size_t z_max,
             SemanticClass c, Height height) {
    for (std::size_t n = 0; n < count; ++n) {
      bool placed = false;
      const std::size_t z_top = std::min(height(), z_max);
      for (std::size_t attempt = 0; attempt < cfg_.max_retries && !placed; ++attempt) {
        const Footprint f = propose();
        if (free_above_ground(f, z_top) && accept(f, attempt)) {
          fill(f, z_top, c);
          placed = true;
        }
      }
      if (!placed) {
        throw GenerationError(std::string("could not place ") + what + " after " +
                              std::to_string(cfg_.max_retries) + " attempts");
      }
    }
  }

 private:
  const SceneConfig& cfg_;
  VoxelGrid& grid_;
  CounterRng& rng_;
};

std::size_t draw_count(CounterRng& rng, CountRange r) {
  if (r.max < r.min) throw ParameterError("object count range has max < min");
  return r.min + static_cast<std::size_t>(rng.below(r.max - r.min + 1));
}

// Returns whether the main road runs along x.
bool lay_ground(VoxelGrid& grid, CounterRng& rng) {
  const auto& s = grid.spec;
  const double vs = s.voxel_size();
  const bool main_along_x = rng.below(2) == 0;
  const double main_half = rng.uniform(1.5, 3.0);
  const double main_offset = rng.uniform(-1.0, 1.0);
  const bool cross = rng.uniform() < 0.5;
  const double cross_half = rng.uniform(1.0, 2.5);
  const double cross_offset = rng.uniform(-4.0, 4.0);
  for (std::size_t x = 0; x < s.nx; ++x)
    for (std::size_t y = 0; y < s.ny; ++y) {
      const double cx = (static_cast<double>(x) + 0.5) * vs - s.half_extent_m;
      const double cy = (static_cast<double>(y) + 0.5) * vs - s.half_extent_m;
      const double across = main_along_x ? cy : cx;
      const double along = main_along_x ? cx : cy;
      const bool road = std::abs(across - main_offset) <= main_half ||
                        (cross && std::abs(along - cross_offset) <= cross_half);
      grid.at(x, y, 0) = static_cast<std::uint8_t>(road ? SemanticClass::drivable : SemanticClass::terrain);
    }
  return main_along_x;
}

struct Hit {
  std::uint8_t label = 0;
  double distance = 0.0;
};

// Exact voxel traversal of one layer from the grid centre along `azimuth`.
Hit cast_ray(const VoxelGrid& grid, std::size_t z, double azimuth) {
  const auto& s = grid.spec;
  const double vs = s.voxel_size();
  const double dx = std::cos(azimuth);
  const double dy = -std::sin(azimuth);
  // Start at the centre, in grid units.
  double px = s.half_extent_m / vs;
  double py = s.half_extent_m / vs;
  long ix = static_cast<long>(std::floor(px));
  long iy = static_cast<long>(std::floor(py));
  const long step_x = dx > 0 ? 1 : -1;
  const long step_y = dy > 0 ? 1 : -1;
  const double inf = std::numeric_limits<double>::infinity();
  const double t_dx = dx != 0.0 ? std::abs(1.0 / dx) : inf;
  const double t_dy = dy != 0.0 ? std::abs(1.0 / dy) : inf;
  double t_max_x = dx != 0.0 ? ((dx > 0 ? (ix + 1 - px) : (px - ix)) * t_dx) : inf;
  double t_max_y = dy != 0.0 ? ((dy > 0 ? (iy + 1 - py) : (py - iy)) * t_dy) : inf;
  double t = 0.0;
  while (ix >= 0 && iy >= 0 && ix < static_cast<long>(s.nx) && iy < static_cast<long>(s.ny)) {
    const std::uint8_t label = grid.at(static_cast<std::size_t>(ix), static_cast<std::size_t>(iy), z);
    if (label != 0) return {label, t * vs};
    if (t_max_x < t_max_y) {
      t = t_max_x;
      t_max_x += t_dx;
      ix += step_x;
    } else {
      t = t_max_y;
      t_max_y += t_dy;
      iy += step_y;
    }
  }
  return {};
}

// Ground class seen at a fixed look-down distance along `azimuth`.
Hit sample_ground(const VoxelGrid& grid, double azimuth) {
  const auto& s = grid.spec;
  const double dist = 0.5 * s.half_extent_m;
  const double x = dist * std::cos(azimuth) + s.half_extent_m;
  const double y = -dist * std::sin(azimuth) + s.half_extent_m;
  const auto ix = std::min(static_cast<std::size_t>(x / s.voxel_size()), s.nx - 1);
  const auto iy = std::min(static_cast<std::size_t>(y / s.voxel_size()), s.ny - 1);
  return {grid.at(ix, iy, 0), dist};
}

std::vector<Tensor> render_views(const VoxelGrid& grid, const SceneConfig& cfg) {
  const CameraRing& ring = cfg.ring;
  const std::size_t h = cfg.image_height;
  const std::size_t cols = ring.panorama_columns();
  const std::size_t ch = cfg.image_channels();
  const double max_range = grid.spec.max_range();
  // Panorama (ch, h, cols); each view is a window of it.
  std::vector<double> pano(ch * h * cols, 0.0);
  for (std::size_t row = 0; row < h; ++row) {
    const std::size_t z = row * grid.spec.nz / h;
    for (std::size_t g = 0; g < cols; ++g) {
      const double az = ring.panorama_azimuth(g);
      const Hit hit = (z == 0 && cfg.ground) ? sample_ground(grid, az) : cast_ray(grid, z, az);
      if (hit.label == 0) continue;
      for (std::size_t c = 0; c < 3; ++c) pano[(c * h + row) * cols + g] = kClassColor[hit.label][c];
      const auto depth = depth_encoding(hit.distance, cfg.depth_bins, max_range);
      for (std::size_t b = 0; b < cfg.depth_bins; ++b) pano[((3 + b) * h + row) * cols + g] = depth[b];
    }
  }
  const std::size_t w = ring.feature_width;
  std::vector<Tensor> images;
  for (std::size_t v = 0; v < ring.size(); ++v) {
    std::vector<double> img(ch * h * w);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t row = 0; row < h; ++row)
        for (std::size_t col = 0; col < w; ++col) {
          const std::size_t g = (v * ring.panorama_stride() + col) % cols;
          img[(c * h + row) * w + col] = pano[(c * h + row) * cols + g];
        }
    images.emplace_back(Shape{ch, h, w}, std::move(img));
  }
  return images;
}

}  // namespace

std::string_view class_name(std::size_t label) {
  static constexpr std::string_view kNames[kNumClasses] = {"free",     "drivable", "vehicle",
                                                           "building", "pole",     "terrain"};
  return label < kNumClasses ? kNames[label] : "unknown";
}

double GridSpec::max_range() const { return half_extent_m * std::numbers::sqrt2; }

void GridSpec::validate() const {
  if (nx == 0 || ny == 0 || nz < 2) throw ParameterError("grid needs positive extents and at least 2 layers");
  if (nx != ny) throw ParameterError("grid must be square in the ground plane");
  if (!(half_extent_m > 0.0)) throw ParameterError("grid extent must be positive");
}

std::array<std::size_t, kNumClasses> VoxelGrid::histogram() const {
  std::array<std::size_t, kNumClasses> h{};
  for (std::uint8_t l : labels) ++h[l];
  return h;
}

double VoxelGrid::free_fraction() const {
  return static_cast<double>(histogram()[0]) / static_cast<double>(labels.size());
}

SceneConfig SceneConfig::desk() { return {}; }

SceneConfig SceneConfig::empty() {
  SceneConfig c;
  c.ground = false;
  c.min_free = 0.0;
  c.max_free = 1.0;
  c.buildings = {0, 0};
  c.vehicles = {0, 0};
  c.poles = {0, 0};
  return c;
}

void SceneConfig::validate() const {
  grid.validate();
  ring.validate();
  if (image_height == 0 || image_height > grid.nz * 8) throw ParameterError("bad image height");
  if (depth_bins == 0) throw ParameterError("need at least one depth bin");
  if (!(min_free >= 0.0 && min_free <= max_free && max_free <= 1.0)) throw ParameterError("bad free-fraction band");
}

std::vector<double> depth_encoding(double range_m, std::size_t bins, double max_range) {
  std::vector<double> out(bins);
  const double width = max_range / static_cast<double>(bins);
  const double sigma = 0.6 * width;
  for (std::size_t b = 0; b < bins; ++b) {
    const double centre = (static_cast<double>(b) + 0.5) * width;
    const double d = (range_m - centre) / sigma;
    out[b] = std::exp(-0.5 * d * d);
  }
  return out;
}

SceneSample generate_scene(std::uint64_t seed, const SceneConfig& config, std::uint64_t sample_id) {
  config.validate();
  CounterRng rng(seed);
  SceneSample sample;
  sample.seed = seed;
  sample.sample_id = sample_id;
  sample.grid = VoxelGrid(config.grid);
  VoxelGrid& grid = sample.grid;
  const bool road_along_x = config.ground ? lay_ground(grid, rng) : rng.below(2) == 0;

  const VoxelGrid ground = grid;
  const std::size_t top = grid.spec.nz - 1;
  const double vs = grid.spec.voxel_size();
  const auto meters = [vs](double m) { return std::max(1L, std::lround(m / vs)); };
  // Street frontage: most buildings run parallel to the main road.

  bool accepted = false;
  std::string last_error = "free fraction outside band";
  for (std::size_t attempt = 0; attempt < config.max_retries && !accepted; ++attempt) {
    grid = ground;
    Placer placer(config, grid, rng);
    try {
      placer.place(
          draw_count(rng, config.buildings), "building",
          [&] {
            const long len = meters(rng.uniform(4.0, 8.0));
            const long depth = meters(rng.uniform(2.0, 3.0));
            if (rng.uniform() < 0.75) return placer.aligned_box(len, depth, road_along_x);
            return placer.random_box(len, depth);
          },
          [&](const Footprint& f, std::size_t) {
            return placer.min_centre_range(f) >= 0.55 * grid.spec.half_extent_m &&
                   (!config.ground || !placer.touches_road(f));
          },
          top, SemanticClass::building, [&] { return 2 + static_cast<std::size_t>(rng.below(top - 1)); });
      placer.place(
          draw_count(rng, config.vehicles), "vehicle",
          [&] { return placer.aligned_box(meters(4.0), meters(2.0), road_along_x); },
          [&](const Footprint& f, std::size_t tries) {
            return !config.ground || tries >= config.max_retries / 2 || placer.on_road(f);
          },
          1, SemanticClass::vehicle);
      placer.place(
          draw_count(rng, config.poles), "pole", [&] { return placer.random_box(1, 1); },
          [](const Footprint&, std::size_t) { return true; }, top, SemanticClass::pole);
    } catch (const GenerationError& e) {
      last_error = e.what();
      continue;
    }
    const double free = grid.free_fraction();
    accepted = free >= config.min_free && free <= config.max_free;
  }
  if (!accepted) {
    throw GenerationError("scene seed " + std::to_string(seed) + ": no valid layout after " +
                          std::to_string(config.max_retries) + " attempts (" + last_error + ")");
  }

  sample.images = render_views(grid, config);
  return sample;
}

std::string_view split_name(Split s) { return s == Split::train ? "train" : "val"; }

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw ParameterError("unknown split " + std::string(s));
}

std::uint64_t scene_seed(Split split, std::uint64_t base_seed, std::uint64_t index) {
  if (index >= (1ULL << 31)) throw ParameterError("scene index too large");
  return (base_seed << 32) | (split == Split::val ? (1ULL << 31) : 0ULL) | index;
}

SceneDataset::SceneDataset(Split split, std::size_t size, std::uint64_t base_seed, SceneConfig config)
    : config_(std::move(config)) {
  if (size == 0) throw ParameterError("dataset size must be positive");
  samples_.reserve(size);
  for (std::size_t i = 0; i < size; ++i) samples_.push_back(generate_scene(scene_seed(split, base_seed, i), config_, i));
}

SceneDataset::SceneDataset(std::vector<SceneSample> samples, SceneConfig config)
    : config_(std::move(config)), samples_(std::move(samples)) {}

std::array<std::size_t, kNumClasses> SceneDataset::histogram() const {
  std::array<std::size_t, kNumClasses> h{};
  for (const auto& s : samples_) {
    const auto sh = s.grid.histogram();
    for (std::size_t k = 0; k < kNumClasses; ++k) h[k] += sh[k];
  }
  return h;
}

void write_scene(const std::filesystem::path& path, const SceneSample& sample, const SceneConfig& config) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  BinaryWriter w(os);
  w.bytes(kSceneMagic, 4);
  w.u32(kSceneVersion);
  w.u64(sample.seed);
  w.u64(sample.sample_id);
  const GridSpec& g = sample.grid.spec;
  w.u32(static_cast<std::uint32_t>(g.nx));
  w.u32(static_cast<std::uint32_t>(g.ny));
  w.u32(static_cast<std::uint32_t>(g.nz));
  w.f64(g.half_extent_m);
  w.u32(static_cast<std::uint32_t>(config.ring.size()));
  w.u32(static_cast<std::uint32_t>(config.ring.feature_width));
  w.u32(static_cast<std::uint32_t>(config.ring.overlap_cols));
  w.u32(static_cast<std::uint32_t>(config.image_height));
  w.u32(static_cast<std::uint32_t>(config.depth_bins));
  w.u8(config.ground ? 1 : 0);
  w.bytes(sample.grid.labels.data(), sample.grid.labels.size());
  for (const Tensor& img : sample.images)
    for (double v : img.data()) w.f64(v);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

SceneSample read_scene(const std::filesystem::path& path, SceneConfig* config_out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  BinaryReader r(is);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kSceneMagic)) throw FormatError(path.string() + " is not a scene file");
  if (r.u32() != kSceneVersion) throw FormatError("unsupported scene file version in " + path.string());
  SceneSample s;
  s.seed = r.u64();
  s.sample_id = r.u64();
  SceneConfig cfg;
  cfg.grid.nx = r.u32();
  cfg.grid.ny = r.u32();
  cfg.grid.nz = r.u32();
  cfg.grid.half_extent_m = r.f64();
  const std::size_t views = r.u32();
  const std::size_t width = r.u32();
  const std::size_t overlap = r.u32();
  cfg.ring = CameraRing::with_views(views, width, overlap);
  cfg.image_height = r.u32();
  cfg.depth_bins = r.u32();
  cfg.ground = r.u8() != 0;
  cfg.validate();
  s.grid = VoxelGrid(cfg.grid);
  r.bytes(s.grid.labels.data(), s.grid.labels.size());
  for (std::uint8_t l : s.grid.labels)
    if (l >= kNumClasses) throw FormatError("label out of range in " + path.string());
  const Shape img_shape{cfg.image_channels(), cfg.image_height, cfg.image_width()};
  for (std::size_t v = 0; v < views; ++v) {
    std::vector<double> data(shape_numel(img_shape));
    for (double& x : data) x = r.f64();
    s.images.emplace_back(img_shape, std::move(data));
  }
  if (config_out) *config_out = cfg;
  return s;
}

SceneDataset load_scene_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw FormatError("dataset directory " + dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".m2s") files.push_back(e.path());
  if (files.empty()) throw FormatError("no scene files in " + dir.string());
  std::sort(files.begin(), files.end());
  std::vector<SceneSample> samples;
  SceneConfig cfg, first;
  for (std::size_t i = 0; i < files.size(); ++i) {
    samples.push_back(read_scene(files[i], &cfg));
    if (i == 0) {
      first = cfg;
    } else if (!(cfg.grid == first.grid) || cfg.ring.names != first.ring.names ||
               cfg.ring.feature_width != first.ring.feature_width ||
               cfg.ring.overlap_cols != first.ring.overlap_cols || cfg.image_height != first.image_height ||
               cfg.depth_bins != first.depth_bins) {
      throw FormatError("scene " + files[i].string() + " has different dimensions from " + files[0].string());
    }
  }
  return SceneDataset(std::move(samples), first);
}

}  // namespace m2occ
