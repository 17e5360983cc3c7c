#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "m2occ/camera_ring.hpp"
#include "m2occ/tensor.hpp"

namespace m2occ {

// Semantic classes of the synthetic benchmark; 0 is free space.
enum class SemanticClass : std::uint8_t {
  free = 0,
  drivable = 1,
  vehicle = 2,
  building = 3,
  pole = 4,
  terrain = 5,
};
inline constexpr std::size_t kNumClasses = 6;  // including free
std::string_view class_name(std::size_t label);

struct GridSpec {
  std::size_t nx = 16;
  std::size_t ny = 16;
  std::size_t nz = 4;
  double half_extent_m = 8.0;  // ground-plane range [-h, h] on both axes

  static GridSpec desk() { return {}; }
  static GridSpec paper() { return {200, 200, 16, 50.0}; }

  std::size_t voxel_count() const { return nx * ny * nz; }
  double voxel_size() const { return 2.0 * half_extent_m / static_cast<double>(nx); }
  double max_range() const;  // centre to ground-plane corner
  // Flat index, z fastest.
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (x * ny + y) * nz + z; }
  void validate() const;
  bool operator==(const GridSpec&) const = default;
};

struct VoxelGrid {
  GridSpec spec;
  std::vector<std::uint8_t> labels;  // voxel_count entries, values < kNumClasses

  VoxelGrid() = default;
  explicit VoxelGrid(GridSpec s) : spec(s), labels(s.voxel_count(), 0) {}

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const { return labels[spec.index(x, y, z)]; }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t z) { return labels[spec.index(x, y, z)]; }
  std::array<std::size_t, kNumClasses> histogram() const;
  double free_fraction() const;
};

struct CountRange {
  std::size_t min = 0;
  std::size_t max = 0;
};

struct SceneConfig {
  GridSpec grid;
  CameraRing ring = CameraRing::standard(16);
  std::size_t image_height = 4;  // one row per voxel layer band
  std::size_t depth_bins = 6;
  bool ground = true;
  CountRange buildings{2, 3};
  CountRange vehicles{1, 4};
  CountRange poles{1, 4};
  std::size_t max_retries = 200;
  // Accepted free-voxel fraction; object placement is redrawn until inside.
  double min_free = 0.60;
  double max_free = 0.95;

  static SceneConfig desk();
  // No ground, no objects: every label free and every image background.
  static SceneConfig empty();

  std::size_t image_channels() const { return 3 + depth_bins; }
  std::size_t image_width() const { return ring.feature_width; }
  void validate() const;
};

// Soft one-hot encoding of a metric range over `bins` Gaussian bins spanning
// [0, max_range]. Shared by the renderer and the lift's voxel positions.
std::vector<double> depth_encoding(double range_m, std::size_t bins, double max_range);

struct SceneSample {
  VoxelGrid grid;
  std::vector<Tensor> images;  // per view (C_in, H_img, W_img)
  std::uint64_t sample_id = 0;
  std::uint64_t seed = 0;
};

// Seeded scene: ground plane (drivable road bands over terrain), buildings
// near the periphery, vehicles, and poles. Each view renders a window of a
// cylindrical panorama, so adjacent windows share their overlap columns
// pixel for pixel. Throws GenerationError when placement keeps failing.
SceneSample generate_scene(std::uint64_t seed, const SceneConfig& config, std::uint64_t sample_id = 0);

enum class Split { train, val };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

// Train and val seeds never collide for the same base seed.
std::uint64_t scene_seed(Split split, std::uint64_t base_seed, std::uint64_t index);

// Deterministic, lazily generated dataset split.
class SceneDataset {
 public:
  SceneDataset(Split split, std::size_t size, std::uint64_t base_seed, SceneConfig config);
  // Adopts already generated or loaded samples.
  SceneDataset(std::vector<SceneSample> samples, SceneConfig config);

  std::size_t size() const { return samples_.size(); }
  const SceneSample& operator[](std::size_t i) const { return samples_.at(i); }
  const SceneConfig& config() const { return config_; }
  std::array<std::size_t, kNumClasses> histogram() const;

  auto begin() const { return samples_.begin(); }
  auto end() const { return samples_.end(); }

 private:
  SceneConfig config_;
  std::vector<SceneSample> samples_;
};

// Scene dump: header (magic, dims, ring, seed, id) + one byte per voxel +
// float64 per-view images.
void write_scene(const std::filesystem::path& path, const SceneSample& sample, const SceneConfig& config);
SceneSample read_scene(const std::filesystem::path& path, SceneConfig* config_out = nullptr);
// Loads every *.m2s file in `dir`, sorted by file name.
SceneDataset load_scene_dir(const std::filesystem::path& dir);

}  // namespace m2occ
