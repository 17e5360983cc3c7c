#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace m2occ {

// Cyclic surround-view layout. View i looks along yaw i * 2pi/N; adjacent
// windows share `overlap_cols` feature columns.
struct CameraRing {
  std::vector<std::string> names;
  std::size_t feature_width = 16;
  std::size_t overlap_cols = 4;

  // Six-camera rig (FRONT, FRONT_RIGHT, ..., FRONT_LEFT) with w_ov = W/4.
  static CameraRing standard(std::size_t feature_width = 16);
  static CameraRing with_views(std::size_t n_views, std::size_t feature_width,
                               std::size_t overlap_cols);

  std::size_t size() const { return names.size(); }
  double spacing() const;       // yaw step between adjacent views
  double yaw(std::size_t i) const;
  double fov() const;           // horizontal field of view per view
  double column_width() const;  // angular width of one feature column
  // Columns each view advances on the shared panorama, W - w_ov.
  std::size_t panorama_stride() const { return feature_width - overlap_cols; }
  std::size_t panorama_columns() const { return size() * panorama_stride(); }
  // Azimuth of the centre of panorama column g (taken modulo the panorama).
  double panorama_azimuth(std::size_t g) const;

  std::pair<std::size_t, std::size_t> neighbors(std::size_t i) const;
  std::size_t index_of(const std::string& name) const;
  void validate() const;
};

// Which views are missing per sample.
struct MaskPlan {
  enum class Kind { deterministic, stochastic };

  Kind kind = Kind::deterministic;
  std::vector<std::size_t> views;  // deterministic
  std::size_t k = 0;               // stochastic
  std::uint64_t seed = 0;          // stochastic
  std::string label;

  static MaskPlan none();
  static MaskPlan fixed(std::vector<std::size_t> views, std::string label = {});
  static MaskPlan dropout(std::size_t k, std::uint64_t seed);

  nlohmann::json to_json(const CameraRing& ring) const;
  static MaskPlan from_json(const nlohmann::json& j, const CameraRing& ring);
};

// Masked view indices for one sample, ascending. Stochastic plans draw a
// uniform k-subset keyed by (seed xor sample_id), independent of call order.
std::vector<std::size_t> resolve_mask(const MaskPlan& plan, const CameraRing& ring,
                                      std::uint64_t sample_id);

// The six deterministic single-view failure settings, in reporting order
// (Front, Front Right, Front Left, Back, Back Left, Back Right).
std::vector<MaskPlan> single_view_plans(const CameraRing& ring);

// Random View Masking applied during training.
struct RvmSettings {
  double p_mask = 0.5;
  std::size_t max_masked = 1;
  std::uint64_t seed = 0;

  void validate(const CameraRing& ring) const;
};

// With probability p_mask, a nonempty subset of size <= max_masked drawn
// uniformly over all such subsets; otherwise empty. Keyed by (seed, step).
std::vector<std::size_t> training_mask(const RvmSettings& rvm, const CameraRing& ring,
                                       std::uint64_t step);

}  // namespace m2occ
