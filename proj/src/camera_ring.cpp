#include "m2occ/camera_ring.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <json.hpp>

#include "m2occ/errors.hpp"
#include "m2occ/rng.hpp"

namespace m2occ {

namespace {

std::uint64_t binomial(std::size_t n, std::size_t k) {
  std::uint64_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

}  // namespace

CameraRing CameraRing::standard(std::size_t feature_width) {
  CameraRing ring;
  ring.names = {"FRONT", "FRONT_RIGHT", "BACK_RIGHT", "BACK", "BACK_LEFT", "FRONT_LEFT"};
  ring.feature_width = feature_width;
  ring.overlap_cols = feature_width / 4;
  ring.validate();
  return ring;
}

CameraRing CameraRing::with_views(std::size_t n_views, std::size_t feature_width,
                                  std::size_t overlap_cols) {
  CameraRing ring;
  if (n_views == 6) {
    ring = standard(feature_width);
  } else {
    for (std::size_t i = 0; i < n_views; ++i) ring.names.push_back("CAM_" + std::to_string(i));
  }
  ring.feature_width = feature_width;
  ring.overlap_cols = overlap_cols;
  ring.validate();
  return ring;
}

double CameraRing::spacing() const { return 2.0 * std::numbers::pi / static_cast<double>(size()); }

double CameraRing::yaw(std::size_t i) const { return spacing() * static_cast<double>(i); }

double CameraRing::fov() const {
  return spacing() * static_cast<double>(feature_width) / static_cast<double>(panorama_stride());
}

double CameraRing::column_width() const { return spacing() / static_cast<double>(panorama_stride()); }

double CameraRing::panorama_azimuth(std::size_t g) const {
  const std::size_t col = g % panorama_columns();
  return (static_cast<double>(col) + 0.5) * column_width() - 0.5 * fov();
}

std::pair<std::size_t, std::size_t> CameraRing::neighbors(std::size_t i) const {
  const std::size_t n = size();
  if (i >= n) {
    throw ParameterError("view index " + std::to_string(i) + " out of range for " +
                         std::to_string(n) + " views");
  }
  return {(i + n - 1) % n, (i + 1) % n};
}

std::size_t CameraRing::index_of(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw ParameterError("unknown view name " + name);
  return static_cast<std::size_t>(it - names.begin());
}

void CameraRing::validate() const {
  if (names.size() < 2) throw ParameterError("camera ring needs at least two views");
  if (feature_width == 0 || 2 * overlap_cols >= feature_width) {
    throw ParameterError("overlap of " + std::to_string(overlap_cols) +
                         " columns leaves no central region in width " +
                         std::to_string(feature_width));
  }
  if (overlap_cols == 0) throw ParameterError("adjacent views must overlap (w_ov > 0)");
}

MaskPlan MaskPlan::none() { return fixed({}, "standard"); }

MaskPlan MaskPlan::fixed(std::vector<std::size_t> views, std::string label) {
  MaskPlan p;
  p.kind = Kind::deterministic;
  std::sort(views.begin(), views.end());
  p.views = std::move(views);
  p.label = std::move(label);
  return p;
}

MaskPlan MaskPlan::dropout(std::size_t k, std::uint64_t seed) {
  MaskPlan p;
  p.kind = Kind::stochastic;
  p.k = k;
  p.seed = seed;
  p.label = "dropout-" + std::to_string(k);
  return p;
}

nlohmann::json MaskPlan::to_json(const CameraRing& ring) const {
  nlohmann::json j;
  j["kind"] = kind == Kind::deterministic ? "deterministic" : "stochastic";
  auto names = nlohmann::json::array();
  for (std::size_t v : views) names.push_back(ring.names.at(v));
  j["views"] = names;
  j["k"] = kind == Kind::deterministic ? views.size() : k;
  j["seed"] = seed;
  return j;
}

MaskPlan MaskPlan::from_json(const nlohmann::json& j, const CameraRing& ring) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "deterministic") {
    std::vector<std::size_t> views;
    for (const auto& v : j.value("views", nlohmann::json::array())) {
      views.push_back(v.is_string() ? ring.index_of(v.get<std::string>()) : v.get<std::size_t>());
    }
    std::string label;
    for (std::size_t v : views) label += (label.empty() ? "" : "+") + ring.names.at(v);
    return fixed(std::move(views), label.empty() ? "standard" : label);
  }
  if (kind == "stochastic") {
    return dropout(j.at("k").get<std::size_t>(), j.value("seed", std::uint64_t{0}));
  }
  throw ParameterError("unknown mask plan kind " + kind);
}

std::vector<std::size_t> resolve_mask(const MaskPlan& plan, const CameraRing& ring,
                                      std::uint64_t sample_id) {
  const std::size_t n = ring.size();
  if (plan.kind == MaskPlan::Kind::deterministic) {
    for (std::size_t i = 0; i < plan.views.size(); ++i) {
      if (plan.views[i] >= n) throw ParameterError("masked view index out of range");
      if (i > 0 && plan.views[i] == plan.views[i - 1]) throw ParameterError("duplicate masked view");
    }
    if (plan.views.size() >= n) throw ParameterError("a mask plan may not remove every view");
    return plan.views;
  }
  if (plan.k >= n) {
    throw ParameterError("dropout count " + std::to_string(plan.k) + " must be below " +
                         std::to_string(n) + " views");
  }
  CounterRng rng(plan.seed ^ sample_id);
  return sample_subset(rng, n, plan.k);
}

std::vector<MaskPlan> single_view_plans(const CameraRing& ring) {
  static const char* kOrder[] = {"FRONT", "FRONT_RIGHT", "FRONT_LEFT", "BACK", "BACK_LEFT", "BACK_RIGHT"};
  std::vector<MaskPlan> plans;
  const bool standard_names =
      std::all_of(std::begin(kOrder), std::end(kOrder), [&](const char* n) {
        return std::find(ring.names.begin(), ring.names.end(), n) != ring.names.end();
      });
  if (standard_names && ring.size() == 6) {
    for (const char* n : kOrder) plans.push_back(MaskPlan::fixed({ring.index_of(n)}, n));
  } else {
    for (std::size_t i = 0; i < ring.size(); ++i) plans.push_back(MaskPlan::fixed({i}, ring.names[i]));
  }
  return plans;
}

void RvmSettings::validate(const CameraRing& ring) const {
  if (!(p_mask >= 0.0 && p_mask <= 1.0)) {
    throw ParameterError("RVM masking probability must lie in [0, 1], got " + std::to_string(p_mask));
  }
  if (max_masked >= ring.size()) {
    throw ParameterError("RVM may mask at most " + std::to_string(ring.size() - 1) + " views");
  }
  if (p_mask > 0.0 && max_masked == 0) throw ParameterError("RVM max masked count must be positive");
}

std::vector<std::size_t> training_mask(const RvmSettings& rvm, const CameraRing& ring,
                                       std::uint64_t step) {
  rvm.validate(ring);
  CounterRng rng(splitmix64(rvm.seed) ^ step);
  if (rvm.p_mask == 0.0 || rng.uniform() >= rvm.p_mask) return {};
  const std::size_t n = ring.size();
  std::uint64_t total = 0;
  for (std::size_t s = 1; s <= rvm.max_masked; ++s) total += binomial(n, s);
  std::uint64_t pick = rng.below(total);
  std::size_t size = 1;
  while (pick >= binomial(n, size)) {
    pick -= binomial(n, size);
    ++size;
  }
  return sample_subset(rng, n, size);
}

}  // namespace m2occ
