#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "m2occ/camera_ring.hpp"
#include "m2occ/fmm.hpp"
#include "m2occ/mmr.hpp"
#include "m2occ/scene.hpp"

namespace m2occ {

struct ModelDims {
  std::size_t feature_channels = 16;  // C
  std::size_t encoder_hidden = 32;
  std::size_t voxel_dim = 16;  // D
  std::size_t refiner_hidden = 32;
  std::size_t head_hidden = 32;
};

struct OptimSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t epochs = 2;
  std::size_t batch_size = 1;
};

struct PipelineConfig {
  std::string preset = "desk";
  SceneConfig scene = SceneConfig::desk();
  ModelDims dims;
  DecoderPreset decoder = DecoderPreset::desk();
  bool mmr = true;
  double beta_mmr = 1.0;
  FmmMode fmm = FmmMode::off;
  std::size_t protos_per_class = 4;  // N_p for the multi-prototype bank
  double memory_momentum = 0.1;
  double memory_temperature = 0.1;
  RvmSettings rvm;
  OptimSettings optim;
  double class_weight_cap = 10.0;
  std::uint64_t seed = 0;

  static PipelineConfig desk();
  static PipelineConfig paper();
  static PipelineConfig named(const std::string& preset);

  // Prototypes per class actually allocated (1 for the single bank).
  std::size_t bank_protos() const { return fmm == FmmMode::multi ? protos_per_class : 1; }
  void validate() const;

  nlohmann::json to_json() const;
  // Starts from the preset named in j (desk when absent) and overrides the
  // keys present. Unknown keys throw ParameterError.
  static PipelineConfig from_json(const nlohmann::json& j);
  // FNV-1a 64 of the canonical JSON without the seed, as 16 hex digits.
  std::string hash() const;
  // Short method label: baseline, +MMR, +MMR+SP, +MMR+MP (or +SP, +MP).
  std::string method_label() const;
};

// Minimal TOML reader for config files: [table] headers, key = value with
// strings, integers, floats, booleans, and flat arrays. Result is a JSON
// object tree suitable for PipelineConfig::from_json.
nlohmann::json parse_toml(const std::string& text);
nlohmann::json load_toml_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(const std::string& bytes);

}  // namespace m2occ
