#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2occ/model.hpp"

namespace m2occ {

// Decoupled weight decay Adam. Parameters without a gradient buffer are
// skipped entirely for the step.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const OptimSettings& settings, const ParamStore& params);

  void step(ParamStore& params);
  std::uint64_t steps() const { return t_; }

  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  OptimSettings s_;
  std::uint64_t t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

// w_c = min(cap, n_max / n_c) over the label histogram; absent classes get cap.
std::array<double, kNumClasses> class_weights(const std::array<std::size_t, kNumClasses>& histogram, double cap);

struct StepRecord {
  std::uint64_t step = 0;  // 1-based index of the completed step
  std::uint64_t epoch = 0;
  double loss = 0.0;
  double loss_occ = 0.0;
  double loss_mmr = 0.0;
  std::vector<std::vector<std::size_t>> masked;  // per batch item
  std::uint64_t decoder_calls = 0;

  nlohmann::json to_json(const std::string& config_hash, std::uint64_t seed) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, nlohmann::json diagnostics)
      : std::runtime_error(what), diagnostics_(std::move(diagnostics)) {}
  const nlohmann::json& diagnostics() const { return diagnostics_; }

 private:
  nlohmann::json diagnostics_;
};

// Joint training of the whole pipeline: L = L_occ + beta * L_mmr, one AdamW
// step, then the EMA bank update from the unrefined voxel features.
class Trainer {
 public:
  Trainer(const PipelineConfig& config, const SceneDataset& data);

  OccupancyModel& model() { return model_; }
  const OccupancyModel& model() const { return model_; }
  const PipelineConfig& config() const { return model_.config(); }
  std::uint64_t step() const { return step_; }
  std::size_t steps_per_epoch() const;
  std::uint64_t total_steps() const { return steps_per_epoch() * config().optim.epochs; }
  const std::array<double, kNumClasses>& weights() const { return weights_; }

  // Dataset indices of the batch consumed by step `s` (0-based).
  std::vector<std::size_t> batch_indices(std::uint64_t s) const;

  StepRecord train_step();
  // Runs until total_steps() or max_steps completed steps. `on_step` sees
  // every record; returning false stops early.
  void run(std::optional<std::uint64_t> max_steps, const std::function<bool(const StepRecord&)>& on_step);

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores parameters, optimizer moments, bank, weights, and step. The
  // stored config must hash and seed-match this trainer's config.
  void load_checkpoint(const std::filesystem::path& path);

 private:
  OccupancyModel model_;
  const SceneDataset* data_;
  AdamW optim_;
  std::array<double, kNumClasses> weights_{};
  std::uint64_t step_ = 0;
};

struct Checkpoint {
  PipelineConfig config;
  std::uint64_t step = 0;
};

// Reads only the config and step of a checkpoint.
Checkpoint read_checkpoint_header(const std::filesystem::path& path);
// Model with parameters and bank restored, ready for inference.
OccupancyModel load_model(const std::filesystem::path& path);

}  // namespace m2occ
