#pragma once

#include <span>
#include <vector>

#include "m2occ/config.hpp"
#include "m2occ/fmm.hpp"
#include "m2occ/mmr.hpp"
#include "m2occ/nn.hpp"
#include "m2occ/ops.hpp"
#include "m2occ/scene.hpp"

namespace m2occ {

struct ForwardPass {
  std::vector<std::size_t> masked;
  std::vector<ViewFeature> features;      // after recovery
  std::vector<RecoveryStep> recovery;     // empty without MMR
  Tensor mmr_loss;                        // scalar; zero unless requested and views are masked
  bool mmr_empty = true;
  Tensor volume;   // (V, D) voxel features before memory refinement
  Tensor refined;  // (V, D) after memory refinement; same as volume without FMM
  Tensor logits;   // (V, K)
};

// Image encoder, multi-view lift into the voxel grid, voxel refiner, optional
// view recovery and memory refinement, occupancy head. Voxel tensors are
// laid out row-per-voxel in grid order (z fastest).
class OccupancyModel {
 public:
  explicit OccupancyModel(const PipelineConfig& config);

  const PipelineConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const MmrDecoder& decoder() const { return decoder_; }
  PrototypeBank& bank() { return bank_; }
  const PrototypeBank& bank() const { return bank_; }

  // Per-view feature maps (C, H, W) for a stack of images (C_in, H, W).
  std::vector<ViewFeature> encode(std::span<const Tensor> images) const;
  // Multi-view lift: (V, C) averaged samples of every view covering a voxel.
  Tensor lift(std::span<const ViewFeature> features) const;
  // Lift + positional voxel refiner: (V, D).
  Tensor voxelize(std::span<const ViewFeature> features) const;
  Tensor head(const Tensor& volume) const;  // (V, K) logits

  // Full pass. Images of masked views are replaced by blank images before
  // encoding, so their content is never read. With with_mmr_loss the
  // unmasked encodings serve as detached reconstruction targets.
  ForwardPass forward(std::span<const Tensor> images, const std::vector<std::size_t>& masked,
                      bool with_mmr_loss = false) const;
  VoxelGrid infer(std::span<const Tensor> images, const std::vector<std::size_t>& masked) const;

  // Voxels each view's lift samples touch, for tests.
  std::vector<std::size_t> voxels_seen_by(std::size_t view) const;

 private:
  Tensor encode_stack(std::span<const Tensor> images) const;  // (N*H*W, C)
  Tensor lift_tokens(const Tensor& tokens) const;
  Tensor voxel_refine(const Tensor& lifted) const;
  Tensor memory_refine(const Tensor& volume) const;
  void build_lift_plan();

  PipelineConfig config_;
  ParamStore params_;
  Linear enc1_, enc2_;
  Linear refine_in_, refine_out_;
  Tensor layer_embedding_;  // (nz, refiner_hidden)
  Linear head1_, head2_;
  MmrDecoder decoder_;
  GateHead gate_;
  PrototypeBank bank_;

  std::vector<ops::MixEntry> lift_plan_;
  Tensor voxel_position_;  // (V, depth_bins) constant
  std::vector<std::size_t> voxel_layer_;
};

std::vector<Tensor> blank_images(const SceneConfig& scene, std::size_t count);

// Voxel-major (V, D) to channel-major (D, X, Y, Z).
Tensor to_channel_major(const Tensor& volume, const GridSpec& grid);

}  // namespace m2occ
