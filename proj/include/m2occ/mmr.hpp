#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "m2occ/camera_ring.hpp"
#include "m2occ/nn.hpp"
#include "m2occ/tensor.hpp"

namespace m2occ {

enum class ViewStatus { observed, masked, reconstructed };

struct ViewFeature {
  std::size_t view_index = 0;
  Tensor data;  // (C, H, W)
  ViewStatus status = ViewStatus::observed;
};

struct DecoderPreset {
  std::size_t blocks = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;

  static DecoderPreset desk() { return {2, 2, 4}; }
  static DecoderPreset paper() { return {6, 8, 4}; }
  static DecoderPreset named(const std::string& name);
  bool operator==(const DecoderPreset&) const = default;
};

// Pre-norm transformer decoder over the H*W spatial tokens of one view, with
// a learnable mask token, learnable positional embedding, and per-block
// layer-scale gains on both residual branches.
class MmrDecoder {
 public:
  static constexpr double kDefaultLayerScale = 1e-4;

  MmrDecoder() = default;
  MmrDecoder(ParamStore& store, const std::string& prefix, std::size_t channels, std::size_t height,
             std::size_t width, DecoderPreset preset, CounterRng& rng,
             double layer_scale_init = kDefaultLayerScale);

  std::size_t channels() const { return channels_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  const DecoderPreset& preset() const { return preset_; }

  const Tensor& mask_token() const { return mask_token_; }        // (C)
  const Tensor& pos_embedding() const { return pos_embedding_; }  // (H*W, C)
  // Mask token broadcast to (C, H, columns).
  Tensor tiled_mask(std::size_t columns) const;

  // Tokens of ref plus positional embedding through every block.
  Tensor reconstruct(const Tensor& ref) const;

  // Layer-scale gain tensors, two per block.
  std::vector<Tensor> layer_scales() const;

  std::uint64_t invocations() const { return calls_->load(); }
  void reset_invocations() const { calls_->store(0); }

 private:
  struct Block {
    LayerNormParams norm1;
    Linear qkv;
    Linear proj;
    Tensor gamma1;
    LayerNormParams norm2;
    Linear fc1;
    Linear fc2;
    Tensor gamma2;
  };

  Tensor attention(const Block& b, const Tensor& x) const;

  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  DecoderPreset preset_;
  Tensor mask_token_;
  Tensor pos_embedding_;
  std::vector<Block> blocks_;
  std::shared_ptr<std::atomic<std::uint64_t>> calls_ = std::make_shared<std::atomic<std::uint64_t>>(0);
};

// [left's last w_ov columns | tiled mask token | right's first w_ov
// columns] along width. Both neighbours must be observed or reconstructed.
Tensor aggregate_reference(const ViewFeature& left, const ViewFeature& right, const MmrDecoder& dec,
                           std::size_t overlap_cols);

// Mean over masked views of the element-mean squared error. Views
// outside `masked` are never read. An empty set yields a constant zero and
// sets *empty_set when provided.
Tensor mmr_loss(const std::map<std::size_t, Tensor>& reconstructed,
                const std::map<std::size_t, Tensor>& originals, const std::vector<std::size_t>& masked,
                bool* empty_set = nullptr);

enum class NeighborSource { observed, reconstructed, mask_fallback };

struct RecoveryStep {
  std::size_t view = 0;
  std::size_t left = 0;
  std::size_t right = 0;
  NeighborSource left_source = NeighborSource::observed;
  NeighborSource right_source = NeighborSource::observed;
};

struct RecoveryResult {
  std::vector<ViewFeature> features;
  std::vector<RecoveryStep> trace;
};

// Reconstructs masked views one at a time in ascending index order. A
// neighbour already reconstructed in this pass is used as a source; one that
// is still masked contributes a tiled mask token instead of its slice.
RecoveryResult apply_recovery(std::vector<ViewFeature> features, const std::vector<std::size_t>& masked,
                              const MmrDecoder& dec, const CameraRing& ring);

}  // namespace m2occ
