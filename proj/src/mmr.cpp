#include "m2occ/mmr.hpp"

#include <algorithm>
#include <cmath>

#include "m2occ/errors.hpp"
#include "m2occ/ops.hpp"

namespace m2occ {

namespace {

constexpr double kInitStd = 0.02;

Tensor to_tokens(const Tensor& map) {
  const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return ops::transpose(ops::reshape(map, {c, hw}));
}

Tensor from_tokens(const Tensor& tokens, std::size_t h, std::size_t w) {
  const std::size_t c = tokens.dim(1);
  return ops::reshape(ops::transpose(tokens), {c, h, w});
}

Tensor overlap_slice(const Tensor& map, bool trailing, std::size_t w_ov) {
  const std::size_t w = map.dim(2);
  return trailing ? ops::slice(map, 2, w - w_ov, w) : ops::slice(map, 2, 0, w_ov);
}

Tensor splice(const Tensor& left_part, const Tensor& centre, const Tensor& right_part) {
  const Tensor parts[] = {left_part, centre, right_part};
  return ops::concat(parts, 2);
}

}  // namespace

DecoderPreset DecoderPreset::named(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw ParameterError("unknown decoder preset " + name);
}

MmrDecoder::MmrDecoder(ParamStore& store, const std::string& prefix, std::size_t channels,
                       std::size_t height, std::size_t width, DecoderPreset preset, CounterRng& rng,
                       double layer_scale_init)
    : channels_(channels), height_(height), width_(width), preset_(preset) {
  if (preset.heads == 0 || channels % preset.heads != 0) {
    throw ParameterError("decoder channels " + std::to_string(channels) + " not divisible by " +
                         std::to_string(preset.heads) + " heads");
  }
  mask_token_ = store.add(prefix + ".mask_token", normal_tensor({channels}, kInitStd, rng));
  pos_embedding_ = store.add(prefix + ".pos_embedding", normal_tensor({height * width, channels}, kInitStd, rng));
  for (std::size_t b = 0; b < preset.blocks; ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    Block blk;
    blk.norm1 = make_layer_norm(store, p + ".norm1", channels);
    blk.qkv = make_linear(store, p + ".qkv", channels, 3 * channels, rng);
    blk.proj = make_linear(store, p + ".proj", channels, channels, rng);
    blk.gamma1 = store.add(p + ".gamma1", Tensor({channels}, layer_scale_init));
    blk.norm2 = make_layer_norm(store, p + ".norm2", channels);
    blk.fc1 = make_linear(store, p + ".fc1", channels, preset.mlp_ratio * channels, rng);
    blk.fc2 = make_linear(store, p + ".fc2", preset.mlp_ratio * channels, channels, rng);
    blk.gamma2 = store.add(p + ".gamma2", Tensor({channels}, layer_scale_init));
    blocks_.push_back(std::move(blk));
  }
}

Tensor MmrDecoder::tiled_mask(std::size_t columns) const {
  std::vector<std::size_t> idx(height_ * columns, 0);
  const Tensor table = ops::reshape(mask_token_, {1, channels_});
  const Tensor rows = ops::embedding(table, idx);  // (H*cols, C)
  return ops::reshape(ops::transpose(rows), {channels_, height_, columns});
}

std::vector<Tensor> MmrDecoder::layer_scales() const {
  std::vector<Tensor> out;
  for (const Block& b : blocks_) {
    out.push_back(b.gamma1);
    out.push_back(b.gamma2);
  }
  return out;
}

Tensor MmrDecoder::attention(const Block& b, const Tensor& x) const {
  const std::size_t c = channels_;
  const std::size_t dh = c / preset_.heads;
  const Tensor qkv = b.qkv.forward(x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(preset_.heads);
  for (std::size_t h = 0; h < preset_.heads; ++h) {
    const Tensor q = ops::slice(qkv, 1, h * dh, (h + 1) * dh);
    const Tensor k = ops::slice(qkv, 1, c + h * dh, c + (h + 1) * dh);
    const Tensor v = ops::slice(qkv, 1, 2 * c + h * dh, 2 * c + (h + 1) * dh);
    const Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), scale);
    heads.push_back(ops::matmul(ops::softmax(scores), v));
  }
  return b.proj.forward(ops::concat(heads, 1));
}

Tensor MmrDecoder::reconstruct(const Tensor& ref) const {
  if (ref.shape() != Shape{channels_, height_, width_}) {
    throw DimensionError("reconstruct: reference " + shape_str(ref.shape()) + " does not match decoder " +
                         shape_str({channels_, height_, width_}));
  }
  calls_->fetch_add(1);
  Tensor x = ops::add(to_tokens(ref), pos_embedding_);
  for (const Block& b : blocks_) {
    x = ops::add(x, ops::mul_row(attention(b, b.norm1.forward(x)), b.gamma1));
    const Tensor hidden = ops::gelu(b.fc1.forward(b.norm2.forward(x)));
    x = ops::add(x, ops::mul_row(b.fc2.forward(hidden), b.gamma2));
  }
  return from_tokens(x, height_, width_);
}

Tensor aggregate_reference(const ViewFeature& left, const ViewFeature& right, const MmrDecoder& dec,
                           std::size_t overlap_cols) {
  for (const ViewFeature* f : {&left, &right}) {
    if (f->status == ViewStatus::masked) {
      throw ContractError("aggregate_reference: neighbour view " + std::to_string(f->view_index) +
                          " is masked; recover it first or use apply_recovery");
    }
  }
  if (left.data.shape() != right.data.shape() || left.data.rank() != 3) {
    throw DimensionError("aggregate_reference: neighbour shapes " + shape_str(left.data.shape()) + " and " +
                         shape_str(right.data.shape()));
  }
  const std::size_t w = left.data.dim(2);
  if (2 * overlap_cols >= w || overlap_cols == 0) {
    throw ParameterError("aggregate_reference: overlap " + std::to_string(overlap_cols) +
                         " invalid for width " + std::to_string(w));
  }
  return splice(overlap_slice(left.data, true, overlap_cols), dec.tiled_mask(w - 2 * overlap_cols),
                overlap_slice(right.data, false, overlap_cols));
}

Tensor mmr_loss(const std::map<std::size_t, Tensor>& reconstructed,
                const std::map<std::size_t, Tensor>& originals, const std::vector<std::size_t>& masked,
                bool* empty_set) {
  if (empty_set) *empty_set = masked.empty();
  if (masked.empty()) return Tensor::scalar(0.0);
  Tensor total;
  for (std::size_t v : masked) {
    auto r = reconstructed.find(v);
    auto o = originals.find(v);
    if (r == reconstructed.end() || o == originals.end()) {
      throw ContractError("mmr_loss: masked view " + std::to_string(v) + " missing from inputs");
    }
    const Tensor term = ops::mse(r->second, o->second);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / static_cast<double>(masked.size()));
}

RecoveryResult apply_recovery(std::vector<ViewFeature> features, const std::vector<std::size_t>& masked,
                              const MmrDecoder& dec, const CameraRing& ring) {
  const std::size_t n = ring.size();
  if (features.size() != n) {
    throw DimensionError("apply_recovery: " + std::to_string(features.size()) + " features for " +
                         std::to_string(n) + " views");
  }
  std::vector<std::size_t> order = masked;
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());
  if (order.size() >= n) throw ContractError("apply_recovery: every view is masked");
  for (std::size_t v : order) {
    if (v >= n) throw ParameterError("apply_recovery: masked view index out of range");
    features[v].status = ViewStatus::masked;
  }

  const std::size_t w = ring.feature_width;
  const std::size_t w_ov = ring.overlap_cols;
  RecoveryResult result;
  for (std::size_t v : order) {
    const auto [l, r] = ring.neighbors(v);
    RecoveryStep step{v, l, r, NeighborSource::observed, NeighborSource::observed};
    auto source = [&](std::size_t idx, bool trailing, NeighborSource& tag) {
      switch (features[idx].status) {
        case ViewStatus::masked:
          tag = NeighborSource::mask_fallback;
          return dec.tiled_mask(w_ov);
        case ViewStatus::reconstructed:
          tag = NeighborSource::reconstructed;
          break;
        case ViewStatus::observed:
          tag = NeighborSource::observed;
          break;
      }
      return overlap_slice(features[idx].data, trailing, w_ov);
    };
    const Tensor left_part = source(l, true, step.left_source);
    const Tensor right_part = source(r, false, step.right_source);
    const Tensor ref = splice(left_part, dec.tiled_mask(w - 2 * w_ov), right_part);
    features[v].data = dec.reconstruct(ref);
    features[v].status = ViewStatus::reconstructed;
    result.trace.push_back(step);
  }
  result.features = std::move(features);
  return result;
}

}  // namespace m2occ
