#include "m2occ/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "m2occ/errors.hpp"

namespace m2occ {

namespace {

constexpr int kTaps = 3;

std::uint64_t module_key(std::uint64_t seed, const char* name) {
  return splitmix64(seed) ^ fnv1a64(name);
}

double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a, two_pi);
  if (a <= -std::numbers::pi) a += two_pi;
  if (a > std::numbers::pi) a -= two_pi;
  return a;
}

// Samples of coordinate u in [0, n-1]: (index, weight) pairs.
std::vector<std::pair<std::size_t, double>> linear_taps(double u, std::size_t n) {
  u = std::clamp(u, 0.0, static_cast<double>(n - 1));
  const auto lo = static_cast<std::size_t>(std::floor(u));
  const double frac = u - static_cast<double>(lo);
  if (lo + 1 >= n || frac == 0.0) return {{lo, 1.0}};
  return {{lo, 1.0 - frac}, {lo + 1, frac}};
}

}  // namespace

std::vector<Tensor> blank_images(const SceneConfig& scene, std::size_t count) {
  return std::vector<Tensor>(count, Tensor({scene.image_channels(), scene.image_height, scene.image_width()}, 0.0));
}

Tensor to_channel_major(const Tensor& volume, const GridSpec& grid) {
  if (volume.rank() != 2 || volume.dim(0) != grid.voxel_count()) {
    throw DimensionError("to_channel_major: volume " + shape_str(volume.shape()));
  }
  return ops::reshape(ops::transpose(volume), {volume.dim(1), grid.nx, grid.ny, grid.nz});
}

OccupancyModel::OccupancyModel(const PipelineConfig& config) : config_(config) {
  config_.validate();
  const auto& d = config_.dims;
  const auto& sc = config_.scene;
  const std::size_t cin = sc.image_channels() * kTaps;
  {
    CounterRng rng(module_key(config_.seed, "encoder"));
    enc1_ = make_linear(params_, "encoder.fc1", cin, d.encoder_hidden, rng);
    enc2_ = make_linear(params_, "encoder.fc2", d.encoder_hidden, d.feature_channels, rng);
  }
  {
    CounterRng rng(module_key(config_.seed, "refiner"));
    refine_in_ = make_linear(params_, "refiner.fc1", d.feature_channels + sc.depth_bins, d.refiner_hidden, rng);
    layer_embedding_ =
        params_.add("refiner.layer_embedding", normal_tensor({sc.grid.nz, d.refiner_hidden}, 0.02, rng));
    refine_out_ = make_linear(params_, "refiner.fc2", d.refiner_hidden, d.voxel_dim, rng);
  }
  {
    CounterRng rng(module_key(config_.seed, "head"));
    head1_ = make_linear(params_, "head.fc1", d.voxel_dim, d.head_hidden, rng);
    head2_ = make_linear(params_, "head.fc2", d.head_hidden, kNumClasses, rng);
  }
  if (config_.mmr) {
    CounterRng rng(module_key(config_.seed, "mmr"));
    decoder_ = MmrDecoder(params_, "mmr", d.feature_channels, sc.image_height, sc.ring.feature_width,
                          config_.decoder, rng);
  }
  if (config_.fmm != FmmMode::off) {
    CounterRng rng(module_key(config_.seed, "fmm"));
    gate_ = make_gate_head(params_, "fmm.gate", d.voxel_dim, kNumClasses, rng);
    bank_ = PrototypeBank(kNumClasses, config_.bank_protos(), d.voxel_dim, config_.memory_momentum,
                          config_.memory_temperature, module_key(config_.seed, "bank"));
  }
  build_lift_plan();
}

void OccupancyModel::build_lift_plan() {
  const auto& sc = config_.scene;
  const auto& g = sc.grid;
  const auto& ring = sc.ring;
  const std::size_t h = sc.image_height, w = ring.feature_width, hw = h * w;
  const double vs = g.voxel_size();
  const double half_fov = 0.5 * ring.fov();
  const double colw = ring.column_width();
  std::vector<double> pos(g.voxel_count() * sc.depth_bins);
  voxel_layer_.assign(g.voxel_count(), 0);
  for (std::size_t x = 0; x < g.nx; ++x) {
    for (std::size_t y = 0; y < g.ny; ++y) {
      const double cx = (static_cast<double>(x) + 0.5) * vs - g.half_extent_m;
      const double cy = (static_cast<double>(y) + 0.5) * vs - g.half_extent_m;
      const double az = std::atan2(-cy, cx);
      const auto enc = depth_encoding(std::hypot(cx, cy), sc.depth_bins, g.max_range());
      std::vector<std::pair<std::size_t, std::pair<std::size_t, double>>> cols;  // view, (col, weight)
      std::vector<std::size_t> covering;
      for (std::size_t v = 0; v < ring.size(); ++v) {
        const double rel = wrap_angle(az - ring.yaw(v));
        if (std::abs(rel) > half_fov) continue;
        covering.push_back(v);
        for (const auto& tap : linear_taps((rel + half_fov) / colw - 0.5, w)) cols.push_back({v, tap});
      }
      if (covering.empty()) throw ContractError("lift: voxel outside every view");
      const double view_w = 1.0 / static_cast<double>(covering.size());
      for (std::size_t z = 0; z < g.nz; ++z) {
        const std::size_t vox = g.index(x, y, z);
        voxel_layer_[vox] = z;
        std::copy(enc.begin(), enc.end(), pos.begin() + static_cast<std::ptrdiff_t>(vox * sc.depth_bins));
        const double row = (static_cast<double>(z) + 0.5) * static_cast<double>(h) / static_cast<double>(g.nz) - 0.5;
        for (const auto& rtap : linear_taps(row, h)) {
          for (const auto& [v, ctap] : cols) {
            lift_plan_.push_back({static_cast<std::uint32_t>(vox),
                                  static_cast<std::uint32_t>(v * hw + rtap.first * w + ctap.first),
                                  view_w * rtap.second * ctap.second});
          }
        }
      }
    }
  }
  voxel_position_ = Tensor({g.voxel_count(), sc.depth_bins}, std::move(pos));
}

std::vector<std::size_t> OccupancyModel::voxels_seen_by(std::size_t view) const {
  const std::size_t hw = config_.scene.image_height * config_.scene.ring.feature_width;
  std::vector<std::size_t> out;
  for (const auto& e : lift_plan_)
    if (e.in_row / hw == view) out.push_back(e.out_row);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

Tensor OccupancyModel::encode_stack(std::span<const Tensor> images) const {
  const auto& sc = config_.scene;
  const std::size_t c = sc.image_channels(), h = sc.image_height, w = sc.image_width();
  std::vector<double> cols(images.size() * h * w * c * kTaps, 0.0);
  std::size_t r = 0;
  for (const Tensor& img : images) {
    if (img.shape() != Shape{c, h, w}) {
      throw DimensionError("encode: image " + shape_str(img.shape()) + " expected " + shape_str({c, h, w}));
    }
    const auto px = img.data();
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x, ++r) {
        double* dst = cols.data() + r * c * kTaps;
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (int t = 0; t < kTaps; ++t) {
            const long yy = static_cast<long>(y) + t - 1;
            if (yy < 0 || yy >= static_cast<long>(h)) continue;
            dst[ch * kTaps + static_cast<std::size_t>(t)] = px[(ch * h + static_cast<std::size_t>(yy)) * w + x];
          }
        }
      }
    }
  }
  const Tensor patches({images.size() * h * w, c * kTaps}, std::move(cols));
  return enc2_.forward(ops::gelu(enc1_.forward(patches)));
}

std::vector<ViewFeature> OccupancyModel::encode(std::span<const Tensor> images) const {
  const auto& sc = config_.scene;
  const std::size_t h = sc.image_height, w = sc.image_width(), hw = h * w;
  const std::size_t c = config_.dims.feature_channels;
  const Tensor tokens = encode_stack(images);
  std::vector<ViewFeature> out;
  out.reserve(images.size());
  for (std::size_t v = 0; v < images.size(); ++v) {
    const Tensor rows = ops::slice(tokens, 0, v * hw, (v + 1) * hw);
    out.push_back({v, ops::reshape(ops::transpose(rows), {c, h, w}), ViewStatus::observed});
  }
  return out;
}

Tensor OccupancyModel::lift_tokens(const Tensor& tokens) const {
  return ops::sparse_mix(tokens, config_.scene.grid.voxel_count(), lift_plan_);
}

Tensor OccupancyModel::lift(std::span<const ViewFeature> features) const {
  const auto& ring = config_.scene.ring;
  if (features.size() != ring.size()) {
    throw DimensionError("lift: " + std::to_string(features.size()) + " views for a ring of " +
                         std::to_string(ring.size()));
  }
  std::vector<Tensor> parts;
  parts.reserve(features.size());
  for (const auto& f : features) {
    if (f.status == ViewStatus::masked) throw ContractError("lift: view " + std::to_string(f.view_index) + " is masked");
    const std::size_t c = f.data.dim(0);
    parts.push_back(ops::transpose(ops::reshape(f.data, {c, f.data.dim(1) * f.data.dim(2)})));
  }
  return lift_tokens(ops::concat(parts, 0));
}

Tensor OccupancyModel::voxel_refine(const Tensor& lifted) const {
  const Tensor parts[] = {lifted, voxel_position_};
  const Tensor hidden = ops::add(refine_in_.forward(ops::concat(parts, 1)), ops::embedding(layer_embedding_, voxel_layer_));
  return refine_out_.forward(ops::gelu(hidden));
}

Tensor OccupancyModel::voxelize(std::span<const ViewFeature> features) const { return voxel_refine(lift(features)); }

Tensor OccupancyModel::head(const Tensor& volume) const {
  return head2_.forward(ops::gelu(head1_.forward(volume)));
}

Tensor OccupancyModel::memory_refine(const Tensor& volume) const {
  const Tensor gate = gate_.forward(volume);
  const Tensor alpha = retrieval_weights(bank_, similarity(bank_, volume));
  return refine(bank_, volume, gate, alpha);
}

ForwardPass OccupancyModel::forward(std::span<const Tensor> images, const std::vector<std::size_t>& masked,
                                    bool with_mmr_loss) const {
  const auto& ring = config_.scene.ring;
  if (images.size() != ring.size()) {
    throw DimensionError("forward: " + std::to_string(images.size()) + " images for " + std::to_string(ring.size()) +
                         " views");
  }
  ForwardPass out;
  out.masked = masked;
  std::sort(out.masked.begin(), out.masked.end());
  out.masked.erase(std::unique(out.masked.begin(), out.masked.end()), out.masked.end());
  for (std::size_t v : out.masked) {
    if (v >= ring.size()) throw ParameterError("forward: masked view " + std::to_string(v) + " out of range");
  }
  if (out.masked.size() >= ring.size()) throw ParameterError("forward: every view is masked");

  const bool need_targets = with_mmr_loss && config_.mmr && !out.masked.empty();
  std::vector<Tensor> inputs(images.begin(), images.end());
  if (!need_targets) {
    const Tensor blank = blank_images(config_.scene, 1).front();
    for (std::size_t v : out.masked) inputs[v] = blank;
  }
  std::vector<ViewFeature> feats = encode(inputs);

  if (config_.mmr && !out.masked.empty()) {
    std::map<std::size_t, Tensor> targets;
    if (need_targets)
      for (std::size_t v : out.masked) targets[v] = feats[v].data.detach();
    RecoveryResult rec = apply_recovery(std::move(feats), out.masked, decoder_, ring);
    feats = std::move(rec.features);
    out.recovery = std::move(rec.trace);
    if (need_targets) {
      std::map<std::size_t, Tensor> recon;
      for (std::size_t v : out.masked) recon[v] = feats[v].data;
      out.mmr_loss = mmr_loss(recon, targets, out.masked, &out.mmr_empty);
    }
  }
  if (!out.mmr_loss.defined()) out.mmr_loss = Tensor::scalar(0.0);

  out.volume = voxelize(feats);
  out.refined = config_.fmm == FmmMode::off ? out.volume : memory_refine(out.volume);
  out.logits = head(out.refined);
  out.features = std::move(feats);
  return out;
}

VoxelGrid OccupancyModel::infer(std::span<const Tensor> images, const std::vector<std::size_t>& masked) const {
  const ForwardPass pass = forward(images, masked, false);
  VoxelGrid grid(config_.scene.grid);
  const auto logits = pass.logits.data();
  for (std::size_t v = 0; v < grid.labels.size(); ++v) {
    const double* row = logits.data() + v * kNumClasses;
    grid.labels[v] = static_cast<std::uint8_t>(std::max_element(row, row + kNumClasses) - row);
  }
  return grid;
}

}  // namespace m2occ
