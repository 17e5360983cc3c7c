#include "m2occ/train.hpp"

#include <cmath>
#include <fstream>

#include "m2occ/errors.hpp"
#include "m2occ/serialize.hpp"

namespace m2occ {

namespace {

constexpr char kCkptMagic[4] = {'M', '2', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void copy_into(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape() != src.shape()) {
    throw FormatError("checkpoint: tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                      shape_str(dst.shape()));
  }
  const auto s = src.data();
  std::copy(s.begin(), s.end(), dst.mutable_data().begin());
}

struct RawCheckpoint {
  PipelineConfig config;
  std::uint64_t step = 0;
  std::uint64_t adam_t = 0;
  std::array<double, kNumClasses> weights{};
  std::vector<std::string> names;
  std::vector<Tensor> params, m, v;
  bool has_bank = false;
  Tensor protos;
  std::vector<std::uint8_t> init;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool header_only) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  BinaryReader r(in);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCkptMagic)) throw FormatError(path.string() + " is not a checkpoint");
  if (const auto ver = r.u32(); ver != kCkptVersion) {
    throw FormatError("checkpoint version " + std::to_string(ver) + " unsupported");
  }
  RawCheckpoint ck;
  ck.config = PipelineConfig::from_json(nlohmann::json::parse(r.str()));
  const std::string hash = r.str();
  if (hash != ck.config.hash()) throw FormatError("checkpoint config hash mismatch (corrupt file?)");
  ck.step = r.u64();
  if (header_only) return ck;
  ck.adam_t = r.u64();
  for (double& w : ck.weights) w = r.f64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    ck.names.push_back(r.str());
    ck.params.push_back(r.tensor());
    ck.m.push_back(r.tensor());
    ck.v.push_back(r.tensor());
  }
  ck.has_bank = r.u8() != 0;
  if (ck.has_bank) {
    const double momentum = r.f64();
    const double temperature = r.f64();
    if (momentum != ck.config.memory_momentum || temperature != ck.config.memory_temperature) {
      throw FormatError("checkpoint bank settings disagree with its config");
    }
    ck.protos = r.tensor();
    ck.init.resize(r.u32());
    r.bytes(ck.init.data(), ck.init.size());
  }
  return ck;
}

void restore_model(OccupancyModel& model, const RawCheckpoint& ck) {
  auto& entries = model.params().entries();
  if (entries.size() != ck.names.size()) {
    throw FormatError("checkpoint has " + std::to_string(ck.names.size()) + " parameters, model has " +
                      std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != ck.names[i]) {
      throw FormatError("checkpoint parameter " + ck.names[i] + " where " + entries[i].first + " was expected");
    }
    Tensor dst = entries[i].second;
    copy_into(dst, ck.params[i], ck.names[i]);
  }
  if (ck.has_bank != (model.config().fmm != FmmMode::off)) throw FormatError("checkpoint bank presence mismatch");
  if (ck.has_bank) model.bank().restore(ck.protos, ck.init);
}

}  // namespace

AdamW::AdamW(const OptimSettings& settings, const ParamStore& params) : s_(settings) {
  for (const auto& [name, p] : params.entries()) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void AdamW::step(ParamStore& params) {
  auto& entries = params.entries();
  if (entries.size() != m_.size()) throw ContractError("AdamW: parameter set changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor p = entries[i].second;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto m = m_[i].mutable_data();
    auto v = v_[i].mutable_data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] *= 1.0 - s_.lr * s_.weight_decay;
      m[k] = s_.beta1 * m[k] + (1.0 - s_.beta1) * g[k];
      v[k] = s_.beta2 * v[k] + (1.0 - s_.beta2) * g[k] * g[k];
      w[k] -= s_.lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + s_.eps);
    }
  }
}

void AdamW::restore(std::uint64_t t, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw FormatError("optimizer state size mismatch");
  for (std::size_t i = 0; i < m.size(); ++i) {
    copy_into(m_[i], m[i], "adam.m");
    copy_into(v_[i], v[i], "adam.v");
  }
  t_ = t;
}

std::array<double, kNumClasses> class_weights(const std::array<std::size_t, kNumClasses>& histogram, double cap) {
  std::size_t n_max = 0;
  for (std::size_t n : histogram) n_max = std::max(n_max, n);
  std::array<double, kNumClasses> w{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    w[c] = histogram[c] == 0 ? cap
                             : std::min(cap, static_cast<double>(n_max) / static_cast<double>(histogram[c]));
  }
  return w;
}

nlohmann::json StepRecord::to_json(const std::string& config_hash, std::uint64_t seed) const {
  return {{"step", step},       {"epoch", epoch},         {"loss", loss},
          {"loss_occ", loss_occ}, {"loss_mmr", loss_mmr}, {"masked", masked},
          {"decoder_calls", decoder_calls}, {"config_hash", config_hash}, {"seed", seed}};
}

Trainer::Trainer(const PipelineConfig& config, const SceneDataset& data) : model_(config), data_(&data) {
  const auto& sc = data.config();
  const auto& mc = model_.config().scene;
  if (!(sc.grid == mc.grid) || sc.ring.size() != mc.ring.size() || sc.ring.feature_width != mc.ring.feature_width ||
      sc.ring.overlap_cols != mc.ring.overlap_cols || sc.image_height != mc.image_height ||
      sc.depth_bins != mc.depth_bins) {
    throw ParameterError("training data dimensions do not match the model config");
  }
  if (data.size() == 0) throw ParameterError("training set is empty");
  optim_ = AdamW(model_.config().optim, model_.params());
  weights_ = class_weights(data.histogram(), model_.config().class_weight_cap);
}

std::size_t Trainer::steps_per_epoch() const {
  const std::size_t b = config().optim.batch_size;
  return (data_->size() + b - 1) / b;
}

std::vector<std::size_t> Trainer::batch_indices(std::uint64_t s) const {
  const std::size_t n = data_->size();
  const std::size_t spe = steps_per_epoch();
  const std::uint64_t epoch = s / spe;
  const std::size_t within = static_cast<std::size_t>(s % spe);
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  CounterRng rng(splitmix64(config().seed ^ 0x5348554646ULL) ^ epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const std::size_t b = config().optim.batch_size;
  std::vector<std::size_t> out;
  for (std::size_t i = within * b; i < std::min(n, (within + 1) * b); ++i) out.push_back(perm[i]);
  return out;
}

StepRecord Trainer::train_step() {
  const PipelineConfig& cfg = config();
  RvmSettings rvm = cfg.rvm;
  rvm.seed = cfg.seed;
  const auto idx = batch_indices(step_);
  const std::uint64_t calls_before = model_.decoder().invocations();

  StepRecord rec;
  rec.step = step_ + 1;
  rec.epoch = step_ / steps_per_epoch();
  std::vector<ForwardPass> passes;
  std::vector<std::vector<int>> labels;
  GradTape tape;
  Tensor total;
  {
    TapeScope scope(tape);
    Tensor occ_sum, mmr_sum;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const SceneSample& sample = (*data_)[idx[b]];
      const auto masked = training_mask(rvm, cfg.scene.ring, step_ * cfg.optim.batch_size + b);
      passes.push_back(model_.forward(sample.images, masked, cfg.mmr));
      labels.emplace_back(sample.grid.labels.begin(), sample.grid.labels.end());
      const Tensor occ = ops::cross_entropy(passes.back().logits, labels.back(), weights_);
      const Tensor& mmr = passes.back().mmr_loss;
      occ_sum = occ_sum.defined() ? ops::add(occ_sum, occ) : occ;
      mmr_sum = mmr_sum.defined() ? ops::add(mmr_sum, mmr) : mmr;
      rec.masked.push_back(passes.back().masked);
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    rec.loss_occ = occ_sum.item() * inv;
    rec.loss_mmr = mmr_sum.item() * inv;
    total = ops::scale(ops::add(occ_sum, ops::scale(mmr_sum, cfg.beta_mmr)), inv);
  }
  rec.loss = total.item();
  if (!std::isfinite(rec.loss)) {
    nlohmann::json diag = rec.to_json(cfg.hash(), cfg.seed);
    diag["batch"] = idx;
    throw TrainingDiverged("non-finite loss at step " + std::to_string(rec.step), diag);
  }
  model_.params().zero_grad();
  tape.backward(total);
  optim_.step(model_.params());

  if (cfg.fmm != FmmMode::off) {
    for (std::size_t b = 0; b < passes.size(); ++b) {
      std::vector<std::uint8_t> lab(labels[b].begin(), labels[b].end());
      const Tensor x = passes[b].volume.detach();
      if (cfg.fmm == FmmMode::single) update_single_proto(model_.bank(), x, lab);
      else update_multi_proto(model_.bank(), x, lab);
    }
  }
  rec.decoder_calls = model_.decoder().invocations() - calls_before;
  ++step_;
  return rec;
}

void Trainer::run(std::optional<std::uint64_t> max_steps, const std::function<bool(const StepRecord&)>& on_step) {
  std::uint64_t limit = total_steps();
  if (max_steps) limit = std::min(limit, *max_steps);
  while (step_ < limit) {
    const StepRecord rec = train_step();
    if (on_step && !on_step(rec)) break;
  }
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    BinaryWriter w(out);
    const PipelineConfig& cfg = config();
    w.bytes(kCkptMagic, 4);
    w.u32(kCkptVersion);
    w.str(cfg.to_json().dump());
    w.str(cfg.hash());
    w.u64(step_);
    w.u64(optim_.steps());
    for (double x : weights_) w.f64(x);
    const auto& entries = model_.params().entries();
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
      w.str(entries[i].first);
      w.tensor(entries[i].second);
      w.tensor(optim_.first_moments()[i]);
      w.tensor(optim_.second_moments()[i]);
    }
    const bool has_bank = cfg.fmm != FmmMode::off;
    w.u8(has_bank ? 1 : 0);
    if (has_bank) {
      const PrototypeBank& bank = model_.bank();
      w.f64(bank.momentum());
      w.f64(bank.temperature());
      w.tensor(bank.prototypes());
      w.u32(static_cast<std::uint32_t>(bank.initialized().size()));
      w.bytes(bank.initialized().data(), bank.initialized().size());
    }
    if (!out) throw FormatError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const RawCheckpoint ck = read_raw(path, false);
  if (ck.config.hash() != config().hash() || ck.config.seed != config().seed) {
    throw ParameterError("checkpoint config " + ck.config.hash() + "/seed " + std::to_string(ck.config.seed) +
                         " does not match run config " + config().hash() + "/seed " + std::to_string(config().seed));
  }
  restore_model(model_, ck);
  optim_.restore(ck.adam_t, ck.m, ck.v);
  weights_ = ck.weights;
  step_ = ck.step;
}

Checkpoint read_checkpoint_header(const std::filesystem::path& path) {
  RawCheckpoint ck = read_raw(path, true);
  return {ck.config, ck.step};
}

OccupancyModel load_model(const std::filesystem::path& path) {
  const RawCheckpoint ck = read_raw(path, false);
  OccupancyModel model(ck.config);
  restore_model(model, ck);
  return model;
}

}  // namespace m2occ
