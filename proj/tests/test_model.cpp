#include <doctest.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>

#include "m2occ/errors.hpp"
#include "m2occ/model.hpp"
#include "m2occ/train.hpp"
#include "test_util.hpp"

using namespace m2occ;
using m2occ::testing::bitwise_equal;
using m2occ::testing::random_tensor;
using m2occ::testing::values;

namespace {

PipelineConfig small_config(bool mmr, FmmMode fmm, std::uint64_t seed = 5) {
  PipelineConfig c = PipelineConfig::desk();
  c.mmr = mmr;
  c.fmm = fmm;
  c.seed = seed;
  return c;
}

std::vector<ViewFeature> random_features(const PipelineConfig& c, CounterRng& rng) {
  std::vector<ViewFeature> out;
  for (std::size_t v = 0; v < c.scene.ring.size(); ++v)
    out.push_back({v, random_tensor({c.dims.feature_channels, c.scene.image_height, c.scene.ring.feature_width}, rng)});
  return out;
}

// Clamped bilinear sample of feature (C, H, W) at (row, col) for channel ch.
double bilinear(const Tensor& f, std::size_t ch, double row, double col) {
  const std::size_t h = f.dim(1), w = f.dim(2);
  row = std::min(std::max(row, 0.0), static_cast<double>(h - 1));
  col = std::min(std::max(col, 0.0), static_cast<double>(w - 1));
  const auto r0 = static_cast<std::size_t>(row), c0 = static_cast<std::size_t>(col);
  const std::size_t r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
  const double fr = row - static_cast<double>(r0), fc = col - static_cast<double>(c0);
  auto px = [&](std::size_t r, std::size_t c) { return f.at((ch * h + r) * w + c); };
  return (1 - fr) * ((1 - fc) * px(r0, c0) + fc * px(r0, c1)) + fr * ((1 - fc) * px(r1, c0) + fc * px(r1, c1));
}

struct VoxelView {
  std::size_t view;
  double col;
};

// Views whose window contains the voxel column's azimuth, with the
// fractional feature column the azimuth lands on.
std::vector<VoxelView> covering(const PipelineConfig& c, std::size_t x, std::size_t y) {
  const auto& g = c.scene.grid;
  const auto& ring = c.scene.ring;
  const double cx = (x + 0.5) * g.voxel_size() - g.half_extent_m;
  const double cy = (y + 0.5) * g.voxel_size() - g.half_extent_m;
  const double az = std::atan2(-cy, cx);
  std::vector<VoxelView> out;
  for (std::size_t v = 0; v < ring.size(); ++v) {
    double rel = az - ring.yaw(v);
    while (rel > std::numbers::pi) rel -= 2 * std::numbers::pi;
    while (rel <= -std::numbers::pi) rel += 2 * std::numbers::pi;
    if (std::abs(rel) <= ring.fov() / 2) out.push_back({v, (rel + ring.fov() / 2) / ring.column_width() - 0.5});
  }
  return out;
}

std::vector<int> labels_of(const SceneSample& s) { return {s.grid.labels.begin(), s.grid.labels.end()}; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("encoder shares weights across views") {
  OccupancyModel m(small_config(false, FmmMode::off));
  const auto s = generate_scene(1, m.config().scene);
  std::vector<Tensor> imgs(6, s.images[2]);
  const auto feats = m.encode(imgs);
  REQUIRE(feats.size() == 6);
  for (const auto& f : feats) {
    CHECK(f.data.shape() == Shape{16, m.config().scene.image_height, 16});
    CHECK(bitwise_equal(f.data, feats[0].data));
  }
  std::vector<Tensor> bad(6, Tensor({3, 2, 2}));
  CHECK_THROWS_AS(m.encode(bad), DimensionError);
}

TEST_CASE("lift: constant views give constant covered voxels") {
  const auto cfg = small_config(false, FmmMode::off);
  OccupancyModel m(cfg);
  std::vector<ViewFeature> feats;
  for (std::size_t v = 0; v < 6; ++v)
    feats.push_back({v, Tensor({16, cfg.scene.image_height, cfg.scene.ring.feature_width}, 0.75)});
  const Tensor lifted = m.lift(feats);
  REQUIRE(lifted.shape() == Shape{cfg.scene.grid.voxel_count(), 16});
  for (double v : lifted.data()) CHECK(std::abs(v - 0.75) < 1e-12);
  feats[2].status = ViewStatus::masked;
  CHECK_THROWS_AS(m.lift(feats), ContractError);
}

TEST_CASE("lift matches a per-voxel sampling oracle") {
  const auto cfg = small_config(false, FmmMode::off);
  OccupancyModel m(cfg);
  const auto& g = cfg.scene.grid;
  std::size_t overlap_voxels = 0, single_voxels = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    CounterRng rng(seed);
    const auto feats = random_features(cfg, rng);
    const Tensor lifted = m.lift(feats);
    for (std::size_t x = 0; x < g.nx; ++x)
      for (std::size_t y = 0; y < g.ny; ++y) {
        const auto views = covering(cfg, x, y);
        REQUIRE(!views.empty());
        (views.size() == 2 ? overlap_voxels : single_voxels) += 1;
        for (std::size_t z = 0; z < g.nz; ++z) {
          const double row = (z + 0.5) * cfg.scene.image_height / g.nz - 0.5;
          for (std::size_t ch = 0; ch < 16; ++ch) {
            double want = 0.0;
            for (const auto& vv : views) want += bilinear(feats[vv.view].data, ch, row, vv.col);
            want /= static_cast<double>(views.size());
            CHECK(std::abs(lifted.at(g.index(x, y, z) * 16 + ch) - want) < 1e-12);
          }
        }
      }
  }
  CHECK(overlap_voxels > 0);
  CHECK(single_voxels > 0);
}

TEST_CASE("lift: a voxel centred in a view's window reads only that view") {
  const auto cfg = small_config(false, FmmMode::off);
  OccupancyModel m(cfg);
  const auto& g = cfg.scene.grid;
  CounterRng rng(4);
  auto feats = random_features(cfg, rng);
  const Tensor base = m.lift(feats);
  for (std::size_t x = 0; x < g.nx; ++x)
    for (std::size_t y = 0; y < g.ny; ++y) {
      const auto views = covering(cfg, x, y);
      if (views.size() != 1) continue;
      const std::size_t v = views[0].view;
      auto other = feats;
      for (std::size_t u = 0; u < 6; ++u)
        if (u != v) other[u].data = random_tensor(other[u].data.shape(), rng);
      const Tensor changed = m.lift(other);
      for (std::size_t z = 0; z < g.nz; ++z)
        for (std::size_t ch = 0; ch < 16; ++ch)
          CHECK(changed.at(g.index(x, y, z) * 16 + ch) == base.at(g.index(x, y, z) * 16 + ch));
      const auto seen = m.voxels_seen_by(v);
      CHECK(std::binary_search(seen.begin(), seen.end(), g.index(x, y, 0)));
    }
}

TEST_CASE("head shape and argmax prediction") {
  OccupancyModel m(small_config(false, FmmMode::off));
  const auto s = generate_scene(2, m.config().scene);
  const auto pass = m.forward(s.images, {});
  CHECK(pass.logits.shape() == Shape{m.config().scene.grid.voxel_count(), kNumClasses});
  const auto grid = m.infer(s.images, {});
  CHECK(grid.spec == m.config().scene.grid);
  for (std::size_t v = 0; v < grid.labels.size(); ++v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < kNumClasses; ++k)
      if (pass.logits.at(v * kNumClasses + k) > pass.logits.at(v * kNumClasses + best)) best = k;
    CHECK(grid.labels[v] == best);
  }
  const Tensor cm = to_channel_major(pass.logits, m.config().scene.grid);
  CHECK(cm.shape() == Shape{kNumClasses, 16, 16, 4});
}

TEST_CASE("encoder, refiner and head gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    OccupancyModel m(small_config(false, FmmMode::off, seed));
    const auto s = generate_scene(seed, m.config().scene);
    const auto labels = labels_of(s);
    std::vector<double> w(kNumClasses, 1.0);
    std::vector<Tensor> leaves;
    std::vector<std::string> names;
    for (auto& [n, t] : m.params().entries()) {
      leaves.push_back(t);
      names.push_back(n);
    }
    const auto r = m2occ::testing::fd_check(
        leaves, [&] { return ops::cross_entropy(m.forward(s.images, {}).logits, labels, w); }, 1e-5, 3, names);
    INFO("seed " << seed << " " << r.worst);
    CHECK(r.max_rel < 1e-4);
  }
}

TEST_CASE("empty mask and identical weights reproduce the unmasked path") {
  OccupancyModel a(small_config(true, FmmMode::off)), b(small_config(true, FmmMode::off));
  const auto s = generate_scene(3, a.config().scene);
  CHECK(a.infer(s.images, {}).labels == b.infer(s.images, {}).labels);
  CHECK(bitwise_equal(a.forward(s.images, {}).logits, b.forward(s.images, {}, true).logits));
  CHECK(a.decoder().invocations() == 0);
  a.infer(s.images, {1, 4});
  CHECK(a.decoder().invocations() == 2);
}

TEST_CASE("masked image content is never read") {
  for (bool mmr : {false, true}) {
    OccupancyModel m(small_config(mmr, FmmMode::off));
    const auto s = generate_scene(4, m.config().scene);
    auto noisy = s.images;
    CounterRng rng(1);
    noisy[3] = random_tensor(noisy[3].shape(), rng, -9, 9);
    CHECK(bitwise_equal(m.forward(s.images, {3}).logits, m.forward(noisy, {3}).logits));
  }
}

TEST_CASE("FMM with a zeroed bank matches FMM off") {
  for (FmmMode mode : {FmmMode::single, FmmMode::multi}) {
    OccupancyModel off(small_config(true, FmmMode::off)), on(small_config(true, mode));
    const std::size_t d = on.config().dims.voxel_dim;
    for (std::size_t k = 0; k < kNumClasses; ++k)
      for (std::size_t j = 0; j < on.bank().per_class(); ++j) on.bank().set_prototype(k, j, std::vector<double>(d, 0.0));
    const auto s = generate_scene(6, on.config().scene);
    for (const std::vector<std::size_t>& masked : {std::vector<std::size_t>{}, std::vector<std::size_t>{0, 2}}) {
      CHECK(bitwise_equal(off.forward(s.images, masked).logits, on.forward(s.images, masked).logits));
      CHECK(off.infer(s.images, masked).labels == on.infer(s.images, masked).labels);
    }
  }
}

TEST_CASE("ablation configurations are toggles with distinct hashes") {
  const auto base = small_config(false, FmmMode::off);
  const auto mmr = small_config(true, FmmMode::off);
  const auto sp = small_config(true, FmmMode::single);
  const auto mp = small_config(true, FmmMode::multi);
  CHECK(base.method_label() == "baseline");
  CHECK(mmr.method_label() == "+MMR");
  CHECK(sp.method_label() == "+MMR+SP");
  CHECK(mp.method_label() == "+MMR+MP");
  const std::set<std::string> hashes{base.hash(), mmr.hash(), sp.hash(), mp.hash(),
                                     small_config(false, FmmMode::single).hash()};
  CHECK(hashes.size() == 5);
  // shared modules start from identical weights in every variant
  OccupancyModel a(base), b(mp);
  CHECK(bitwise_equal(a.params().get("head.fc2.weight"), b.params().get("head.fc2.weight")));
}

TEST_CASE("no masked views means no reconstruction gradient") {
  OccupancyModel m(small_config(true, FmmMode::off));
  const auto s = generate_scene(7, m.config().scene);
  const auto labels = labels_of(s);
  const std::vector<double> w(kNumClasses, 1.0);
  auto grads = [&](bool with_mmr) {
    m.params().zero_grad();
    GradTape tape;
    TapeScope scope(tape);
    const auto pass = m.forward(s.images, {}, true);
    CHECK(pass.mmr_empty);
    Tensor loss = ops::cross_entropy(pass.logits, labels, w);
    if (with_mmr) loss = ops::add(loss, pass.mmr_loss);
    tape.backward(loss);
    std::vector<double> out;
    for (auto& [n, t] : m.params().entries())
      if (t.has_grad()) out.insert(out.end(), t.grad().begin(), t.grad().end());
    return out;
  };
  CHECK(grads(true) == grads(false));
}

TEST_CASE("end-to-end loss gradient at desk dims") {
  auto cfg = small_config(true, FmmMode::single, 11);
  OccupancyModel m(cfg);
  const auto s = generate_scene(11, cfg.scene);
  const auto labels = labels_of(s);
  std::vector<std::uint8_t> lab8(s.grid.labels.begin(), s.grid.labels.end());
  update_single_proto(m.bank(), m.forward(s.images, {}).volume.detach(), lab8);
  const std::vector<double> w{0.5, 1.0, 3.0, 2.0, 4.0, 1.5};
  // The model stops gradients at the reconstruction targets, so hold them
  // fixed here; otherwise the numeric side sees the target path too.
  std::map<std::size_t, Tensor> targets;
  {
    const auto full = m.forward(s.images, {});
    for (std::size_t v : {1, 2}) targets[v] = full.features[v].data.clone();
    const auto pass = m.forward(s.images, {1, 2}, true);
    std::map<std::size_t, Tensor> recon;
    for (std::size_t v : {1, 2}) recon[v] = pass.features[v].data;
    CHECK(mmr_loss(recon, targets, {1, 2}).item() == pass.mmr_loss.item());
  }
  std::vector<Tensor> leaves;
  std::vector<std::string> names;
  for (auto& [n, t] : m.params().entries()) {
    leaves.push_back(t);
    names.push_back(n);
  }
  const auto r = m2occ::testing::fd_check(
      leaves,
      [&] {
        const auto pass = m.forward(s.images, {1, 2}, true);
        std::map<std::size_t, Tensor> recon;
        for (std::size_t v : {1, 2}) recon[v] = pass.features[v].data;
        return ops::add(ops::cross_entropy(pass.logits, labels, w), mmr_loss(recon, targets, {1, 2}));
      },
      1e-5, 6, names);
  INFO(r.worst);
  CHECK(r.checked >= 6 * names.size() - 6);
  CHECK(r.max_rel < 1e-3);
}

TEST_CASE("AdamW matches a scalar oracle") {
  ParamStore store;
  Tensor p = store.add("p", Tensor({2}, {1.0, -2.0}));
  OptimSettings s;
  s.lr = 0.01;
  s.weight_decay = 0.1;
  AdamW opt(s, store);
  double w[2] = {1.0, -2.0}, mo[2] = {0, 0}, ve[2] = {0, 0};
  for (int t = 1; t <= 5; ++t) {
    const double g[2] = {0.3 * t, -0.7 + 0.1 * t};
    auto gb = p.mutable_grad();
    gb[0] = g[0];
    gb[1] = g[1];
    opt.step(store);
    for (int i = 0; i < 2; ++i) {
      w[i] *= 1.0 - s.lr * s.weight_decay;
      mo[i] = s.beta1 * mo[i] + (1 - s.beta1) * g[i];
      ve[i] = s.beta2 * ve[i] + (1 - s.beta2) * g[i] * g[i];
      const double mh = mo[i] / (1 - std::pow(s.beta1, t)), vh = ve[i] / (1 - std::pow(s.beta2, t));
      w[i] -= s.lr * mh / (std::sqrt(vh) + s.eps);
      CHECK(std::abs(p.at(i) - w[i]) < 1e-14);
    }
  }
  CHECK(opt.steps() == 5);
}

TEST_CASE("class weights are capped inverse frequencies") {
  const auto w = class_weights({1000, 100, 10, 0, 500, 1}, 10.0);
  CHECK(w[0] == 1.0);
  CHECK(w[1] == 10.0);
  CHECK(w[4] == 2.0);
  CHECK(w[3] == 10.0);
  CHECK(w[5] == 10.0);
}

TEST_CASE("training: loss composition, overfit, bank read-only at inference") {
  auto cfg = small_config(false, FmmMode::off);
  cfg.rvm.p_mask = 0.0;
  SceneDataset data(Split::train, 4, 9, cfg.scene);
  Trainer plain(cfg, data);
  const auto rec = plain.train_step();
  CHECK(rec.loss == rec.loss_occ);
  CHECK(rec.loss_mmr == 0.0);

  auto fcfg = small_config(true, FmmMode::single);
  fcfg.rvm.p_mask = 0.5;
  fcfg.optim.epochs = 50;
  Trainer t(fcfg, data);
  std::vector<double> losses;
  t.run(200, [&](const StepRecord& r) {
    CHECK(std::isfinite(r.loss));
    losses.push_back(r.loss_occ);
    return true;
  });
  REQUIRE(losses.size() == 200);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 20; ++i) {
    first += losses[i];
    last += losses[180 + i];
  }
  CHECK(last < 0.5 * first);
  for (double v : values(t.model().bank().prototypes())) CHECK(std::isfinite(v));

  const Tensor bank = t.model().bank().prototypes().clone();
  const auto flags = t.model().bank().initialized();
  for (int i = 0; i < 100; ++i) t.model().infer(data[i % 4].images, i % 3 == 0 ? std::vector<std::size_t>{} : std::vector<std::size_t>{std::size_t(i % 6)});
  CHECK(bitwise_equal(t.model().bank().prototypes(), bank));
  CHECK(t.model().bank().initialized() == flags);
}

TEST_CASE("checkpoint round trip and resume replay") {
  m2occ::testing::TempDir dir("ckpt");
  auto cfg = small_config(true, FmmMode::multi);
  cfg.rvm.max_masked = 2;
  SceneDataset data(Split::train, 6, 2, cfg.scene);
  Trainer a(cfg, data);
  a.run(5, nullptr);
  a.save_checkpoint(dir.path() / "a.m2ck");
  const auto next = a.train_step();
  const auto after = a.train_step();

  Trainer b(cfg, data);
  b.load_checkpoint(dir.path() / "a.m2ck");
  CHECK(b.step() == 5);
  b.save_checkpoint(dir.path() / "b.m2ck");
  CHECK(slurp(dir.path() / "a.m2ck") == slurp(dir.path() / "b.m2ck"));
  const auto replay = b.train_step();
  CHECK(replay.loss == next.loss);
  CHECK(replay.loss_mmr == next.loss_mmr);
  CHECK(replay.masked == next.masked);
  CHECK(b.train_step().loss == after.loss);

  const auto model = load_model(dir.path() / "a.m2ck");
  CHECK(bitwise_equal(model.bank().prototypes(), b.model().bank().prototypes()) == false);  // b moved on
  CHECK(read_checkpoint_header(dir.path() / "a.m2ck").step == 5);

  auto other = cfg;
  other.fmm = FmmMode::single;
  Trainer c(other, data);
  CHECK_THROWS_AS(c.load_checkpoint(dir.path() / "a.m2ck"), ParameterError);
  auto reseeded = cfg;
  reseeded.seed = 99;
  Trainer d(reseeded, data);
  CHECK_THROWS_AS(d.load_checkpoint(dir.path() / "a.m2ck"), ParameterError);
}

TEST_CASE("config: presets, JSON round trip, hash ignores seed") {
  const auto desk = PipelineConfig::desk();
  const auto paper = PipelineConfig::paper();
  CHECK(paper.decoder == DecoderPreset{6, 8, 4});
  CHECK(desk.decoder == DecoderPreset{2, 2, 4});
  CHECK(paper.optim.lr == 2e-4);
  CHECK(paper.optim.weight_decay == 0.01);
  CHECK(paper.optim.epochs == 24);
  CHECK(paper.memory_momentum == 0.1);
  CHECK(desk.optim.epochs == 2);
  CHECK(desk.optim.lr == 1e-3);
  CHECK(paper.scene.grid == GridSpec::paper());

  auto c = small_config(true, FmmMode::multi, 3);
  c.rvm.max_masked = 3;
  c.beta_mmr = 0.5;
  c.scene.min_free = 0.55;
  const auto back = PipelineConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());
  auto reseeded = c;
  reseeded.seed = 1234;
  CHECK(reseeded.hash() == c.hash());
  CHECK(c.hash().size() == 16);

  auto bad = c.to_json();
  bad["mmr"]["gain"] = 3;
  CHECK_THROWS_AS(PipelineConfig::from_json(bad), ParameterError);
  auto bad_decoder = c.to_json();
  bad_decoder["model"]["decoder"] = "huge";
  CHECK_THROWS_AS(PipelineConfig::from_json(bad_decoder), ParameterError);
}

TEST_CASE("TOML subset") {
  const auto j = parse_toml(R"(
# experiment
preset = "desk"
seed = 42

[mmr]
enabled = true   # on
beta = 0.5

[fmm]
mode = "single"

[scene.grid]
nx = 16
half_extent_m = 8.0

[scene]
buildings = [2, 3]
)");
  CHECK(j["seed"] == 42);
  CHECK(j["mmr"]["beta"] == 0.5);
  CHECK(j["scene"]["grid"]["nx"] == 16);
  CHECK(j["scene"]["buildings"] == nlohmann::json::array({2, 3}));
  const auto c = PipelineConfig::from_json(j);
  CHECK(c.fmm == FmmMode::single);
  CHECK(c.beta_mmr == 0.5);
  CHECK(c.seed == 42);

  CHECK_THROWS_AS(parse_toml("a = \n"), FormatError);
  CHECK_THROWS_AS(parse_toml("[unterminated\n"), FormatError);
  CHECK_THROWS_AS(parse_toml("x = 1\nx = 2\n"), FormatError);
}
