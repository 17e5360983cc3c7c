#include <doctest.h>

#include <cmath>

#include "m2occ/errors.hpp"
#include "m2occ/fmm.hpp"
#include "m2occ/ops.hpp"
#include "test_util.hpp"

using namespace m2occ;
using m2occ::testing::bitwise_equal;
using m2occ::testing::random_tensor;
using m2occ::testing::values;

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double cos_oracle(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / ((norm(a) + 1e-8) * (norm(b) + 1e-8));
}

// Features whose class-k rows all equal `value`.
Tensor constant_rows(std::size_t rows, std::size_t d, double value) { return Tensor({rows, d}, value); }

PrototypeBank random_bank(std::size_t k, std::size_t np, std::size_t d, CounterRng& rng, double tau = 0.1) {
  PrototypeBank bank(k, np, d, 0.1, tau, 3);
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t j = 0; j < np; ++j) {
      std::vector<double> v(d);
      for (double& x : v) x = rng.uniform(-1, 1);
      bank.set_prototype(a, j, v);
    }
  return bank;
}

}  // namespace

TEST_CASE("bank parameter validation") {
  CHECK_THROWS_AS(PrototypeBank(3, 1, 4, 0.0, 0.1), ParameterError);
  CHECK_THROWS_AS(PrototypeBank(3, 1, 4, 1.5, 0.1), ParameterError);
  CHECK_THROWS_AS(PrototypeBank(3, 1, 4, 0.1, 0.0), ParameterError);
  CHECK_NOTHROW(PrototypeBank(3, 1, 4, 1.0, 0.1));
  PrototypeBank b(3, 2, 4);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 2; ++j) CHECK_FALSE(b.initialized(k, j));
  CHECK(parse_fmm_mode("multi") == FmmMode::multi);
  CHECK(fmm_mode_name(FmmMode::single) == "single");
  CHECK_THROWS_AS(parse_fmm_mode("double"), ParameterError);
}

TEST_CASE("single-proto EMA substitution and absent classes") {
  PrototypeBank bank(3, 1, 4, 0.1, 0.1);
  const std::vector<double> half(4, 0.5);
  bank.set_prototype(1, 0, half);
  const std::vector<double> other{1, 2, 3, 4};
  bank.set_prototype(2, 0, other);
  const Tensor f = constant_rows(5, 4, 1.0);
  const std::vector<std::uint8_t> labels(5, 1);
  const auto u = update_single_proto(bank, f, labels);
  CHECK(u.classes_updated == 1);
  for (double v : bank.prototype(1, 0)) CHECK(std::abs(v - 0.55) < 1e-15);
  for (std::size_t i = 0; i < 4; ++i) CHECK(bank.prototype(2, 0)[i] == other[i]);
  CHECK_FALSE(bank.initialized(0, 0));
}

TEST_CASE("first update bootstraps to the class mean") {
  PrototypeBank bank(2, 1, 3, 0.1, 0.1);
  Tensor f({3, 3}, {1, 2, 3, 3, 4, 5, 9, 9, 9});
  const std::vector<std::uint8_t> labels{1, 1, 0};
  update_single_proto(bank, f, labels);
  CHECK(bank.initialized(1, 0));
  CHECK(bank.prototype(1, 0)[0] == 2.0);
  CHECK(bank.prototype(1, 0)[2] == 4.0);
  CHECK(bank.prototype(0, 0)[1] == 9.0);
}

TEST_CASE("no labelled voxels leaves the bank alone") {
  PrototypeBank bank(2, 1, 3, 0.1, 0.1);
  bank.set_prototype(0, 0, std::vector<double>{1, 1, 1});
  const Tensor before = bank.prototypes().clone();
  const std::vector<std::uint8_t> none;
  const auto u = update_single_proto(bank, Tensor(Shape{4, 3}), none);
  CHECK(u.no_labels);
  CHECK(u.classes_updated == 0);
  CHECK(bitwise_equal(bank.prototypes(), before));
  CHECK_THROWS_AS(update_single_proto(bank, Tensor(Shape{2, 3}), std::vector<std::uint8_t>{0, 7}), ParameterError);
  CHECK_THROWS_AS(update_single_proto(bank, Tensor(Shape{2, 4}), std::vector<std::uint8_t>{0, 1}), DimensionError);
}

TEST_CASE("50 EMA steps match the closed form") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng rng(seed);
    const double lambda = rng.uniform(0.01, 1.0);
    const std::size_t d = 5;
    PrototypeBank bank(2, 1, d, lambda, 0.1);
    std::vector<double> m0(d);
    for (double& v : m0) v = rng.uniform(-1, 1);
    bank.set_prototype(1, 0, m0);
    std::vector<std::vector<double>> means;
    for (int t = 0; t < 50; ++t) {
      const std::size_t rows = 1 + rng.below(4);
      Tensor f = random_tensor({rows, d}, rng, -2, 2);
      std::vector<double> mean(d, 0.0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) mean[i] += f.at(r * d + i) / static_cast<double>(rows);
      means.push_back(mean);
      update_single_proto(bank, f, std::vector<std::uint8_t>(rows, 1));
    }
    for (std::size_t i = 0; i < d; ++i) {
      double want = std::pow(1.0 - lambda, 50) * m0[i];
      for (int t = 0; t < 50; ++t) want += lambda * std::pow(1.0 - lambda, 49 - t) * means[t][i];
      CHECK(std::abs(bank.prototype(1, 0)[i] - want) < 1e-10);
    }
  }
}

TEST_CASE("EMA contracts geometrically toward a constant input") {
  PrototypeBank bank(1, 1, 3, 0.1, 0.1);
  bank.set_prototype(0, 0, std::vector<double>{4, -2, 0});
  const std::vector<double> target{1, 1, 1};
  double gap0 = 0.0;
  for (std::size_t i = 0; i < 3; ++i) gap0 = std::max(gap0, std::abs(bank.prototype(0, 0)[i] - target[i]));
  const Tensor f = constant_rows(2, 3, 1.0);
  for (int t = 1; t <= 200; ++t) {
    update_single_proto(bank, f, std::vector<std::uint8_t>(2, 0));
    double gap = 0.0;
    for (std::size_t i = 0; i < 3; ++i) gap = std::max(gap, std::abs(bank.prototype(0, 0)[i] - target[i]));
    CHECK(gap <= std::pow(0.9, t) * gap0 * (1.0 + 1e-9) + 1e-15);
    for (double v : bank.prototype(0, 0)) CHECK(std::isfinite(v));
  }
}

TEST_CASE("similarity examples and loop oracle") {
  CounterRng rng(1);
  auto bank = random_bank(3, 2, 4, rng);
  Tensor x({2, 4});
  auto p = bank.prototype(1, 1);
  for (std::size_t i = 0; i < 4; ++i) x.mutable_data()[i] = 3.0 * p[i];
  // second row orthogonal to m_{0,0}
  auto m = bank.prototype(0, 0);
  std::vector<double> o{m[1], -m[0], m[3], -m[2]};
  for (std::size_t i = 0; i < 4; ++i) x.mutable_data()[4 + i] = o[i];
  const Tensor s = similarity(bank, x);
  REQUIRE(s.shape() == Shape{2, 3, 2});
  CHECK(std::abs(s.at(0 * 6 + 1 * 2 + 1) - 1.0) < 1e-6);
  CHECK(std::abs(s.at(1 * 6 + 0)) < 1e-6);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng r(seed + 50);
    auto b = random_bank(4, 3, 6, r);
    Tensor feats = random_tensor({7, 6}, r);
    const Tensor sim = similarity(b, feats);
    for (std::size_t v = 0; v < 7; ++v)
      for (std::size_t k = 0; k < 4; ++k)
        for (std::size_t j = 0; j < 3; ++j) {
          const double got = sim.at((v * 4 + k) * 3 + j);
          const double want = cos_oracle(std::span<const double>(feats.data().data() + v * 6, 6), b.prototype(k, j));
          CHECK(std::abs(got - want) < 1e-10);
          CHECK(got <= 1.0 + 1e-6);
          CHECK(got >= -1.0 - 1e-6);
        }
  }
  // zero features stay finite
  for (double v : values(similarity(bank, Tensor({1, 4}, 0.0)))) CHECK(std::isfinite(v));
}

TEST_CASE("retrieval weights") {
  CounterRng rng(2);
  auto one = random_bank(3, 1, 4, rng);
  for (double v : values(retrieval_weights(one, similarity(one, random_tensor({5, 4}, rng))))) CHECK(v == 1.0);

  auto four = random_bank(2, 4, 4, rng);
  Tensor eq({3, 2, 4}, 0.37);
  for (double v : values(retrieval_weights(four, eq))) CHECK(std::abs(v - 0.25) < 1e-15);

  PrototypeBank sharp(2, 4, 4, 0.1, 1e-3);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t j = 0; j < 4; ++j) sharp.set_prototype(k, j, std::vector<double>{1, 0, 0, 0});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng r(seed);
    Tensor s({1, 2, 4});
    for (std::size_t i = 0; i < 8; ++i) s.mutable_data()[i] = 0.1 * static_cast<double>((i * 5 + seed) % 8) + 0.01 * i;
    const Tensor a = retrieval_weights(sharp, s);
    for (std::size_t k = 0; k < 2; ++k) {
      std::size_t arg_s = 0, arg_a = 0;
      double sum = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        if (s.at(k * 4 + j) > s.at(k * 4 + arg_s)) arg_s = j;
        if (a.at(k * 4 + j) > a.at(k * 4 + arg_a)) arg_a = j;
        sum += a.at(k * 4 + j);
      }
      CHECK(arg_s == arg_a);
      CHECK(a.at(k * 4 + arg_a) > 0.999);
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }

  // uninitialized sub-prototypes take no weight; a class with none sums to 0
  PrototypeBank partial(2, 3, 4, 0.1, 0.5);
  partial.set_prototype(0, 1, std::vector<double>{1, 2, 3, 4});
  partial.set_prototype(0, 2, std::vector<double>{4, 3, 2, 1});
  const Tensor a = retrieval_weights(partial, similarity(partial, random_tensor({3, 4}, rng)));
  for (std::size_t v = 0; v < 3; ++v) {
    CHECK(a.at(v * 6 + 0) == 0.0);
    CHECK(std::abs(a.at(v * 6 + 1) + a.at(v * 6 + 2) - 1.0) < 1e-9);
    for (std::size_t j = 0; j < 3; ++j) CHECK(a.at(v * 6 + 3 + j) == 0.0);
  }
}

TEST_CASE("refine: zero bank identity, one-hot gate, triple-loop oracle, bound") {
  CounterRng rng(3);
  PrototypeBank zero(3, 2, 4);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t j = 0; j < 2; ++j) zero.set_prototype(k, j, std::vector<double>(4, 0.0));
  const Tensor x = random_tensor({5, 4}, rng);
  Tensor gate = ops::softmax(random_tensor({5, 3}, rng));
  CHECK(bitwise_equal(refine(zero, x, gate, retrieval_weights(zero, similarity(zero, x))), x));

  auto single = random_bank(3, 1, 4, rng);
  Tensor hot({5, 3}, 0.0);
  for (std::size_t v = 0; v < 5; ++v) hot.mutable_data()[v * 3 + 2] = 1.0;
  const Tensor out = refine(single, x, hot, retrieval_weights(single, similarity(single, x)));
  for (std::size_t v = 0; v < 5; ++v)
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.at(v * 4 + i) == x.at(v * 4 + i) + single.prototype(2, 0)[i]);

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng r(seed + 9);
    auto b = random_bank(4, 3, 5, r);
    const Tensor xs = random_tensor({6, 5}, r);
    const Tensor p = ops::softmax(random_tensor({6, 4}, r));
    const Tensor alpha = retrieval_weights(b, similarity(b, xs));
    const Tensor xr = refine(b, xs, p, alpha);
    double max_norm = 0.0;
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t j = 0; j < 3; ++j) max_norm = std::max(max_norm, norm(b.prototype(k, j)));
    for (std::size_t v = 0; v < 6; ++v) {
      double gate_sum = 0.0;
      for (std::size_t k = 0; k < 4; ++k) gate_sum += p.at(v * 4 + k);
      CHECK(std::abs(gate_sum - 1.0) < 1e-6);
      std::vector<double> delta(5);
      for (std::size_t d = 0; d < 5; ++d) {
        double acc = xs.at(v * 5 + d);
        for (std::size_t k = 0; k < 4; ++k)
          for (std::size_t j = 0; j < 3; ++j)
            acc += p.at(v * 4 + k) * alpha.at((v * 4 + k) * 3 + j) * b.prototype(k, j)[d];
        CHECK(std::abs(xr.at(v * 5 + d) - acc) < 1e-10);
        delta[d] = xr.at(v * 5 + d) - xs.at(v * 5 + d);
      }
      CHECK(norm(delta) <= max_norm + 1e-12);
    }
  }
}

TEST_CASE("refine gradients reach features and gate but never the bank") {
  CounterRng rng(4);
  auto b = random_bank(3, 2, 4, rng);
  Tensor x = m2occ::testing::random_leaf({4, 4}, rng);
  Tensor logits = m2occ::testing::random_leaf({4, 3}, rng);
  const auto r = m2occ::testing::fd_check({x, logits}, [&] {
    const Tensor alpha = retrieval_weights(b, similarity(b, x));
    return ops::sum(ops::mul(refine(b, x, ops::softmax(logits), alpha), refine(b, x, ops::softmax(logits), alpha)));
  });
  INFO(r.worst);
  CHECK(r.max_rel < 1e-4);
  CHECK_FALSE(b.prototypes().requires_grad());
}

TEST_CASE("multi-proto with one sub-prototype is bit-identical to single-proto") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng rng(seed);
    PrototypeBank a(4, 1, 6, 0.2, 0.1, seed), b(4, 1, 6, 0.2, 0.1, seed);
    for (int t = 0; t < 20; ++t) {
      const std::size_t rows = 3 + rng.below(10);
      Tensor f = random_tensor({rows, 6}, rng);
      std::vector<std::uint8_t> labels(rows);
      for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));  // class 3 never seen
      update_single_proto(a, f, labels);
      update_multi_proto(b, f, labels);
      REQUIRE(bitwise_equal(a.prototypes(), b.prototypes()));
      REQUIRE(a.initialized() == b.initialized());
      const Tensor x = random_tensor({5, 6}, rng);
      const Tensor p = ops::softmax(random_tensor({5, 4}, rng));
      const Tensor ra = refine(a, x, p, retrieval_weights(a, similarity(a, x)));
      const Tensor rb = refine(b, x, p, retrieval_weights(b, similarity(b, x)));
      REQUIRE(bitwise_equal(ra, rb));
    }
  }
}

TEST_CASE("multi-proto: absent class untouched, bootstrap is seeded") {
  PrototypeBank bank(3, 4, 5, 0.1, 0.1, 8);
  CounterRng rng(5);
  Tensor f = random_tensor({6, 5}, rng);
  update_multi_proto(bank, f, std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(bank.initialized(0, j));
    CHECK_FALSE(bank.initialized(2, j));
  }
  // sub-prototypes start distinct
  CHECK(bank.prototype(0, 0)[0] != bank.prototype(0, 1)[0]);
  PrototypeBank twin(3, 4, 5, 0.1, 0.1, 8);
  update_multi_proto(twin, f, std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  CHECK(bitwise_equal(bank.prototypes(), twin.prototypes()));

  const Tensor before = bank.prototypes().clone();
  update_multi_proto(bank, random_tensor({3, 5}, rng), std::vector<std::uint8_t>{1, 1, 1});
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 5; ++i) CHECK(bank.prototype(0, j)[i] == before.at((0 * 4 + j) * 5 + i));
}

TEST_CASE("multi-proto separates two clusters of one class") {
  const std::size_t d = 8;
  PrototypeBank bank(2, 2, d, 0.1, 0.1, 21);
  std::vector<double> ca(d, 0.0), cb(d, 0.0);
  for (std::size_t i = 0; i < d / 2; ++i) ca[i] = 1.0;
  for (std::size_t i = d / 2; i < d; ++i) cb[i] = 1.0;
  CounterRng rng(6);
  for (int t = 0; t < 300; ++t) {
    Tensor f({16, d});
    for (std::size_t r = 0; r < 16; ++r) {
      const auto& c = r % 2 == 0 ? ca : cb;
      for (std::size_t i = 0; i < d; ++i) f.mutable_data()[r * d + i] = c[i] + 0.05 * rng.normal();
    }
    update_multi_proto(bank, f, std::vector<std::uint8_t>(16, 1));
  }
  const double a0 = 1.0 - cos_oracle(bank.prototype(1, 0), ca), a1 = 1.0 - cos_oracle(bank.prototype(1, 1), ca);
  const double b0 = 1.0 - cos_oracle(bank.prototype(1, 0), cb), b1 = 1.0 - cos_oracle(bank.prototype(1, 1), cb);
  const bool straight = a0 < 0.05 && b1 < 0.05;
  const bool crossed = a1 < 0.05 && b0 < 0.05;
  INFO("a0 " << a0 << " a1 " << a1 << " b0 " << b0 << " b1 " << b1);
  CHECK((straight || crossed));
}

TEST_CASE("gate head") {
  ParamStore store;
  CounterRng rng(7);
  GateHead g = make_gate_head(store, "gate", 4, 6, rng);
  Tensor zw = g.linear.weight;
  for (double& v : zw.mutable_data()) v = 0.0;
  const Tensor x = random_tensor({5, 4}, rng);
  for (double v : values(g.forward(x))) CHECK(std::abs(v - 1.0 / 6.0) < 1e-15);

  GateHead h = make_gate_head(store, "gate2", 4, 6, rng);
  const Tensor p = h.forward(random_tensor({9, 4}, rng, -3, 3));
  for (std::size_t v = 0; v < 9; ++v) {
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) s += p.at(v * 6 + k);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CounterRng r(seed);
    ParamStore st;
    GateHead gh = make_gate_head(st, "g", 4, 3, r);
    gh.linear.weight.set_requires_grad(true);
    gh.linear.bias.set_requires_grad(true);
    const Tensor in = random_tensor({5, 4}, r);
    const Tensor w = random_tensor({5, 3}, r);
    const auto res = m2occ::testing::fd_check({gh.linear.weight, gh.linear.bias},
                                              [&] { return ops::sum(ops::mul(gh.forward(in), w)); });
    CHECK(res.max_rel < 1e-4);
  }
}
