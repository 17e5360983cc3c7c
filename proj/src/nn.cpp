#include "m2occ/nn.hpp"

#include <algorithm>
#include <cmath>

#include "m2occ/errors.hpp"
#include "m2occ/ops.hpp"

namespace m2occ {

Tensor ParamStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ContractError("duplicate parameter name " + name);
  init.set_requires_grad(true);
  entries_.emplace_back(name, init);
  return init;
}

Tensor ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : entries_)
    if (n == name) return t;
  throw ContractError("unknown parameter " + name);
}

bool ParamStore::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

Tensor Linear::forward(const Tensor& x) const { return ops::add_row(ops::matmul(x, weight), bias); }

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   CounterRng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.uniform(-limit, limit);
  Linear l;
  l.weight = store.add(name + ".weight", Tensor({in, out}, std::move(w)));
  l.bias = store.add(name + ".bias", Tensor({out}, 0.0));
  return l;
}

Tensor LayerNormParams::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim) {
  return {store.add(name + ".gamma", Tensor({dim}, 1.0)), store.add(name + ".beta", Tensor({dim}, 0.0))};
}

Tensor normal_tensor(Shape shape, double stddev, CounterRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace m2occ
