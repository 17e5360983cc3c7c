#pragma once

#include <string>
#include <utility>
#include <vector>

#include "m2occ/rng.hpp"
#include "m2occ/tensor.hpp"

namespace m2occ {

// Ordered collection of named trainable tensors. Registration order is the
// order used by the optimizer and by checkpoint files.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  Tensor forward(const Tensor& x) const;  // x (rows, in)
};

// Glorot-uniform weights, zero bias.
Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   CounterRng& rng);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;

  Tensor forward(const Tensor& x) const;
};

LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim);

Tensor normal_tensor(Shape shape, double stddev, CounterRng& rng);

}  // namespace m2occ
