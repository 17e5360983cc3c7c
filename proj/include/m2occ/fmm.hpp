#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m2occ/nn.hpp"
#include "m2occ/tensor.hpp"

namespace m2occ {

enum class FmmMode { off, single, multi };
std::string fmm_mode_name(FmmMode m);
FmmMode parse_fmm_mode(const std::string& s);

// Per-class prototype memory (K, N_p, D). Entries start uninitialized and are
// excluded from retrieval until their class is seen with labels. The bank is
// never touched by gradients; only the EMA updates below write to it.
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(std::size_t classes, std::size_t per_class, std::size_t dim, double momentum = 0.1,
                double temperature = 0.1, std::uint64_t seed = 0);

  std::size_t classes() const { return classes_; }
  std::size_t per_class() const { return per_class_; }
  std::size_t dim() const { return dim_; }
  double momentum() const { return momentum_; }
  double temperature() const { return temperature_; }
  std::uint64_t seed() const { return seed_; }

  const Tensor& prototypes() const { return protos_; }  // (K, N_p, D)
  const std::vector<std::uint8_t>& initialized() const { return init_; }
  bool initialized(std::size_t k, std::size_t j) const { return init_.at(k * per_class_ + j) != 0; }
  std::span<const double> prototype(std::size_t k, std::size_t j) const;
  void set_prototype(std::size_t k, std::size_t j, std::span<const double> value);

  // Restores state from a checkpoint.
  void restore(const Tensor& prototypes, const std::vector<std::uint8_t>& initialized);

 private:
  std::size_t classes_ = 0;
  std::size_t per_class_ = 0;
  std::size_t dim_ = 0;
  double momentum_ = 0.1;
  double temperature_ = 0.1;
  std::uint64_t seed_ = 0;
  Tensor protos_;
  std::vector<std::uint8_t> init_;
};

struct BankUpdate {
  bool no_labels = false;  // nothing labelled; bank untouched
  std::size_t classes_updated = 0;
};

// m_k <- (1 - lambda) m_k + lambda * mean of features labelled k. A class seen
// for the first time is set to that mean directly.
BankUpdate update_single_proto(PrototypeBank& bank, const Tensor& features, std::span<const std::uint8_t> labels);

// Each labelled feature goes to the nearest (cosine) sub-prototype of its
// class; each sub-prototype then takes the EMA step toward its assigned mean.
// Uninitialized sub-prototypes start from the class mean plus a small seeded
// offset. With N_p = 1 this is bit-identical to update_single_proto.
BankUpdate update_multi_proto(PrototypeBank& bank, const Tensor& features, std::span<const std::uint8_t> labels);

// Cosine similarity of every feature (V, D) to every prototype: (V, K, N_p).
Tensor similarity(const PrototypeBank& bank, const Tensor& features);

// Softmax over N_p at temperature tau with uninitialized prototypes masked out.
Tensor retrieval_weights(const PrototypeBank& bank, const Tensor& sim);

// x + sum_k P_k sum_j alpha_kj m_kj.
Tensor refine(const PrototypeBank& bank, const Tensor& features, const Tensor& gate, const Tensor& alpha);

struct GateHead {
  Linear linear;  // D -> K

  Tensor forward(const Tensor& features) const;  // softmax over K
};

GateHead make_gate_head(ParamStore& store, const std::string& name, std::size_t dim, std::size_t classes,
                        CounterRng& rng);

}  // namespace m2occ
