#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "m2occ/tensor.hpp"

// Differentiable operations. Every op records itself on the active tape when
// an input requires a gradient; without an active tape they are plain
// forward computations.
namespace m2occ::ops {

Tensor matmul(const Tensor& a, const Tensor& b);  // (M,K)·(K,N)
Tensor transpose(const Tensor& a);                // (M,N) -> (N,M)
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double factor);

// x[..., N] combined with a vector v[N] repeated over leading axes.
Tensor add_row(const Tensor& x, const Tensor& v);
Tensor mul_row(const Tensor& x, const Tensor& v);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

Tensor gelu(const Tensor& x);  // exact erf form

// Softmax over the last axis of x / temperature, with max subtraction.
Tensor softmax(const Tensor& x, double temperature = 1.0);
// As softmax, restricted to entries with valid[flat % valid.size()] != 0.
// Invalid entries get weight 0; a group with no valid entry is all zeros.
Tensor masked_softmax(const Tensor& x, double temperature, std::span<const std::uint8_t> valid);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

// Rows of `table` (R, C) selected by `indices`; result (n, C).
Tensor embedding(const Tensor& table, std::span<const std::size_t> indices);

// Class-weighted mean negative log-likelihood of logits (V, C) with a fused
// log-softmax. Normalized by the sum of the selected weights.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights);

// Fixed sparse linear map over rows: out[r] = sum of weight * x[src] over
// the entries targeting r. x is (R_in, C); result (out_rows, C).
struct MixEntry {
  std::uint32_t out_row;
  std::uint32_t in_row;
  double weight;
};
Tensor sparse_mix(const Tensor& x, std::size_t out_rows, std::span<const MixEntry> entries);

// Cosine similarity of every row of x (V, D) against constant reference
// rows (P, D); eps is added to each norm. Gradient flows into x only.
Tensor cosine_similarity(const Tensor& x, const Tensor& refs, double eps = 1e-8);

// out[v] = sum_k gate[v,k] * sum_j weights[v,k,j] * bank[k,j]; gate (V,K),
// weights (V,K,Np), bank (K,Np,D) held constant. Result (V, D).
Tensor memory_readout(const Tensor& gate, const Tensor& weights, const Tensor& bank);

}  // namespace m2occ::ops
