#include "m2occ/fmm.hpp"

#include <cmath>
#include <limits>

#include "m2occ/errors.hpp"
#include "m2occ/ops.hpp"
#include "m2occ/rng.hpp"

namespace m2occ {

namespace {

constexpr double kCosEps = 1e-8;
constexpr double kBootstrapJitter = 1e-2;

void check_inputs(const PrototypeBank& bank, const Tensor& features, std::span<const std::uint8_t> labels) {
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw DimensionError("bank update: features " + shape_str(features.shape()) + " vs bank dim " +
                         std::to_string(bank.dim()));
  }
  // an empty label set is a no-op whatever rows the caller passed
  if (!labels.empty() && labels.size() != features.dim(0)) {
    throw DimensionError("bank update: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(features.dim(0)) + " features");
  }
  for (std::uint8_t l : labels) {
    if (l >= bank.classes()) throw ParameterError("bank update: label " + std::to_string(l) + " out of range");
  }
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / ((std::sqrt(na) + kCosEps) * (std::sqrt(nb) + kCosEps));
}

// Mean of the rows of `x` selected by `rows`, accumulated in row order.
std::vector<double> row_mean(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t d = x.dim(1);
  std::vector<double> acc(d, 0.0);
  const double* p = x.data().data();
  for (std::size_t r : rows) {
    for (std::size_t i = 0; i < d; ++i) acc[i] += p[r * d + i];
  }
  const double n = static_cast<double>(rows.size());
  for (double& a : acc) a /= n;
  return acc;
}

void ema_into(PrototypeBank& bank, std::size_t k, std::size_t j, const std::vector<double>& target) {
  std::vector<double> next(target.size());
  const auto cur = bank.prototype(k, j);
  const double lam = bank.momentum();
  for (std::size_t i = 0; i < next.size(); ++i) next[i] = (1.0 - lam) * cur[i] + lam * target[i];
  bank.set_prototype(k, j, next);
}

std::vector<std::vector<std::size_t>> rows_by_class(std::span<const std::uint8_t> labels, std::size_t classes) {
  std::vector<std::vector<std::size_t>> rows(classes);
  for (std::size_t r = 0; r < labels.size(); ++r) rows[labels[r]].push_back(r);
  return rows;
}

}  // namespace

std::string fmm_mode_name(FmmMode m) {
  switch (m) {
    case FmmMode::off:
      return "off";
    case FmmMode::single:
      return "single";
    case FmmMode::multi:
      return "multi";
  }
  return "off";
}

FmmMode parse_fmm_mode(const std::string& s) {
  if (s == "off") return FmmMode::off;
  if (s == "single") return FmmMode::single;
  if (s == "multi") return FmmMode::multi;
  throw ParameterError("unknown fmm mode '" + s + "' (expected off|single|multi)");
}

PrototypeBank::PrototypeBank(std::size_t classes, std::size_t per_class, std::size_t dim, double momentum,
                             double temperature, std::uint64_t seed)
    : classes_(classes), per_class_(per_class), dim_(dim), momentum_(momentum), temperature_(temperature),
      seed_(seed) {
  if (classes == 0 || per_class == 0 || dim == 0) throw DimensionError("prototype bank needs nonzero extents");
  if (!(momentum > 0.0 && momentum <= 1.0)) {
    throw ParameterError("bank momentum must lie in (0, 1], got " + std::to_string(momentum));
  }
  if (!(temperature > 0.0)) throw ParameterError("bank temperature must be positive");
  protos_ = Tensor({classes, per_class, dim}, 0.0);
  init_.assign(classes * per_class, 0);
}

std::span<const double> PrototypeBank::prototype(std::size_t k, std::size_t j) const {
  if (k >= classes_ || j >= per_class_) throw ParameterError("prototype index out of range");
  return protos_.data().subspan((k * per_class_ + j) * dim_, dim_);
}

void PrototypeBank::set_prototype(std::size_t k, std::size_t j, std::span<const double> value) {
  if (k >= classes_ || j >= per_class_) throw ParameterError("prototype index out of range");
  if (value.size() != dim_) throw DimensionError("prototype value has wrong length");
  auto dst = protos_.mutable_data().subspan((k * per_class_ + j) * dim_, dim_);
  std::copy(value.begin(), value.end(), dst.begin());
  init_[k * per_class_ + j] = 1;
}

void PrototypeBank::restore(const Tensor& prototypes, const std::vector<std::uint8_t>& initialized) {
  if (prototypes.shape() != protos_.shape() || initialized.size() != init_.size()) {
    throw DimensionError("bank restore: shape " + shape_str(prototypes.shape()) + " vs " +
                         shape_str(protos_.shape()));
  }
  protos_ = prototypes.detach().clone();
  init_ = initialized;
}

BankUpdate update_single_proto(PrototypeBank& bank, const Tensor& features, std::span<const std::uint8_t> labels) {
  check_inputs(bank, features, labels);
  BankUpdate out;
  out.no_labels = labels.empty();
  if (out.no_labels) return out;
  const auto rows = rows_by_class(labels, bank.classes());
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    if (rows[k].empty()) continue;
    const auto mean = row_mean(features, rows[k]);
    for (std::size_t j = 0; j < bank.per_class(); ++j) {
      if (bank.initialized(k, j)) {
        ema_into(bank, k, j, mean);
      } else {
        bank.set_prototype(k, j, mean);
      }
    }
    ++out.classes_updated;
  }
  return out;
}

BankUpdate update_multi_proto(PrototypeBank& bank, const Tensor& features, std::span<const std::uint8_t> labels) {
  check_inputs(bank, features, labels);
  BankUpdate out;
  out.no_labels = labels.empty();
  if (out.no_labels) return out;
  const std::size_t np = bank.per_class();
  const std::size_t d = bank.dim();
  const auto rows = rows_by_class(labels, bank.classes());
  const double* x = features.data().data();
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    if (rows[k].empty()) continue;
    ++out.classes_updated;
    bool any_init = false;
    for (std::size_t j = 0; j < np; ++j) any_init = any_init || bank.initialized(k, j);
    if (!any_init) {
      const auto mean = row_mean(features, rows[k]);
      double norm = 0.0;
      for (double v : mean) norm += v * v;
      const double jitter = kBootstrapJitter * std::max(std::sqrt(norm / static_cast<double>(d)), 1e-6);
      for (std::size_t j = 0; j < np; ++j) {
        std::vector<double> value = mean;
        if (np > 1) {
          CounterRng rng(splitmix64(bank.seed() ^ splitmix64(k * np + j + 1)));
          for (double& v : value) v += jitter * rng.normal();
        }
        bank.set_prototype(k, j, value);
      }
      continue;
    }
    std::vector<std::vector<std::size_t>> assigned(np);
    if (np == 1) {
      assigned[0] = rows[k];
    } else {
      for (std::size_t r : rows[k]) {
        std::span<const double> row(x + r * d, d);
        std::size_t best = 0;
        double best_sim = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < np; ++j) {
          if (!bank.initialized(k, j)) continue;
          const double s = cosine(row, bank.prototype(k, j));
          if (s > best_sim) {
            best_sim = s;
            best = j;
          }
        }
        assigned[best].push_back(r);
      }
    }
    for (std::size_t j = 0; j < np; ++j) {
      if (assigned[j].empty()) continue;
      const auto mean = row_mean(features, assigned[j]);
      if (bank.initialized(k, j)) {
        ema_into(bank, k, j, mean);
      } else {
        bank.set_prototype(k, j, mean);
      }
    }
  }
  return out;
}

Tensor similarity(const PrototypeBank& bank, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != bank.dim()) {
    throw DimensionError("similarity: features " + shape_str(features.shape()) + " vs bank dim " +
                         std::to_string(bank.dim()));
  }
  const Tensor refs({bank.classes() * bank.per_class(), bank.dim()},
                    std::vector<double>(bank.prototypes().data().begin(), bank.prototypes().data().end()));
  const Tensor s = ops::cosine_similarity(features, refs, kCosEps);
  return ops::reshape(s, {features.dim(0), bank.classes(), bank.per_class()});
}

Tensor retrieval_weights(const PrototypeBank& bank, const Tensor& sim) {
  if (sim.rank() != 3 || sim.dim(1) != bank.classes() || sim.dim(2) != bank.per_class()) {
    throw DimensionError("retrieval_weights: similarity " + shape_str(sim.shape()));
  }
  return ops::masked_softmax(sim, bank.temperature(), bank.initialized());
}

Tensor refine(const PrototypeBank& bank, const Tensor& features, const Tensor& gate, const Tensor& alpha) {
  const Tensor readout = ops::memory_readout(gate, alpha, bank.prototypes());
  return ops::add(features, readout);
}

Tensor GateHead::forward(const Tensor& features) const { return ops::softmax(linear.forward(features)); }

GateHead make_gate_head(ParamStore& store, const std::string& name, std::size_t dim, std::size_t classes,
                        CounterRng& rng) {
  return GateHead{make_linear(store, name, dim, classes, rng)};
}

}  // namespace m2occ
