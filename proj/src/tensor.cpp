#include "m2occ/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "m2occ/errors.hpp"

namespace m2occ {

namespace {

thread_local MemoryStats tl_memory;
thread_local GradTape* tl_tape = nullptr;

void track(std::int64_t delta) {
  tl_memory.live_bytes += delta;
  tl_memory.peak_bytes = std::max(tl_memory.peak_bytes, tl_memory.live_bytes);
}

}  // namespace

namespace detail {

struct TensorImpl {
  TensorImpl(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    track(static_cast<std::int64_t>(data.size() * sizeof(double)));
  }
  ~TensorImpl() {
    track(-static_cast<std::int64_t>((data.size() + grad.size()) * sizeof(double)));
  }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor::Tensor(Shape shape, double fill) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  const std::size_t n = shape_numel(shape);
  impl_ = std::make_shared<detail::TensorImpl>(std::move(shape), std::vector<double>(n, fill));
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_ = std::make_shared<detail::TensorImpl>(std::move(shape), std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) {
    impl_->grad.assign(impl_->data.size(), 0.0);
    track(static_cast<std::int64_t>(impl_->grad.size() * sizeof(double)));
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    track(-static_cast<std::int64_t>(impl_->grad.size() * sizeof(double)));
    std::vector<double>().swap(impl_->grad);
  }
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
  Tensor out(impl_->shape, impl_->data);
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

// ---------------------------------------------------------------------------

void GradTape::record(const char* name, const Tensor& output, std::vector<Tensor> inputs,
                      BackwardFn fn) {
  if (consumed_) throw ContractError("recording onto a tape that was already replayed");
  entries_.push_back(Entry{name, output.impl_, std::move(inputs), std::move(fn)});
}

bool GradTape::contains(const Tensor& t) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.output.get() == t.id(); });
}

std::vector<std::string> GradTape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.name);
  return names;
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward called twice without reset");
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!contains(loss)) throw ContractError("loss was not produced on this tape");
  consumed_ = true;
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // unreachable from loss
    visit_log_.push_back(it->name);
    it->fn(it->output->grad);
  }
}

void GradTape::reset() {
  entries_.clear();
  visit_log_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(GradTape& tape) : previous_(tl_tape) { tl_tape = &tape; }
TapeScope::~TapeScope() { tl_tape = previous_; }

GradTape* active_tape() { return tl_tape; }

Tensor make_recorded(const char* name, Shape shape, std::vector<double> data,
                     std::vector<Tensor> inputs,
                     std::function<void(std::span<const double>)> fn) {
  Tensor out(std::move(shape), std::move(data));
  GradTape* tape = tl_tape;
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return out;
  out.impl_->requires_grad = true;
  tape->record(name, out, std::move(inputs), std::move(fn));
  return out;
}

MemoryStats memory_stats() { return tl_memory; }
void reset_peak_memory() { tl_memory.peak_bytes = tl_memory.live_bytes; }

}  // namespace m2occ
