#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace m2occ {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

// Dense float64 array with optional participation in reverse-mode
// differentiation. Copies share storage (handle semantics); use clone() for a
// deep copy.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writes bypass the tape; only use on leaves or freshly built tensors.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();  // allocates a zero buffer on demand
  void zero_grad();                  // drops the buffer

  Tensor detach() const;
  Tensor clone() const;

  // Identity of the underlying storage, for tape bookkeeping and tests.
  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);
  std::shared_ptr<detail::TensorImpl> impl_;

  friend class GradTape;
  friend Tensor make_recorded(const char*, Shape, std::vector<double>,
                              std::vector<Tensor>,
                              std::function<void(std::span<const double>)>);
};

// Ordered record of differentiable operations executed while the tape is
// active on the current thread. Each tape is single-threaded; independent
// tapes may live on different threads.
class GradTape {
 public:
  using BackwardFn = std::function<void(std::span<const double>)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays the recorded operations in
  // reverse. Throws ContractError for non-scalar or off-tape losses and when
  // called twice without reset().
  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  std::vector<std::string> op_names() const;
  // Names of operations whose backward ran, in the order they ran.
  const std::vector<std::string>& visit_log() const { return visit_log_; }

  void record(const char* name, const Tensor& output, std::vector<Tensor> inputs,
              BackwardFn fn);
  bool contains(const Tensor& t) const;

 private:
  struct Entry {
    std::string name;
    std::shared_ptr<detail::TensorImpl> output;
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::vector<std::string> visit_log_;
  bool consumed_ = false;
};

// Makes `tape` the active tape on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

GradTape* active_tape();

// Builds an op result and records it on the active tape when any input
// requires a gradient. `fn` receives d(loss)/d(output).
Tensor make_recorded(const char* name, Shape shape, std::vector<double> data,
                     std::vector<Tensor> inputs,
                     std::function<void(std::span<const double>)> fn);

// Per-thread accounting of live tensor payload bytes.
struct MemoryStats {
  std::int64_t live_bytes = 0;
  std::int64_t peak_bytes = 0;
};
MemoryStats memory_stats();
void reset_peak_memory();

}  // namespace m2occ
