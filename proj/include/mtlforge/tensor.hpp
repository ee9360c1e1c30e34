#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace mtlforge {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tape;

// Identity of a tensor on a tape. Shared between copies of the same tensor,
// so a parameter consumed twice on one tape resolves to one node.
struct TapeSlot {
  std::uint64_t tape_id = 0;
  int node = -1;
};

// Dense n-dimensional array of 64-bit reals, row-major. Copies are shallow:
// they share the data buffer and the tape identity. A tensor is immutable
// after creation; `mutable_data` exists for the owner (initialization and
// optimizer updates between tapes) and must not be called while a tape
// recorded against the tensor is still alive.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor vec(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }

  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& mutable_data() { return *data_; }
  std::shared_ptr<const std::vector<double>> shared_data() const { return data_; }
  double at(std::size_t i) const { return (*data_)[i]; }
  double scalar_value() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool rg) { requires_grad_ = rg; }

  // Same underlying buffer (used by the byte-identity partition checks).
  bool shares_data_with(const Tensor& other) const { return data_ == other.data_; }

  TapeSlot& slot() const;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  bool requires_grad_ = false;
  mutable std::shared_ptr<TapeSlot> slot_;
};

using BackwardFn = std::function<void(Tape&, const std::vector<double>& upstream)>;

// Append-only record of one forward pass. Node ids are topologically ordered
// by creation. One tape per forward/backward step; single-threaded.
class Tape {
 public:
  Tape();

  // Registers t as a leaf if it has no node on this tape yet. Only tensors
  // requiring grad may be watched.
  int watch(const Tensor& t);
  int node_of(const Tensor& t) const;
  bool on_tape(const Tensor& t) const { return node_of(t) >= 0; }

  int record(const char* kind, Shape out_shape, BackwardFn backward);
  void bind(const Tensor& out, int node) const;

  // Reverse sweep from a scalar root. Gradients of every reachable
  // requires-grad node are populated; repeated consumers accumulate by sum.
  void backward(const Tensor& root);

  bool has_grad(const Tensor& t) const;
  Tensor grad(const Tensor& t) const;

  // Accumulation interface for backward functions.
  void accumulate(int node, const double* g, std::size_t n);
  std::vector<double>& grad_buffer(int node);

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t id() const { return id_; }

 private:
  struct Node {
    const char* kind;
    Shape shape;
    BackwardFn backward;
  };
  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

// ---- tensor-core operations ------------------------------------------------
// Every op takes an optional tape; with tape == nullptr nothing is recorded
// and the output does not require grad (evaluation mode).

Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor add(const Tensor& a, double b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sub(const Tensor& a, double b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, double s, Tape* tape = nullptr);
Tensor relu(const Tensor& a, Tape* tape = nullptr);
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);

// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
// with central differences at step h. f must be scalar-valued and finite.
double grad_check(const std::function<Tensor(const Tensor&, Tape*)>& f,
                  const Tensor& x, double h = 1e-5);

}  // namespace mtlforge
