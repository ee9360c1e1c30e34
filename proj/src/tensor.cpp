#include "mtlforge/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace mtlforge {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(data))),
      requires_grad_(requires_grad) {
  for (int d : shape_) {
    if (d <= 0) throw TensorError("non-positive dimension in shape " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_->size()) {
    throw TensorError("shape " + shape_str(shape_) + " does not match data length " +
                      std::to_string(data_->size()));
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vec(std::initializer_list<double> values) {
  return Tensor({static_cast<int>(values.size())}, std::vector<double>(values));
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw TensorError("scalar_value on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

TapeSlot& Tensor::slot() const {
  if (!slot_) slot_ = std::make_shared<TapeSlot>();
  return *slot_;
}

namespace {
std::atomic<std::uint64_t> g_tape_counter{1};
}

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {}

int Tape::watch(const Tensor& t) {
  if (!t.requires_grad()) throw TensorError("watch on a tensor that does not require grad");
  TapeSlot& s = t.slot();
  if (s.tape_id == id_ && s.node >= 0) return s.node;
  int node = record("leaf", t.shape(), nullptr);
  s.tape_id = id_;
  s.node = node;
  return node;
}

int Tape::node_of(const Tensor& t) const {
  const TapeSlot& s = t.slot();
  return s.tape_id == id_ ? s.node : -1;
}

int Tape::record(const char* kind, Shape out_shape, BackwardFn backward) {
  nodes_.push_back(Node{kind, std::move(out_shape), std::move(backward)});
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::bind(const Tensor& out, int node) const {
  TapeSlot& s = out.slot();
  s.tape_id = id_;
  s.node = node;
}

void Tape::accumulate(int node, const double* g, std::size_t n) {
  std::vector<double>& buf = grad_buffer(node);
  for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

std::vector<double>& Tape::grad_buffer(int node) {
  std::vector<double>& buf = grads_[static_cast<std::size_t>(node)];
  if (buf.empty()) buf.assign(shape_numel(nodes_[static_cast<std::size_t>(node)].shape), 0.0);
  return buf;
}

void Tape::backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw TensorError("backward root must be scalar, got shape " + shape_str(root.shape()));
  }
  int root_node = node_of(root);
  if (root_node < 0) throw TensorError("backward root is not on this tape");
  grad_buffer(root_node)[0] = 1.0;
  for (int i = root_node; i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward) continue;
    const std::vector<double>& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    n.backward(*this, g);
  }
}

bool Tape::has_grad(const Tensor& t) const {
  int node = node_of(t);
  return node >= 0 && !grads_[static_cast<std::size_t>(node)].empty();
}

Tensor Tape::grad(const Tensor& t) const {
  int node = node_of(t);
  if (node < 0) throw TensorError("grad requested for a tensor not on this tape");
  const std::vector<double>& g = grads_[static_cast<std::size_t>(node)];
  if (g.empty()) throw TensorError("no gradient recorded for node " + std::to_string(node));
  return Tensor(t.shape(), g);
}

// ---- op helpers -------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
}

// Registers `out` as the result of an op over tracked inputs. `backward`
// receives node ids of the inputs (-1 when untracked).
bool tracking(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

int input_node(Tape& tape, const Tensor& t) {
  return t.requires_grad() ? tape.watch(t) : -1;
}

void finish(Tape& tape, Tensor& out, const char* kind, BackwardFn fn) {
  out.set_requires_grad(true);
  int node = tape.record(kind, out.shape(), std::move(fn));
  tape.bind(out, node);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) + b.at(i);
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a, &b})) {
    int ia = input_node(*tape, a);
    int ib = input_node(*tape, b);
    finish(*tape, r, "add", [ia, ib, n](Tape& t, const std::vector<double>& up) {
      if (ia >= 0) t.accumulate(ia, up.data(), n);
      if (ib >= 0) t.accumulate(ib, up.data(), n);
    });
  }
  return r;
}

Tensor add(const Tensor& a, double b, Tape* tape) {
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) + b;
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a})) {
    int ia = input_node(*tape, a);
    finish(*tape, r, "add", [ia, n](Tape& t, const std::vector<double>& up) {
      t.accumulate(ia, up.data(), n);
    });
  }
  return r;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) - b.at(i);
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a, &b})) {
    int ia = input_node(*tape, a);
    int ib = input_node(*tape, b);
    finish(*tape, r, "sub", [ia, ib, n](Tape& t, const std::vector<double>& up) {
      if (ia >= 0) t.accumulate(ia, up.data(), n);
      if (ib >= 0) {
        std::vector<double>& buf = t.grad_buffer(ib);
        for (std::size_t i = 0; i < n; ++i) buf[i] -= up[i];
      }
    });
  }
  return r;
}

Tensor sub(const Tensor& a, double b, Tape* tape) { return add(a, -b, tape); }

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * b.at(i);
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a, &b})) {
    int ia = input_node(*tape, a);
    int ib = input_node(*tape, b);
    auto va = a.shared_data();
    auto vb = b.shared_data();
    finish(*tape, r, "mul", [ia, ib, va, vb, n](Tape& t, const std::vector<double>& up) {
      if (ia >= 0) {
        std::vector<double>& buf = t.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) buf[i] += up[i] * (*vb)[i];
      }
      if (ib >= 0) {
        std::vector<double>& buf = t.grad_buffer(ib);
        for (std::size_t i = 0; i < n; ++i) buf[i] += up[i] * (*va)[i];
      }
    });
  }
  return r;
}

Tensor scale(const Tensor& a, double s, Tape* tape) {
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * s;
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a})) {
    int ia = input_node(*tape, a);
    finish(*tape, r, "scale", [ia, s, n](Tape& t, const std::vector<double>& up) {
      std::vector<double>& buf = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) buf[i] += up[i] * s;
    });
  }
  return r;
}

Tensor relu(const Tensor& a, Tape* tape) {
  std::vector<double> out(a.numel());
  const std::size_t n = out.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
  Tensor r(a.shape(), std::move(out));
  if (tracking(tape, {&a})) {
    int ia = input_node(*tape, a);
    auto va = a.shared_data();
    finish(*tape, r, "relu", [ia, va, n](Tape& t, const std::vector<double>& up) {
      std::vector<double>& buf = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) {
        if ((*va)[i] > 0.0) buf[i] += up[i];
      }
    });
  }
  return r;
}

namespace {

// C[m,n] += A[m,k] * B[k,n]; contributions to each element arrive in
// ascending-k order, matching the naive per-element loop bit for bit.
void matmul_into(double* c, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
void matmul_at_b_into(double* c, const double* a, const double* b, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * m;
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
void matmul_a_bt_into(double* c, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw TensorError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw TensorError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  matmul_into(out.data(), a.data().data(), b.data().data(), m, k, n);
  Tensor r({m, n}, std::move(out));
  if (tracking(tape, {&a, &b})) {
    int ia = input_node(*tape, a);
    int ib = input_node(*tape, b);
    auto va = a.shared_data();
    auto vb = b.shared_data();
    finish(*tape, r, "matmul", [ia, ib, va, vb, m, k, n](Tape& t, const std::vector<double>& up) {
      if (ia >= 0) {
        // dA = dC * B^T
        matmul_a_bt_into(t.grad_buffer(ia).data(), up.data(), vb->data(), m, n, k);
      }
      if (ib >= 0) {
        // dB = A^T * dC
        matmul_at_b_into(t.grad_buffer(ib).data(), va->data(), up.data(), m, k, n);
      }
    });
  }
  return r;
}

Tensor sum(const Tensor& a, Tape* tape) {
  double acc = 0.0;
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) acc += a.at(i);
  Tensor r({1}, {acc});
  if (tracking(tape, {&a})) {
    int ia = input_node(*tape, a);
    finish(*tape, r, "sum", [ia, n](Tape& t, const std::vector<double>& up) {
      std::vector<double>& buf = t.grad_buffer(ia);
      for (std::size_t i = 0; i < n; ++i) buf[i] += up[0];
    });
  }
  return r;
}

double grad_check(const std::function<Tensor(const Tensor&, Tape*)>& f, const Tensor& x,
                  double h) {
  Tensor xw(x.shape(), x.data(), true);
  Tape tape;
  Tensor y = f(xw, &tape);
  if (y.numel() != 1) throw TensorError("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.scalar_value())) throw TensorError("grad_check: non-finite evaluation");
  tape.backward(y);
  Tensor analytic = tape.grad(xw);

  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor xp(x.shape(), x.data());
    Tensor xm(x.shape(), x.data());
    xp.mutable_data()[i] += h;
    xm.mutable_data()[i] -= h;
    const double fp = f(xp, nullptr).scalar_value();
    const double fm = f(xm, nullptr).scalar_value();
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw TensorError("grad_check: non-finite evaluation at perturbation");
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.at(i);
    const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace mtlforge
