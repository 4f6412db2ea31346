#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ipt/rng.hpp"

namespace ipt {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily on first accumulation
  bool requires_grad = false;
  bool frozen = false;
};

// Cheap shared handle over a dense row-major double buffer. Copies alias the
// same storage; ops return fresh tensors recorded on the active tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stdev, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int64_t size() const { return static_cast<int64_t>(data_->values.size()); }
  int64_t dim(size_t i) const { return data_->shape[i]; }
  // 2-D conveniences
  int64_t rows() const { return data_->shape[0]; }
  int64_t cols() const { return data_->shape[1]; }

  double* data() { return data_->values.data(); }
  const double* data() const { return data_->values.data(); }
  std::vector<double>& values() { return data_->values; }
  const std::vector<double>& values() const { return data_->values; }
  double item() const;

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool rg) { data_->requires_grad = rg; }
  bool frozen() const { return data_->frozen; }
  void set_frozen(bool f) { data_->frozen = f; }

  bool has_grad() const { return !data_->grad.empty(); }
  // Zero-filled buffer allocated on demand.
  std::vector<double>& grad_buffer();
  // Copy of the gradient (zeros when no gradient has been accumulated).
  std::vector<double> grad() const;
  void zero_grad();

  // Deep copy of values; grad/tape state not copied.
  Tensor clone() const;

  std::shared_ptr<TensorData> ptr() const { return data_; }

  // Convenience: backward through the active tape (loss must be scalar).
  void backward() const;

 private:
  std::shared_ptr<TensorData> data_;
};

// Named, freezable tensor. Frozen parameters are skipped by the optimizer but
// gradients still flow through them to upstream nodes.
struct Parameter {
  std::string name;
  Tensor tensor;

  bool frozen() const { return tensor.frozen(); }
  void set_frozen(bool f) { tensor.set_frozen(f); }
  int64_t size() const { return tensor.size(); }
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; ops record backward closures in forward order and
// backward() replays them in reverse. One backward per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  size_t node_count() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Suspends recording (evaluation paths inside a training scope).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// ------------------------------ operations ------------------------------
// All take/return value handles and are differentiable when a tape is active.

Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);            // elementwise
Tensor scale(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor add_rows(const Tensor& a, const Tensor& row);     // [R,C] + [1,C] broadcast

Tensor matmul(const Tensor& a, const Tensor& b);         // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                       // [R,C] -> [C,R]

Tensor reshape(const Tensor& a, Shape shape);  // same element count
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids);
Tensor select_columns(const Tensor& a, const std::vector<int64_t>& ids);
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end);
Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// x: [T, C_in], w: [C_out, C_in, K], b: [C_out]; zero padding, stride 1.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t padding = 0);
// Windows clamped to the valid range; output length >= 1.
Tensor maxpool1d(const Tensor& x, int64_t window, int64_t stride);
Tensor adaptive_maxpool1d(const Tensor& x, int64_t out_len);

Tensor softmax(const Tensor& logits);      // over last dim
Tensor log_softmax(const Tensor& logits);  // over last dim
// logits: [B, C], targets: class indices, mean reduction.
Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets);

Tensor sum(const Tensor& x);        // -> scalar [1]
Tensor mean(const Tensor& x);       // -> scalar [1]
Tensor mean_rows(const Tensor& x);  // [R,C] -> [1,C]

Tensor dropout(const Tensor& x, double rate, Rng& rng);

// LSTM-style recurrent cell built from the primitives above. Gate layout in
// w_ih [d_in, 4h], w_hh [h, 4h], b [1, 4h] is (input, forget, cell, output).
struct LstmState {
  Tensor h;  // [1, h]
  Tensor c;  // [1, h]
};
LstmState lstm_cell(const Tensor& x, const LstmState& state, const Tensor& w_ih,
                    const Tensor& w_hh, const Tensor& b);

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).
// A non-finite function value is reported as +inf, never thrown.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double h = 1e-5);

}  // namespace ipt
