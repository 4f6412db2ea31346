#include "ipt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <utility>

namespace ipt {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

// ------------------------------ Tensor ------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor: shape does not match value count");
  }
  data_ = std::make_shared<TensorData>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stdev, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.gauss() * stdev;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw std::runtime_error("item() requires a single-element tensor");
  return data_->values[0];
}

std::vector<double>& Tensor::grad_buffer() {
  if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

std::vector<double> Tensor::grad() const {
  if (data_->grad.empty()) return std::vector<double>(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.clear(); }

Tensor Tensor::clone() const {
  Tensor t(data_->shape, data_->values, data_->requires_grad);
  t.set_frozen(data_->frozen);
  return t;
}

void Tensor::backward() const {
  Tape* tape = Tape::current();
  if (!tape) throw std::runtime_error("backward: no active tape");
  tape->backward(*this);
}

// ------------------------------ Tape ------------------------------

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_fn) {
  entries_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("backward: tape already consumed (double backward unsupported)");
  if (loss.size() != 1) throw std::runtime_error("backward: loss must be a scalar");
  consumed_ = true;
  const_cast<Tensor&>(loss).grad_buffer()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

NoGradGuard::NoGradGuard() : saved_(g_current_tape) { g_current_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_current_tape = saved_; }

// ------------------------------ op helpers ------------------------------

namespace {

bool tracing(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void mark_and_record(Tensor& out, bool trace, std::function<void()> fn) {
  if (trace) {
    out.set_requires_grad(true);
    Tape::current()->record(std::move(fn));
  }
}

// Accumulate src into dst's grad buffer if dst wants gradients.
void accum(const std::shared_ptr<TensorData>& dst, const std::vector<double>& src) {
  if (!dst->requires_grad) return;
  if (dst->grad.empty()) dst->grad.assign(dst->values.size(), 0.0);
  for (size_t i = 0; i < src.size(); ++i) dst->grad[i] += src[i];
}

const std::vector<double>* out_grad(const std::shared_ptr<TensorData>& out) {
  return out->grad.empty() ? nullptr : &out->grad;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2) throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor");
}

}  // namespace

// ------------------------------ elementwise ------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  bool trace = tracing({&a, &b});
  std::vector<double> v(a.values());
  const double* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] += pb[i];
  Tensor out(a.shape(), std::move(v));
  auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, bd, od] {
    const auto* g = out_grad(od);
    if (!g) return;
    accum(ad, *g);
    accum(bd, *g);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mul: shape mismatch");
  bool trace = tracing({&a, &b});
  std::vector<double> v(a.values());
  const double* pb = b.data();
  for (size_t i = 0; i < v.size(); ++i) v[i] *= pb[i];
  Tensor out(a.shape(), std::move(v));
  auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, bd, od] {
    const auto* g = out_grad(od);
    if (!g) return;
    if (ad->requires_grad) {
      if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
      for (size_t i = 0; i < g->size(); ++i) ad->grad[i] += (*g)[i] * bd->values[i];
    }
    if (bd->requires_grad) {
      if (bd->grad.empty()) bd->grad.assign(bd->values.size(), 0.0);
      for (size_t i = 0; i < g->size(); ++i) bd->grad[i] += (*g)[i] * ad->values[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  bool trace = tracing({&a});
  std::vector<double> v(a.values());
  for (double& x : v) x *= c;
  Tensor out(a.shape(), std::move(v));
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od, c] {
    const auto* g = out_grad(od);
    if (!g || !ad->requires_grad) return;
    if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
    for (size_t i = 0; i < g->size(); ++i) ad->grad[i] += (*g)[i] * c;
  });
  return out;
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor add_rows(const Tensor& a, const Tensor& row) {
  require_2d(a, "add_rows");
  require_2d(row, "add_rows");
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw std::invalid_argument("add_rows: row must be [1, cols]");
  }
  bool trace = tracing({&a, &row});
  const int64_t R = a.rows(), C = a.cols();
  std::vector<double> v(a.values());
  const double* pr = row.data();
  for (int64_t r = 0; r < R; ++r) {
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(r * C + c)] += pr[c];
  }
  Tensor out(a.shape(), std::move(v));
  auto ad = a.ptr(), rd = row.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, rd, od, R, C] {
    const auto* g = out_grad(od);
    if (!g) return;
    accum(ad, *g);
    if (rd->requires_grad) {
      if (rd->grad.empty()) rd->grad.assign(rd->values.size(), 0.0);
      for (int64_t r = 0; r < R; ++r) {
        for (int64_t c = 0; c < C; ++c) rd->grad[static_cast<size_t>(c)] += (*g)[static_cast<size_t>(r * C + c)];
      }
    }
  });
  return out;
}

// ------------------------------ linear algebra ------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
  bool trace = tracing({&a, &b});
  const int64_t M = a.rows(), K = a.cols(), N = b.cols();
  std::vector<double> v(static_cast<size_t>(M * N), 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (int64_t i = 0; i < M; ++i) {
    for (int64_t k = 0; k < K; ++k) {
      const double aik = pa[i * K + k];
      if (aik == 0.0) continue;
      const double* brow = pb + k * N;
      double* vrow = v.data() + i * N;
      for (int64_t j = 0; j < N; ++j) vrow[j] += aik * brow[j];
    }
  }
  Tensor out({M, N}, std::move(v));
  auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, bd, od, M, K, N] {
    const auto* g = out_grad(od);
    if (!g) return;
    if (ad->requires_grad) {
      if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
      // dA = dC * B^T
      for (int64_t i = 0; i < M; ++i) {
        for (int64_t j = 0; j < N; ++j) {
          const double gij = (*g)[static_cast<size_t>(i * N + j)];
          if (gij == 0.0) continue;
          const double* brow = bd->values.data();
          for (int64_t k = 0; k < K; ++k) ad->grad[static_cast<size_t>(i * K + k)] += gij * brow[k * N + j];
        }
      }
    }
    if (bd->requires_grad) {
      if (bd->grad.empty()) bd->grad.assign(bd->values.size(), 0.0);
      // dB = A^T * dC
      for (int64_t i = 0; i < M; ++i) {
        const double* arow = ad->values.data() + i * K;
        const double* grow = g->data() + i * N;
        for (int64_t k = 0; k < K; ++k) {
          const double aik = arow[k];
          if (aik == 0.0) continue;
          double* brow = bd->grad.data() + k * N;
          for (int64_t j = 0; j < N; ++j) brow[j] += aik * grow[j];
        }
      }
    }
  });
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  bool trace = tracing({&a});
  const int64_t R = a.rows(), C = a.cols();
  std::vector<double> v(static_cast<size_t>(R * C));
  const double* pa = a.data();
  for (int64_t r = 0; r < R; ++r) {
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(c * R + r)] = pa[r * C + c];
  }
  Tensor out({C, R}, std::move(v));
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od, R, C] {
    const auto* g = out_grad(od);
    if (!g || !ad->requires_grad) return;
    if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
    for (int64_t r = 0; r < R; ++r) {
      for (int64_t c = 0; c < C; ++c) ad->grad[static_cast<size_t>(r * C + c)] += (*g)[static_cast<size_t>(c * R + r)];
    }
  });
  return out;
}

// ------------------------------ gather / slice / concat ------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) throw std::invalid_argument("reshape: element count mismatch");
  bool trace = tracing({&a});
  Tensor out(std::move(shape), a.values());
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od] {
    const auto* g = out_grad(od);
    if (!g) return;
    accum(ad, *g);
  });
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& ids) {
  require_2d(table, "gather_rows");
  const int64_t V = table.rows(), C = table.cols();
  for (int64_t id : ids) {
    if (id < 0 || id >= V) throw std::out_of_range("gather_rows: row index out of range");
  }
  bool trace = tracing({&table});
  const int64_t N = static_cast<int64_t>(ids.size());
  std::vector<double> v(static_cast<size_t>(N * C));
  const double* pt = table.data();
  for (int64_t i = 0; i < N; ++i) {
    std::copy_n(pt + ids[static_cast<size_t>(i)] * C, C, v.data() + i * C);
  }
  Tensor out({N, C}, std::move(v));
  auto td = table.ptr(), od = out.ptr();
  mark_and_record(out, trace, [td, od, ids, C] {
    const auto* g = out_grad(od);
    if (!g || !td->requires_grad) return;
    if (td->grad.empty()) td->grad.assign(td->values.size(), 0.0);
    // scatter-add: duplicate ids accumulate
    for (size_t i = 0; i < ids.size(); ++i) {
      double* dst = td->grad.data() + ids[i] * C;
      const double* src = g->data() + static_cast<int64_t>(i) * C;
      for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
    }
  });
  return out;
}

Tensor select_columns(const Tensor& a, const std::vector<int64_t>& ids) {
  require_2d(a, "select_columns");
  const int64_t R = a.rows(), C = a.cols();
  for (int64_t id : ids) {
    if (id < 0 || id >= C) throw std::out_of_range("select_columns: column index out of range");
  }
  bool trace = tracing({&a});
  const int64_t N = static_cast<int64_t>(ids.size());
  std::vector<double> v(static_cast<size_t>(R * N));
  const double* pa = a.data();
  for (int64_t r = 0; r < R; ++r) {
    for (int64_t j = 0; j < N; ++j) v[static_cast<size_t>(r * N + j)] = pa[r * C + ids[static_cast<size_t>(j)]];
  }
  Tensor out({R, N}, std::move(v));
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od, ids, R, C, N] {
    const auto* g = out_grad(od);
    if (!g || !ad->requires_grad) return;
    if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
    for (int64_t r = 0; r < R; ++r) {
      for (int64_t j = 0; j < N; ++j) {
        ad->grad[static_cast<size_t>(r * C + ids[static_cast<size_t>(j)])] += (*g)[static_cast<size_t>(r * N + j)];
      }
    }
  });
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
  require_2d(a, "slice_rows");
  if (begin < 0 || end > a.rows() || begin >= end) throw std::invalid_argument("slice_rows: bad range");
  bool trace = tracing({&a});
  const int64_t C = a.cols(), N = end - begin;
  std::vector<double> v(a.data() + begin * C, a.data() + end * C);
  Tensor out({N, C}, std::move(v));
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od, begin, C, N] {
    const auto* g = out_grad(od);
    if (!g || !ad->requires_grad) return;
    if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
    for (int64_t i = 0; i < N * C; ++i) ad->grad[static_cast<size_t>(begin * C + i)] += (*g)[static_cast<size_t>(i)];
  });
  return out;
}

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end) {
  require_2d(a, "slice_cols");
  if (begin < 0 || end > a.cols() || begin >= end) throw std::invalid_argument("slice_cols: bad range");
  bool trace = tracing({&a});
  const int64_t R = a.rows(), C = a.cols(), N = end - begin;
  std::vector<double> v(static_cast<size_t>(R * N));
  const double* pa = a.data();
  for (int64_t r = 0; r < R; ++r) std::copy_n(pa + r * C + begin, N, v.data() + r * N);
  Tensor out({R, N}, std::move(v));
  auto ad = a.ptr(), od = out.ptr();
  mark_and_record(out, trace, [ad, od, begin, R, C, N] {
    const auto* g = out_grad(od);
    if (!g || !ad->requires_grad) return;
    if (ad->grad.empty()) ad->grad.assign(ad->values.size(), 0.0);
    for (int64_t r = 0; r < R; ++r) {
      for (int64_t j = 0; j < N; ++j) ad->grad[static_cast<size_t>(r * C + begin + j)] += (*g)[static_cast<size_t>(r * N + j)];
    }
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const int64_t C = parts[0].cols();
  int64_t R = 0;
  bool trace = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != C) throw std::invalid_argument("concat_rows: column mismatch");
    R += p.rows();
    trace = trace || (Tape::current() && p.requires_grad());
  }
  std::vector<double> v;
  v.reserve(static_cast<size_t>(R * C));
  for (const Tensor& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  Tensor out({R, C}, std::move(v));
  std::vector<std::shared_ptr<TensorData>> pd;
  for (const Tensor& p : parts) pd.push_back(p.ptr());
  auto od = out.ptr();
  mark_and_record(out, trace, [pd, od] {
    const auto* g = out_grad(od);
    if (!g) return;
    size_t offset = 0;
    for (const auto& p : pd) {
      if (p->requires_grad) {
        if (p->grad.empty()) p->grad.assign(p->values.size(), 0.0);
        for (size_t i = 0; i < p->values.size(); ++i) p->grad[i] += (*g)[offset + i];
      }
      offset += p->values.size();
    }
  });
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const int64_t R = parts[0].rows();
  int64_t C = 0;
  bool trace = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != R) throw std::invalid_argument("concat_cols: row mismatch");
    C += p.cols();
    trace = trace || (Tape::current() && p.requires_grad());
  }
  std::vector<double> v(static_cast<size_t>(R * C));
  int64_t col0 = 0;
  for (const Tensor& p : parts) {
    const int64_t pc = p.cols();
    for (int64_t r = 0; r < R; ++r) std::copy_n(p.data() + r * pc, pc, v.data() + r * C + col0);
    col0 += pc;
  }
  Tensor out({R, C}, std::move(v));
  std::vector<std::shared_ptr<TensorData>> pd;
  for (const Tensor& p : parts) pd.push_back(p.ptr());
  auto od = out.ptr();
  mark_and_record(out, trace, [pd, od, R, C] {
    const auto* g = out_grad(od);
    if (!g) return;
    int64_t col0 = 0;
    for (const auto& p : pd) {
      const int64_t pc = p->shape[1];
      if (p->requires_grad) {
        if (p->grad.empty()) p->grad.assign(p->values.size(), 0.0);
        for (int64_t r = 0; r < R; ++r) {
          for (int64_t c = 0; c < pc; ++c) p->grad[static_cast<size_t>(r * pc + c)] += (*g)[static_cast<size_t>(r * C + col0 + c)];
        }
      }
      col0 += pc;
    }
  });
  return out;
}

// ------------------------------ normalization / activations ------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const int64_t R = x.rows(), C = x.cols();
  if (gain.size() != C || bias.size() != C) throw std::invalid_argument("layer_norm: gain/bias must have one entry per column");
  bool trace = tracing({&x, &gain, &bias});
  std::vector<double> v(static_cast<size_t>(R * C));
  std::vector<double> mu(static_cast<size_t>(R)), rstd(static_cast<size_t>(R));
  const double* px = x.data();
  const double* pg = gain.data();
  const double* pb = bias.data();
  for (int64_t r = 0; r < R; ++r) {
    const double* row = px + r * C;
    double m = 0.0;
    for (int64_t c = 0; c < C; ++c) m += row[c];
    m /= static_cast<double>(C);
    double var = 0.0;
    for (int64_t c = 0; c < C; ++c) var += (row[c] - m) * (row[c] - m);
    var /= static_cast<double>(C);
    const double rs = 1.0 / std::sqrt(var + eps);
    mu[static_cast<size_t>(r)] = m;
    rstd[static_cast<size_t>(r)] = rs;
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(r * C + c)] = (row[c] - m) * rs * pg[c] + pb[c];
  }
  Tensor out({R, C}, std::move(v));
  auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, gd, bd, od, R, C, mu, rstd] {
    const auto* g = out_grad(od);
    if (!g) return;
    for (int64_t r = 0; r < R; ++r) {
      const double* xrow = xd->values.data() + r * C;
      const double* grow = g->data() + r * C;
      const double m = mu[static_cast<size_t>(r)];
      const double rs = rstd[static_cast<size_t>(r)];
      if (gd->requires_grad) {
        if (gd->grad.empty()) gd->grad.assign(gd->values.size(), 0.0);
        for (int64_t c = 0; c < C; ++c) gd->grad[static_cast<size_t>(c)] += grow[c] * (xrow[c] - m) * rs;
      }
      if (bd->requires_grad) {
        if (bd->grad.empty()) bd->grad.assign(bd->values.size(), 0.0);
        for (int64_t c = 0; c < C; ++c) bd->grad[static_cast<size_t>(c)] += grow[c];
      }
      if (xd->requires_grad) {
        if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
        // dxhat = dy * gain; dx = rs * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const double xhat = (xrow[c] - m) * rs;
          const double dxhat = grow[c] * gd->values[static_cast<size_t>(c)];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        const double inv_c = 1.0 / static_cast<double>(C);
        for (int64_t c = 0; c < C; ++c) {
          const double xhat = (xrow[c] - m) * rs;
          const double dxhat = grow[c] * gd->values[static_cast<size_t>(c)];
          xd->grad[static_cast<size_t>(r * C + c)] += rs * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
        }
      }
    }
  });
  return out;
}

namespace {

Tensor unary_op(const Tensor& x, double (*fwd)(double), double (*dfdx)(double)) {
  bool trace = tracing({&x});
  std::vector<double> v(x.values());
  for (double& t : v) t = fwd(t);
  Tensor out(x.shape(), std::move(v));
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, dfdx] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (size_t i = 0; i < g->size(); ++i) xd->grad[i] += (*g)[i] * dfdx(xd->values[i]);
  });
  return out;
}

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)) +
         x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}
double relu_fwd(double x) { return x > 0.0 ? x : 0.0; }
double relu_grad(double x) { return x > 0.0 ? 1.0 : 0.0; }
double sigmoid_fwd(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double sigmoid_grad(double x) {
  const double s = sigmoid_fwd(x);
  return s * (1.0 - s);
}
double tanh_fwd(double x) { return std::tanh(x); }
double tanh_grad(double x) {
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

}  // namespace

Tensor relu(const Tensor& x) { return unary_op(x, relu_fwd, relu_grad); }
Tensor gelu(const Tensor& x) { return unary_op(x, gelu_fwd, gelu_grad); }
Tensor sigmoid(const Tensor& x) { return unary_op(x, sigmoid_fwd, sigmoid_grad); }
Tensor tanh(const Tensor& x) { return unary_op(x, tanh_fwd, tanh_grad); }

// ------------------------------ convolution / pooling ------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t padding) {
  require_2d(x, "conv1d");
  if (w.shape().size() != 3) throw std::invalid_argument("conv1d: weight must be [C_out, C_in, K]");
  const int64_t T = x.rows(), Cin = x.cols();
  const int64_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin) throw std::invalid_argument("conv1d: weight C_in mismatch");
  if (b.size() != Cout) throw std::invalid_argument("conv1d: bias size mismatch");
  const int64_t Tout = T + 2 * padding - K + 1;
  if (Tout < 1) throw std::invalid_argument("conv1d: input shorter than kernel");
  bool trace = tracing({&x, &w, &b});
  std::vector<double> v(static_cast<size_t>(Tout * Cout));
  const double* px = x.data();
  const double* pw = w.data();
  const double* pb = b.data();
  for (int64_t t = 0; t < Tout; ++t) {
    for (int64_t o = 0; o < Cout; ++o) {
      double acc = pb[o];
      for (int64_t k = 0; k < K; ++k) {
        const int64_t ti = t + k - padding;
        if (ti < 0 || ti >= T) continue;
        const double* xrow = px + ti * Cin;
        const double* wrow = pw + (o * Cin * K) + k;
        for (int64_t ci = 0; ci < Cin; ++ci) acc += xrow[ci] * wrow[ci * K];
      }
      v[static_cast<size_t>(t * Cout + o)] = acc;
    }
  }
  Tensor out({Tout, Cout}, std::move(v));
  auto xd = x.ptr(), wd = w.ptr(), bd = b.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, wd, bd, od, T, Cin, Cout, K, Tout, padding] {
    const auto* g = out_grad(od);
    if (!g) return;
    if (bd->requires_grad && bd->grad.empty()) bd->grad.assign(bd->values.size(), 0.0);
    if (wd->requires_grad && wd->grad.empty()) wd->grad.assign(wd->values.size(), 0.0);
    if (xd->requires_grad && xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (int64_t t = 0; t < Tout; ++t) {
      for (int64_t o = 0; o < Cout; ++o) {
        const double go = (*g)[static_cast<size_t>(t * Cout + o)];
        if (go == 0.0) continue;
        if (bd->requires_grad) bd->grad[static_cast<size_t>(o)] += go;
        for (int64_t k = 0; k < K; ++k) {
          const int64_t ti = t + k - padding;
          if (ti < 0 || ti >= T) continue;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const size_t wi = static_cast<size_t>(o * Cin * K + ci * K + k);
            if (wd->requires_grad) wd->grad[wi] += go * xd->values[static_cast<size_t>(ti * Cin + ci)];
            if (xd->requires_grad) xd->grad[static_cast<size_t>(ti * Cin + ci)] += go * wd->values[wi];
          }
        }
      }
    }
  });
  return out;
}

Tensor maxpool1d(const Tensor& x, int64_t window, int64_t stride) {
  require_2d(x, "maxpool1d");
  if (window < 1 || stride < 1) throw std::invalid_argument("maxpool1d: window/stride must be positive");
  const int64_t T = x.rows(), C = x.cols();
  // ceil mode, windows clamped to [0, T)
  const int64_t Tout = std::max<int64_t>(1, (T - window + stride - 1) / stride + 1);
  bool trace = tracing({&x});
  std::vector<double> v(static_cast<size_t>(Tout * C));
  std::vector<int64_t> argmax(static_cast<size_t>(Tout * C));
  const double* px = x.data();
  for (int64_t t = 0; t < Tout; ++t) {
    const int64_t lo = std::min(t * stride, T - 1);
    const int64_t hi = std::min(lo + window, T);
    for (int64_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t bi = lo;
      for (int64_t i = lo; i < hi; ++i) {
        const double val = px[i * C + c];
        if (val > best) {
          best = val;
          bi = i;
        }
      }
      v[static_cast<size_t>(t * C + c)] = best;
      argmax[static_cast<size_t>(t * C + c)] = bi;
    }
  }
  Tensor out({Tout, C}, std::move(v));
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, argmax, C, Tout] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (int64_t t = 0; t < Tout; ++t) {
      for (int64_t c = 0; c < C; ++c) {
        xd->grad[static_cast<size_t>(argmax[static_cast<size_t>(t * C + c)] * C + c)] += (*g)[static_cast<size_t>(t * C + c)];
      }
    }
  });
  return out;
}

Tensor adaptive_maxpool1d(const Tensor& x, int64_t out_len) {
  require_2d(x, "adaptive_maxpool1d");
  if (out_len < 1) throw std::invalid_argument("adaptive_maxpool1d: out_len must be positive");
  const int64_t T = x.rows(), C = x.cols();
  bool trace = tracing({&x});
  std::vector<double> v(static_cast<size_t>(out_len * C));
  std::vector<int64_t> argmax(static_cast<size_t>(out_len * C));
  const double* px = x.data();
  for (int64_t j = 0; j < out_len; ++j) {
    const int64_t lo = (j * T) / out_len;
    const int64_t hi = std::max(lo + 1, ((j + 1) * T + out_len - 1) / out_len);
    for (int64_t c = 0; c < C; ++c) {
      double best = -std::numeric_limits<double>::infinity();
      int64_t bi = lo;
      for (int64_t i = lo; i < std::min(hi, T); ++i) {
        const double val = px[i * C + c];
        if (val > best) {
          best = val;
          bi = i;
        }
      }
      v[static_cast<size_t>(j * C + c)] = best;
      argmax[static_cast<size_t>(j * C + c)] = bi;
    }
  }
  Tensor out({out_len, C}, std::move(v));
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, argmax, C, out_len] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (int64_t j = 0; j < out_len; ++j) {
      for (int64_t c = 0; c < C; ++c) {
        xd->grad[static_cast<size_t>(argmax[static_cast<size_t>(j * C + c)] * C + c)] += (*g)[static_cast<size_t>(j * C + c)];
      }
    }
  });
  return out;
}

// ------------------------------ softmax family ------------------------------

namespace {

void check_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(op) + ": non-finite logits");
  }
}

// rows/cols for tensors of any rank, treating the last dim as the class axis
std::pair<int64_t, int64_t> row_view(const Tensor& t) {
  const Shape& s = t.shape();
  if (s.empty()) throw std::invalid_argument("softmax: scalar input");
  const int64_t C = s.back();
  return {t.size() / C, C};
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  check_finite(logits, "softmax");
  auto [R, C] = row_view(logits);
  bool trace = tracing({&logits});
  std::vector<double> v(static_cast<size_t>(R * C));
  const double* px = logits.data();
  for (int64_t r = 0; r < R; ++r) {
    const double* row = px + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = std::exp(row[c] - mx);
      v[static_cast<size_t>(r * C + c)] = e;
      denom += e;
    }
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(r * C + c)] /= denom;
  }
  Tensor out(logits.shape(), std::move(v));
  auto xd = logits.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, R, C] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (int64_t r = 0; r < R; ++r) {
      const double* y = od->values.data() + r * C;
      const double* gy = g->data() + r * C;
      double dot = 0.0;
      for (int64_t c = 0; c < C; ++c) dot += gy[c] * y[c];
      for (int64_t c = 0; c < C; ++c) xd->grad[static_cast<size_t>(r * C + c)] += y[c] * (gy[c] - dot);
    }
  });
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  check_finite(logits, "log_softmax");
  auto [R, C] = row_view(logits);
  bool trace = tracing({&logits});
  std::vector<double> v(static_cast<size_t>(R * C));
  const double* px = logits.data();
  for (int64_t r = 0; r < R; ++r) {
    const double* row = px + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
    const double lse = mx + std::log(denom);
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(r * C + c)] = row[c] - lse;
  }
  Tensor out(logits.shape(), std::move(v));
  auto xd = logits.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, R, C] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (int64_t r = 0; r < R; ++r) {
      const double* y = od->values.data() + r * C;
      const double* gy = g->data() + r * C;
      double gsum = 0.0;
      for (int64_t c = 0; c < C; ++c) gsum += gy[c];
      for (int64_t c = 0; c < C; ++c) {
        xd->grad[static_cast<size_t>(r * C + c)] += gy[c] - std::exp(y[c]) * gsum;
      }
    }
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& targets) {
  require_2d(logits, "cross_entropy");
  check_finite(logits, "cross_entropy");
  const int64_t B = logits.rows(), C = logits.cols();
  if (static_cast<int64_t>(targets.size()) != B) throw std::invalid_argument("cross_entropy: one target per row required");
  for (int64_t t : targets) {
    if (t < 0 || t >= C) throw std::out_of_range("cross_entropy: target index out of range");
  }
  bool trace = tracing({&logits});
  const double* px = logits.data();
  double total = 0.0;
  std::vector<double> lse(static_cast<size_t>(B));
  for (int64_t r = 0; r < B; ++r) {
    const double* row = px + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0.0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
    lse[static_cast<size_t>(r)] = mx + std::log(denom);
    total += lse[static_cast<size_t>(r)] - row[targets[static_cast<size_t>(r)]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  auto xd = logits.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, targets, B, C, lse] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    const double go = (*g)[0] / static_cast<double>(B);
    for (int64_t r = 0; r < B; ++r) {
      const double* row = xd->values.data() + r * C;
      for (int64_t c = 0; c < C; ++c) {
        const double p = std::exp(row[c] - lse[static_cast<size_t>(r)]);
        const double y = (c == targets[static_cast<size_t>(r)]) ? 1.0 : 0.0;
        xd->grad[static_cast<size_t>(r * C + c)] += go * (p - y);
      }
    }
  });
  return out;
}

// ------------------------------ reductions ------------------------------

Tensor sum(const Tensor& x) {
  bool trace = tracing({&x});
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (double& gv : xd->grad) gv += (*g)[0];
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const int64_t R = x.rows(), C = x.cols();
  bool trace = tracing({&x});
  std::vector<double> v(static_cast<size_t>(C), 0.0);
  const double* px = x.data();
  for (int64_t r = 0; r < R; ++r) {
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(c)] += px[r * C + c];
  }
  for (double& t : v) t /= static_cast<double>(R);
  Tensor out({1, C}, std::move(v));
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, R, C] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    const double inv = 1.0 / static_cast<double>(R);
    for (int64_t r = 0; r < R; ++r) {
      for (int64_t c = 0; c < C; ++c) xd->grad[static_cast<size_t>(r * C + c)] += (*g)[static_cast<size_t>(c)] * inv;
    }
  });
  return out;
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  bool trace = tracing({&x});
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.values().size());
  for (double& m : mask) m = (rng.uniform() < rate) ? 0.0 : 1.0 / keep;
  std::vector<double> v(x.values());
  for (size_t i = 0; i < v.size(); ++i) v[i] *= mask[i];
  Tensor out(x.shape(), std::move(v));
  auto xd = x.ptr(), od = out.ptr();
  mark_and_record(out, trace, [xd, od, mask] {
    const auto* g = out_grad(od);
    if (!g || !xd->requires_grad) return;
    if (xd->grad.empty()) xd->grad.assign(xd->values.size(), 0.0);
    for (size_t i = 0; i < g->size(); ++i) xd->grad[i] += (*g)[i] * mask[i];
  });
  return out;
}

// ------------------------------ LSTM cell ------------------------------

LstmState lstm_cell(const Tensor& x, const LstmState& state, const Tensor& w_ih,
                    const Tensor& w_hh, const Tensor& b) {
  const int64_t H = w_hh.rows();
  Tensor z = add_rows(add(matmul(x, w_ih), matmul(state.h, w_hh)), b);  // [1, 4H]
  Tensor i = sigmoid(slice_cols(z, 0, H));
  Tensor f = sigmoid(slice_cols(z, H, 2 * H));
  Tensor g = tanh(slice_cols(z, 2 * H, 3 * H));
  Tensor o = sigmoid(slice_cols(z, 3 * H, 4 * H));
  Tensor c_next = add(mul(f, state.c), mul(i, g));
  Tensor h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

// ------------------------------ gradient checking ------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                         double h) {
  Tensor p = point.clone();
  p.set_requires_grad(true);
  std::vector<double> analytic;
  {
    Tape tape;
    Tensor loss = f(p);
    if (loss.size() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
    if (!std::isfinite(loss.item())) return std::numeric_limits<double>::infinity();
    tape.backward(loss);
    analytic = p.grad();
  }
  double max_rel = 0.0;
  NoGradGuard no_grad;
  for (int64_t i = 0; i < p.size(); ++i) {
    const double orig = p.data()[i];
    p.data()[i] = orig + h;
    const double fp = f(p).item();
    p.data()[i] = orig - h;
    const double fm = f(p).item();
    p.data()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) return std::numeric_limits<double>::infinity();
    const double fd = (fp - fm) / (2.0 * h);
    const double rel = std::abs(analytic[static_cast<size_t>(i)] - fd) /
                       (std::abs(analytic[static_cast<size_t>(i)]) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace ipt
