#include "dprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dprune/error.hpp"

namespace dprune {

namespace {

// Raw kernels. All accumulate into the destination and keep a fixed
// summation order so repeated runs are bit-identical. Inner loops are axpy
// shaped (contiguous destination) so they vectorize without reassociation.

// C[m x n] += A[m x k] * B[k x n]
// Rows are processed four at a time so each row of B is reused from cache.
__attribute__((target_clones("avx2", "default")))
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double v0 = a0[t], v1 = a0[k + t], v2 = a0[2 * k + t], v3 = a0[3 * k + t];
      if (v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0) continue;
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      if (av == 0.0) continue;
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A^T * B for A[k x m], B[k x n]
__attribute__((target_clones("avx2", "default")))
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  for (std::size_t t = 0; t < k; ++t) {
    const double* arow = a + t * m;
    const double* brow = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T for B[n x k]
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t t = 0; t < k; ++t) bt[t * n + j] = b[j * k + t];
  gemm_nn(m, k, n, a, bt.data(), c);
}

std::vector<double>& grad_buffer(TensorNode* node) {
  if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
  return node->grad;
}

void require_shape(bool ok, const std::string& op, const Shape& a, const Shape& b) {
  if (!ok) {
    fail(ErrorCode::kShape,
         op + ": incompatible shapes " + shape_to_string(a) + " and " + shape_to_string(b));
  }
}

void require_matrix(const Tensor& t, const std::string& op) {
  if (t.rank() != 2) {
    fail(ErrorCode::kShape, op + ": expected a matrix, got " + shape_to_string(t.shape()));
  }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    fail(ErrorCode::kShape, "tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    fail(ErrorCode::kContract, "item() on tensor of shape " + shape_to_string(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data.at(r * last_dim(*this) + c);
}

void Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  if (!value) node_->grad.clear();
}

std::span<double> Tensor::mutable_grad() { return grad_buffer(node_.get()); }

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto node = std::make_shared<TensorNode>(*node_);
  node->tape_id = -1;
  return Tensor(std::move(node));
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<TensorNode>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kMatMul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kRmsNorm: return "rms_norm";
    case OpKind::kSwiGlu: return "swiglu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tape

bool Tape::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (!grad_enabled_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::record(OpKind kind, std::vector<Tensor> inputs, Tensor output,
                    std::function<void()> backward) {
  output.node()->requires_grad = true;
  output.node()->tape_id = static_cast<std::int64_t>(records_.size());
  records_.push_back(TapeRecord{kind, std::move(inputs), output, std::move(backward)});
  return output;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    fail(ErrorCode::kContract,
         "backward requires a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  const auto id = loss.tape_id();
  if (id < 0 || static_cast<std::size_t>(id) >= records_.size() ||
      records_[static_cast<std::size_t>(id)].output.node() != loss.node()) {
    fail(ErrorCode::kContract, "backward: loss was not produced on this tape");
  }
  for (auto& rec : records_) rec.output.zero_grad();
  grad_buffer(loss.node())[0] = 1.0;
  for (auto i = id; i >= 0; --i) records_[static_cast<std::size_t>(i)].backward();
}

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  require_shape(a.dim(1) == b.dim(0), "matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c = Tensor::zeros({m, n});
  gemm_nn(m, k, n, a.data().data(), b.data().data(), c.mutable_data().data());
  if (!tape.tracks({&a, &b})) return c;
  TensorNode* an = a.node();
  TensorNode* bn = b.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kMatMul, {a, b}, c, [=] {
    if (an->requires_grad)
      gemm_nt(m, n, k, cn->grad.data(), bn->data.data(), grad_buffer(an).data());
    if (bn->requires_grad)
      gemm_tn(k, m, n, an->data.data(), cn->grad.data(), grad_buffer(bn).data());
  });
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  require_shape(x.dim(1) == w.dim(1), "linear", x.shape(), w.shape());
  const std::size_t t = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y = Tensor::zeros({t, out});
  gemm_nt(t, in, out, x.data().data(), w.data().data(), y.mutable_data().data());
  if (!tape.tracks({&x, &w})) return y;
  TensorNode* xn = x.node();
  TensorNode* wn = w.node();
  TensorNode* yn = y.node();
  return tape.record(OpKind::kLinear, {x, w}, y, [=] {
    if (xn->requires_grad)
      gemm_nn(t, out, in, yn->grad.data(), wn->data.data(), grad_buffer(xn).data());
    if (wn->requires_grad)
      gemm_tn(out, t, in, yn->grad.data(), xn->data.data(), grad_buffer(wn).data());
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_shape(a.shape() == b.shape(), "add", a.shape(), b.shape());
  Tensor c = a.detach();
  auto cd = c.mutable_data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] += bd[i];
  if (!tape.tracks({&a, &b})) return c;
  TensorNode* an = a.node();
  TensorNode* bn = b.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kAdd, {a, b}, c, [=] {
    for (TensorNode* in : {an, bn}) {
      if (!in->requires_grad) continue;
      auto& g = grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i];
    }
  });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_shape(a.shape() == b.shape(), "mul", a.shape(), b.shape());
  Tensor c = a.detach();
  auto cd = c.mutable_data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] *= bd[i];
  if (!tape.tracks({&a, &b})) return c;
  TensorNode* an = a.node();
  TensorNode* bn = b.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kMul, {a, b}, c, [=] {
    if (an->requires_grad) {
      auto& g = grad_buffer(an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_buffer(bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cn->grad[i] * an->data[i];
    }
  });
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  Tensor c = a.detach();
  for (auto& v : c.mutable_data()) v *= factor;
  if (!tape.tracks({&a})) return c;
  TensorNode* an = a.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kScale, {a}, c, [=] {
    auto& g = grad_buffer(an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * cn->grad[i];
  });
}

Tensor sum(Tape& tape, const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor c = Tensor::scalar(total);
  if (!tape.tracks({&a})) return c;
  TensorNode* an = a.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kSum, {a}, c, [=] {
    auto& g = grad_buffer(an);
    const double d = cn->grad[0];
    for (auto& v : g) v += d;
  });
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor c = Tensor::zeros({n, m});
  auto ad = a.data();
  auto cd = c.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cd[j * m + i] = ad[i * n + j];
  if (!tape.tracks({&a})) return c;
  TensorNode* an = a.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kTranspose, {a}, c, [=] {
    auto& g = grad_buffer(an);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += cn->grad[j * m + i];
  });
}

Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t begin, std::size_t count) {
  require_matrix(a, "slice_cols");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (begin + count > cols || count == 0) {
    fail(ErrorCode::kShape, "slice_cols: columns [" + std::to_string(begin) + ", " +
                                std::to_string(begin + count) + ") outside " +
                                shape_to_string(a.shape()));
  }
  Tensor c = Tensor::zeros({rows, count});
  auto ad = a.data();
  auto cd = c.mutable_data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(r * cols + begin), count,
                cd.begin() + static_cast<std::ptrdiff_t>(r * count));
  if (!tape.tracks({&a})) return c;
  TensorNode* an = a.node();
  TensorNode* cn = c.node();
  return tape.record(OpKind::kSliceCols, {a}, c, [=] {
    auto& g = grad_buffer(an);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < count; ++j) g[r * cols + begin + j] += cn->grad[r * count + j];
  });
}

Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) fail(ErrorCode::kShape, "concat_cols: no inputs");
  const std::size_t rows = parts.front().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_matrix(p, "concat_cols");
    require_shape(p.dim(0) == rows, "concat_cols", parts.front().shape(), p.shape());
    cols += p.dim(1);
  }
  Tensor c = Tensor::zeros({rows, cols});
  auto cd = c.mutable_data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  bool track = false;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t w = p.dim(1);
    auto pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(r * w), w,
                  cd.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
    offset += w;
    track = track || tape.tracks({&p});
  }
  if (!track) return c;
  std::vector<TensorNode*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  TensorNode* cn = c.node();
  return tape.record(OpKind::kConcatCols, parts, c, [=] {
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      TensorNode* in = nodes[p];
      if (!in->requires_grad) continue;
      const std::size_t w = in->shape[1];
      auto& g = grad_buffer(in);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) g[r * w + j] += cn->grad[r * cols + offsets[p] + j];
    }
  });
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  Tensor c = Tensor::zeros({ids.size(), d});
  auto td = table.data();
  auto cd = c.mutable_data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      fail(ErrorCode::kIndex, "embedding: id " + std::to_string(ids[r]) + " outside table of " +
                                  std::to_string(vocab) + " rows");
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * d), d,
                cd.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  if (!tape.tracks({&table})) return c;
  TensorNode* tn = table.node();
  TensorNode* cn = c.node();
  std::vector<int> idv(ids.begin(), ids.end());
  return tape.record(OpKind::kEmbedding, {table}, c, [=] {
    auto& g = grad_buffer(tn);
    for (std::size_t r = 0; r < idv.size(); ++r) {
      const std::size_t row = static_cast<std::size_t>(idv[r]);
      for (std::size_t j = 0; j < d; ++j) g[row * d + j] += cn->grad[r * d + j];
    }
  });
}

Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight, double eps) {
  if (!(eps >= 0.0)) fail(ErrorCode::kContract, "rms_norm: eps must be non-negative");
  const std::size_t d = last_dim(x);
  if (x.rank() == 0 || d == 0) fail(ErrorCode::kShape, "rms_norm: empty normalization axis");
  require_shape(weight.rank() == 1 && weight.dim(0) == d, "rms_norm", x.shape(), weight.shape());
  const std::size_t rows = x.numel() / d;
  Tensor y = Tensor::zeros(x.shape());
  std::vector<double> inv_rms(rows);
  auto xd = x.data();
  auto wd = weight.data();
  auto yd = y.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += xr[j] * xr[j];
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + eps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) yd[r * d + j] = wd[j] * xr[j] * inv;
  }
  if (!tape.tracks({&x, &weight})) return y;
  TensorNode* xn = x.node();
  TensorNode* wn = weight.node();
  TensorNode* yn = y.node();
  return tape.record(OpKind::kRmsNorm, {x, weight}, y, [=] {
    const auto& gy = yn->grad;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = xn->data.data() + r * d;
      const double* gr = gy.data() + r * d;
      const double inv = inv_rms[r];
      if (wn->requires_grad) {
        auto& gw = grad_buffer(wn);
        for (std::size_t j = 0; j < d; ++j) gw[j] += gr[j] * xr[j] * inv;
      }
      if (xn->requires_grad) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * wn->data[j] * xr[j];
        const double coef = inv * inv * inv * dot / static_cast<double>(d);
        auto& gx = grad_buffer(xn);
        for (std::size_t j = 0; j < d; ++j)
          gx[r * d + j] += inv * wn->data[j] * gr[j] - coef * xr[j];
      }
    }
  });
}

Tensor swiglu(Tape& tape, const Tensor& gate_out, const Tensor& up_out) {
  require_shape(gate_out.shape() == up_out.shape(), "swiglu", gate_out.shape(), up_out.shape());
  const std::size_t n = gate_out.numel();
  Tensor y = Tensor::zeros(gate_out.shape());
  auto gd = gate_out.data();
  auto ud = up_out.data();
  auto yd = y.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-gd[i]));
    yd[i] = gd[i] * s * ud[i];
  }
  if (!tape.tracks({&gate_out, &up_out})) return y;
  TensorNode* gn = gate_out.node();
  TensorNode* un = up_out.node();
  TensorNode* yn = y.node();
  return tape.record(OpKind::kSwiGlu, {gate_out, up_out}, y, [=] {
    for (std::size_t i = 0; i < n; ++i) {
      const double z = gn->data[i];
      const double s = 1.0 / (1.0 + std::exp(-z));
      const double dy = yn->grad[i];
      if (gn->requires_grad) grad_buffer(gn)[i] += dy * un->data[i] * s * (1.0 + z * (1.0 - s));
      if (un->requires_grad) grad_buffer(un)[i] += dy * z * s;
    }
  });
}

Tensor softmax(Tape& tape, const Tensor& x, bool causal, std::ptrdiff_t causal_offset) {
  const std::size_t n = last_dim(x);
  if (x.rank() == 0 || n == 0) fail(ErrorCode::kShape, "softmax: empty axis");
  const std::size_t rows = x.numel() / n;
  const std::size_t block = x.rank() >= 2 ? x.shape()[x.rank() - 2] : 1;
  Tensor y = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto yd = y.mutable_data();
  std::vector<std::size_t> allowed(rows, n);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t limit = n;
    if (causal) {
      const auto last = static_cast<std::ptrdiff_t>(r % block) + causal_offset;
      if (last < 0) {
        fail(ErrorCode::kContract, "softmax: row " + std::to_string(r) + " is fully masked");
      }
      limit = std::min(n, static_cast<std::size_t>(last) + 1);
    }
    allowed[r] = limit;
    const double* xr = xd.data() + r * n;
    double* yr = yd.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < limit; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::size_t j = 0; j < limit; ++j) yr[j] /= z;
  }
  if (!tape.tracks({&x})) return y;
  TensorNode* xn = x.node();
  TensorNode* yn = y.node();
  return tape.record(OpKind::kSoftmax, {x}, y, [=] {
    auto& gx = grad_buffer(xn);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yn->data.data() + r * n;
      const double* gr = yn->grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < allowed[r]; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < allowed[r]; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) {
    fail(ErrorCode::kShape, "cross_entropy: " + std::to_string(targets.size()) +
                                " targets for logits " + shape_to_string(logits.shape()));
  }
  if (t == 0) fail(ErrorCode::kShape, "cross_entropy: no positions");
  auto ld = logits.data();
  std::vector<double> probs(t * v);
  double total = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      fail(ErrorCode::kIndex, "cross_entropy: target " + std::to_string(targets[r]) +
                                  " outside [0, " + std::to_string(v) + ")");
    }
    const double* lr = ld.data() + r * v;
    double mx = lr[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(lr[j] - mx);
      z += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += std::log(z) + mx - lr[targets[r]];
  }
  Tensor loss = Tensor::scalar(total / static_cast<double>(t));
  if (!tape.tracks({&logits})) return loss;
  TensorNode* ln = logits.node();
  TensorNode* on = loss.node();
  std::vector<int> tv(targets.begin(), targets.end());
  return tape.record(OpKind::kCrossEntropy, {logits}, loss, [=] {
    auto& g = grad_buffer(ln);
    const double scale_factor = on->grad[0] / static_cast<double>(t);
    for (std::size_t r = 0; r < t; ++r) {
      for (std::size_t j = 0; j < v; ++j) g[r * v + j] += scale_factor * probs[r * v + j];
      g[r * v + static_cast<std::size_t>(tv[r])] -= scale_factor;
    }
  });
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
  if (!(h > 0.0)) fail(ErrorCode::kContract, "finite_diff_grad: step must be positive");
  Tensor probe = x;
  Tensor out = Tensor::zeros(x.shape());
  auto pd = probe.mutable_data();
  auto od = out.mutable_data();
  for (std::size_t k = 0; k < pd.size(); ++k) {
    const double saved = pd[k];
    pd[k] = saved + h;
    const double up = f(probe);
    pd[k] = saved - h;
    const double down = f(probe);
    pd[k] = saved;
    od[k] = (up - down) / (2.0 * h);
  }
  return out;
}

}  // namespace dprune
