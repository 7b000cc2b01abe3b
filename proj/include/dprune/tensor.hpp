#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dprune {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  // Allocated lazily; same length as data once present.
  std::vector<double> grad;
  bool requires_grad = false;
  // Index of the producing record on its tape, -1 for leaves.
  std::int64_t tape_id = -1;
};

// Handle to a dense row-major float64 array. Copies share storage (like a
// framework tensor); use clone() for an independent buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t i) const { return node_->data.at(i); }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  std::int64_t tape_id() const { return node_->tape_id; }

  Tensor clone() const;
  Tensor detach() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& shared_node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
};

enum class OpKind {
  kMatMul,
  kLinear,
  kAdd,
  kMul,
  kScale,
  kSum,
  kTranspose,
  kSliceCols,
  kConcatCols,
  kEmbedding,
  kRmsNorm,
  kSwiGlu,
  kSoftmax,
  kCrossEntropy,
};

const char* op_name(OpKind kind);

struct TapeRecord {
  OpKind kind;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;
};

// Eager recording of differentiable operations. Records are appended in
// execution order, so the list is topologically sorted by construction.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<TapeRecord>& records() const { return records_; }

  // Whether an op with these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor*> inputs) const;
  Tensor record(OpKind kind, std::vector<Tensor> inputs, Tensor output,
                std::function<void()> backward);

  // Seeds d(loss)=1 and replays the records in reverse. Intermediate grads are
  // reset first; leaf grads accumulate across calls.
  void backward(const Tensor& loss);

  void clear() { records_.clear(); }

 private:
  bool grad_enabled_;
  std::vector<TapeRecord> records_;
};

// c = a * b for a[m x k], b[k x n].
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// y = x * w^T for x[t x in], w[out x in] (weights stored output-major).
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w);
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
Tensor sum(Tape& tape, const Tensor& a);
Tensor transpose(Tape& tape, const Tensor& a);
Tensor slice_cols(Tape& tape, const Tensor& a, std::size_t begin, std::size_t count);
Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts);
// Gathers rows of table[v x d] -> [ids.size() x d].
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids);
Tensor rms_norm(Tape& tape, const Tensor& x, const Tensor& weight, double eps);
Tensor swiglu(Tape& tape, const Tensor& gate_out, const Tensor& up_out);
// Row-wise softmax over the last axis. With causal=true, column j of row r is
// allowed iff j <= r + causal_offset; a row with no allowed column is an error.
Tensor softmax(Tape& tape, const Tensor& x, bool causal, std::ptrdiff_t causal_offset = 0);
// Mean over rows of -log softmax(logits)[r][targets[r]].
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets);

// Central differences (f(x + h e_k) - f(x - h e_k)) / 2h for every element of x.
// x itself is restored after each probe.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h);

}  // namespace dprune
