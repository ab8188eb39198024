#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avedit/tensor.hpp"

namespace avedit {

/// Row-major boolean admissibility matrix [queries, keys] for attention and
/// masked fills. 1 = admissible.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask all(std::size_t rows, std::size_t cols);
  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  std::size_t admissible_in_row(std::size_t r) const;
};

/// Per-token rotation angles, stored as cos/sin tables [tokens, pairs].
struct RotaryAngles {
  std::size_t tokens = 0;
  std::size_t pairs = 0;
  std::vector<double> cos;
  std::vector<double> sin;
};

/// Define-by-run tape. Every primitive executes immediately; in recording mode
/// it is also appended to the tape so that backward() and replay() can walk
/// it. Primitives whose inputs do not require gradients are still recorded
/// for replay but carry no backward work.
///
/// A Graph is single-threaded. Distinct graphs may share leaf tensors (model
/// parameters) read-only across threads as long as no backward runs
/// concurrently on graphs that accumulate into the same leaves.
class Graph {
 public:
  enum class Mode { kRecord, kInference };

  explicit Graph(Mode mode = Mode::kRecord) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return mode_ == Mode::kRecord; }
  std::size_t op_count() const { return tape_.size(); }

  // Named-input interface. bind() registers a leaf under a name; forward()
  // rebinds leaf values and replays the tape, returning the marked outputs.
  Tensor bind(const std::string& name, const Tensor& value);
  void mark_output(const std::string& name, const Tensor& value);
  std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs);
  void replay();

  /// Reverse-mode sweep from a scalar loss. Gradients accumulate into the
  /// grad buffers of every tensor with requires_grad set.
  void backward(const Tensor& loss);

  // Elementwise.
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  /// a[N, D] + bias[D] broadcast over rows.
  Tensor add_bias(const Tensor& a, const Tensor& bias);
  Tensor gelu(const Tensor& a);
  Tensor silu(const Tensor& a);

  // Linear algebra.
  Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
  /// x[N, in] * w[in, out] + b[out]; bias may be undefined.
  Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

  // Normalization and attention.
  /// Softmax over the last axis with max subtraction. With a mask, disallowed
  /// entries get probability 0; fully masked rows produce all zeros.
  Tensor softmax(const Tensor& a, const AttentionMask* mask = nullptr);
  /// Layer norm over the last axis without affine. Variance is floored at
  /// 1e-6, so constant rows map to zeros.
  Tensor layer_norm(const Tensor& a);
  Tensor masked_fill(const Tensor& a, const AttentionMask& mask, double value);
  /// Fused multi-head scaled dot-product attention. q[Nq, D], k/v[Nk, D],
  /// D = heads * head_dim. Rows with no admissible key produce zeros.
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                   const AttentionMask* mask = nullptr);
  /// Rotates consecutive pairs of every head: x[N, heads*head_dim] or
  /// x[N, heads, head_dim]; angles give one (cos, sin) per token per pair.
  Tensor rotary(const Tensor& x, const RotaryAngles& angles);

  // Indexing and layout.
  Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);
  Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
  /// base with upd[i] added into row rows[i]. Rows must be distinct.
  Tensor scatter_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& upd);
  Tensor reshape(const Tensor& a, const Shape& shape);
  /// Value copy through which no gradient flows.
  Tensor detach(const Tensor& a);
  /// Outputs of every detach() call so far, in call order.
  const std::vector<Tensor>& detached() const { return detached_; }
  /// Makes the i-th subsequent detach() return values[i] instead of its
  /// input, so a function can be re-evaluated with stop-gradient values held
  /// fixed. Frozen detaches are not replayed.
  void freeze_detached(std::vector<Tensor> values) {
    frozen_ = std::move(values);
    frozen_cursor_ = 0;
  }

  // Reductions (fixed left-to-right order).
  Tensor sum(const Tensor& a);
  /// mean((a - b)^2) over all elements.
  Tensor mean_square(const Tensor& a, const Tensor& b);

 private:
  struct Record {
    Tensor output;
    std::vector<Tensor> inputs;
    std::function<void()> recompute;
    std::function<void()> backward;  // empty when no input requires grad
  };

  Tensor emit(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
              std::function<void(detail::Node&)> recompute,
              std::function<void(const detail::Node&)> backward);

  Mode mode_;
  std::vector<Record> tape_;
  std::map<std::string, Tensor> named_inputs_;
  std::map<std::string, Tensor> named_outputs_;
  std::vector<Tensor> detached_;
  std::optional<std::vector<Tensor>> frozen_;
  std::size_t frozen_cursor_ = 0;
};

/// Compares reverse-mode gradients of a scalar function against fourth-order
/// central differences with step eps. Perturbed evaluations hold every
/// detach() output at its value from the unperturbed point. Returns max over
/// coordinates of |g_ad - g_fd| / max(1e-12, |g_fd|). Throws
/// std::domain_error when f is non-finite at x.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;
double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps);

/// Central-difference gradient of f at x (test oracle building block), with
/// detach() outputs held at their values at x.
std::vector<double> numeric_gradient(const ScalarFn& f, const Tensor& x, double eps);

/// Same check for a leaf that the loss closes over (e.g. a model parameter).
/// The leaf is perturbed in place and restored. Every `stride`-th coordinate
/// is probed. The leaf's grad buffer is overwritten.
using LossFn = std::function<Tensor(Graph&)>;
double finite_diff_check_leaf(const LossFn& loss, Tensor leaf, double eps, std::size_t stride = 1);

}  // namespace avedit
