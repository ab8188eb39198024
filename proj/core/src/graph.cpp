#include "avedit/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace avedit {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXd>;
using CRowVecMap = Eigen::Map<const Eigen::RowVectorXd>;

constexpr double kVarianceFloor = 1e-6;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(a.shape()));
  }
}

// Rows x trailing-columns view of any tensor with rank >= 1.
std::size_t leading(const Shape& s) { return s.empty() ? 1 : s[0]; }
std::size_t trailing(const Shape& s) { return s.empty() ? 1 : numel(s) / s[0]; }
std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

std::span<double> acc(const Tensor& t) { return const_cast<Tensor&>(t).mutable_grad(); }

}  // namespace

AttentionMask AttentionMask::all(std::size_t rows, std::size_t cols) {
  return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

std::size_t AttentionMask::admissible_in_row(std::size_t r) const {
  std::size_t n = 0;
  for (std::size_t c = 0; c < cols; ++c) n += allowed[r * cols + c];
  return n;
}

Tensor Graph::emit(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> recompute,
                   std::function<void(const detail::Node&)> backward) {
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  needs = needs && recording();
  Tensor out = make_tensor(std::move(shape), std::move(data), needs);
  if (!recording()) return out;

  Record rec;
  rec.output = out;
  rec.inputs = std::move(inputs);
  detail::Node* node = out.node();
  rec.recompute = [node, recompute = std::move(recompute)]() { recompute(*node); };
  if (needs) rec.backward = [node, backward = std::move(backward)]() { backward(*node); };
  tape_.push_back(std::move(rec));
  return out;
}

Tensor Graph::bind(const std::string& name, const Tensor& value) {
  named_inputs_[name] = value;
  return value;
}

void Graph::mark_output(const std::string& name, const Tensor& value) { named_outputs_[name] = value; }

std::map<std::string, Tensor> Graph::forward(const std::map<std::string, Tensor>& inputs) {
  if (!recording()) throw std::logic_error("forward: graph was built in inference mode; nothing to replay");
  for (const auto& [name, value] : inputs) {
    auto it = named_inputs_.find(name);
    if (it == named_inputs_.end()) throw std::invalid_argument("forward: unknown input '" + name + "'");
    if (it->second.shape() != value.shape()) {
      throw ShapeError("forward: input '" + name + "' bound as " + to_string(it->second.shape()) +
                       ", got " + to_string(value.shape()));
    }
    auto dst = it->second.mutable_data();
    std::copy(value.data().begin(), value.data().end(), dst.begin());
  }
  replay();
  return named_outputs_;
}

void Graph::replay() {
  for (auto& rec : tape_) rec.recompute();
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!recording()) throw std::logic_error("backward: graph was built in inference mode");
  if (!loss.requires_grad()) return;
  acc(loss)[0] += 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    if (it->backward && it->output.has_grad()) it->backward();
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  auto f = [a, b](detail::Node& o) {
    for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = a[i] + b[i];
  };
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return emit(a.shape(), std::move(out), {a, b}, f, [a, b](const detail::Node& o) {
    if (wants_grad(a)) {
      auto g = acc(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(b)) {
      auto g = acc(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  auto f = [a, b](detail::Node& o) {
    for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = a[i] - b[i];
  };
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return emit(a.shape(), std::move(out), {a, b}, f, [a, b](const detail::Node& o) {
    if (wants_grad(a)) {
      auto g = acc(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (wants_grad(b)) {
      auto g = acc(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  auto f = [a, b](detail::Node& o) {
    for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = a[i] * b[i];
  };
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return emit(a.shape(), std::move(out), {a, b}, f, [a, b](const detail::Node& o) {
    if (wants_grad(a)) {
      auto g = acc(a);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * b[i];
    }
    if (wants_grad(b)) {
      auto g = acc(b);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * a[i];
    }
  });
}

Tensor Graph::scale(const Tensor& a, double factor) {
  auto f = [a, factor](detail::Node& o) {
    for (std::size_t i = 0; i < o.data.size(); ++i) o.data[i] = a[i] * factor;
  };
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return emit(a.shape(), std::move(out), {a}, f, [a, factor](const detail::Node& o) {
    auto g = acc(a);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor Graph::add_bias(const Tensor& a, const Tensor& bias) {
  if (a.rank() < 1 || bias.rank() != 1 || last_dim(a.shape()) != bias.dim(0)) {
    shape_fail("add_bias", a.shape(), bias.shape());
  }
  const std::size_t d = bias.dim(0);
  auto compute = [a, bias, d](std::vector<double>& out) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + bias[i % d];
  };
  std::vector<double> out(a.size());
  compute(out);
  return emit(
      a.shape(), std::move(out), {a, bias}, [compute](detail::Node& o) { compute(o.data); },
      [a, bias, d](const detail::Node& o) {
        if (wants_grad(a)) {
          auto g = acc(a);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (wants_grad(bias)) {
          auto g = acc(bias);
          for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % d] += o.grad[i];
        }
      });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
using CMap = Eigen::Map<const Arr>;
using MMap = Eigen::Map<Arr>;

CMap as_array(const Tensor& t) { return CMap(t.data().data(), static_cast<Eigen::Index>(t.size())); }
MMap as_array(std::span<double> s) { return MMap(s.data(), static_cast<Eigen::Index>(s.size())); }
CMap as_array(std::span<const double> s) { return CMap(s.data(), static_cast<Eigen::Index>(s.size())); }

// Vectorized loops peel scalar iterations up to the first aligned address, so
// everything is evaluated in Eigen-owned (aligned) storage and copied out.
void gelu_into(const Tensor& a, std::span<double> out) {
  const Arr x = as_array(a);
  const Arr y = x / (1.0 + (-2.0 * kGeluC * (x + kGeluA * x.cube())).exp());
  as_array(out) = y;
}
void silu_into(const Tensor& a, std::span<double> out) {
  const Arr x = as_array(a);
  const Arr y = x / (1.0 + (-x).exp());
  as_array(out) = y;
}
}  // namespace

Tensor Graph::gelu(const Tensor& a) {
  auto f = [a](detail::Node& o) { gelu_into(a, o.data); };
  std::vector<double> out(a.size());
  gelu_into(a, out);
  return emit(a.shape(), std::move(out), {a}, f, [a](const detail::Node& o) {
    const Arr x = as_array(a);
    const Arr th = 2.0 / (1.0 + (-2.0 * kGeluC * (x + kGeluA * x.cube())).exp()) - 1.0;
    const Arr d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
    const Arr dy = as_array(std::span<const double>(o.grad.data(), o.grad.size()));
    const Arr upd = dy * d;
    auto g = acc(a);
    as_array(g) += upd;
  });
}

Tensor Graph::silu(const Tensor& a) {
  auto f = [a](detail::Node& o) { silu_into(a, o.data); };
  std::vector<double> out(a.size());
  silu_into(a, out);
  return emit(a.shape(), std::move(out), {a}, f, [a](const detail::Node& o) {
    const Arr x = as_array(a);
    const Arr s = 1.0 / (1.0 + (-x).exp());
    const Arr dy = as_array(std::span<const double>(o.grad.data(), o.grad.size()));
    const Arr upd = dy * s * (1.0 + x * (1.0 - s));
    auto g = acc(a);
    as_array(g) += upd;
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = transpose_a ? a.dim(1) : a.dim(0);
  const std::size_t k = transpose_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != kb) shape_fail("matmul", a.shape(), b.shape());

  auto compute = [a, b, transpose_a, transpose_b, m, n](std::span<double> out) {
    CMapMat am(a.data().data(), a.dim(0), a.dim(1));
    CMapMat bm(b.data().data(), b.dim(0), b.dim(1));
    MapMat om(out.data(), m, n);
    if (!transpose_a && !transpose_b) om.noalias() = am * bm;
    else if (transpose_a && !transpose_b) om.noalias() = am.transpose() * bm;
    else if (!transpose_a && transpose_b) om.noalias() = am * bm.transpose();
    else om.noalias() = am.transpose() * bm.transpose();
  };
  std::vector<double> out(m * n);
  compute(out);
  return emit(
      {m, n}, std::move(out), {a, b}, [compute](detail::Node& o) { compute(o.data); },
      [a, b, transpose_a, transpose_b, m, n](const detail::Node& o) {
        CMapMat am(a.data().data(), a.dim(0), a.dim(1));
        CMapMat bm(b.data().data(), b.dim(0), b.dim(1));
        CMapMat dc(o.grad.data(), m, n);
        if (wants_grad(a)) {
          MapMat da(acc(a).data(), a.dim(0), a.dim(1));
          // C = op(A) op(B)
          if (!transpose_a) {
            if (!transpose_b) da.noalias() += dc * bm.transpose();
            else da.noalias() += dc * bm;
          } else {
            if (!transpose_b) da.noalias() += bm * dc.transpose();
            else da.noalias() += bm.transpose() * dc.transpose();
          }
        }
        if (wants_grad(b)) {
          MapMat db(acc(b).data(), b.dim(0), b.dim(1));
          if (!transpose_b) {
            if (!transpose_a) db.noalias() += am.transpose() * dc;
            else db.noalias() += am * dc;
          } else {
            if (!transpose_a) db.noalias() += dc.transpose() * am;
            else db.noalias() += dc.transpose() * am.transpose();
          }
        }
      });
}

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  if (x.dim(1) != w.dim(0)) shape_fail("linear", x.shape(), w.shape());
  const bool has_bias = b.defined();
  if (has_bias && (b.rank() != 1 || b.dim(0) != w.dim(1))) shape_fail("linear(bias)", w.shape(), b.shape());
  const std::size_t rows = x.dim(0), in = x.dim(1), outd = w.dim(1);

  auto compute = [x, w, b, has_bias, rows, in, outd](std::span<double> out) {
    CMapMat xm(x.data().data(), rows, in);
    CMapMat wm(w.data().data(), in, outd);
    MapMat om(out.data(), rows, outd);
    om.noalias() = xm * wm;
    if (has_bias) om.rowwise() += CRowVecMap(b.data().data(), outd);
  };
  std::vector<double> out(rows * outd);
  compute(out);
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return emit(
      {rows, outd}, std::move(out), std::move(inputs), [compute](detail::Node& o) { compute(o.data); },
      [x, w, b, has_bias, rows, in, outd](const detail::Node& o) {
        CMapMat dy(o.grad.data(), rows, outd);
        if (wants_grad(x)) {
          MapMat dx(acc(x).data(), rows, in);
          dx.noalias() += dy * CMapMat(w.data().data(), in, outd).transpose();
        }
        if (wants_grad(w)) {
          MapMat dw(acc(w).data(), in, outd);
          dw.noalias() += CMapMat(x.data().data(), rows, in).transpose() * dy;
        }
        if (has_bias && wants_grad(b)) {
          auto g = acc(b);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < outd; ++c) g[c] += o.grad[r * outd + c];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization, masking, attention

namespace {

// 1 for admissible entries, 0 otherwise, as a dense multiplier.
RowMat mask_matrix(const AttentionMask& mask) {
  RowMat m(mask.rows, mask.cols);
  for (std::size_t i = 0; i < mask.allowed.size(); ++i) m.data()[i] = mask.allowed[i] ? 1.0 : 0.0;
  return m;
}

// In-place masked softmax over rows of s [rows, cols]. Disallowed entries are
// exactly zero and rows without any admissible entry become all zeros.
constexpr std::size_t kQueryBlock = 32;
const double kExpFloor = std::exp(-700.0);

// keep, when given, points at a row-major 0/1 block of the same shape. Each
// row is processed in an aligned buffer so that vectorized exp and the row
// sum do not depend on where the caller's storage happens to start.
template <typename Rows>
void softmax_rows(Rows&& s, const double* keep) {
  const Eigen::Index cols = s.cols();
  Eigen::Array<double, 1, Eigen::Dynamic> row(cols);
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    row = s.row(r).array();
    if (keep) {
      Eigen::Map<const Eigen::Array<double, 1, Eigen::Dynamic>> krow(keep + r * cols, cols);
      row += (krow - 1.0) * 1e300;
    }
    double mx = row.maxCoeff();
    if (mx < -1e299) mx = 0.0;
    // Exponents are clamped at -700 and the clamp value subtracted back out, so
    // disallowed and negligible entries become exactly zero without subnormals.
    row -= mx;
    row = (row.max(-700.0).exp() - kExpFloor).max(0.0);
    const double sum = row.sum();
    if (sum > 0.0) row /= sum;
    s.row(r).array() = row;
  }
}

void check_mask(const char* op, const AttentionMask* mask, std::size_t rows, std::size_t cols) {
  if (mask && (mask->rows != rows || mask->cols != cols)) {
    throw ShapeError(std::string(op) + ": mask is [" + std::to_string(mask->rows) + ", " +
                     std::to_string(mask->cols) + "], expected [" + std::to_string(rows) + ", " +
                     std::to_string(cols) + "]");
  }
}

}  // namespace

Tensor Graph::softmax(const Tensor& a, const AttentionMask* mask) {
  if (a.rank() < 1) throw ShapeError("softmax: scalar input");
  const std::size_t cols = last_dim(a.shape());
  const std::size_t rows = a.size() / cols;
  check_mask("softmax", mask, rows, cols);
  std::shared_ptr<const RowMat> m = mask ? std::make_shared<RowMat>(mask_matrix(*mask)) : nullptr;

  auto compute = [a, m, rows, cols](std::span<double> out) {
    MapMat s(out.data(), rows, cols);
    s = CMapMat(a.data().data(), rows, cols);
    softmax_rows(s, m ? m->data() : nullptr);
  };
  std::vector<double> out(a.size());
  compute(out);
  return emit(
      a.shape(), std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a, rows, cols](const detail::Node& o) {
        auto g = acc(a);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* p = o.data.data() + r * cols;
          const double* dy = o.grad.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * p[c];
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += p[c] * (dy[c] - dot);
        }
      });
}

Tensor Graph::layer_norm(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t cols = last_dim(a.shape());
  const std::size_t rows = a.size() / cols;
  // Per-row reciprocal std, and whether the variance floor was active.
  auto rstd = std::make_shared<std::vector<double>>(rows);
  auto floored = std::make_shared<std::vector<std::uint8_t>>(rows);

  auto compute = [a, rows, cols, rstd, floored](std::span<double> out) {
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = a.data().data() + r * cols;
      double mean = 0.0;
      for (std::size_t c = 0; c < cols; ++c) mean += x[c];
      mean /= static_cast<double>(cols);
      double var = 0.0;
      for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
      var /= static_cast<double>(cols);
      (*floored)[r] = var <= kVarianceFloor;
      const double rs = 1.0 / std::sqrt(std::max(var, kVarianceFloor));
      (*rstd)[r] = rs;
      for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (x[c] - mean) * rs;
    }
  };
  std::vector<double> out(a.size());
  compute(out);
  return emit(
      a.shape(), std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a, rows, cols, rstd, floored](const detail::Node& o) {
        auto g = acc(a);
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = o.data.data() + r * cols;
          const double* dy = o.grad.data() + r * cols;
          double mdy = 0.0, mdyy = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            mdy += dy[c];
            mdyy += dy[c] * y[c];
          }
          mdy /= n;
          mdyy /= n;
          if ((*floored)[r]) mdyy = 0.0;
          for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += (*rstd)[r] * (dy[c] - mdy - y[c] * mdyy);
        }
      });
}

Tensor Graph::masked_fill(const Tensor& a, const AttentionMask& mask, double value) {
  const std::size_t cols = last_dim(a.shape());
  const std::size_t rows = a.size() / cols;
  check_mask("masked_fill", &mask, rows, cols);
  auto m = std::make_shared<AttentionMask>(mask);
  auto compute = [a, m, value](std::span<double> out) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = m->allowed[i] ? a[i] : value;
  };
  std::vector<double> out(a.size());
  compute(out);
  return emit(
      a.shape(), std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a, m](const detail::Node& o) {
        auto g = acc(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (m->allowed[i]) g[i] += o.grad[i];
        }
      });
}

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                        const AttentionMask* mask) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  if (k.shape() != v.shape()) shape_fail("attention(k,v)", k.shape(), v.shape());
  if (q.dim(1) != k.dim(1)) shape_fail("attention(q,k)", q.shape(), k.shape());
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                     " heads");
  }
  check_mask("attention", mask, nq, nk);
  const std::size_t hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::shared_ptr<const RowMat> m = mask ? std::make_shared<RowMat>(mask_matrix(*mask)) : nullptr;
  // Probabilities are kept only when a backward pass may need them.
  auto probs = recording() ? std::make_shared<std::vector<RowMat>>(heads) : nullptr;

  auto compute = [q, k, v, m, probs, heads, nq, nk, d, hd, inv_sqrt](std::span<double> out) {
    RowMat scratch;
    for (std::size_t h = 0; h < heads; ++h) {
      CStridedMat qh(q.data().data() + h * hd, nq, hd, Eigen::OuterStride<>(d));
      CStridedMat kh(k.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
      CStridedMat vh(v.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
      StridedMat oh(out.data() + h * hd, nq, hd, Eigen::OuterStride<>(d));
      if (probs) (*probs)[h].resize(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(nk));
      for (std::size_t r0 = 0; r0 < nq; r0 += kQueryBlock) {
        const auto rows = static_cast<Eigen::Index>(std::min(kQueryBlock, nq - r0));
        const auto start = static_cast<Eigen::Index>(r0);
        RowMat& buf = probs ? (*probs)[h] : scratch;
        if (!probs) buf.resize(rows, static_cast<Eigen::Index>(nk));
        auto pb = buf.middleRows(probs ? start : 0, rows);
        pb.noalias() = qh.middleRows(start, rows) * kh.transpose();
        pb *= inv_sqrt;
        softmax_rows(pb, m ? m->data() + r0 * nk : nullptr);
        oh.middleRows(start, rows).noalias() = pb * vh;
      }
    }
  };
  std::vector<double> out(nq * d);
  compute(out);
  return emit(
      {nq, d}, std::move(out), {q, k, v}, [compute](detail::Node& o) { compute(o.data); },
      [q, k, v, probs, heads, nq, nk, d, hd, inv_sqrt](const detail::Node& o) {
        const bool gq = wants_grad(q), gk = wants_grad(k), gv = wants_grad(v);
        RowMat dp;
        for (std::size_t h = 0; h < heads; ++h) {
          CStridedMat qh(q.data().data() + h * hd, nq, hd, Eigen::OuterStride<>(d));
          CStridedMat kh(k.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
          CStridedMat vh(v.data().data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
          CStridedMat doh(o.grad.data() + h * hd, nq, hd, Eigen::OuterStride<>(d));
          for (std::size_t r0 = 0; r0 < nq; r0 += kQueryBlock) {
            const auto rows = static_cast<Eigen::Index>(std::min(kQueryBlock, nq - r0));
            const auto start = static_cast<Eigen::Index>(r0);
            auto pb = (*probs)[h].middleRows(start, rows);
            auto dob = doh.middleRows(start, rows);
            if (gv) {
              StridedMat dvh(acc(v).data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
              dvh.noalias() += pb.transpose() * dob;
            }
            if (!gq && !gk) continue;
            dp.resize(rows, static_cast<Eigen::Index>(nk));
            dp.noalias() = dob * vh.transpose();
            const Eigen::VectorXd dots = (dp.array() * pb.array()).rowwise().sum();
            dp = pb.array() * (dp.colwise() - dots).array();
            dp *= inv_sqrt;
            if (gq) {
              StridedMat dqh(acc(q).data() + h * hd, nq, hd, Eigen::OuterStride<>(d));
              dqh.middleRows(start, rows).noalias() += dp * kh;
            }
            if (gk) {
              StridedMat dkh(acc(k).data() + h * hd, nk, hd, Eigen::OuterStride<>(d));
              dkh.noalias() += dp.transpose() * qh.middleRows(start, rows);
            }
          }
        }
      });
}

Tensor Graph::rotary(const Tensor& x, const RotaryAngles& angles) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("rotary: expected rank 2 or 3, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t width = x.size() / n;
  if (angles.tokens != n || angles.pairs == 0 || width % (2 * angles.pairs) != 0) {
    throw ShapeError("rotary: angles [" + std::to_string(angles.tokens) + ", " + std::to_string(angles.pairs) +
                     "] do not fit input " + to_string(x.shape()));
  }
  if (x.rank() == 3 && x.dim(2) != 2 * angles.pairs) {
    throw ShapeError("rotary: head_dim " + std::to_string(x.dim(2)) + " != 2 x " + std::to_string(angles.pairs) +
                     " pairs");
  }
  const std::size_t heads = width / (2 * angles.pairs);
  auto ang = std::make_shared<RotaryAngles>(angles);

  auto compute = [x, ang, n, width, heads](std::span<double> out) {
    const std::size_t pairs = ang->pairs;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t p = 0; p < pairs; ++p) {
          const std::size_t i = t * width + h * 2 * pairs + 2 * p;
          const double c = ang->cos[t * pairs + p], s = ang->sin[t * pairs + p];
          const double x0 = x[i], x1 = x[i + 1];
          out[i] = x0 * c - x1 * s;
          out[i + 1] = x0 * s + x1 * c;
        }
      }
    }
  };
  std::vector<double> out(x.size());
  compute(out);
  return emit(
      x.shape(), std::move(out), {x}, [compute](detail::Node& o) { compute(o.data); },
      [x, ang, n, width, heads](const detail::Node& o) {
        auto g = acc(x);
        const std::size_t pairs = ang->pairs;
        for (std::size_t t = 0; t < n; ++t) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t p = 0; p < pairs; ++p) {
              const std::size_t i = t * width + h * 2 * pairs + 2 * p;
              const double c = ang->cos[t * pairs + p], s = ang->sin[t * pairs + p];
              const double g0 = o.grad[i], g1 = o.grad[i + 1];
              g[i] += g0 * c + g1 * s;
              g[i + 1] += -g0 * s + g1 * c;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

Tensor Graph::embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_rank("embedding", table, 2);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.begin(), ids.end());
  for (auto id : *idx) {
    if (id >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table " + to_string(table.shape()));
    }
  }
  if (idx->empty()) throw ShapeError("embedding: empty id list");
  auto compute = [table, idx, d](std::span<double> out) {
    for (std::size_t i = 0; i < idx->size(); ++i) {
      std::copy_n(table.data().begin() + (*idx)[i] * d, d, out.begin() + i * d);
    }
  };
  std::vector<double> out(idx->size() * d);
  compute(out);
  return emit(
      {idx->size(), d}, std::move(out), {table}, [compute](detail::Node& o) { compute(o.data); },
      [table, idx, d](const detail::Node& o) {
        auto g = acc(table);
        for (std::size_t i = 0; i < idx->size(); ++i) {
          for (std::size_t c = 0; c < d; ++c) g[(*idx)[i] * d + c] += o.grad[i * d + c];
        }
      });
}

Tensor Graph::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() < 1 || Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      shape_fail("concat_rows", parts[0].shape(), p.shape());
    }
    rows += p.dim(0);
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  auto compute = [parts](std::span<double> out) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.data().begin(), p.data().end(), out.begin() + off);
      off += p.size();
    }
  };
  std::vector<double> out(numel(shape));
  compute(out);
  return emit(
      shape, std::move(out), parts, [compute](detail::Node& o) { compute(o.data); },
      [parts](const detail::Node& o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
          if (wants_grad(p)) {
            auto g = acc(p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[off + i];
          }
          off += p.size();
        }
      });
}

Tensor Graph::slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (a.rank() < 1 || count == 0 || start + count > a.dim(0)) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + to_string(a.shape()));
  }
  const std::size_t w = trailing(a.shape());
  Shape shape = a.shape();
  shape[0] = count;
  auto compute = [a, start, w](std::span<double> out) {
    std::copy_n(a.data().begin() + start * w, out.size(), out.begin());
  };
  std::vector<double> out(count * w);
  compute(out);
  return emit(
      shape, std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a, start, w](const detail::Node& o) {
        auto g = acc(a);
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[start * w + i] += o.grad[i];
      });
}

Tensor Graph::gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  if (a.rank() < 1 || rows.empty()) throw ShapeError("gather_rows: bad input " + to_string(a.shape()));
  const std::size_t w = trailing(a.shape());
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (auto r : *idx) {
    if (r >= leading(a.shape())) {
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for " + to_string(a.shape()));
    }
  }
  Shape shape = a.shape();
  shape[0] = idx->size();
  auto compute = [a, idx, w](std::span<double> out) {
    for (std::size_t i = 0; i < idx->size(); ++i) {
      std::copy_n(a.data().begin() + (*idx)[i] * w, w, out.begin() + i * w);
    }
  };
  std::vector<double> out(idx->size() * w);
  compute(out);
  return emit(
      shape, std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a, idx, w](const detail::Node& o) {
        auto g = acc(a);
        for (std::size_t i = 0; i < idx->size(); ++i) {
          for (std::size_t c = 0; c < w; ++c) g[(*idx)[i] * w + c] += o.grad[i * w + c];
        }
      });
}

Tensor Graph::scatter_add_rows(const Tensor& base, std::span<const std::size_t> rows, const Tensor& upd) {
  if (base.rank() < 1 || upd.rank() < 1 || upd.dim(0) != rows.size() ||
      trailing(base.shape()) != trailing(upd.shape())) {
    shape_fail("scatter_add_rows", base.shape(), upd.shape());
  }
  const std::size_t w = trailing(base.shape());
  auto idx = std::make_shared<std::vector<std::size_t>>(rows.begin(), rows.end());
  for (auto r : *idx) {
    if (r >= base.dim(0)) {
      throw ShapeError("scatter_add_rows: row " + std::to_string(r) + " out of range for " + to_string(base.shape()));
    }
  }
  auto compute = [base, upd, idx, w](std::span<double> out) {
    std::copy(base.data().begin(), base.data().end(), out.begin());
    for (std::size_t i = 0; i < idx->size(); ++i) {
      for (std::size_t c = 0; c < w; ++c) out[(*idx)[i] * w + c] += upd[i * w + c];
    }
  };
  std::vector<double> out(base.size());
  compute(out);
  return emit(
      base.shape(), std::move(out), {base, upd}, [compute](detail::Node& o) { compute(o.data); },
      [base, upd, idx, w](const detail::Node& o) {
        if (wants_grad(base)) {
          auto g = acc(base);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
        }
        if (wants_grad(upd)) {
          auto g = acc(upd);
          for (std::size_t i = 0; i < idx->size(); ++i) {
            for (std::size_t c = 0; c < w; ++c) g[i * w + c] += o.grad[(*idx)[i] * w + c];
          }
        }
      });
}

Tensor Graph::reshape(const Tensor& a, const Shape& shape) {
  if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  auto compute = [a](std::span<double> out) { std::copy(a.data().begin(), a.data().end(), out.begin()); };
  std::vector<double> out(a.data().begin(), a.data().end());
  return emit(
      shape, std::move(out), {a}, [compute](detail::Node& o) { compute(o.data); },
      [a](const detail::Node& o) {
        auto g = acc(a);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
}

Tensor Graph::detach(const Tensor& a) {
  // Recorded for replay only; the output never requires grad.
  const Tensor* src = &a;
  if (frozen_.has_value()) {
    if (frozen_cursor_ >= frozen_->size()) throw std::logic_error("detach: more calls than frozen values");
    src = &(*frozen_)[frozen_cursor_++];
    if (src->shape() != a.shape()) shape_fail("detach(frozen)", src->shape(), a.shape());
  }
  std::vector<double> out(src->data().begin(), src->data().end());
  Tensor t = make_tensor(a.shape(), std::move(out), false);
  detached_.push_back(t);
  if (frozen_.has_value()) return t;
  if (recording()) {
    Record rec;
    rec.output = t;
    rec.inputs = {a};
    detail::Node* node = t.node();
    rec.recompute = [node, a]() { std::copy(a.data().begin(), a.data().end(), node->data.begin()); };
    tape_.push_back(std::move(rec));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Graph::sum(const Tensor& a) {
  auto compute = [a]() {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return s;
  };
  return emit(
      {}, {compute()}, {a}, [compute](detail::Node& o) { o.data[0] = compute(); },
      [a](const detail::Node& o) {
        auto g = acc(a);
        for (auto& v : g) v += o.grad[0];
      });
}

Tensor Graph::mean_square(const Tensor& a, const Tensor& b) {
  require_same("mean_square", a, b);
  auto compute = [a, b]() {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.size());
  };
  return emit(
      {}, {compute()}, {a, b}, [compute](detail::Node& o) { o.data[0] = compute(); },
      [a, b](const detail::Node& o) {
        const double k = 2.0 * o.grad[0] / static_cast<double>(a.size());
        if (wants_grad(a)) {
          auto g = acc(a);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (a[i] - b[i]);
        }
        if (wants_grad(b)) {
          auto g = acc(b);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (a[i] - b[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

namespace {

// Fourth-order central stencil.
template <typename Eval>
double central_difference(Eval&& f, double x, double eps) {
  const double f2p = f(x + 2.0 * eps), f1p = f(x + eps), f1m = f(x - eps), f2m = f(x - 2.0 * eps);
  return (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * eps);
}

}  // namespace

std::vector<double> numeric_gradient(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("numeric_gradient: eps must be positive");
  std::vector<double> g(x.size());
  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  std::vector<Tensor> frozen;
  {
    Graph base(Graph::Mode::kInference);
    f(base, probe);
    frozen = base.detached();
  }
  auto eval = [&](const Tensor& at) {
    Graph gi(Graph::Mode::kInference);
    gi.freeze_detached(frozen);
    const double v = f(gi, at).item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: function is not finite");
    return v;
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    g[i] = central_difference([&](double v) {
      probe.mutable_data()[i] = v;
      return eval(probe);
    }, orig, eps);
    probe.mutable_data()[i] = orig;
  }
  return g;
}

double finite_diff_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  Graph g;
  Tensor y = f(g, leaf);
  if (y.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar, got " + to_string(y.shape()));
  if (!std::isfinite(y.item())) throw std::domain_error("finite_diff_check: function is not finite");
  g.backward(y);
  const std::vector<double> ad = leaf.grad();
  const std::vector<double> fd = numeric_gradient(f, x, eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    worst = std::max(worst, std::abs(ad[i] - fd[i]) / std::max(1e-12, std::abs(fd[i])));
  }
  return worst;
}

double finite_diff_check_leaf(const LossFn& loss, Tensor leaf, double eps, std::size_t stride) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check_leaf: eps must be positive");
  if (stride == 0) stride = 1;
  const bool had_flag = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  std::vector<double> ad;
  std::vector<Tensor> frozen;
  {
    Graph g;
    Tensor y = loss(g);
    if (y.size() != 1) throw ShapeError("finite_diff_check_leaf: loss must be scalar, got " + to_string(y.shape()));
    if (!std::isfinite(y.item())) throw std::domain_error("finite_diff_check_leaf: loss is not finite");
    g.backward(y);
    ad = leaf.grad();
    frozen = g.detached();
  }
  auto eval = [&]() {
    Graph gi(Graph::Mode::kInference);
    gi.freeze_detached(frozen);
    const double v = loss(gi).item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check_leaf: loss is not finite");
    return v;
  };
  double worst = 0.0;
  auto data = leaf.mutable_data();
  for (std::size_t i = 0; i < data.size(); i += stride) {
    const double orig = data[i];
    const double fd = central_difference([&](double v) {
      data[i] = v;
      return eval();
    }, orig, eps);
    data[i] = orig;
    worst = std::max(worst, std::abs(ad[i] - fd) / std::max(1e-12, std::abs(fd)));
  }
  leaf.set_requires_grad(had_flag);
  return worst;
}

}  // namespace avedit
