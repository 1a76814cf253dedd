#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

#include "crate/numerics/rng.hpp"
#include "crate/numerics/tensor.hpp"

namespace crate::ag {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode tape. Every recorded op stores its output value and an adjoint
/// closure; backward() replays the closures in reverse recording order.
///
/// With grad disabled the tape only keeps values, which is what inference,
/// dumping and steering use.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Mat<T> value, bool requires_grad = false);
  Var record(Mat<T> value, std::initializer_list<Var> inputs, Backward backward);

  const Mat<T>& value(Var v) const { return nodes_[v.id].value; }
  const Mat<T>& grad(Var v) const { return nodes_[v.id].grad; }
  bool has_grad(Var v) const { return nodes_[v.id].grad.size() != 0; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer for v, zero-initialized on first access.
  Mat<T>& grad_slot(Var v);

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

// --- ops ------------------------------------------------------------------

template <class T> Var matmul(Tape<T>& t, Var a, Var b);     // a * b
template <class T> Var matmul_nt(Tape<T>& t, Var a, Var b);  // a * b^T
template <class T> Var add(Tape<T>& t, Var a, Var b);
template <class T> Var sub(Tape<T>& t, Var a, Var b);
template <class T> Var scale(Tape<T>& t, Var a, T factor);
template <class T> Var add_scalar(Tape<T>& t, Var a, T offset);
/// a (R x C) plus a 1 x C row broadcast over rows.
template <class T> Var add_row(Tape<T>& t, Var a, Var row);
template <class T> Var relu(Tape<T>& t, Var a);
template <class T> Var gelu(Tape<T>& t, Var a);
template <class T> Var slice_cols(Tape<T>& t, Var a, std::size_t start, std::size_t count);
/// Row-wise layer norm; gamma and beta are 1 x C.
template <class T> Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, double eps);
/// Gathers rows of table (rows x C) by index.
template <class T> Var embedding(Tape<T>& t, Var table, std::span<const std::uint32_t> ids);
/// Inverted dropout; identity when p == 0.
template <class T> Var dropout(Tape<T>& t, Var a, double p, Rng& rng);

/// Causal multi-head scaled dot-product attention over `batch` stacked
/// sequences of length `seq`. q, k, v are (batch*seq) x C with C split into
/// `heads` contiguous column blocks. Position i only reads positions <= i.
template <class T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                     std::size_t heads);

/// Mean cross-entropy (natural log) of row-wise softmax(logits) against targets.
template <class T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const std::uint32_t> targets);

template <class T> Var sum(Tape<T>& t, Var a);
/// (1/R) * sum of squared entries.
template <class T> Var mean_row_sq_norm(Tape<T>& t, Var a);
/// (1/R) * sum of absolute entries.
template <class T> Var mean_row_abs_sum(Tape<T>& t, Var a);

}  // namespace crate::ag
