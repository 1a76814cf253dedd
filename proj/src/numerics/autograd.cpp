#include "crate/numerics/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "crate/numerics/kernels.hpp"

namespace crate::ag {

template <class T>
Var Tape<T>::leaf(Mat<T> value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad && grad_enabled_});
  return Var{nodes_.size() - 1};
}

template <class T>
Var Tape<T>::record(Mat<T> value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  if (grad_enabled_)
    for (Var in : inputs) needs = needs || nodes_[in.id].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs});
  return Var{nodes_.size() - 1};
}

template <class T>
Mat<T>& Tape<T>::grad_slot(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.size() == 0) node.grad = Mat<T>::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

template <class T>
void Tape<T>::backward(Var loss) {
  require(grad_enabled_, "no_grad", "backward on a tape with gradients disabled");
  require(value(loss).size() == 1, "bad_shape", "backward needs a scalar loss");
  grad_slot(loss)(0, 0) = T(1);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && node.grad.size() != 0) node.backward(*this, i);
  }
}

namespace {

template <class T>
void check_same_shape(const Mat<T>& a, const Mat<T>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "bad_shape",
          std::string(op) + ": operand shapes differ");
}

}  // namespace

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  require(av.cols() == bv.rows(), "bad_shape", "matmul: inner dimensions differ");
  Mat<T> out = av * bv;
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_slot(a).noalias() += g * tp.value(b).transpose();
    if (tp.requires_grad(b)) tp.grad_slot(b).noalias() += tp.value(a).transpose() * g;
  });
}

template <class T>
Var matmul_nt(Tape<T>& t, Var a, Var b) {
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  require(av.cols() == bv.cols(), "bad_shape", "matmul_nt: inner dimensions differ");
  Mat<T> out = av * bv.transpose();
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_slot(a).noalias() += g * tp.value(b);
    if (tp.requires_grad(b)) tp.grad_slot(b).noalias() += g.transpose() * tp.value(a);
  });
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "add");
  Mat<T> out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_slot(a) += g;
    if (tp.requires_grad(b)) tp.grad_slot(b) += g;
  });
}

template <class T>
Var sub(Tape<T>& t, Var a, Var b) {
  check_same_shape(t.value(a), t.value(b), "sub");
  Mat<T> out = t.value(a) - t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_slot(a) += g;
    if (tp.requires_grad(b)) tp.grad_slot(b) -= g;
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T factor) {
  Mat<T> out = t.value(a) * factor;
  return t.record(std::move(out), {a}, [a, factor](Tape<T>& tp, std::size_t self) {
    tp.grad_slot(a) += tp.grad(Var{self}) * factor;
  });
}

template <class T>
Var add_scalar(Tape<T>& t, Var a, T offset) {
  Mat<T> out = t.value(a).array() + offset;
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    tp.grad_slot(a) += tp.grad(Var{self});
  });
}

template <class T>
Var add_row(Tape<T>& t, Var a, Var row) {
  const auto& rv = t.value(row);
  require(rv.rows() == 1 && rv.cols() == t.value(a).cols(), "bad_shape",
          "add_row: bias must be 1 x cols");
  Mat<T> out = t.value(a).rowwise() + rv.row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    if (tp.requires_grad(a)) tp.grad_slot(a) += g;
    if (tp.requires_grad(row)) tp.grad_slot(row) += g.colwise().sum();
  });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  Mat<T> out = t.value(a).cwiseMax(T(0));
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    const Mat<T>& x = tp.value(a);
    tp.grad_slot(a).array() += (x.array() > T(0)).select(g.array(), T(0));
  });
}

template <class T>
Var gelu(Tape<T>& t, Var a) {
  Mat<T> out = t.value(a).unaryExpr([](T x) { return crate::gelu(x); });
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    tp.grad_slot(a).array() +=
        g.array() * tp.value(a).unaryExpr([](T x) { return crate::gelu_derivative(x); }).array();
  });
}

template <class T>
Var slice_cols(Tape<T>& t, Var a, std::size_t start, std::size_t count) {
  const auto& av = t.value(a);
  require(start + count <= static_cast<std::size_t>(av.cols()), "bad_shape",
          "slice_cols out of range");
  Mat<T> out = av.middleCols(start, count);
  return t.record(std::move(out), {a}, [a, start, count](Tape<T>& tp, std::size_t self) {
    tp.grad_slot(a).middleCols(start, count) += tp.grad(Var{self});
  });
}

template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, double eps) {
  const Mat<T>& xv = t.value(x);
  const auto rows = xv.rows();
  const auto d = xv.cols();
  require(t.value(gamma).size() == d && t.value(beta).size() == d, "bad_shape",
          "layer_norm affine size mismatch");
  auto xhat = std::make_shared<Mat<T>>(rows, d);
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  Mat<T> out(rows, d);
  const T* g = t.value(gamma).data();
  const T* b = t.value(beta).data();
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = 0;
    for (Eigen::Index i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<T>(d);
    T var = 0;
    for (Eigen::Index i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    for (Eigen::Index i = 0; i < d; ++i) {
      const T h = (in[i] - mean) * is;
      (*xhat)(r, i) = h;
      out(r, i) = h * g[i] + b[i];
    }
  }
  return t.record(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, xhat, inv_std](Tape<T>& tp, std::size_t self) {
                    const Mat<T>& gy = tp.grad(Var{self});
                    const auto rows = gy.rows();
                    const auto d = gy.cols();
                    if (tp.requires_grad(gamma))
                      tp.grad_slot(gamma).row(0) += (gy.array() * xhat->array()).colwise().sum().matrix();
                    if (tp.requires_grad(beta)) tp.grad_slot(beta).row(0) += gy.colwise().sum();
                    if (!tp.requires_grad(x)) return;
                    const T* gam = tp.value(gamma).data();
                    Mat<T>& gx = tp.grad_slot(x);
                    std::vector<T> gxhat(d);
                    for (Eigen::Index r = 0; r < rows; ++r) {
                      T mean_g = 0, mean_gx = 0;
                      for (Eigen::Index i = 0; i < d; ++i) {
                        gxhat[i] = gy(r, i) * gam[i];
                        mean_g += gxhat[i];
                        mean_gx += gxhat[i] * (*xhat)(r, i);
                      }
                      mean_g /= static_cast<T>(d);
                      mean_gx /= static_cast<T>(d);
                      const T is = (*inv_std)[r];
                      for (Eigen::Index i = 0; i < d; ++i)
                        gx(r, i) += is * (gxhat[i] - mean_g - (*xhat)(r, i) * mean_gx);
                    }
                  });
}

template <class T>
Var embedding(Tape<T>& t, Var table, std::span<const std::uint32_t> ids) {
  const Mat<T>& tv = t.value(table);
  Mat<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < static_cast<std::uint64_t>(tv.rows()), "index_out_of_range",
            "embedding index " + std::to_string(ids[i]) + " >= table rows " +
                std::to_string(tv.rows()));
    out.row(i) = tv.row(ids[i]);
  }
  auto saved = std::make_shared<std::vector<std::uint32_t>>(ids.begin(), ids.end());
  return t.record(std::move(out), {table}, [table, saved](Tape<T>& tp, std::size_t self) {
    const Mat<T>& g = tp.grad(Var{self});
    Mat<T>& gt = tp.grad_slot(table);
    for (std::size_t i = 0; i < saved->size(); ++i) gt.row((*saved)[i]) += g.row(i);
  });
}

template <class T>
Var dropout(Tape<T>& t, Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  require(p < 1.0, "bad_config", "dropout probability must be < 1");
  const Mat<T>& av = t.value(a);
  auto mask = std::make_shared<Mat<T>>(av.rows(), av.cols());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask->size(); ++i)
    mask->data()[i] = rng.uniform() < p ? T(0) : keep_scale;
  Mat<T> out = av.cwiseProduct(*mask);
  return t.record(std::move(out), {a}, [a, mask](Tape<T>& tp, std::size_t self) {
    tp.grad_slot(a) += tp.grad(Var{self}).cwiseProduct(*mask);
  });
}

template <class T>
Var causal_attention(Tape<T>& t, Var q, Var k, Var v, std::size_t batch, std::size_t seq,
                     std::size_t heads) {
  const Mat<T>& qv = t.value(q);
  const Mat<T>& kv = t.value(k);
  const Mat<T>& vv = t.value(v);
  const auto width = static_cast<std::size_t>(qv.cols());
  require(static_cast<std::size_t>(qv.rows()) == batch * seq && width % heads == 0, "bad_shape",
          "causal_attention: rows must be batch*seq and cols divisible by heads");
  check_same_shape(qv, kv, "causal_attention");
  check_same_shape(qv, vv, "causal_attention");
  const std::size_t p = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(p));

  // Probabilities stored per (sequence, head) as dense seq x seq blocks; the
  // strictly upper triangle stays zero.
  auto probs = std::make_shared<std::vector<Mat<T>>>(batch * heads, Mat<T>::Zero(seq, seq));
  Mat<T> out = Mat<T>::Zero(qv.rows(), qv.cols());
  std::vector<T> row(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      Mat<T>& prob = (*probs)[b * heads + h];
      const std::size_t c0 = h * p;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qv.data() + (b * seq + i) * width + c0;
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.data() + (b * seq + j) * width + c0;
          T s = 0;
          for (std::size_t c = 0; c < p; ++c) s += qi[c] * kj[c];
          row[j] = s * scale_factor;
        }
        softmax_inplace(std::span<T>(row.data(), i + 1));
        T* yi = out.data() + (b * seq + i) * width + c0;
        for (std::size_t j = 0; j <= i; ++j) {
          prob(i, j) = row[j];
          const T* vj = vv.data() + (b * seq + j) * width + c0;
          for (std::size_t c = 0; c < p; ++c) yi[c] += row[j] * vj[c];
        }
      }
    }
  }

  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, batch, seq, heads, p, scale_factor, probs](Tape<T>& tp, std::size_t self) {
        const Mat<T>& gy = tp.grad(Var{self});
        const Mat<T>& qv = tp.value(q);
        const Mat<T>& kv = tp.value(k);
        const Mat<T>& vv = tp.value(v);
        const std::size_t width = static_cast<std::size_t>(gy.cols());
        // Separate accumulators so q, k, v may alias the same variable.
        Mat<T> gq = Mat<T>::Zero(gy.rows(), gy.cols());
        Mat<T> gk = Mat<T>::Zero(gy.rows(), gy.cols());
        Mat<T> gv = Mat<T>::Zero(gy.rows(), gy.cols());
        std::vector<T> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const Mat<T>& prob = (*probs)[b * heads + h];
            const std::size_t c0 = h * p;
            for (std::size_t i = 0; i < seq; ++i) {
              const std::size_t ri = b * seq + i;
              const T* gyi = gy.data() + ri * width + c0;
              T weighted = 0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = b * seq + j;
                const T* vj = vv.data() + rj * width + c0;
                T s = 0;
                for (std::size_t c = 0; c < p; ++c) s += gyi[c] * vj[c];
                dp[j] = s;
                weighted += prob(i, j) * s;
                T* gvj = gv.data() + rj * width + c0;
                for (std::size_t c = 0; c < p; ++c) gvj[c] += prob(i, j) * gyi[c];
              }
              const T* qi = qv.data() + ri * width + c0;
              T* gqi = gq.data() + ri * width + c0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t rj = b * seq + j;
                const T ds = prob(i, j) * (dp[j] - weighted) * scale_factor;
                const T* kj = kv.data() + rj * width + c0;
                T* gkj = gk.data() + rj * width + c0;
                for (std::size_t c = 0; c < p; ++c) {
                  gqi[c] += ds * kj[c];
                  gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
        if (tp.requires_grad(q)) tp.grad_slot(q) += gq;
        if (tp.requires_grad(k)) tp.grad_slot(k) += gk;
        if (tp.requires_grad(v)) tp.grad_slot(v) += gv;
      });
}

template <class T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const std::uint32_t> targets) {
  const Mat<T>& lv = t.value(logits);
  const auto rows = lv.rows();
  const auto cols = lv.cols();
  require(static_cast<std::size_t>(rows) == targets.size(), "bad_shape",
          "cross_entropy: one target per logits row");
  auto probs = std::make_shared<Mat<T>>(lv);
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    require(targets[r] < static_cast<std::uint64_t>(cols), "index_out_of_range",
            "cross_entropy target out of range");
    T* row = probs->data() + r * cols;
    T max_value = row[0];
    for (Eigen::Index c = 1; c < cols; ++c) max_value = std::max(max_value, row[c]);
    T denom = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - max_value);
      denom += row[c];
    }
    for (Eigen::Index c = 0; c < cols; ++c) row[c] /= denom;
    total += static_cast<double>(std::log(denom) + max_value - lv(r, targets[r]));
  }
  Mat<T> out(1, 1);
  out(0, 0) = static_cast<T>(total / static_cast<double>(rows));
  require(std::isfinite(out(0, 0)), "non_finite", "cross_entropy produced a non-finite loss");
  auto saved = std::make_shared<std::vector<std::uint32_t>>(targets.begin(), targets.end());
  return t.record(std::move(out), {logits}, [logits, probs, saved](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(Var{self})(0, 0) / static_cast<T>(probs->rows());
    Mat<T>& gl = tp.grad_slot(logits);
    gl += *probs * g;
    for (std::size_t r = 0; r < saved->size(); ++r) gl(r, (*saved)[r]) -= g;
  });
}

template <class T>
Var sum(Tape<T>& t, Var a) {
  Mat<T> out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    tp.grad_slot(a).array() += tp.grad(Var{self})(0, 0);
  });
}

template <class T>
Var mean_row_sq_norm(Tape<T>& t, Var a) {
  const Mat<T>& av = t.value(a);
  Mat<T> out(1, 1);
  out(0, 0) = av.squaredNorm() / static_cast<T>(av.rows());
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const Mat<T>& av = tp.value(a);
    tp.grad_slot(a) += av * (T(2) * tp.grad(Var{self})(0, 0) / static_cast<T>(av.rows()));
  });
}

template <class T>
Var mean_row_abs_sum(Tape<T>& t, Var a) {
  const Mat<T>& av = t.value(a);
  Mat<T> out(1, 1);
  out(0, 0) = av.cwiseAbs().sum() / static_cast<T>(av.rows());
  return t.record(std::move(out), {a}, [a](Tape<T>& tp, std::size_t self) {
    const Mat<T>& av = tp.value(a);
    const T g = tp.grad(Var{self})(0, 0) / static_cast<T>(av.rows());
    tp.grad_slot(a) += av.unaryExpr([g](T x) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
  });
}

#define CRATE_INSTANTIATE(T)                                                                  \
  template class Tape<T>;                                                                     \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                 \
  template Var matmul_nt<T>(Tape<T>&, Var, Var);                                              \
  template Var add<T>(Tape<T>&, Var, Var);                                                    \
  template Var sub<T>(Tape<T>&, Var, Var);                                                    \
  template Var scale<T>(Tape<T>&, Var, T);                                                    \
  template Var add_scalar<T>(Tape<T>&, Var, T);                                               \
  template Var add_row<T>(Tape<T>&, Var, Var);                                                \
  template Var relu<T>(Tape<T>&, Var);                                                        \
  template Var gelu<T>(Tape<T>&, Var);                                                        \
  template Var slice_cols<T>(Tape<T>&, Var, std::size_t, std::size_t);                        \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, double);                                \
  template Var embedding<T>(Tape<T>&, Var, std::span<const std::uint32_t>);                   \
  template Var dropout<T>(Tape<T>&, Var, double, Rng&);                                       \
  template Var causal_attention<T>(Tape<T>&, Var, Var, Var, std::size_t, std::size_t,         \
                                   std::size_t);                                              \
  template Var cross_entropy<T>(Tape<T>&, Var, std::span<const std::uint32_t>);               \
  template Var sum<T>(Tape<T>&, Var);                                                         \
  template Var mean_row_sq_norm<T>(Tape<T>&, Var);                                            \
  template Var mean_row_abs_sum<T>(Tape<T>&, Var);

CRATE_INSTANTIATE(float)
CRATE_INSTANTIATE(double)
#undef CRATE_INSTANTIATE

}  // namespace crate::ag
