// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable free functions over BasicTensor.
 *
 * No implicit broadcasting: binary ops need equal shapes. The only broadcasts
 * are explicit (add_bias for a 1xN row, scale for a constant).
 */
#pragma once

#include "zoneout/tensor.hpp"

#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace zoneout {

namespace detail {

template <typename Scalar>
void require_same_shape(const char *op, const BasicTensor<Scalar> &a,
                        const BasicTensor<Scalar> &b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

template <typename Scalar> Scalar stable_sigmoid(Scalar x) {
  if (x >= Scalar(0))
    return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

/// out = sigmoid(x) for an array expression x. Equal to stable_sigmoid:
/// exp(min(x, 0)) is 1 or exp(x), and exp(-|x|) never overflows. Written
/// without select() so the whole expression stays on Eigen's vector path.
template <typename In, typename Out>
void sigmoid_into(const Eigen::ArrayBase<In> &x, Out &&out) {
  using Scalar = typename In::Scalar;
  out = x.min(Scalar(0)).exp() / (Scalar(1) + (-x.abs()).exp());
}

/// out = tanh(x) built on the vectorised exp. Near zero, where
/// (1 - e) / (1 + e) cancels, the odd Taylor series through x^13 is used; its
/// truncation error there is below 1e-19 relative.
template <typename In, typename Out>
void tanh_into(const Eigen::ArrayBase<In> &x, Out &&out) {
  using Scalar = typename In::Scalar;
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Array e = (Scalar(-2) * x.abs()).exp();
  const auto big = (x < Scalar(0)).select(e - Scalar(1), Scalar(1) - e) / (Scalar(1) + e);
  const auto x2 = x * x;
  const auto poly =
    x * (Scalar(1) +
         x2 * (Scalar(-1) / 3 +
               x2 * (Scalar(2) / 15 +
                     x2 * (Scalar(-17) / 315 +
                           x2 * (Scalar(62) / 2835 +
                                 x2 * (Scalar(-1382) / 155925 +
                                       x2 * (Scalar(21844) / 6081075)))))));
  out = (x.abs() < Scalar(0.0625)).select(poly, big);
}

} // namespace detail

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar> &a,
                           const BasicTensor<Scalar> &b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + a.shape_str() +
                         " x " + b.shape_str());
  MatrixX<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  return BasicTensor<Scalar>::make_result(
    "matmul", std::move(out), {a, b}, [](detail::Node<Scalar> &self) {
      auto &lhs = self.parent(0);
      auto &rhs = self.parent(1);
      if (lhs.requires_grad)
        lhs.grad_buffer().noalias() += self.grad * rhs.value.transpose();
      if (rhs.requires_grad)
        rhs.grad_buffer().noalias() += lhs.value.transpose() * self.grad;
    });
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar> &a,
                        const BasicTensor<Scalar> &b) {
  detail::require_same_shape("add", a, b);
  return BasicTensor<Scalar>::make_result(
    "add", a.value() + b.value(), {a, b}, [](detail::Node<Scalar> &self) {
      for (std::size_t k = 0; k < 2; ++k)
        if (self.parent(k).requires_grad)
          self.parent(k).grad_buffer() += self.grad;
    });
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar> &a,
                        const BasicTensor<Scalar> &b) {
  detail::require_same_shape("sub", a, b);
  return BasicTensor<Scalar>::make_result(
    "sub", a.value() - b.value(), {a, b}, [](detail::Node<Scalar> &self) {
      if (self.parent(0).requires_grad)
        self.parent(0).grad_buffer() += self.grad;
      if (self.parent(1).requires_grad)
        self.parent(1).grad_buffer() -= self.grad;
    });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar> &a,
                        const BasicTensor<Scalar> &b) {
  detail::require_same_shape("mul", a, b);
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return BasicTensor<Scalar>::make_result(
    "mul", std::move(out), {a, b}, [](detail::Node<Scalar> &self) {
      auto &lhs = self.parent(0);
      auto &rhs = self.parent(1);
      if (lhs.requires_grad)
        lhs.grad_buffer() += self.grad.cwiseProduct(rhs.value);
      if (rhs.requires_grad)
        rhs.grad_buffer() += self.grad.cwiseProduct(lhs.value);
    });
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar> &a, Scalar factor) {
  return BasicTensor<Scalar>::make_result(
    "scale", a.value() * factor, {a}, [factor](detail::Node<Scalar> &self) {
      self.parent(0).grad_buffer() += self.grad * factor;
    });
}

template <typename Scalar>
BasicTensor<Scalar> sigmoid(const BasicTensor<Scalar> &a) {
  // Same branches as stable_sigmoid, written with array ops so exp vectorises.
  MatrixX<Scalar> out(a.rows(), a.cols());
  detail::sigmoid_into(a.value().array(), out.array());
  return BasicTensor<Scalar>::make_result(
    "sigmoid", std::move(out), {a}, [](detail::Node<Scalar> &self) {
      const auto s = self.value.array();
      self.parent(0).grad_buffer().array() +=
        self.grad.array() * s * (Scalar(1) - s);
    });
}

template <typename Scalar>
BasicTensor<Scalar> tanh(const BasicTensor<Scalar> &a) {
  MatrixX<Scalar> out(a.rows(), a.cols());
  detail::tanh_into(a.value().array(), out.array());
  return BasicTensor<Scalar>::make_result(
    "tanh", std::move(out), {a}, [](detail::Node<Scalar> &self) {
      const auto t = self.value.array();
      self.parent(0).grad_buffer().array() +=
        self.grad.array() * (Scalar(1) - t * t);
    });
}

/// Adds a 1xN bias row to every row of an MxN tensor.
template <typename Scalar>
BasicTensor<Scalar> add_bias(const BasicTensor<Scalar> &a,
                             const BasicTensor<Scalar> &bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols())
    throw DimensionError("add_bias: bias " + bias.shape_str() +
                         " does not fit " + a.shape_str());
  MatrixX<Scalar> out = a.value().rowwise() + bias.value().row(0);
  return BasicTensor<Scalar>::make_result(
    "add_bias", std::move(out), {a, bias}, [](detail::Node<Scalar> &self) {
      if (self.parent(0).requires_grad)
        self.parent(0).grad_buffer() += self.grad;
      if (self.parent(1).requires_grad)
        self.parent(1).grad_buffer() += self.grad.colwise().sum();
    });
}

/// x_proj + h * w + bias as one node: the pre-activation of every recurrent
/// cell, fused so an unrolled step stores one B x G matrix instead of three.
template <typename Scalar>
BasicTensor<Scalar> affine(const BasicTensor<Scalar> &x_proj,
                           const BasicTensor<Scalar> &h,
                           const BasicTensor<Scalar> &w,
                           const BasicTensor<Scalar> &bias) {
  if (h.cols() != w.rows() || x_proj.rows() != h.rows() ||
      x_proj.cols() != w.cols() || bias.rows() != 1 || bias.cols() != w.cols())
    throw DimensionError("affine: " + x_proj.shape_str() + " + " + h.shape_str() +
                         " x " + w.shape_str() + " + " + bias.shape_str());
  MatrixX<Scalar> out = x_proj.value().rowwise() + bias.value().row(0);
  out.noalias() += h.value() * w.value();
  return BasicTensor<Scalar>::make_result(
    "affine", std::move(out), {x_proj, h, w, bias},
    [](detail::Node<Scalar> &self) {
      if (self.parent(0).requires_grad)
        self.parent(0).grad_buffer() += self.grad;
      if (self.parent(1).requires_grad)
        self.parent(1).grad_buffer().noalias() +=
          self.grad * self.parent(2).value.transpose();
      if (self.parent(2).requires_grad)
        self.parent(2).grad_buffer().noalias() +=
          self.parent(1).value.transpose() * self.grad;
      if (self.parent(3).requires_grad)
        self.parent(3).grad_buffer() += self.grad.colwise().sum();
    });
}

/// One LSTM step in one node: the recurrent affine map, the gate
/// nonlinearities and the state update.
///
/// The pre-activation x_proj + h_prev * w + bias is B x 4H in [i, f, o, g]
/// order; `c_prev` is B x H. The result is B x 7H laid out as
/// [i, f, o, g, c, tanh(c), h] with c = f*c_prev + i*g and h = o*tanh(c).
/// Gradients arriving on any block, including the gates themselves, are
/// propagated. The pre-activation and its gradient are scratch buffers, so an
/// unrolled sequence keeps only the packed result per step.
template <typename Scalar>
BasicTensor<Scalar> lstm_cell(const BasicTensor<Scalar> &x_proj,
                              const BasicTensor<Scalar> &h_prev,
                              const BasicTensor<Scalar> &w,
                              const BasicTensor<Scalar> &bias,
                              const BasicTensor<Scalar> &c_prev) {
  const Index h = c_prev.cols();
  if (h_prev.cols() != w.rows() || w.cols() != 4 * h || x_proj.cols() != 4 * h ||
      bias.rows() != 1 || bias.cols() != 4 * h || x_proj.rows() != h_prev.rows() ||
      c_prev.rows() != h_prev.rows())
    throw DimensionError("lstm_cell: " + x_proj.shape_str() + " + " +
                         h_prev.shape_str() + " x " + w.shape_str() + " + " +
                         bias.shape_str() + " does not fit cell state " +
                         c_prev.shape_str());
  const Index b = x_proj.rows();
  MatrixX<Scalar> out(b, 7 * h);
  {
    MatrixX<Scalar> pre = x_proj.value().rowwise() + bias.value().row(0);
    pre.noalias() += h_prev.value() * w.value();
    detail::sigmoid_into(pre.leftCols(3 * h).array(), out.leftCols(3 * h).array());
    detail::tanh_into(pre.middleCols(3 * h, h).array(), out.middleCols(3 * h, h).array());
  }
  out.middleCols(4 * h, h) =
    out.middleCols(h, h).cwiseProduct(c_prev.value()) +
    out.leftCols(h).cwiseProduct(out.middleCols(3 * h, h));
  detail::tanh_into(out.middleCols(4 * h, h).array(), out.middleCols(5 * h, h).array());
  out.rightCols(h) = out.middleCols(2 * h, h).cwiseProduct(out.middleCols(5 * h, h));
  return BasicTensor<Scalar>::make_result(
    "lstm_cell", std::move(out), {x_proj, h_prev, w, bias, c_prev},
    [h](detail::Node<Scalar> &self) {
      const auto v = [&](Index k) { return self.value.middleCols(k * h, h).array(); };
      const auto g = [&](Index k) { return self.grad.middleCols(k * h, h).array(); };
      const auto i = v(0), f = v(1), o = v(2), gg = v(3), tc = v(5);
      const auto cp = self.parent(4).value.array();
      MatrixX<Scalar> dc =
        (g(4) + (g(6) * o + g(5)) * (Scalar(1) - tc * tc)).matrix();
      const auto dca = dc.array();
      MatrixX<Scalar> dpre(self.value.rows(), 4 * h);
      dpre.leftCols(h).array() = (g(0) + dca * gg) * i * (Scalar(1) - i);
      dpre.middleCols(h, h).array() = (g(1) + dca * cp) * f * (Scalar(1) - f);
      dpre.middleCols(2 * h, h).array() = (g(2) + g(6) * tc) * o * (Scalar(1) - o);
      dpre.middleCols(3 * h, h).array() = (g(3) + dca * i) * (Scalar(1) - gg * gg);

      if (self.parent(0).requires_grad)
        self.parent(0).grad_buffer() += dpre;
      if (self.parent(1).requires_grad)
        self.parent(1).grad_buffer().noalias() += dpre * self.parent(2).value.transpose();
      if (self.parent(2).requires_grad)
        self.parent(2).grad_buffer().noalias() += self.parent(1).value.transpose() * dpre;
      if (self.parent(3).requires_grad)
        self.parent(3).grad_buffer() += dpre.colwise().sum();
      if (self.parent(4).requires_grad)
        self.parent(4).grad_buffer().array() += dca * f;
    });
}

/// Columns [start, start + count).
template <typename Scalar>
BasicTensor<Scalar> slice_cols(const BasicTensor<Scalar> &a, Index start,
                               Index count) {
  if (start < 0 || count <= 0 || start + count > a.cols())
    throw DimensionError("slice_cols: columns [" + std::to_string(start) +
                         ", " + std::to_string(start + count) +
                         ") out of range for " + a.shape_str());
  MatrixX<Scalar> out = a.value().middleCols(start, count);
  return BasicTensor<Scalar>::make_result(
    "slice_cols", std::move(out), {a},
    [start, count](detail::Node<Scalar> &self) {
      self.parent(0).grad_buffer().middleCols(start, count) += self.grad;
    });
}

/// Row lookup: out.row(k) = table.row(indices[k]). Equivalent to a one-hot
/// matmul without materialising the one-hot matrix.
template <typename Scalar>
BasicTensor<Scalar> gather_rows(const BasicTensor<Scalar> &table,
                                std::span<const int> indices) {
  if (indices.empty())
    throw DimensionError("gather_rows: empty index list");
  MatrixX<Scalar> out(static_cast<Index>(indices.size()), table.cols());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= table.rows())
      throw std::out_of_range("gather_rows: index " +
                              std::to_string(indices[k]) + " outside [0, " +
                              std::to_string(table.rows()) + ")");
    out.row(static_cast<Index>(k)) = table.value().row(indices[k]);
  }
  std::vector<int> idx(indices.begin(), indices.end());
  return BasicTensor<Scalar>::make_result(
    "gather_rows", std::move(out), {table},
    [idx = std::move(idx)](detail::Node<Scalar> &self) {
      auto &g = self.parent(0).grad_buffer();
      for (std::size_t k = 0; k < idx.size(); ++k)
        g.row(idx[k]) += self.grad.row(static_cast<Index>(k));
    });
}

/// Stacks tensors with equal column counts on top of each other.
template <typename Scalar>
BasicTensor<Scalar> concat_rows(std::span<const BasicTensor<Scalar>> parts) {
  if (parts.empty())
    throw DimensionError("concat_rows: nothing to concatenate");
  Index rows = 0;
  for (const auto &p : parts) {
    if (p.cols() != parts.front().cols())
      throw DimensionError("concat_rows: column mismatch " +
                           parts.front().shape_str() + " vs " + p.shape_str());
    rows += p.rows();
  }
  MatrixX<Scalar> out(rows, parts.front().cols());
  Index at = 0;
  for (const auto &p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  // make_result takes an initializer_list; register operands by hand.
  BasicTensor<Scalar> result =
    BasicTensor<Scalar>::make_result("concat_rows", std::move(out), {}, {});
  bool any = false;
  if (detail::grad_mode())
    for (const auto &p : parts)
      any = any || p.requires_grad();
  if (any) {
    auto &node = *result.node();
    node.requires_grad = true;
    for (const auto &p : parts)
      node.parents.push_back(p.node());
    node.backward = [](detail::Node<Scalar> &self) {
      Index at = 0;
      for (auto &p : self.parents) {
        const Index r = p->value.rows();
        if (p->requires_grad)
          p->grad_buffer() += self.grad.middleRows(at, r);
        at += r;
      }
    };
  }
  return result;
}

/// Per-row Euclidean norm, Mx1. The gradient at a zero row is taken as zero.
template <typename Scalar>
BasicTensor<Scalar> row_norm(const BasicTensor<Scalar> &a) {
  MatrixX<Scalar> out = a.value().rowwise().norm();
  return BasicTensor<Scalar>::make_result(
    "row_norm", std::move(out), {a}, [](detail::Node<Scalar> &self) {
      auto &in = self.parent(0);
      auto &g = in.grad_buffer();
      for (Index r = 0; r < in.value.rows(); ++r) {
        const Scalar n = self.value(r, 0);
        if (n > Scalar(0))
          g.row(r) += (self.grad(r, 0) / n) * in.value.row(r);
      }
    });
}

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar> &a) {
  MatrixX<Scalar> out = MatrixX<Scalar>::Constant(1, 1, a.value().sum());
  return BasicTensor<Scalar>::make_result(
    "sum", std::move(out), {a}, [](detail::Node<Scalar> &self) {
      self.parent(0).grad_buffer().array() += self.grad(0, 0);
    });
}

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar> &a) {
  const Scalar n = static_cast<Scalar>(a.size());
  MatrixX<Scalar> out = MatrixX<Scalar>::Constant(1, 1, a.value().sum() / n);
  return BasicTensor<Scalar>::make_result(
    "mean", std::move(out), {a}, [n](detail::Node<Scalar> &self) {
      self.parent(0).grad_buffer().array() += self.grad(0, 0) / n;
    });
}

/// out = d*a + (1-d)*b for a constant mixing tensor d. Entries of d that are
/// exactly 0 or 1 select b or a verbatim.
template <typename Scalar>
BasicTensor<Scalar> mix(const MatrixX<Scalar> &d, const BasicTensor<Scalar> &a,
                        const BasicTensor<Scalar> &b) {
  detail::require_same_shape("mix", a, b);
  if (d.rows() != a.rows() || d.cols() != a.cols())
    throw DimensionError("mix: mask " + shape_string(d.rows(), d.cols()) +
                         " does not fit " + a.shape_str());
  MatrixX<Scalar> out(a.rows(), a.cols());
  const Scalar *pd = d.data();
  const Scalar *pa = a.value().data();
  const Scalar *pb = b.value().data();
  Scalar *po = out.data();
  // Both operands are loaded unconditionally so the choice compiles to a
  // blend rather than a branch on random mask bits.
  for (Index k = 0; k < out.size(); ++k) {
    const Scalar w = pd[k], av = pa[k], bv = pb[k];
    const Scalar blended = w * av + (Scalar(1) - w) * bv;
    po[k] = w == Scalar(1) ? av : w == Scalar(0) ? bv : blended;
  }
  return BasicTensor<Scalar>::make_result(
    "mix", std::move(out), {a, b}, [d](detail::Node<Scalar> &self) {
      if (self.parent(0).requires_grad)
        self.parent(0).grad_buffer().array() += self.grad.array() * d.array();
      if (self.parent(1).requires_grad)
        self.parent(1).grad_buffer().array() +=
          self.grad.array() * (Scalar(1) - d.array());
    });
}

/// Mean negative log-likelihood (nats) of integer targets under a row-wise
/// softmax of the logits. Max-subtracted for stability.
template <typename Scalar>
BasicTensor<Scalar> softmax_cross_entropy(const BasicTensor<Scalar> &logits,
                                          std::span<const int> targets) {
  const Index rows = logits.rows();
  const Index classes = logits.cols();
  if (static_cast<Index>(targets.size()) != rows)
    throw DimensionError("softmax_cross_entropy: " +
                         std::to_string(targets.size()) + " targets for " +
                         logits.shape_str() + " logits");
  for (int t : targets)
    if (t < 0 || t >= classes)
      throw std::out_of_range("softmax_cross_entropy: target " +
                              std::to_string(t) + " outside [0, " +
                              std::to_string(classes) + ")");
  MatrixX<Scalar> prob(rows, classes);
  Scalar total = 0;
  for (Index r = 0; r < rows; ++r) {
    const auto row = logits.value().row(r);
    const Scalar mx = row.maxCoeff();
    prob.row(r) = (row.array() - mx).exp().matrix();
    const Scalar z = prob.row(r).sum();
    prob.row(r) /= z;
    total += std::log(z) - (row(targets[r]) - mx);
  }
  MatrixX<Scalar> out =
    MatrixX<Scalar>::Constant(1, 1, total / static_cast<Scalar>(rows));
  std::vector<int> tgt(targets.begin(), targets.end());
  return BasicTensor<Scalar>::make_result(
    "softmax_cross_entropy", std::move(out), {logits},
    [prob = std::move(prob), tgt = std::move(tgt)](detail::Node<Scalar> &self) {
      const Scalar g = self.grad(0, 0) / static_cast<Scalar>(prob.rows());
      auto &dst = self.parent(0).grad_buffer();
      dst += g * prob;
      for (std::size_t r = 0; r < tgt.size(); ++r)
        dst(static_cast<Index>(r), tgt[r]) -= g;
    });
}

template <typename Scalar>
BasicTensor<Scalar> operator+(const BasicTensor<Scalar> &a,
                              const BasicTensor<Scalar> &b) {
  return add(a, b);
}
template <typename Scalar>
BasicTensor<Scalar> operator-(const BasicTensor<Scalar> &a,
                              const BasicTensor<Scalar> &b) {
  return sub(a, b);
}
template <typename Scalar>
BasicTensor<Scalar> operator*(Scalar s, const BasicTensor<Scalar> &a) {
  return scale(a, s);
}

} // namespace zoneout
