#pragma once

// Differentiable operations. Each function validates shapes, computes the
// forward values and registers the exact vector-Jacobian product.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cloc/errors.hpp"
#include "cloc/tensor.hpp"

namespace cloc {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

inline void require_vector(const Tensor& a, const char* op) {
  if (a.dim() != 1) throw ShapeError(std::string(op) + ": expected a vector, got shape " + shape_string(a.shape()));
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.dim() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_string(a.shape()));
}

inline void accumulate(Node& parent, std::span<const double> delta, double scale = 1.0) {
  if (!parent.requires_grad) return;
  auto& g = parent.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * delta[i];
}

template <class F>
Tensor elementwise_unary(const Tensor& x, F&& f, const char* op, std::vector<double> derivative,
                         std::vector<std::uint8_t> kinks = {}) {
  std::vector<double> out(x.size());
  auto xs = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xs[i]);
  return Tensor::from_op(
      x.shape(), std::move(out), {x},
      [d = std::move(derivative)](Node& self) {
        Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d[i];
      },
      op, std::move(kinks));
}

inline double stable_softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double norm_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        detail::accumulate(*self.parents[0], self.grad);
        detail::accumulate(*self.parents[1], self.grad);
      },
      "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        detail::accumulate(*self.parents[0], self.grad);
        detail::accumulate(*self.parents[1], self.grad, -1.0);
      },
      "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a, b},
      [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.values[i];
        }
      },
      "mul");
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * a[i];
  return Tensor::from_op(
      a.shape(), std::move(out), {a},
      [factor](detail::Node& self) { detail::accumulate(*self.parents[0], self.grad, factor); }, "scale");
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + offset;
  return Tensor::from_op(
      a.shape(), std::move(out), {a}, [](detail::Node& self) { detail::accumulate(*self.parents[0], self.grad); },
      "add_scalar");
}

/// Adds a length-M vector to every row of an N x M matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_bias");
  detail::require_vector(bias, "add_bias");
  const std::size_t n = x.rows(), m = x.cols();
  if (bias.size() != m) {
    throw ShapeError("add_bias: bias of shape " + shape_string(bias.shape()) + " does not match matrix " +
                     shape_string(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bias[c];
  return Tensor::from_op(
      x.shape(), std::move(out), {x, bias},
      [n, m](detail::Node& self) {
        detail::accumulate(*self.parents[0], self.grad);
        auto& pb = *self.parents[1];
        if (!pb.requires_grad) return;
        auto& g = pb.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < m; ++c) g[c] += self.grad[r * m + c];
      },
      "add_bias");
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] += aip * bv[p * m + j];
    }
  return Tensor::from_op(
      {n, m}, std::move(out), {a, b},
      [n, k, m](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad) {
          auto& ga = pa.grad_buffer();  // G * B^T
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              for (std::size_t j = 0; j < m; ++j) s += g[i * m + j] * pb.values[p * m + j];
              ga[i * k + p] += s;
            }
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();  // A^T * G
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = pa.values[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
            }
        }
      },
      "matmul");
}

/// max(0, x); derivative at exactly 0 is taken as 0.
inline Tensor relu(const Tensor& x) {
  std::vector<double> d(x.size());
  std::vector<std::uint8_t> kinks(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    kinks[i] = x[i] > 0.0;
    d[i] = kinks[i] ? 1.0 : 0.0;
  }
  return detail::elementwise_unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, "relu", std::move(d),
                                   std::move(kinks));
}

/// Hinge max(0, x) as used by margin losses; same subgradient convention as relu.
inline Tensor hinge(const Tensor& x) {
  std::vector<double> d(x.size());
  std::vector<std::uint8_t> kinks(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    kinks[i] = x[i] > 0.0;
    d[i] = kinks[i] ? 1.0 : 0.0;
  }
  return detail::elementwise_unary(x, [](double v) { return std::max(0.0, v); }, "hinge", std::move(d),
                                   std::move(kinks));
}

inline Tensor softplus(const Tensor& x) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = detail::sigmoid(x[i]);
  return detail::elementwise_unary(x, detail::stable_softplus, "softplus", std::move(d));
}

inline Tensor log(const Tensor& x) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(x[i] > 0.0)) throw DomainError("log: non-positive input " + std::to_string(x[i]));
    d[i] = 1.0 / x[i];
  }
  return detail::elementwise_unary(x, [](double v) { return std::log(v); }, "log", std::move(d));
}

inline Tensor exp(const Tensor& x) {
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::exp(x[i]);
  auto values = d;
  return Tensor::from_op(
      x.shape(), std::move(values), {x},
      [d = std::move(d)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d[i];
      },
      "exp");
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::from_op(
      {}, {s}, {x},
      [](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (auto& gi : g) gi += self.grad[0];
      },
      "sum");
}

inline Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
  detail::require_vector(a, "dot");
  detail::require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return Tensor::from_op(
      {}, {s}, {a, b},
      [](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double g = self.grad[0];
        if (pa.requires_grad) detail::accumulate(pa, pb.values, g);
        if (pb.requires_grad) detail::accumulate(pb, pa.values, g);
      },
      "dot");
}

/// Euclidean norm of a vector. At the origin the subgradient 0 is used.
inline Tensor l2_norm(const Tensor& v) {
  detail::require_vector(v, "l2_norm");
  const double n = detail::norm_of(v.values());
  return Tensor::from_op(
      {}, {n}, {v},
      [n](detail::Node& self) {
        if (n == 0.0) return;
        auto& p = *self.parents[0];
        detail::accumulate(p, p.values, self.grad[0] / n);
      },
      "l2_norm");
}

/// <a, b> / (|a| |b|). A zero-norm operand is a DomainError.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require_vector(a, "cosine_similarity");
  detail::require_same_shape(a, b, "cosine_similarity");
  const double na = detail::norm_of(a.values());
  const double nb = detail::norm_of(b.values());
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_similarity: zero-norm operand");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] * b[i];
  const double psi = d / (na * nb);
  return Tensor::from_op(
      {}, {psi}, {a, b},
      [na, nb, psi](detail::Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const double g = self.grad[0];
        // d psi / da = b / (|a||b|) - psi * a / |a|^2
        if (pa.requires_grad) {
          auto& ga = pa.grad_buffer();
          for (std::size_t i = 0; i < ga.size(); ++i)
            ga[i] += g * (pb.values[i] / (na * nb) - psi * pa.values[i] / (na * na));
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < gb.size(); ++i)
            gb[i] += g * (pa.values[i] / (na * nb) - psi * pb.values[i] / (nb * nb));
        }
      },
      "cosine_similarity");
}

/// Pairwise cosine similarities between the rows of an N x d matrix.
inline Tensor cosine_similarity_matrix(const Tensor& z) {
  detail::require_matrix(z, "cosine_similarity_matrix");
  const std::size_t n = z.rows(), d = z.cols();
  std::vector<double> norms(n);
  std::vector<double> unit(n * d);
  auto zv = z.values();
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = detail::norm_of(zv.subspan(i * d, d));
    if (norms[i] == 0.0) {
      throw DomainError("cosine_similarity_matrix: row " + std::to_string(i) + " has zero norm");
    }
    for (std::size_t c = 0; c < d; ++c) unit[i * d + c] = zv[i * d + c] / norms[i];
  }
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += unit[i * d + c] * unit[j * d + c];
      out[i * n + j] = out[j * n + i] = s;
    }
  return Tensor::from_op(
      {n, n}, std::move(out), {z},
      [n, d, norms = std::move(norms), unit = std::move(unit)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& gz = p.grad_buffer();
        const auto& G = self.grad;
        std::vector<double> acc(d);
        for (std::size_t i = 0; i < n; ++i) {
          std::fill(acc.begin(), acc.end(), 0.0);
          for (std::size_t j = 0; j < n; ++j) {
            const double w = G[i * n + j] + G[j * n + i];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) acc[c] += w * unit[j * d + c];
          }
          // project out the row's own direction: (I - u u^T) acc / |z_i|
          double along = 0.0;
          for (std::size_t c = 0; c < d; ++c) along += acc[c] * unit[i * d + c];
          for (std::size_t c = 0; c < d; ++c) gz[i * d + c] += (acc[c] - along * unit[i * d + c]) / norms[i];
        }
      },
      "cosine_similarity_matrix");
}

namespace detail {

// Writes softmax(logits) into probs and returns the loss -log softmax[label].
inline double softmax_xent_row(std::span<const double> logits, std::size_t label, std::span<double> probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    probs[c] = std::exp(logits[c] - mx);
    z += probs[c];
  }
  for (auto& p : probs) p /= z;
  return std::log(z) + mx - logits[label];
}

}  // namespace detail

/// Fused, numerically stable cross-entropy of softmax(logits) against a class index.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::size_t label) {
  detail::require_vector(logits, "softmax_cross_entropy");
  const std::size_t c = logits.size();
  if (label >= c) {
    throw UsageError("softmax_cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(c) + " classes");
  }
  std::vector<double> probs(c);
  const double loss = detail::softmax_xent_row(logits.values(), label, probs);
  return Tensor::from_op(
      {}, {loss}, {logits},
      [probs = std::move(probs), label](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (probs[i] - (i == label ? 1.0 : 0.0));
      },
      "softmax_cross_entropy");
}

/// Row-wise fused cross-entropy for an N x C logit matrix; returns N losses.
inline Tensor softmax_cross_entropy_rows(const Tensor& logits, std::span<const std::size_t> labels) {
  detail::require_matrix(logits, "softmax_cross_entropy_rows");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  std::vector<double> probs(n * c);
  std::vector<double> losses(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  for (std::size_t r = 0; r < n; ++r) {
    if (lab[r] >= c) {
      throw UsageError("softmax_cross_entropy_rows: label " + std::to_string(lab[r]) + " out of range for " +
                       std::to_string(c) + " classes");
    }
    losses[r] = detail::softmax_xent_row(logits.values().subspan(r * c, c), lab[r],
                                         std::span<double>(probs).subspan(r * c, c));
  }
  return Tensor::from_op(
      {n}, std::move(losses), {logits},
      [n, c, probs = std::move(probs), lab = std::move(lab)](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t k = 0; k < c; ++k)
            g[r * c + k] += self.grad[r] * (probs[r * c + k] - (k == lab[r] ? 1.0 : 0.0));
      },
      "softmax_cross_entropy_rows");
}

/// Element i of a vector as a scalar.
inline Tensor select(const Tensor& v, std::size_t index) {
  detail::require_vector(v, "select");
  if (index >= v.size()) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for " + shape_string(v.shape()));
  }
  return Tensor::from_op(
      {}, {v[index]}, {v},
      [index](detail::Node& self) {
        auto& p = *self.parents[0];
        if (p.requires_grad) p.grad_buffer()[index] += self.grad[0];
      },
      "select");
}

/// Row r of a matrix as a vector.
inline Tensor row(const Tensor& x, std::size_t r) {
  detail::require_matrix(x, "row");
  const std::size_t m = x.cols();
  if (r >= x.rows()) throw ShapeError("row: index " + std::to_string(r) + " out of range for " + shape_string(x.shape()));
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(r * m),
                          x.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * m));
  return Tensor::from_op(
      {m}, std::move(out), {x},
      [r, m](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (std::size_t c = 0; c < m; ++c) g[r * m + c] += self.grad[c];
      },
      "row");
}

/// Packs scalars into a vector.
inline Tensor stack(const std::vector<Tensor>& scalars) {
  std::vector<double> out;
  out.reserve(scalars.size());
  for (const auto& s : scalars) {
    if (s.size() != 1) throw ShapeError("stack: element of shape " + shape_string(s.shape()) + " is not a scalar");
    out.push_back(s.item());
  }
  return Tensor::from_op(
      {scalars.size()}, std::move(out), scalars,
      [](detail::Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          auto& p = *self.parents[i];
          if (p.requires_grad) p.grad_buffer()[0] += self.grad[i];
        }
      },
      "stack");
}

/// Packs equal-length vectors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: no rows");
  const std::size_t m = rows.front().size();
  std::vector<double> out;
  out.reserve(rows.size() * m);
  for (const auto& r : rows) {
    detail::require_vector(r, "stack_rows");
    if (r.size() != m) throw ShapeError("stack_rows: ragged rows");
    out.insert(out.end(), r.values().begin(), r.values().end());
  }
  return Tensor::from_op(
      {rows.size(), m}, std::move(out), rows,
      [m](detail::Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i)
          detail::accumulate(*self.parents[i], std::span<const double>(self.grad).subspan(i * m, m));
      },
      "stack_rows");
}

}  // namespace cloc
