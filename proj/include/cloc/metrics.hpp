#pragma once

// Evaluation: accuracy, MAE, confusion, adjacent-boundary error rates,
// margin reports, centroid ordering and embedding export.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloc/datagen.hpp"
#include "cloc/errors.hpp"
#include "cloc/margins.hpp"
#include "cloc/model.hpp"

namespace cloc {

/// Predicted rank for every sample, one batched forward pass.
inline std::vector<Rank> predict_all(const Model& model, const Dataset& ds) {
  if (ds.empty()) return {};
  NoGradGuard guard;
  const Tensor logits = model.classify(model.encode(ds.all_features()));
  const std::size_t c = logits.cols();
  std::vector<Rank> out(ds.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Model::argmax_rank(logits.values().subspan(i * c, c));
  return out;
}

/// All embeddings as an N x d row-major array.
inline std::vector<double> embed_all(const Model& model, const Dataset& ds) {
  if (ds.empty()) return {};
  NoGradGuard guard;
  const Tensor z = model.encode(ds.all_features());
  return {z.values().begin(), z.values().end()};
}

inline double accuracy(const Model& model, const Dataset& ds) {
  if (ds.empty()) throw UsageError("accuracy: empty dataset");
  const auto pred = predict_all(model, ds);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == ds.samples[i].label;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// How a boundary's cross-confusion count is normalized.
enum class BoundaryNormalization {
  pair_mass,    // samples whose true label is either rank of the pair
  sample_count  // all evaluated samples
};

inline BoundaryNormalization parse_boundary_normalization(const std::string& s) {
  if (s == "pair_mass") return BoundaryNormalization::pair_mass;
  if (s == "sample_count") return BoundaryNormalization::sample_count;
  throw UsageError("unknown boundary normalization '" + s + "'");
}

struct EvalReport {
  double accuracy = 0.0;
  double mae = 0.0;  // in rank units
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::optional<double>> boundary_errors;  // absent when the pair has no samples
  std::size_t n = 0;
};

inline EvalReport evaluate_predictions(std::span<const Rank> truth, std::span<const Rank> predicted,
                                       std::size_t num_classes,
                                       BoundaryNormalization norm = BoundaryNormalization::pair_mass) {
  if (truth.empty()) throw UsageError("evaluate: empty dataset");
  if (truth.size() != predicted.size()) throw UsageError("evaluate: truth and predictions differ in length");
  EvalReport r;
  r.n = truth.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t hits = 0;
  double abs_err = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) throw UsageError("evaluate: label out of range");
    ++r.confusion[truth[i]][predicted[i]];
    hits += truth[i] == predicted[i];
    abs_err += std::abs(static_cast<double>(truth[i]) - static_cast<double>(predicted[i]));
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.n);
  r.mae = abs_err / static_cast<double>(r.n);
  for (std::size_t h = 0; h + 1 < num_classes; ++h) {
    const auto cross = r.confusion[h][h + 1] + r.confusion[h + 1][h];
    std::size_t denom = r.n;
    if (norm == BoundaryNormalization::pair_mass) {
      denom = 0;
      for (std::size_t c = 0; c < num_classes; ++c) denom += r.confusion[h][c] + r.confusion[h + 1][c];
    }
    if (denom == 0) {
      r.boundary_errors.emplace_back(std::nullopt);
    } else {
      r.boundary_errors.emplace_back(static_cast<double>(cross) / static_cast<double>(denom));
    }
  }
  return r;
}

inline EvalReport evaluate(const Model& model, const Dataset& ds,
                           BoundaryNormalization norm = BoundaryNormalization::pair_mass) {
  if (ds.empty()) throw UsageError("evaluate: empty dataset");
  if (model.num_classes() != ds.num_classes) throw UsageError("evaluate: model and dataset class counts differ");
  return evaluate_predictions(ds.labels(), predict_all(model, ds), ds.num_classes, norm);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json boundaries = nlohmann::json::array();
  for (const auto& b : r.boundary_errors) boundaries.push_back(b ? nlohmann::json(*b) : nlohmann::json(nullptr));
  return {{"accuracy", r.accuracy},
          {"mae", r.mae},
          {"n", r.n},
          {"confusion", r.confusion},
          {"boundary_errors", boundaries}};
}

// --- margin report ---------------------------------------------------------

struct MarginReport {
  struct Entry {
    std::string name;
    std::string mode;
    double value;
  };
  std::vector<Entry> boundaries;
  std::vector<std::size_t> argmax;  // every boundary attaining the maximum
  bool tie() const { return argmax.size() > 1; }
};

inline MarginReport margin_report(const OrdinalSchema& schema, std::span<const double> values,
                                  std::span<const std::string> modes) {
  if (values.size() != schema.num_boundaries() || modes.size() != values.size()) {
    throw UsageError("margin_report: one value and mode per boundary expected");
  }
  MarginReport r;
  for (std::size_t h = 0; h < values.size(); ++h) r.boundaries.push_back({schema.boundary_name(h), modes[h], values[h]});
  const double best = *std::max_element(values.begin(), values.end());
  for (std::size_t h = 0; h < values.size(); ++h)
    if (values[h] == best) r.argmax.push_back(h);
  return r;
}

inline MarginReport margin_report(const MarginSet& ms) {
  std::vector<std::string> modes;
  for (std::size_t h = 0; h < ms.size(); ++h) modes.push_back(ms.boundary_mode(h));
  const auto values = ms.values();
  return margin_report(ms.schema(), values, modes);
}

inline nlohmann::json to_json(const MarginReport& r) {
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t h = 0; h < r.boundaries.size(); ++h) {
    const auto& e = r.boundaries[h];
    entries.push_back({{"boundary", h + 1}, {"name", e.name}, {"mode", e.mode}, {"value", e.value}});
  }
  nlohmann::json argmax = nlohmann::json::array();
  for (auto h : r.argmax) argmax.push_back(h + 1);
  return {{"boundaries", entries}, {"argmax", argmax}, {"tie", r.tie()}};
}

// --- principal directions --------------------------------------------------

struct SymmetricEigen {
  std::vector<double> values;               // descending
  std::vector<std::vector<double>> vectors;  // vectors[i] pairs with values[i]
};

/// Cyclic Jacobi rotations on a dense symmetric n x n matrix. Each
/// eigenvector is sign-normalized so its largest-magnitude entry is positive.
inline SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n) {
  if (a.size() != n * n) throw ShapeError("symmetric_eigen: matrix size mismatch");
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) (i == j ? scale : off) += a[i * n + j] * a[i * n + j];
    if (off <= 1e-30 * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a[i * n + i] > a[j * n + j]; });
  SymmetricEigen out;
  for (auto idx : order) {
    out.values.push_back(a[idx * n + idx]);
    std::vector<double> vec(n);
    for (std::size_t k = 0; k < n; ++k) vec[k] = v[k * n + idx];
    std::size_t big = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(vec[k]) > std::abs(vec[big])) big = k;
    if (vec[big] < 0)
      for (auto& x : vec) x = -x;
    out.vectors.push_back(std::move(vec));
  }
  return out;
}

/// Mean and covariance (divided by N) of N row vectors of width d.
inline std::pair<std::vector<double>, std::vector<double>> mean_and_covariance(std::span<const double> rows,
                                                                                std::size_t d) {
  const std::size_t n = rows.size() / d;
  std::vector<double> mu(d, 0.0), cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) mu[k] += rows[i * d + k] / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b)
        cov[a * d + b] += (rows[i * d + a] - mu[a]) * (rows[i * d + b] - mu[b]) / static_cast<double>(n);
  return {std::move(mu), std::move(cov)};
}

// --- ordering score --------------------------------------------------------

namespace detail {

inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

inline std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("spearman: need two equal-length samples of size >= 2");
  const auto rx = detail::average_ranks(x), ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

/// Spearman correlation between class order and the class centroids'
/// positions along their first principal direction, sign-normalized to be
/// non-negative. Absent when the centroids coincide.
inline std::optional<double> ordering_score(std::span<const double> embeddings, std::size_t d,
                                            std::span<const Rank> labels, std::size_t num_classes) {
  if (labels.size() * d != embeddings.size()) throw ShapeError("ordering_score: embeddings and labels disagree");
  std::vector<std::vector<double>> sums(num_classes, std::vector<double>(d, 0.0));
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++counts.at(labels[i]);
    for (std::size_t k = 0; k < d; ++k) sums[labels[i]][k] += embeddings[i * d + k];
  }
  std::vector<double> centroids, order;
  for (Rank c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) continue;
    for (std::size_t k = 0; k < d; ++k) centroids.push_back(sums[c][k] / static_cast<double>(counts[c]));
    order.push_back(static_cast<double>(c));
  }
  if (order.size() < 2) throw UsageError("ordering_score: at least two classes must be present");
  auto [mu, cov] = mean_and_covariance(centroids, d);
  const auto eig = symmetric_eigen(cov, d);
  double trace = 0.0;
  for (std::size_t k = 0; k < d; ++k) trace += std::abs(cov[k * d + k]);
  if (!(eig.values.front() > 1e-24) || !(trace > 0.0)) return std::nullopt;
  std::vector<double> projected;
  for (std::size_t c = 0; c < order.size(); ++c) {
    double p = 0.0;
    for (std::size_t k = 0; k < d; ++k) p += (centroids[c * d + k] - mu[k]) * eig.vectors.front()[k];
    projected.push_back(p);
  }
  auto rho = spearman(projected, order);
  if (!rho) return std::nullopt;
  return std::abs(*rho);
}

inline std::optional<double> ordering_score(const Model& model, const Dataset& ds) {
  const auto z = embed_all(model, ds);
  return ordering_score(z, model.embedding_dim(), ds.labels(), ds.num_classes);
}

// --- embedding export ------------------------------------------------------

/// Two leading principal-component coordinates of N rows of width d
/// (second column zero when d == 1).
inline std::vector<std::array<double, 2>> principal_projection(std::span<const double> rows, std::size_t d) {
  const std::size_t n = rows.size() / d;
  auto [mu, cov] = mean_and_covariance(rows, d);
  const auto eig = symmetric_eigen(cov, d);
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t comp = 0; comp < std::min<std::size_t>(2, d); ++comp) {
      double p = 0.0;
      for (std::size_t k = 0; k < d; ++k) p += (rows[i * d + k] - mu[k]) * eig.vectors[comp][k];
      out[i][comp] = p;
    }
  return out;
}

/// CSV `id,label,z1..zd,p1,p2`; labels 1-based, reals with 17 significant digits.
inline void export_embeddings(const Model& model, const Dataset& ds, std::ostream& out) {
  const std::size_t d = model.embedding_dim();
  const auto z = embed_all(model, ds);
  const auto proj = ds.empty() ? std::vector<std::array<double, 2>>{} : principal_projection(z, d);
  out << "id,label";
  for (std::size_t k = 1; k <= d; ++k) out << ",z" << k;
  out << ",p1,p2\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.samples[i].id << ',' << (ds.samples[i].label + 1);
    for (std::size_t k = 0; k < d; ++k) out << ',' << format_real(z[i * d + k]);
    out << ',' << format_real(proj[i][0]) << ',' << format_real(proj[i][1]) << '\n';
  }
}

inline void export_embeddings(const Model& model, const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  export_embeddings(model, ds, out);
  if (!out) throw DataError("failed writing " + path);
}

}  // namespace cloc
