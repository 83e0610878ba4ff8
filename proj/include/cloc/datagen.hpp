#pragma once

// Synthetic ordinal data on a latent line, label-bias injection, CSV I/O.
//
// Class c is centred at the cumulative gap position p_c along a random unit
// direction u in R^D and sampled with isotropic Gaussian noise, so the
// projection onto u is a 1-D Gaussian mixture with closed-form overlap.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloc/errors.hpp"
#include "cloc/margins.hpp"
#include "cloc/random.hpp"
#include "cloc/tensor.hpp"

namespace cloc {

struct Sample {
  std::int64_t id = 0;
  std::vector<double> features;
  Rank label = 0;
  Rank clean_label = 0;  // label before bias injection
};

struct Dataset {
  std::size_t num_classes = 0;
  std::size_t dim = 0;
  std::vector<Sample> samples;
  bool has_clean_labels = false;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& s : samples) ++counts.at(s.label);
    return counts;
  }

  std::vector<Rank> labels() const {
    std::vector<Rank> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }

  /// Features of the given rows stacked as a matrix.
  Tensor features(std::span<const std::size_t> rows) const {
    std::vector<double> values;
    values.reserve(rows.size() * dim);
    for (auto r : rows) values.insert(values.end(), samples.at(r).features.begin(), samples.at(r).features.end());
    return Tensor::matrix(rows.size(), dim, std::move(values));
  }

  Tensor all_features() const {
    std::vector<std::size_t> rows(samples.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    return features(rows);
  }
};

struct SyntheticSpec {
  std::size_t num_classes = 5;
  std::size_t dim = 8;
  std::vector<std::size_t> per_class;  // one count per class
  std::vector<double> gaps;            // C - 1 distances between consecutive centres
  double sigma = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw UsageError("SyntheticSpec: num_classes must be >= 2");
    if (dim == 0) throw UsageError("SyntheticSpec: dim must be positive");
    if (per_class.size() != num_classes) throw UsageError("SyntheticSpec: per_class needs one count per class");
    for (auto n : per_class)
      if (n < 2) throw UsageError("SyntheticSpec: every class needs at least 2 samples");
    if (gaps.size() != num_classes - 1) throw UsageError("SyntheticSpec: gaps needs num_classes - 1 entries");
    for (double g : gaps)
      if (!(g > 0.0)) throw UsageError("SyntheticSpec: gaps must be positive");
    if (!(sigma >= 0.0)) throw UsageError("SyntheticSpec: sigma must be >= 0");
  }
};

struct SyntheticGeometry {
  std::vector<double> direction;  // unit vector in R^D
  std::vector<double> positions;  // class centre coordinate along direction
};

inline SyntheticGeometry synthetic_geometry(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, streams::data));
  std::normal_distribution<double> normal(0.0, 1.0);
  SyntheticGeometry g;
  g.direction.resize(spec.dim);
  double norm = 0.0;
  while (norm == 0.0) {
    norm = 0.0;
    for (auto& v : g.direction) {
      v = normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
  }
  for (auto& v : g.direction) v /= norm;
  g.positions.assign(spec.num_classes, 0.0);
  for (std::size_t c = 1; c < spec.num_classes; ++c) g.positions[c] = g.positions[c - 1] + spec.gaps[c - 1];
  return g;
}

inline Dataset generate(const SyntheticSpec& spec) {
  const auto geo = synthetic_geometry(spec);
  Rng rng(derive_seed(derive_seed(spec.seed, streams::data), 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  Dataset ds;
  ds.num_classes = spec.num_classes;
  ds.dim = spec.dim;
  std::int64_t id = 0;
  for (Rank c = 0; c < spec.num_classes; ++c) {
    for (std::size_t i = 0; i < spec.per_class[c]; ++i) {
      Sample s;
      s.id = id++;
      s.label = s.clean_label = c;
      s.features.resize(spec.dim);
      for (std::size_t k = 0; k < spec.dim; ++k)
        s.features[k] = geo.positions[c] * geo.direction[k] + spec.sigma * normal(rng);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

struct BiasSpec {
  Rank boundary = 0;  // lower rank c of the pair (c, c + 1)
  double p_up = 0.0;  // fraction of rank-c samples relabelled c + 1
  double p_down = 0.0;
  std::uint64_t seed = 0;
};

/// Relabels round(p_up * n_c) rank-c samples as c + 1 and round(p_down * n_{c+1})
/// rank-(c+1) samples as c, chosen uniformly without replacement. Original
/// labels are kept in clean_label.
inline Dataset inject_bias(const Dataset& input, const BiasSpec& spec) {
  if (spec.boundary + 1 >= input.num_classes) throw UsageError("inject_bias: boundary out of range");
  for (double p : {spec.p_up, spec.p_down})
    if (!(p >= 0.0 && p <= 1.0)) throw UsageError("inject_bias: fractions must lie in [0, 1]");
  Dataset out = input;
  if (!out.has_clean_labels)
    for (auto& s : out.samples) s.clean_label = s.label;
  out.has_clean_labels = true;

  Rng rng(derive_seed(spec.seed, streams::bias));
  const Rank lo = spec.boundary, hi = spec.boundary + 1;
  std::vector<std::size_t> lower, upper;
  for (std::size_t i = 0; i < input.samples.size(); ++i) {
    if (input.samples[i].label == lo) lower.push_back(i);
    if (input.samples[i].label == hi) upper.push_back(i);
  }
  auto relabel = [&](std::vector<std::size_t>& pool, double p, Rank to) {
    const auto k = static_cast<std::size_t>(std::llround(p * static_cast<double>(pool.size())));
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < k; ++i) out.samples[pool[i]].label = to;
  };
  relabel(lower, spec.p_up, hi);
  relabel(upper, spec.p_down, lo);
  return out;
}

/// Per-class split; round(test_fraction * n_c) samples of each class go to the
/// second set. Both keep the input order.
inline std::pair<Dataset, Dataset> stratified_split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) throw UsageError("stratified_split: fraction outside [0, 1]");
  Rng rng(derive_seed(seed, streams::split));
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_class[ds.samples[i].label].push_back(i);
  std::vector<bool> to_test(ds.samples.size(), false);
  for (auto& rows : by_class) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
    for (std::size_t i = 0; i < k; ++i) to_test[rows[i]] = true;
  }
  Dataset train{ds.num_classes, ds.dim, {}, ds.has_clean_labels};
  Dataset test{ds.num_classes, ds.dim, {}, ds.has_clean_labels};
  for (std::size_t i = 0; i < ds.samples.size(); ++i) (to_test[i] ? test : train).samples.push_back(ds.samples[i]);
  return {std::move(train), std::move(test)};
}

// --- JSON specs ------------------------------------------------------------

inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.dim = j.value("dim", std::size_t{8});
  const auto& pc = j.at("per_class");
  if (pc.is_array()) {
    s.per_class = pc.get<std::vector<std::size_t>>();
  } else {
    s.per_class.assign(s.num_classes, pc.get<std::size_t>());
  }
  s.gaps = j.at("gaps").get<std::vector<double>>();
  s.sigma = j.at("sigma").get<double>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes}, {"dim", s.dim},     {"per_class", s.per_class},
          {"gaps", s.gaps},               {"sigma", s.sigma}, {"seed", s.seed}};
}

/// Boundary numbering in JSON is 1-based, matching rank labels.
inline BiasSpec bias_spec_from_json(const nlohmann::json& j) {
  BiasSpec b;
  const auto boundary = j.at("boundary").get<std::size_t>();
  if (boundary == 0) throw UsageError("bias spec: boundaries are numbered from 1");
  b.boundary = boundary - 1;
  b.p_up = j.at("p_up").get<double>();
  b.p_down = j.at("p_down").get<double>();
  b.seed = j.value("seed", std::uint64_t{0});
  return b;
}

inline nlohmann::json to_json(const BiasSpec& b) {
  return {{"boundary", b.boundary + 1}, {"p_up", b.p_up}, {"p_down", b.p_down}, {"seed", b.seed}};
}

// --- CSV -------------------------------------------------------------------

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Header `id,label,f1..fD[,clean_label]`; labels written 1-based.
inline void save_csv(const Dataset& ds, std::ostream& out) {
  out << "id,label";
  for (std::size_t k = 1; k <= ds.dim; ++k) out << ",f" << k;
  if (ds.has_clean_labels) out << ",clean_label";
  out << '\n';
  for (const auto& s : ds.samples) {
    out << s.id << ',' << (s.label + 1);
    for (double v : s.features) out << ',' << format_real(v);
    if (ds.has_clean_labels) out << ',' << (s.clean_label + 1);
    out << '\n';
  }
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  save_csv(ds, out);
  if (!out) throw DataError("failed writing " + path);
}

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    fields.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

template <class T>
bool parse_field(std::string_view text, T& value) {
  while (!text.empty() && text.front() == ' ') text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\r')) text.remove_suffix(1);
  if (text.empty()) return false;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  return ec == std::errc{} && ptr == end;
}

}  // namespace detail

/// Parses a dataset CSV. With num_classes set, labels must lie in [1, C];
/// otherwise C is the largest label seen.
inline Dataset load_csv(std::istream& in, std::optional<std::size_t> num_classes = std::nullopt,
                        const std::string& source = "<stream>") {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> DataError {
    return DataError(source + ", line " + std::to_string(line_no) + ": " + msg);
  };
  if (!std::getline(in, line)) throw DataError(source + ": empty file");
  ++line_no;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_commas(line);
  if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
    throw fail("header must start with id,label followed by feature columns");
  }
  std::size_t dim = 0;
  bool clean = false;
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (i + 1 == header.size() && header[i] == "clean_label") {
      clean = true;
    } else if (header[i] == "f" + std::to_string(dim + 1)) {
      ++dim;
    } else {
      throw fail("unexpected column '" + std::string(header[i]) + "'");
    }
  }
  if (dim == 0) throw fail("no feature columns");

  Dataset ds;
  ds.dim = dim;
  ds.has_clean_labels = clean;
  const std::size_t width = 2 + dim + (clean ? 1 : 0);
  std::size_t max_label = 0;
  auto read_label = [&](std::string_view text) -> Rank {
    long long v = 0;
    if (!detail::parse_field(text, v)) throw fail("label '" + std::string(text) + "' is not an integer");
    if (v < 1) throw fail("label " + std::to_string(v) + " below 1 (labels are 1-based)");
    if (num_classes && static_cast<std::size_t>(v) > *num_classes) {
      throw fail("label " + std::to_string(v) + " exceeds class count " + std::to_string(*num_classes));
    }
    max_label = std::max(max_label, static_cast<std::size_t>(v));
    return static_cast<Rank>(v - 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_commas(line);
    if (fields.size() != width) {
      throw fail("expected " + std::to_string(width) + " fields, found " + std::to_string(fields.size()));
    }
    Sample s;
    if (!detail::parse_field(fields[0], s.id)) throw fail("id '" + std::string(fields[0]) + "' is not an integer");
    s.label = read_label(fields[1]);
    s.features.resize(dim);
    for (std::size_t k = 0; k < dim; ++k) {
      if (!detail::parse_field(fields[2 + k], s.features[k]) || !std::isfinite(s.features[k])) {
        throw fail("feature f" + std::to_string(k + 1) + " ('" + std::string(fields[2 + k]) + "') is not a finite real");
      }
    }
    s.clean_label = clean ? read_label(fields.back()) : s.label;
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw DataError(source + ": no data rows");
  ds.num_classes = num_classes ? *num_classes : max_label;
  if (ds.num_classes < 2) throw DataError(source + ": fewer than two classes");
  return ds;
}

inline Dataset load_csv(const std::string& path, std::optional<std::size_t> num_classes = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return load_csv(in, num_classes, path);
}

}  // namespace cloc
