#pragma once

// MLP encoder e(x) -> z and two-layer classifier c(z) -> logits.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloc/errors.hpp"
#include "cloc/margins.hpp"
#include "cloc/ops.hpp"
#include "cloc/random.hpp"
#include "cloc/tensor.hpp"

namespace cloc {

struct Linear {
  Tensor weight;  // in x out, row-major
  Tensor bias;    // out

  std::size_t in() const { return weight.rows(); }
  std::size_t out() const { return weight.cols(); }

  Tensor forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and bias.
  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(in * out), b(out);
    for (auto& v : w) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    return {Tensor::matrix(in, out, std::move(w), true), Tensor::vector(std::move(b), true)};
  }
};

/// Affine layers with ReLU between consecutive layers (none after the last).
class Mlp {
 public:
  Mlp() = default;
  explicit Mlp(std::vector<Linear> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 1; i < layers_.size(); ++i) {
      if (layers_[i].in() != layers_[i - 1].out()) throw ShapeError("Mlp: consecutive layer sizes do not chain");
    }
  }

  static Mlp init(std::span<const std::size_t> sizes, Rng& rng) {
    if (sizes.size() < 2) throw UsageError("Mlp: need at least input and output sizes");
    std::vector<Linear> layers;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i) layers.push_back(Linear::init(sizes[i], sizes[i + 1], rng));
    return Mlp(std::move(layers));
  }

  Tensor forward(const Tensor& x) const {
    if (x.dim() != 2 || x.cols() != input_dim()) {
      throw ShapeError("Mlp: input of shape " + shape_string(x.shape()) + " does not match input dim " +
                       std::to_string(input_dim()));
    }
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h);
      if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  std::size_t input_dim() const { return layers_.front().in(); }
  std::size_t output_dim() const { return layers_.back().out(); }
  std::vector<std::size_t> sizes() const {
    std::vector<std::size_t> s{input_dim()};
    for (const auto& l : layers_) s.push_back(l.out());
    return s;
  }
  const std::vector<Linear>& layers() const { return layers_; }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (const auto& l : layers_) {
      ps.push_back(l.weight);
      ps.push_back(l.bias);
    }
    return ps;
  }

  Mlp clone() const {
    std::vector<Linear> copy;
    for (const auto& l : layers_)
      copy.push_back({l.weight.clone(l.weight.requires_grad()), l.bias.clone(l.bias.requires_grad())});
    return Mlp(std::move(copy));
  }

 private:
  std::vector<Linear> layers_;
};

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::size_t embedding_dim = 16;
  std::size_t classifier_hidden = 16;
  std::size_t num_classes = 0;
};

class Model {
 public:
  Model(Mlp encoder, Mlp classifier) : encoder_(std::move(encoder)), classifier_(std::move(classifier)) {
    if (encoder_.output_dim() != classifier_.input_dim()) {
      throw ShapeError("Model: encoder output does not match classifier input");
    }
  }

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.input_dim == 0 || cfg.embedding_dim == 0 || cfg.num_classes < 2) {
      throw UsageError("Model: input_dim, embedding_dim must be positive and num_classes >= 2");
    }
    Rng rng(derive_seed(seed, streams::model_init));
    std::vector<std::size_t> enc{cfg.input_dim};
    enc.insert(enc.end(), cfg.encoder_hidden.begin(), cfg.encoder_hidden.end());
    enc.push_back(cfg.embedding_dim);
    std::vector<std::size_t> cls{cfg.embedding_dim};
    if (cfg.classifier_hidden > 0) cls.push_back(cfg.classifier_hidden);
    cls.push_back(cfg.num_classes);
    auto encoder = Mlp::init(enc, rng);
    auto classifier = Mlp::init(cls, rng);
    return Model(std::move(encoder), std::move(classifier));
  }

  /// N x D features -> N x d embeddings.
  Tensor encode(const Tensor& x) const { return encoder_.forward(x); }
  /// N x d embeddings -> N x C logits.
  Tensor classify(const Tensor& z) const { return classifier_.forward(z); }

  /// Single feature vector -> embedding vector.
  std::vector<double> encode(std::span<const double> x) const {
    if (x.size() != input_dim()) {
      throw UsageError("encode: feature vector of length " + std::to_string(x.size()) + ", model expects " +
                       std::to_string(input_dim()));
    }
    NoGradGuard guard;
    auto z = encode(Tensor::matrix(1, x.size(), {x.begin(), x.end()}));
    return {z.values().begin(), z.values().end()};
  }

  std::vector<double> logits(std::span<const double> x) const {
    if (x.size() != input_dim()) {
      throw UsageError("logits: feature vector of length " + std::to_string(x.size()) + ", model expects " +
                       std::to_string(input_dim()));
    }
    NoGradGuard guard;
    auto v = classify(encode(Tensor::matrix(1, x.size(), {x.begin(), x.end()})));
    return {v.values().begin(), v.values().end()};
  }

  Rank predict(std::span<const double> x) const { return argmax_rank(logits(x)); }

  /// Argmax of logits; ties resolve to the lowest rank.
  static Rank argmax_rank(std::span<const double> logits) {
    if (logits.empty()) throw UsageError("argmax_rank: empty logits");
    Rank best = 0;
    for (Rank r = 1; r < logits.size(); ++r)
      if (logits[r] > logits[best]) best = r;
    return best;
  }

  std::size_t input_dim() const { return encoder_.input_dim(); }
  std::size_t embedding_dim() const { return encoder_.output_dim(); }
  std::size_t num_classes() const { return classifier_.output_dim(); }
  const Mlp& encoder() const { return encoder_; }
  const Mlp& classifier() const { return classifier_; }

  std::vector<Tensor> parameters() const {
    auto ps = encoder_.parameters();
    auto cs = classifier_.parameters();
    ps.insert(ps.end(), cs.begin(), cs.end());
    return ps;
  }

  Model clone() const { return Model(encoder_.clone(), classifier_.clone()); }

 private:
  Mlp encoder_;
  Mlp classifier_;
};

// --- checkpoints -----------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "cloc-checkpoint";
inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json mlp_to_json(const Mlp& mlp) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : mlp.layers()) {
    layers.push_back({{"in", l.in()},
                      {"out", l.out()},
                      {"weight", std::vector<double>(l.weight.values().begin(), l.weight.values().end())},
                      {"bias", std::vector<double>(l.bias.values().begin(), l.bias.values().end())}});
  }
  return {{"sizes", mlp.sizes()}, {"layers", layers}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  std::vector<Linear> layers;
  for (const auto& l : j.at("layers")) {
    const auto in = l.at("in").get<std::size_t>(), out = l.at("out").get<std::size_t>();
    auto w = l.at("weight").get<std::vector<double>>();
    auto b = l.at("bias").get<std::vector<double>>();
    if (w.size() != in * out || b.size() != out) throw DataError("checkpoint: layer arrays do not match sizes");
    layers.push_back({Tensor::matrix(in, out, std::move(w), true), Tensor::vector(std::move(b), true)});
  }
  if (layers.empty()) throw DataError("checkpoint: no layers");
  Mlp mlp(std::move(layers));
  if (mlp.sizes() != j.at("sizes").get<std::vector<std::size_t>>()) throw DataError("checkpoint: sizes disagree");
  return mlp;
}

}  // namespace detail

inline nlohmann::json margins_to_json(const MarginSet& ms) {
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [h, v] : ms.overrides()) overrides[std::to_string(h + 1)] = v;
  nlohmann::json raw = nlohmann::json::array();
  if (ms.raw().defined()) raw = std::vector<double>(ms.raw().values().begin(), ms.raw().values().end());
  return {{"labels", ms.schema().labels()},
          {"mode", to_string(ms.mode())},
          {"activation", to_string(ms.activation())},
          {"rho", ms.rho()},
          {"fixed_value", ms.fixed_value()},
          {"fixed_overrides", overrides},
          {"raw", raw}};
}

inline MarginSet margins_from_json(const nlohmann::json& j) {
  OrdinalSchema schema(j.at("labels").get<std::vector<std::string>>());
  std::map<std::size_t, double> overrides;
  for (const auto& [k, v] : j.at("fixed_overrides").items()) {
    const auto b = std::stoul(k);
    if (b == 0) throw DataError("checkpoint: boundaries are numbered from 1");
    overrides[b - 1] = v.get<double>();
  }
  auto raw_values = j.at("raw").get<std::vector<double>>();
  Tensor raw;
  if (!raw_values.empty()) raw = Tensor::vector(std::move(raw_values), true);
  return MarginSet(std::move(schema), parse_margin_mode(j.at("mode").get<std::string>()),
                   parse_margin_activation(j.at("activation").get<std::string>()), j.at("rho").get<double>(),
                   j.at("fixed_value").get<double>(), std::move(overrides), std::move(raw));
}

struct Checkpoint {
  Model model;
  MarginSet margins;
};

/// Versioned JSON checkpoint. Doubles are written in shortest round-trip
/// form, so save/load reproduces every parameter bit for bit.
inline nlohmann::json checkpoint_to_json(const Model& model, const MarginSet& margins) {
  return {{"format", kCheckpointMagic},
          {"version", kCheckpointVersion},
          {"encoder", detail::mlp_to_json(model.encoder())},
          {"classifier", detail::mlp_to_json(model.classifier())},
          {"margins", margins_to_json(margins)}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("format", "") != kCheckpointMagic) throw DataError("not a cloc checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw DataError("unsupported checkpoint version " + j.at("version").dump());
    }
    Model model(detail::mlp_from_json(j.at("encoder")), detail::mlp_from_json(j.at("classifier")));
    return {std::move(model), margins_from_json(j.at("margins"))};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("corrupt checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const std::string& path, const Model& model, const MarginSet& margins) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << checkpoint_to_json(model, margins).dump(1) << '\n';
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint " + path + ": " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace cloc
