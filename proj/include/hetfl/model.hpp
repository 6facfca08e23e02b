#pragma once

// Feed-forward models with role-tagged parameters.
//
// Layout per body layer i: dense ("body.i.weight", "body.i.bias"), then an
// optional batch norm ("body.i.bn.{gamma,beta,running_mean,running_var}"),
// then the activation. The head is a single dense layer ("head.weight",
// "head.bias"). Body dense parameters are SharedBody, batch-norm entries are
// BatchNorm and head entries are PersonalHead.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "hetfl/autodiff.hpp"
#include "hetfl/errors.hpp"
#include "hetfl/paramset.hpp"
#include "hetfl/rng.hpp"
#include "hetfl/tensor.hpp"
#include "hetfl/types.hpp"

namespace hetfl {

enum class Activation : std::uint8_t { None, Relu, Tanh, Sigmoid };

inline Activation parse_activation(std::string_view s) {
  if (s == "none") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

struct BodyLayer {
  std::size_t width = 0;
  Activation activation = Activation::Relu;
  bool batch_norm = false;
};

struct ModelSpec {
  std::size_t input_width = 0;
  std::vector<BodyLayer> body;
  TaskKind head = TaskKind::BinaryClassification;
  std::size_t output_width = 1;  // must be 1 for binary classification

  void validate() const {
    if (input_width == 0) throw ConfigError("model input width must be positive");
    for (const auto& l : body) {
      if (l.width == 0) throw ConfigError("body layer width must be positive");
    }
    if (output_width == 0) throw ConfigError("model output width must be positive");
    if (head == TaskKind::BinaryClassification && output_width != 1) {
      throw ConfigError("binary classification head has a single logit");
    }
  }

  [[nodiscard]] std::size_t last_body_width() const { return body.empty() ? input_width : body.back().width; }
};

enum class Mode : std::uint8_t { Train, Eval };

struct Model {
  ModelSpec spec;
  ParamSet params;
};

struct Batch {
  Tensor features;  // {N, d}
  Tensor targets;   // {N, k}
};

using ParamExprs = std::map<std::string, ad::Expr>;

inline std::string body_name(std::size_t i, std::string_view leaf) {
  return "body." + std::to_string(i) + "." + std::string(leaf);
}

inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = derive_rng(seed, {static_cast<std::uint64_t>(StreamPurpose::ModelInit)});
  auto dense = [&](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor w({fan_in, fan_out});
    for (double& v : w.data()) v = uniform(rng, -bound, bound);
    Tensor b({fan_out});
    for (double& v : b.data()) v = uniform(rng, -bound, bound);
    return std::pair{std::move(w), std::move(b)};
  };
  Model m{spec, {}};
  std::size_t width = spec.input_width;
  for (std::size_t i = 0; i < spec.body.size(); ++i) {
    const auto& layer = spec.body[i];
    auto [w, b] = dense(width, layer.width);
    m.params.add(body_name(i, "weight"), std::move(w), ParamRole::SharedBody);
    m.params.add(body_name(i, "bias"), std::move(b), ParamRole::SharedBody);
    if (layer.batch_norm) {
      m.params.add(body_name(i, "bn.gamma"), Tensor({layer.width}, 1.0), ParamRole::BatchNorm);
      m.params.add(body_name(i, "bn.beta"), Tensor({layer.width}, 0.0), ParamRole::BatchNorm);
      m.params.add(body_name(i, "bn.running_mean"), Tensor({layer.width}, 0.0), ParamRole::BatchNorm);
      m.params.add(body_name(i, "bn.running_var"), Tensor({layer.width}, 1.0), ParamRole::BatchNorm);
    }
    width = layer.width;
  }
  auto [w, b] = dense(width, spec.output_width);
  m.params.add("head.weight", std::move(w), ParamRole::PersonalHead);
  m.params.add("head.bias", std::move(b), ParamRole::PersonalHead);
  return m;
}

// One Input node per parameter, named after it.
inline ParamExprs param_inputs(const ParamSet& params) {
  ParamExprs out;
  for (const auto& [name, e] : params) out.emplace(name, ad::input(name, e.value.shape()));
  return out;
}

inline ad::Bindings bindings(const ParamSet& params) {
  ad::Bindings out;
  for (const auto& [name, e] : params) out.emplace(name, e.value);
  return out;
}

struct ForwardGraph {
  ad::Expr output;                // head output: logits or regression values, {N, k}
  std::vector<ad::Expr> bn_inputs;  // pre-normalization activations, one per BN layer
};

inline ForwardGraph forward(const ModelSpec& spec, const ParamExprs& p, const Tensor& features, Mode mode) {
  if (features.rank() != 2 || features.cols() != spec.input_width) {
    throw ShapeError("features " + Tensor::shape_string(features.shape()) + " do not match input width " +
                     std::to_string(spec.input_width));
  }
  auto get = [&](const std::string& name) -> const ad::Expr& {
    auto it = p.find(name);
    if (it == p.end()) throw Error("model parameter '" + name + "' missing");
    return it->second;
  };
  const std::size_t rows = features.rows();
  ForwardGraph g;
  ad::Expr h = ad::constant(features);
  for (std::size_t i = 0; i < spec.body.size(); ++i) {
    const auto& layer = spec.body[i];
    h = ad::matmul(h, get(body_name(i, "weight"))) + ad::broadcast_rows(get(body_name(i, "bias")), rows);
    if (layer.batch_norm) {
      g.bn_inputs.push_back(h);
      if (mode == Mode::Train) {
        h = ad::batchnorm_train(h, get(body_name(i, "bn.gamma")), get(body_name(i, "bn.beta")));
      } else {
        h = ad::batchnorm_eval(h, get(body_name(i, "bn.gamma")), get(body_name(i, "bn.beta")),
                               get(body_name(i, "bn.running_mean")), get(body_name(i, "bn.running_var")));
      }
    }
    switch (layer.activation) {
      case Activation::None: break;
      case Activation::Relu: h = ad::relu(h); break;
      case Activation::Tanh: h = ad::tanh(h); break;
      case Activation::Sigmoid: h = ad::sigmoid(h); break;
    }
  }
  g.output = ad::matmul(h, get("head.weight")) + ad::broadcast_rows(get("head.bias"), rows);
  return g;
}

inline void check_targets(const ModelSpec& spec, const Batch& batch) {
  if (batch.targets.rank() != 2 || batch.targets.rows() != batch.features.rows() ||
      batch.targets.cols() != spec.output_width) {
    throw ShapeError("targets " + Tensor::shape_string(batch.targets.shape()) + " do not match " +
                     std::to_string(batch.features.rows()) + " rows of width " + std::to_string(spec.output_width));
  }
  if (spec.head == TaskKind::BinaryClassification) {
    for (std::size_t i = 0; i < batch.targets.numel(); ++i) {
      const double y = batch.targets[i];
      if (y != 0.0 && y != 1.0) throw DomainError("binary label must be 0 or 1", i, 0);
    }
  }
}

// Mean sigmoid cross-entropy for binary heads, mean squared error over every
// output dimension for regression heads.
inline ad::Expr task_loss(const ModelSpec& spec, const ad::Expr& output, const Batch& batch) {
  check_targets(spec, batch);
  const auto targets = ad::constant(batch.targets);
  return spec.head == TaskKind::BinaryClassification ? ad::sigmoid_bce(output, targets) : ad::mse(output, targets);
}

inline ad::Expr loss(const ModelSpec& spec, const ParamExprs& p, const Batch& batch, Mode mode) {
  check_targets(spec, batch);
  return task_loss(spec, forward(spec, p, batch.features, mode).output, batch);
}

inline double loss_value(const Model& m, const Batch& batch, Mode mode) {
  return ad::evaluate(loss(m.spec, param_inputs(m.params), batch, mode), bindings(m.params)).item();
}

// Eval-mode outputs: probabilities for binary heads, raw values for regression.
inline Tensor predict(const Model& m, const Tensor& features) {
  auto out = forward(m.spec, param_inputs(m.params), features, Mode::Eval).output;
  if (m.spec.head == TaskKind::BinaryClassification) out = ad::sigmoid(out);
  return ad::evaluate(out, bindings(m.params));
}

inline constexpr double kBatchNormMomentum = 0.1;

// Moves each BN layer's running statistics toward the statistics of this
// batch under the current parameters: r <- (1 - m) r + m * batch. The
// running variance uses the unbiased estimate.
// `bn_values` are the pre-normalization activations of each BN layer, in
// layer order, as produced by ForwardGraph::bn_inputs.
inline void apply_running_stats(Model& m, const std::vector<Tensor>& bn_values, double momentum = kBatchNormMomentum) {
  std::size_t k = 0;
  for (std::size_t i = 0; i < m.spec.body.size(); ++i) {
    if (!m.spec.body[i].batch_norm) continue;
    const Tensor& h = bn_values.at(k++);
    const std::size_t rows = h.rows(), cols = h.cols();
    Tensor& rm = m.params.value(body_name(i, "bn.running_mean"));
    Tensor& rv = m.params.value(body_name(i, "bn.running_var"));
    for (std::size_t j = 0; j < cols; ++j) {
      double mean = 0;
      for (std::size_t r = 0; r < rows; ++r) mean += h.at(r, j);
      mean /= static_cast<double>(rows);
      double ss = 0;
      for (std::size_t r = 0; r < rows; ++r) ss += (h.at(r, j) - mean) * (h.at(r, j) - mean);
      const double var = rows > 1 ? ss / static_cast<double>(rows - 1) : ss;
      rm[j] = (1.0 - momentum) * rm[j] + momentum * mean;
      rv[j] = (1.0 - momentum) * rv[j] + momentum * var;
    }
  }
}

inline void update_running_stats(Model& m, const Tensor& features, double momentum = kBatchNormMomentum) {
  const auto g = forward(m.spec, param_inputs(m.params), features, Mode::Train);
  if (g.bn_inputs.empty()) return;
  apply_running_stats(m, ad::Program(g.bn_inputs).run(bindings(m.params)), momentum);
}

}  // namespace hetfl
