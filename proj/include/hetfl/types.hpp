#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "hetfl/errors.hpp"

namespace hetfl {

enum class TaskKind : std::uint8_t { BinaryClassification, Regression };

// Direction is +1 when higher is better, -1 when lower is better.
enum class MetricKind : std::uint8_t { Accuracy, Mse, PearsonCorrelation };

constexpr int direction(MetricKind kind) noexcept { return kind == MetricKind::Mse ? -1 : 1; }

inline std::string_view to_string(TaskKind t) {
  return t == TaskKind::BinaryClassification ? "binary_classification" : "regression";
}

inline std::string_view to_string(MetricKind m) {
  switch (m) {
    case MetricKind::Accuracy: return "accuracy";
    case MetricKind::Mse: return "mse";
    case MetricKind::PearsonCorrelation: return "pearson";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "binary_classification") return TaskKind::BinaryClassification;
  if (s == "regression") return TaskKind::Regression;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

inline MetricKind parse_metric_kind(std::string_view s) {
  if (s == "accuracy") return MetricKind::Accuracy;
  if (s == "mse") return MetricKind::Mse;
  if (s == "pearson") return MetricKind::PearsonCorrelation;
  throw ConfigError("unknown metric kind '" + std::string(s) + "'");
}

}  // namespace hetfl
