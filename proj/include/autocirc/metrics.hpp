#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "autocirc/model.hpp"
#include "autocirc/numerics.hpp"
#include "autocirc/tape.hpp"

namespace autocirc {

/// Every metric is reported so that smaller is better: quantities the task
/// wants maximised (logit and probability differences) are negated.
enum class MetricKind { kKl, kLogitDiff, kAbsLogitDiff, kProbDiff, kNll, kL2 };

std::string_view to_string(MetricKind k);
MetricKind parse_metric(std::string_view s);  // kl|logit-diff|abs-logit-diff|prob-diff|nll|l2

/// Measured logit rows of one example and the per-row target data the metric
/// kind needs: correct/incorrect token ids, or a raw target vector for l2.
struct ExampleTargets {
  std::vector<std::size_t> positions;
  std::vector<std::vector<Token>> correct;
  std::vector<std::vector<Token>> incorrect;
  std::vector<std::vector<double>> target;
};

/// Throws a spec error if `targets` lacks what `kind` needs.
void check_targets(MetricKind kind, const ExampleTargets& targets, std::size_t seq_len,
                   std::size_t vocab);

/// D(P || Q), P = softmax(ref), Q = softmax(sub), averaged over positions.
double kl_divergence(const num::Tensor& ref_logits, const num::Tensor& sub_logits,
                     std::span<const std::size_t> positions);

/// Sum of the per-position metric over the measured positions of one example.
double metric_sum(MetricKind kind, const num::Tensor& sub_logits, const num::Tensor& ref_logits,
                  const ExampleTargets& targets);

/// Per-position mean for one example.
double eval_metric(MetricKind kind, const num::Tensor& sub_logits, const num::Tensor& ref_logits,
                   const ExampleTargets& targets);

/// Differentiable counterpart of metric_sum; `ref_logits` is treated as a constant.
num::Slot metric_sum_on_tape(num::Tape& tape, MetricKind kind, num::Slot sub_logits,
                             const num::Tensor& ref_logits, const ExampleTargets& targets);

enum class RemovalMode { kDirect, kMatchModel, kSmallChange };

std::string_view to_string(RemovalMode m);
RemovalMode parse_removal_mode(std::string_view s);

struct RemovalCondition {
  RemovalMode mode = RemovalMode::kDirect;
  double tau = 0.0;
};

/// True when the candidate edge may be removed. Comparisons are strict, so a
/// change of exactly tau keeps the edge.
bool removal_condition(const RemovalCondition& cond, double f_current, double f_candidate,
                       double f_full);

}  // namespace autocirc
