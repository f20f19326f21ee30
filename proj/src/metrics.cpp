#include "autocirc/metrics.hpp"

#include <cmath>

#include "autocirc/error.hpp"

namespace autocirc {

using num::Slot;
using num::Tape;
using num::Tensor;

std::string_view to_string(MetricKind k) {
  switch (k) {
    case MetricKind::kKl: return "kl";
    case MetricKind::kLogitDiff: return "logit-diff";
    case MetricKind::kAbsLogitDiff: return "abs-logit-diff";
    case MetricKind::kProbDiff: return "prob-diff";
    case MetricKind::kNll: return "nll";
    case MetricKind::kL2: return "l2";
  }
  return "?";
}

MetricKind parse_metric(std::string_view s) {
  if (s == "kl") return MetricKind::kKl;
  if (s == "logit-diff" || s == "logit_diff") return MetricKind::kLogitDiff;
  if (s == "abs-logit-diff" || s == "abs_logit_diff") return MetricKind::kAbsLogitDiff;
  if (s == "prob-diff" || s == "prob_diff") return MetricKind::kProbDiff;
  if (s == "nll") return MetricKind::kNll;
  if (s == "l2") return MetricKind::kL2;
  fail(ErrorKind::kUsage, "unknown metric '" + std::string(s) + "'");
}

std::string_view to_string(RemovalMode m) {
  switch (m) {
    case RemovalMode::kDirect: return "direct";
    case RemovalMode::kMatchModel: return "match-model";
    case RemovalMode::kSmallChange: return "small-change";
  }
  return "?";
}

RemovalMode parse_removal_mode(std::string_view s) {
  if (s == "direct") return RemovalMode::kDirect;
  if (s == "match-model") return RemovalMode::kMatchModel;
  if (s == "small-change") return RemovalMode::kSmallChange;
  fail(ErrorKind::kUsage, "unknown removal mode '" + std::string(s) + "'");
}

void check_targets(MetricKind kind, const ExampleTargets& t, std::size_t seq_len, std::size_t vocab) {
  require(!t.positions.empty(), ErrorKind::kSpec, "example has no measured positions");
  const std::size_t n = t.positions.size();
  for (std::size_t p : t.positions) {
    require(p < seq_len, ErrorKind::kSpec, "measured position " + std::to_string(p) + " out of range");
  }
  auto ids_ok = [&](const std::vector<std::vector<Token>>& sets, const char* what, bool exactly_one) {
    require(sets.size() == n, ErrorKind::kSpec, std::string("missing ") + what + " token ids");
    for (const auto& s : sets) {
      require(!s.empty(), ErrorKind::kSpec, std::string("empty ") + what + " token set");
      require(!exactly_one || s.size() == 1, ErrorKind::kSpec,
              std::string("metric needs exactly one ") + what + " token per position");
      for (Token id : s) require(id < vocab, ErrorKind::kSpec, std::string(what) + " token id out of range");
    }
  };
  switch (kind) {
    case MetricKind::kKl: break;
    case MetricKind::kLogitDiff:
    case MetricKind::kAbsLogitDiff:
      ids_ok(t.correct, "correct", true);
      ids_ok(t.incorrect, "incorrect", true);
      break;
    case MetricKind::kProbDiff:
      ids_ok(t.correct, "correct", false);
      ids_ok(t.incorrect, "incorrect", false);
      break;
    case MetricKind::kNll: ids_ok(t.correct, "correct", true); break;
    case MetricKind::kL2:
      require(t.target.size() == n, ErrorKind::kSpec, "missing l2 target vectors");
      for (const auto& v : t.target) {
        require(v.size() == vocab, ErrorKind::kSpec, "l2 target length differs from output width");
      }
      break;
  }
}

namespace {

std::vector<double> row_logprobs(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.extent(1);
  Tensor r(num::Shape{v}, std::vector<double>(logits.data().begin() + row * v,
                                              logits.data().begin() + (row + 1) * v));
  return num::softmax_logprobs(r).values();
}

double kl_row(const Tensor& ref, const Tensor& sub, std::size_t row) {
  const auto lp = row_logprobs(ref, row);
  const auto lq = row_logprobs(sub, row);
  double d = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) d += std::exp(lp[i]) * (lp[i] - lq[i]);
  return d;
}

void check_logits(const Tensor& t, const char* what) {
  require(t.rank() == 2, ErrorKind::kDimension, std::string(what) + " must be [positions, vocab]");
  num::check_finite(t, what);
}

}  // namespace

double kl_divergence(const Tensor& ref, const Tensor& sub, std::span<const std::size_t> positions) {
  check_logits(ref, "reference logits");
  check_logits(sub, "subgraph logits");
  require(ref.shape() == sub.shape(), ErrorKind::kDimension, "logit shapes differ");
  require(!positions.empty(), ErrorKind::kSpec, "no measured positions");
  double total = 0.0;
  for (std::size_t p : positions) {
    require(p < ref.extent(0), ErrorKind::kSpec, "measured position out of range");
    total += kl_row(ref, sub, p);
  }
  return total / static_cast<double>(positions.size());
}

double metric_sum(MetricKind kind, const Tensor& sub, const Tensor& ref, const ExampleTargets& t) {
  check_logits(sub, "subgraph logits");
  check_targets(kind, t, sub.extent(0), sub.extent(1));
  const std::size_t v = sub.extent(1);
  double total = 0.0;
  for (std::size_t i = 0; i < t.positions.size(); ++i) {
    const std::size_t p = t.positions[i];
    switch (kind) {
      case MetricKind::kKl:
        require(ref.shape() == sub.shape(), ErrorKind::kDimension, "logit shapes differ");
        total += kl_row(ref, sub, p);
        break;
      case MetricKind::kLogitDiff:
        total -= sub.at(p, t.correct[i][0]) - sub.at(p, t.incorrect[i][0]);
        break;
      case MetricKind::kAbsLogitDiff:
        total += std::abs(sub.at(p, t.correct[i][0]) - sub.at(p, t.incorrect[i][0]));
        break;
      case MetricKind::kProbDiff: {
        const auto lq = row_logprobs(sub, p);
        double d = 0.0;
        for (Token c : t.correct[i]) d += std::exp(lq[c]);
        for (Token c : t.incorrect[i]) d -= std::exp(lq[c]);
        total -= d;
        break;
      }
      case MetricKind::kNll: total -= row_logprobs(sub, p)[t.correct[i][0]]; break;
      case MetricKind::kL2:
        for (std::size_t j = 0; j < v; ++j) {
          const double d = sub.at(p, j) - t.target[i][j];
          total += d * d;
        }
        break;
    }
  }
  return total;
}

double eval_metric(MetricKind kind, const Tensor& sub, const Tensor& ref, const ExampleTargets& t) {
  return metric_sum(kind, sub, ref, t) / static_cast<double>(t.positions.size());
}

Slot metric_sum_on_tape(Tape& tape, MetricKind kind, Slot sub, const Tensor& ref,
                        const ExampleTargets& t) {
  const Tensor& logits = tape.value(sub);
  check_logits(logits, "subgraph logits");
  check_targets(kind, t, logits.extent(0), logits.extent(1));
  const std::size_t v = logits.extent(1);
  auto flat = [&](std::size_t p, Token id) { return p * v + id; };

  switch (kind) {
    case MetricKind::kKl: {
      require(ref.shape() == logits.shape(), ErrorKind::kDimension, "logit shapes differ");
      // Σ_p Σ_v P (log P - log Q); only the log Q term depends on the tape.
      Tensor weights(logits.shape());
      double constant = 0.0;
      for (std::size_t p : t.positions) {
        const auto lp = row_logprobs(ref, p);
        for (std::size_t j = 0; j < v; ++j) {
          const double pj = std::exp(lp[j]);
          weights.at(p, j) += pj;
          constant += pj * lp[j];
        }
      }
      Slot cross = tape.sum(tape.mul(tape.log_softmax(sub), tape.leaf(std::move(weights))));
      return tape.add(tape.scale(cross, -1.0), tape.leaf(Tensor::scalar(constant)));
    }
    case MetricKind::kLogitDiff:
    case MetricKind::kAbsLogitDiff: {
      std::vector<std::size_t> pc, pi;
      for (std::size_t i = 0; i < t.positions.size(); ++i) {
        pc.push_back(flat(t.positions[i], t.correct[i][0]));
        pi.push_back(flat(t.positions[i], t.incorrect[i][0]));
      }
      Slot diff = tape.sub(tape.pick(sub, pc), tape.pick(sub, pi));
      if (kind == MetricKind::kAbsLogitDiff) return tape.sum(tape.abs(diff));
      return tape.scale(tape.sum(diff), -1.0);
    }
    case MetricKind::kProbDiff: {
      Tensor weights(logits.shape());
      for (std::size_t i = 0; i < t.positions.size(); ++i) {
        for (Token c : t.correct[i]) weights.at(t.positions[i], c) -= 1.0;
        for (Token c : t.incorrect[i]) weights.at(t.positions[i], c) += 1.0;
      }
      Slot probs = tape.exp(tape.log_softmax(sub));
      return tape.sum(tape.mul(probs, tape.leaf(std::move(weights))));
    }
    case MetricKind::kNll: {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < t.positions.size(); ++i) idx.push_back(flat(t.positions[i], t.correct[i][0]));
      return tape.scale(tape.sum(tape.pick(tape.log_softmax(sub), idx)), -1.0);
    }
    case MetricKind::kL2: {
      std::vector<std::size_t> idx;
      std::vector<double> target;
      for (std::size_t i = 0; i < t.positions.size(); ++i) {
        for (std::size_t j = 0; j < v; ++j) {
          idx.push_back(flat(t.positions[i], static_cast<Token>(j)));
          target.push_back(t.target[i][j]);
        }
      }
      Slot d = tape.sub(tape.pick(sub, idx), tape.leaf(Tensor::vector(std::move(target))));
      return tape.sum(tape.square(d));
    }
  }
  fail(ErrorKind::kSpec, "unsupported metric");
}

bool removal_condition(const RemovalCondition& cond, double f_current, double f_candidate,
                       double f_full) {
  switch (cond.mode) {
    case RemovalMode::kDirect: return f_candidate - f_current < cond.tau;
    case RemovalMode::kMatchModel:
      return std::abs(f_candidate - f_full) - std::abs(f_current - f_full) < cond.tau;
    case RemovalMode::kSmallChange: return std::abs(f_candidate - f_current) < cond.tau;
  }
  return false;
}

}  // namespace autocirc
