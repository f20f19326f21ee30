#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "autocirc/numerics.hpp"

namespace autocirc::num {

/// Handle to a value recorded on a Tape.
struct Slot {
  std::uint32_t id = 0;
  friend bool operator==(Slot, Slot) = default;
};

struct HardConcrete {
  double beta = 2.0 / 3.0;
  double gamma = -0.1;
  double zeta = 1.1;
};

/// Ordered record of primitive tensor operations. Every operation stores its
/// forward value; when recording is enabled it also stores a backward rule so
/// reverse_grad can propagate adjoints to any earlier slot, leaves and
/// intermediates alike. Entries only ever reference earlier entries.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return entries_.size(); }

  Slot leaf(Tensor value);
  /// Borrows `value` without copying; it must outlive the tape.
  Slot constant(const Tensor& value);
  const Tensor& value(Slot s) const;

  Slot add(Slot a, Slot b);
  Slot sub(Slot a, Slot b);
  Slot mul(Slot a, Slot b);
  Slot add_bias(Slot a, Slot bias);  // [m,n] + [n]
  Slot scale(Slot a, double c);
  Slot scale_by(Slot a, Slot s);  // s holds a single value
  Slot matmul(Slot a, Slot b);
  Slot transpose(Slot a);
  Slot gather_rows(Slot table, std::span<const std::size_t> rows);
  Slot select(Slot a, std::size_t index);  // leading-axis slice
  Slot activation(Slot a, Activation kind);
  Slot layer_norm(Slot x, Slot weight, Slot bias, double eps);
  Slot causal_softmax(Slot scores);
  Slot log_softmax(Slot a);
  Slot pick(Slot a, std::span<const std::size_t> flat_indices);
  Slot sum(Slot a);
  Slot exp(Slot a);
  Slot square(Slot a);
  Slot abs(Slot a);
  Slot sigmoid(Slot a);
  /// Stretched and clamped concrete gate driven by fixed uniform noise `u`.
  Slot hard_concrete(Slot log_alpha, std::span<const double> u, HardConcrete params);

  /// Adjoints of `output` (which must hold a single value) with respect to
  /// each slot in `wrt`, in order.
  std::vector<Tensor> reverse_grad(Slot output, std::span<const Slot> wrt) const;

  /// Re-executes every forward rule from the leaves; used to check that the
  /// tape reproduces its recorded values.
  Tape replay() const;

 private:
  struct Adjoints;
  using Backward = std::function<void(const Tape&, const Tensor& grad, Adjoints& adj)>;
  using Forward = std::function<Tensor(const Tape&)>;

  struct Entry {
    Tensor value;
    Backward backward;
    Forward forward;  // empty for leaves
    const Tensor* borrowed = nullptr;

    const Tensor& get() const { return borrowed ? *borrowed : value; }
  };

  Slot push(Tensor value, Backward backward, Forward forward);
  Slot record(Forward forward, Backward backward);
  void check(Slot s) const;

  bool record_;
  std::vector<Entry> entries_;
};

}  // namespace autocirc::num
