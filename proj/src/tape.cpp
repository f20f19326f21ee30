#include "autocirc/tape.hpp"

#include <algorithm>
#include <cmath>

#include "autocirc/error.hpp"

namespace autocirc::num {

struct Tape::Adjoints {
  const Tape& tape;
  std::vector<Tensor> grads;
  std::vector<bool> present;

  explicit Adjoints(const Tape& t) : tape(t), grads(t.size()), present(t.size(), false) {}

  Tensor& at(std::uint32_t id) {
    if (!present[id]) {
      grads[id] = Tensor(tape.entries_[id].get().shape());
      present[id] = true;
    }
    return grads[id];
  }

  void accumulate(std::uint32_t id, const Tensor& g) {
    Tensor& dst = at(id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
};

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorKind::kDimension,
          std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
              shape_string(b.shape()));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void Tape::check(Slot s) const {
  if (s.id >= entries_.size()) {
    fail(ErrorKind::kUnknownSlot, "slot " + std::to_string(s.id) + " is not on the tape");
  }
}

Slot Tape::push(Tensor value, Backward backward, Forward forward) {
  Entry e{std::move(value), {}, {}};
  if (record_) {
    e.backward = std::move(backward);
    e.forward = std::move(forward);
  }
  entries_.push_back(std::move(e));
  return Slot{static_cast<std::uint32_t>(entries_.size() - 1)};
}

Slot Tape::record(Forward forward, Backward backward) {
  Tensor value = forward(*this);
  return push(std::move(value), std::move(backward), std::move(forward));
}

Slot Tape::leaf(Tensor value) { return push(std::move(value), {}, {}); }

Slot Tape::constant(const Tensor& value) {
  Entry e;
  e.value = Tensor(Shape{0}, {});
  e.borrowed = &value;
  entries_.push_back(std::move(e));
  return Slot{static_cast<std::uint32_t>(entries_.size() - 1)};
}

const Tensor& Tape::value(Slot s) const {
  check(s);
  return entries_[s.id].get();
}

Slot Tape::add(Slot a, Slot b) {
  check(a);
  check(b);
  same_shape(value(a), value(b), "add");
  return record(
      [a, b](const Tape& t) {
        Tensor out = t.value(a);
        const Tensor& y = t.value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
        return out;
      },
      [a, b](const Tape&, const Tensor& g, Adjoints& adj) {
        adj.accumulate(a.id, g);
        adj.accumulate(b.id, g);
      });
}

Slot Tape::sub(Slot a, Slot b) {
  check(a);
  check(b);
  same_shape(value(a), value(b), "sub");
  return record(
      [a, b](const Tape& t) {
        Tensor out = t.value(a);
        const Tensor& y = t.value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
        return out;
      },
      [a, b](const Tape&, const Tensor& g, Adjoints& adj) {
        adj.accumulate(a.id, g);
        Tensor& db = adj.at(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      });
}

Slot Tape::mul(Slot a, Slot b) {
  check(a);
  check(b);
  same_shape(value(a), value(b), "mul");
  return record(
      [a, b](const Tape& t) {
        Tensor out = t.value(a);
        const Tensor& y = t.value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
        return out;
      },
      [a, b](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& x = t.value(a);
        const Tensor& y = t.value(b);
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
        Tensor& db = adj.at(b.id);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * x[i];
      });
}

Slot Tape::add_bias(Slot a, Slot bias) {
  check(a);
  check(bias);
  const Tensor& x = value(a);
  const Tensor& b = value(bias);
  require(x.rank() == 2 && b.rank() == 1 && b.extent(0) == x.extent(1), ErrorKind::kDimension,
          "add_bias: " + shape_string(x.shape()) + " + " + shape_string(b.shape()));
  return record(
      [a, bias](const Tape& t) {
        Tensor out = t.value(a);
        const Tensor& b = t.value(bias);
        const std::size_t n = b.size();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % n];
        return out;
      },
      [a, bias](const Tape&, const Tensor& g, Adjoints& adj) {
        adj.accumulate(a.id, g);
        Tensor& db = adj.at(bias.id);
        const std::size_t n = db.size();
        for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += g[i];
      });
}

Slot Tape::scale(Slot a, double c) {
  check(a);
  return record(
      [a, c](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
        return out;
      },
      [a, c](const Tape&, const Tensor& g, Adjoints& adj) {
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * c;
      });
}

Slot Tape::scale_by(Slot a, Slot s) {
  check(a);
  check(s);
  require(value(s).size() == 1, ErrorKind::kDimension, "scale_by needs a single-value scale");
  return record(
      [a, s](const Tape& t) {
        Tensor out = t.value(a);
        const double c = t.value(s)[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
        return out;
      },
      [a, s](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& x = t.value(a);
        const double c = t.value(s)[0];
        Tensor& da = adj.at(a.id);
        double ds = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          da[i] += g[i] * c;
          ds += g[i] * x[i];
        }
        adj.at(s.id)[0] += ds;
      });
}

Slot Tape::matmul(Slot a, Slot b) {
  check(a);
  check(b);
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  require(x.rank() == 2 && y.rank() == 2 && x.extent(1) == y.extent(0), ErrorKind::kDimension,
          "matmul: " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
  return record([a, b](const Tape& t) { return contract(t.value(a), t.value(b)); },
                [a, b](const Tape& t, const Tensor& g, Adjoints& adj) {
                  const Tensor& x = t.value(a);  // [m,k]
                  const Tensor& y = t.value(b);  // [k,n]
                  const std::size_t m = x.extent(0), k = x.extent(1), n = y.extent(1);
                  Tensor& da = adj.at(a.id);
                  for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                      double acc = 0.0;
                      for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
                      da[i * k + p] += acc;
                    }
                  }
                  Tensor& db = adj.at(b.id);
                  for (std::size_t p = 0; p < k; ++p) {
                    for (std::size_t j = 0; j < n; ++j) {
                      double acc = 0.0;
                      for (std::size_t i = 0; i < m; ++i) acc += x[i * k + p] * g[i * n + j];
                      db[p * n + j] += acc;
                    }
                  }
                });
}

Slot Tape::transpose(Slot a) {
  check(a);
  require(value(a).rank() == 2, ErrorKind::kDimension, "transpose needs rank 2");
  return record(
      [a](const Tape& t) {
        const Tensor& x = t.value(a);
        const std::size_t m = x.extent(0), n = x.extent(1);
        Tensor out({n, m});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
        return out;
      },
      [a](const Tape& t, const Tensor& g, Adjoints& adj) {
        const std::size_t m = t.value(a).extent(0), n = t.value(a).extent(1);
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[j * m + i];
      });
}

Slot Tape::gather_rows(Slot table, std::span<const std::size_t> rows) {
  check(table);
  const Tensor& tab = value(table);
  require(tab.rank() == 2, ErrorKind::kDimension, "gather_rows needs a rank-2 table");
  for (std::size_t r : rows) {
    require(r < tab.extent(0), ErrorKind::kDimension,
            "gather_rows index " + std::to_string(r) + " outside table of " +
                std::to_string(tab.extent(0)) + " rows");
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return record(
      [table, idx](const Tape& t) {
        const Tensor& tab = t.value(table);
        const std::size_t c = tab.extent(1);
        Tensor out({idx.size(), c});
        for (std::size_t i = 0; i < idx.size(); ++i)
          std::copy_n(tab.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c,
                      out.data().begin() + static_cast<std::ptrdiff_t>(i * c));
        return out;
      },
      [table, idx](const Tape& t, const Tensor& g, Adjoints& adj) {
        const std::size_t c = t.value(table).extent(1);
        Tensor& dt = adj.at(table.id);
        for (std::size_t i = 0; i < idx.size(); ++i)
          for (std::size_t j = 0; j < c; ++j) dt[idx[i] * c + j] += g[i * c + j];
      });
}

Slot Tape::select(Slot a, std::size_t index) {
  check(a);
  require(value(a).rank() >= 1 && index < value(a).extent(0), ErrorKind::kDimension,
          "select index out of range");
  return record([a, index](const Tape& t) { return t.value(a).slice(index); },
                [a, index](const Tape&, const Tensor& g, Adjoints& adj) {
                  Tensor& da = adj.at(a.id);
                  const std::size_t off = index * g.size();
                  for (std::size_t i = 0; i < g.size(); ++i) da[off + i] += g[i];
                });
}

Slot Tape::activation(Slot a, Activation kind) {
  check(a);
  if (kind == Activation::kIdentity) return a;
  return record(
      [a, kind](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = activate(kind, out[i]);
        return out;
      },
      [a, kind](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& x = t.value(a);
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * activate_grad(kind, x[i]);
      });
}

Slot Tape::layer_norm(Slot x, Slot weight, Slot bias, double eps) {
  check(x);
  check(weight);
  check(bias);
  const Tensor& xv = value(x);
  require(xv.rank() == 2 && value(weight).size() == xv.extent(1) &&
              value(bias).size() == xv.extent(1),
          ErrorKind::kDimension, "layer_norm shape mismatch");
  return record(
      [x, weight, bias, eps](const Tape& t) {
        const Tensor& in = t.value(x);
        const Tensor& w = t.value(weight);
        const Tensor& b = t.value(bias);
        const std::size_t m = in.extent(0), n = in.extent(1);
        Tensor out({m, n});
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = in.data().data() + i * n;
          double mu = 0.0;
          for (std::size_t j = 0; j < n; ++j) mu += row[j];
          mu /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= static_cast<double>(n);
          const double rstd = 1.0 / std::sqrt(var + eps);
          for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mu) * rstd * w[j] + b[j];
        }
        return out;
      },
      [x, weight, bias, eps](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& in = t.value(x);
        const Tensor& w = t.value(weight);
        const std::size_t m = in.extent(0), n = in.extent(1);
        Tensor& dx = adj.at(x.id);
        Tensor& dw = adj.at(weight.id);
        Tensor& db = adj.at(bias.id);
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = in.data().data() + i * n;
          double mu = 0.0;
          for (std::size_t j = 0; j < n; ++j) mu += row[j];
          mu /= static_cast<double>(n);
          double var = 0.0;
          for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= static_cast<double>(n);
          const double rstd = 1.0 / std::sqrt(var + eps);
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (row[j] - mu) * rstd;
            const double gj = g[i * n + j];
            dw[j] += gj * xhat[j];
            db[j] += gj;
            dxhat[j] = gj * w[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xhat[j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j)
            dx[i * n + j] += rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
      });
}

Slot Tape::causal_softmax(Slot scores) {
  check(scores);
  const Tensor& s = value(scores);
  require(s.rank() == 2 && s.extent(0) == s.extent(1), ErrorKind::kDimension,
          "causal_softmax needs a square score matrix");
  return record(
      [scores](const Tape& t) {
        const Tensor& in = t.value(scores);
        const std::size_t n = in.extent(0);
        Tensor out({n, n});
        for (std::size_t i = 0; i < n; ++i) {
          double mx = in[i * n];
          for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, in[i * n + j]);
          double z = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            out[i * n + j] = std::exp(in[i * n + j] - mx);
            z += out[i * n + j];
          }
          for (std::size_t j = 0; j <= i; ++j) out[i * n + j] /= z;
        }
        return out;
      },
      [scores, this_id = static_cast<std::uint32_t>(entries_.size())](
          const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& y = t.entries_[this_id].get();
        const std::size_t n = y.extent(0);
        Tensor& ds = adj.at(scores.id);
        for (std::size_t i = 0; i < n; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dot += g[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j <= i; ++j) ds[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
        }
      });
}

Slot Tape::log_softmax(Slot a) {
  check(a);
  return record([a](const Tape& t) { return softmax_logprobs(t.value(a)); },
                [a, this_id = static_cast<std::uint32_t>(entries_.size())](
                    const Tape& t, const Tensor& g, Adjoints& adj) {
                  const Tensor& y = t.entries_[this_id].get();
                  const std::size_t v = y.shape().back();
                  Tensor& da = adj.at(a.id);
                  for (std::size_t r = 0; r < y.size() / v; ++r) {
                    double gs = 0.0;
                    for (std::size_t j = 0; j < v; ++j) gs += g[r * v + j];
                    for (std::size_t j = 0; j < v; ++j)
                      da[r * v + j] += g[r * v + j] - std::exp(y[r * v + j]) * gs;
                  }
                });
}

Slot Tape::pick(Slot a, std::span<const std::size_t> flat_indices) {
  check(a);
  for (std::size_t i : flat_indices) {
    require(i < value(a).size(), ErrorKind::kDimension, "pick index out of range");
  }
  std::vector<std::size_t> idx(flat_indices.begin(), flat_indices.end());
  return record(
      [a, idx](const Tape& t) {
        const Tensor& x = t.value(a);
        Tensor out({idx.size()});
        for (std::size_t k = 0; k < idx.size(); ++k) out[k] = x[idx[k]];
        return out;
      },
      [a, idx](const Tape&, const Tensor& g, Adjoints& adj) {
        Tensor& da = adj.at(a.id);
        for (std::size_t k = 0; k < idx.size(); ++k) da[idx[k]] += g[k];
      });
}

Slot Tape::sum(Slot a) {
  check(a);
  return record(
      [a](const Tape& t) {
        double acc = 0.0;
        for (double v : t.value(a).data()) acc += v;
        return Tensor::scalar(acc);
      },
      [a](const Tape&, const Tensor& g, Adjoints& adj) {
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[0];
      });
}

Slot Tape::exp(Slot a) {
  check(a);
  return record(
      [a](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
        return out;
      },
      [a, this_id = static_cast<std::uint32_t>(entries_.size())](const Tape& t, const Tensor& g,
                                                                 Adjoints& adj) {
        const Tensor& y = t.entries_[this_id].get();
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i];
      });
}

Slot Tape::square(Slot a) {
  check(a);
  return record(
      [a](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= out[i];
        return out;
      },
      [a](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& x = t.value(a);
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += 2.0 * x[i] * g[i];
      });
}

Slot Tape::abs(Slot a) {
  check(a);
  return record(
      [a](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(out[i]);
        return out;
      },
      [a](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& x = t.value(a);
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i)
          da[i] += (x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0)) * g[i];
      });
}

Slot Tape::sigmoid(Slot a) {
  check(a);
  return record(
      [a](const Tape& t) {
        Tensor out = t.value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_value(out[i]);
        return out;
      },
      [a, this_id = static_cast<std::uint32_t>(entries_.size())](const Tape& t, const Tensor& g,
                                                                 Adjoints& adj) {
        const Tensor& y = t.entries_[this_id].get();
        Tensor& da = adj.at(a.id);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * y[i] * (1.0 - y[i]);
      });
}

Slot Tape::hard_concrete(Slot log_alpha, std::span<const double> u, HardConcrete p) {
  check(log_alpha);
  require(value(log_alpha).size() == u.size(), ErrorKind::kDimension,
          "hard_concrete noise length differs from gate count");
  std::vector<double> noise(u.begin(), u.end());
  return record(
      [log_alpha, noise, p](const Tape& t) {
        const Tensor& a = t.value(log_alpha);
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double s =
              sigmoid_value((std::log(noise[i]) - std::log1p(-noise[i]) + a[i]) / p.beta);
          out[i] = std::clamp(s * (p.zeta - p.gamma) + p.gamma, 0.0, 1.0);
        }
        return out;
      },
      [log_alpha, noise, p](const Tape& t, const Tensor& g, Adjoints& adj) {
        const Tensor& a = t.value(log_alpha);
        Tensor& da = adj.at(log_alpha.id);
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double s =
              sigmoid_value((std::log(noise[i]) - std::log1p(-noise[i]) + a[i]) / p.beta);
          const double stretched = s * (p.zeta - p.gamma) + p.gamma;
          if (stretched <= 0.0 || stretched >= 1.0) continue;
          da[i] += g[i] * (p.zeta - p.gamma) * s * (1.0 - s) / p.beta;
        }
      });
}

std::vector<Tensor> Tape::reverse_grad(Slot output, std::span<const Slot> wrt) const {
  require(record_, ErrorKind::kUsage, "reverse_grad on a tape that was not recording");
  check(output);
  for (Slot s : wrt) check(s);
  require(value(output).size() == 1, ErrorKind::kDimension,
          "reverse_grad output must hold a single value, got shape " +
              shape_string(value(output).shape()));
  Adjoints adj(*this);
  adj.at(output.id)[0] = 1.0;
  for (std::uint32_t id = output.id + 1; id-- > 0;) {
    if (!adj.present[id]) continue;
    const Entry& e = entries_[id];
    if (e.backward) e.backward(*this, adj.grads[id], adj);
  }
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (Slot s : wrt) {
    out.push_back(adj.present[s.id] ? adj.grads[s.id] : Tensor(entries_[s.id].get().shape()));
  }
  return out;
}

Tape Tape::replay() const {
  require(record_, ErrorKind::kUsage, "replay needs a recording tape");
  Tape out(true);
  out.entries_.reserve(entries_.size());
  for (const Entry& e : entries_) {
    if (!e.forward) {
      out.entries_.push_back(e);
      continue;
    }
    Tensor v = e.forward(out);
    out.entries_.push_back(Entry{std::move(v), e.backward, e.forward, nullptr});
  }
  return out;
}

}  // namespace autocirc::num
