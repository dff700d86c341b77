// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "emm/errors.hpp"
#include "emm/tensor.hpp"

namespace emm {

/// Reverse-mode autodiff over a dynamic graph. Each forward pass builds a
/// fresh set of nodes; backward() walks them once in reverse creation order
/// and accumulates gradients additively at fan-out points.
///
/// Nodes that do not require gradients keep neither their inputs nor a
/// backward function, so inference builds no tape and intermediates are
/// freed as soon as the last reference drops.
struct Node {
  Tensor value;
  Tensor grad;  // empty until the first accumulation reaches this node
  bool needs_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool has_grad() const { return grad.size() != 0; }

  void accumulate(const double* g, size_t n) {
    if (!needs_grad) return;
    if (!has_grad()) grad = Tensor::zeros(value.shape());
    double* dst = grad.data();
    for (size_t i = 0; i < n; ++i) dst[i] += g[i];
  }
};

using VarPtr = std::shared_ptr<Node>;

namespace detail {
inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

inline VarPtr make_node(Tensor value, std::vector<VarPtr> inputs,
                        std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->seq = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
  for (const VarPtr& in : inputs) {
    if (in->needs_grad) {
      node->needs_grad = true;
      break;
    }
  }
  if (node->needs_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return node;
}
}  // namespace detail

/// Wraps a tensor as a graph leaf. Trainable parameters pass
/// needs_grad=true; frozen parameters and plain data pass false.
inline VarPtr make_leaf(Tensor value, bool needs_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->needs_grad = needs_grad;
  node->seq = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
  return node;
}

/// Matrix product [m,k] x [k,n] -> [m,n].
inline VarPtr matmul(const VarPtr& a, const VarPtr& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    raise(ErrorCode::dimension, "matmul shape mismatch " + av.shape_string() +
                                    " x " + bv.shape_string());
  }
  size_t m = av.rows(), k = av.cols(), n = bv.cols();
  Tensor out({m, n});
  const double* ap = av.data();
  const double* bp = bv.data();
  double* op = out.data();
  for (size_t i = 0; i < m; ++i) {
    for (size_t p = 0; p < k; ++p) {
      double aip = ap[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bp + p * n;
      double* orow = op + i * n;
      for (size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* go = self.grad.data();
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.needs_grad) {
      Tensor ga({m, k});
      const double* bp = nb.value.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
          double g = go[i * n + j];
          if (g == 0.0) continue;
          for (size_t p = 0; p < k; ++p) ga[i * k + p] += g * bp[p * n + j];
        }
      na.accumulate(ga.data(), ga.size());
    }
    if (nb.needs_grad) {
      Tensor gb({k, n});
      const double* ap = na.value.data();
      for (size_t i = 0; i < m; ++i)
        for (size_t p = 0; p < k; ++p) {
          double aip = ap[i * k + p];
          if (aip == 0.0) continue;
          for (size_t j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
        }
      nb.accumulate(gb.data(), gb.size());
    }
  });
}

inline void check_same_shape(const VarPtr& a, const VarPtr& b, const char* op) {
  if (!a->value.same_shape(b->value)) {
    raise(ErrorCode::dimension, std::string(op) + " shape mismatch " +
                                    a->value.shape_string() + " vs " +
                                    b->value.shape_string());
  }
}

inline VarPtr add(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "add");
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& self) {
    self.inputs[0]->accumulate(self.grad.data(), self.grad.size());
    self.inputs[1]->accumulate(self.grad.data(), self.grad.size());
  });
}

inline VarPtr sub(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& self) {
    self.inputs[0]->accumulate(self.grad.data(), self.grad.size());
    Node& nb = *self.inputs[1];
    if (nb.needs_grad) {
      Tensor g(self.grad.shape());
      for (size_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
      nb.accumulate(g.data(), g.size());
    }
  });
}

inline VarPtr mul(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
  return detail::make_node(std::move(out), {a, b}, [](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.needs_grad) {
      Tensor g(self.grad.shape());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * nb.value[i];
      na.accumulate(g.data(), g.size());
    }
    if (nb.needs_grad) {
      Tensor g(self.grad.shape());
      for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * na.value[i];
      nb.accumulate(g.data(), g.size());
    }
  });
}

inline VarPtr scale(const VarPtr& a, double c) {
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * c;
  return detail::make_node(std::move(out), {a}, [c](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g(self.grad.shape());
    for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * c;
    na.accumulate(g.data(), g.size());
  });
}

/// Adds a rank-1 bias [n] to every row of [m,n].
inline VarPtr add_rowvec(const VarPtr& a, const VarPtr& bias) {
  const Tensor& av = a->value;
  const Tensor& bv = bias->value;
  if (av.rank() != 2 || bv.rank() != 1 || av.cols() != bv.cols()) {
    raise(ErrorCode::dimension, "bias shape mismatch " + av.shape_string() +
                                    " + " + bv.shape_string());
  }
  size_t m = av.rows(), n = av.cols();
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.at(i, j) = av.at(i, j) + bv[j];
  return detail::make_node(std::move(out), {a, bias}, [m, n](Node& self) {
    self.inputs[0]->accumulate(self.grad.data(), self.grad.size());
    Node& nb = *self.inputs[1];
    if (nb.needs_grad) {
      Tensor g({n});
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      nb.accumulate(g.data(), g.size());
    }
  });
}

/// Scales row r of a [m,n] matrix by s[r], s rank-1 of length m.
inline VarPtr rowscale(const VarPtr& s, const VarPtr& a) {
  const Tensor& sv = s->value;
  const Tensor& av = a->value;
  if (sv.rank() != 1 || av.rank() != 2 || sv.cols() != av.rows()) {
    raise(ErrorCode::dimension, "rowscale shape mismatch " + sv.shape_string() +
                                    " * " + av.shape_string());
  }
  size_t m = av.rows(), n = av.cols();
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) out.at(i, j) = sv[i] * av.at(i, j);
  return detail::make_node(std::move(out), {s, a}, [m, n](Node& self) {
    const double* go = self.grad.data();
    Node& ns = *self.inputs[0];
    Node& na = *self.inputs[1];
    if (ns.needs_grad) {
      Tensor g({m});
      for (size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < n; ++j) acc += go[i * n + j] * na.value[i * n + j];
        g[i] = acc;
      }
      ns.accumulate(g.data(), g.size());
    }
    if (na.needs_grad) {
      Tensor g({m, n});
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) g[i * n + j] = ns.value[i] * go[i * n + j];
      na.accumulate(g.data(), g.size());
    }
  });
}

inline VarPtr relu(const VarPtr& a) {
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  return detail::make_node(std::move(out), {a}, [](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g(self.grad.shape());
    for (size_t i = 0; i < g.size(); ++i)
      g[i] = na.value[i] > 0.0 ? self.grad[i] : 0.0;
    na.accumulate(g.data(), g.size());
  });
}

inline VarPtr sigmoid(const VarPtr& a) {
  Tensor out(a->value.shape());
  for (size_t i = 0; i < out.size(); ++i) {
    double z = a->value[i];
    out[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                      : std::exp(z) / (1.0 + std::exp(z));
  }
  return detail::make_node(std::move(out), {a}, [](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g(self.grad.shape());
    for (size_t i = 0; i < g.size(); ++i) {
      double s = self.value[i];
      g[i] = self.grad[i] * s * (1.0 - s);
    }
    na.accumulate(g.data(), g.size());
  });
}

/// Row-wise softmax of a [m,n] matrix with max subtraction for stability.
inline VarPtr softmax_rows(const VarPtr& a) {
  const Tensor& av = a->value;
  if (av.rank() != 2) raise(ErrorCode::dimension, "softmax_rows needs rank 2");
  size_t m = av.rows(), n = av.cols();
  Tensor out({m, n});
  for (size_t i = 0; i < m; ++i) {
    double mx = av.at(i, 0);
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, av.at(i, j));
    double sum = 0.0;
    for (size_t j = 0; j < n; ++j) {
      double e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    for (size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
  }
  return detail::make_node(std::move(out), {a}, [m, n](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g({m, n});
    for (size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (size_t j = 0; j < n; ++j)
        dot += self.grad[i * n + j] * self.value[i * n + j];
      for (size_t j = 0; j < n; ++j)
        g[i * n + j] = self.value[i * n + j] * (self.grad[i * n + j] - dot);
    }
    na.accumulate(g.data(), g.size());
  });
}

/// Extracts column j of [m,n] as a rank-1 vector of length m.
inline VarPtr colselect(const VarPtr& a, size_t j) {
  const Tensor& av = a->value;
  if (av.rank() != 2 || j >= av.cols()) {
    raise(ErrorCode::dimension, "colselect index out of range");
  }
  size_t m = av.rows(), n = av.cols();
  Tensor out({m});
  for (size_t i = 0; i < m; ++i) out[i] = av.at(i, j);
  return detail::make_node(std::move(out), {a}, [m, n, j](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g({m, n});
    for (size_t i = 0; i < m; ++i) g[i * n + j] = self.grad[i];
    na.accumulate(g.data(), g.size());
  });
}

/// Stacks rank-1 vectors of equal length m as the columns of a [m,k] matrix.
inline VarPtr stack_cols(const std::vector<VarPtr>& cols) {
  if (cols.empty()) raise(ErrorCode::dimension, "stack_cols needs input");
  size_t m = cols[0]->value.size();
  size_t k = cols.size();
  for (const VarPtr& c : cols) {
    if (c->value.rank() != 1 || c->value.size() != m) {
      raise(ErrorCode::dimension, "stack_cols column length mismatch");
    }
  }
  Tensor out({m, k});
  for (size_t j = 0; j < k; ++j)
    for (size_t i = 0; i < m; ++i) out.at(i, j) = cols[j]->value[i];
  return detail::make_node(std::move(out), cols, [m, k](Node& self) {
    for (size_t j = 0; j < k; ++j) {
      Node& nc = *self.inputs[j];
      if (!nc.needs_grad) continue;
      Tensor g({m});
      for (size_t i = 0; i < m; ++i) g[i] = self.grad[i * k + j];
      nc.accumulate(g.data(), g.size());
    }
  });
}

/// Concatenates [m,k_i] matrices left to right into [m, sum k_i].
inline VarPtr hstack(const std::vector<VarPtr>& parts) {
  if (parts.empty()) raise(ErrorCode::dimension, "hstack needs input");
  size_t m = parts[0]->value.rows();
  size_t total = 0;
  std::vector<size_t> widths;
  for (const VarPtr& p : parts) {
    if (p->value.rank() != 2 || p->value.rows() != m) {
      raise(ErrorCode::dimension, "hstack row count mismatch");
    }
    widths.push_back(p->value.cols());
    total += p->value.cols();
  }
  Tensor out({m, total});
  size_t off = 0;
  for (const VarPtr& p : parts) {
    size_t n = p->value.cols();
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) out.at(i, off + j) = p->value.at(i, j);
    off += n;
  }
  return detail::make_node(
      std::move(out), parts, [m, total, widths](Node& self) {
        size_t off = 0;
        for (size_t idx = 0; idx < widths.size(); ++idx) {
          size_t n = widths[idx];
          Node& np = *self.inputs[idx];
          if (np.needs_grad) {
            Tensor g({m, n});
            for (size_t i = 0; i < m; ++i)
              for (size_t j = 0; j < n; ++j)
                g[i * n + j] = self.grad[i * total + off + j];
            np.accumulate(g.data(), g.size());
          }
          off += n;
        }
      });
}

/// Per-row inner product of two [m,n] matrices, giving a rank-1 length-m
/// vector. Used for attention scores.
inline VarPtr rowdot(const VarPtr& a, const VarPtr& b) {
  check_same_shape(a, b, "rowdot");
  if (a->value.rank() != 2) raise(ErrorCode::dimension, "rowdot needs rank 2");
  size_t m = a->value.rows(), n = a->value.cols();
  Tensor out({m});
  for (size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (size_t j = 0; j < n; ++j) acc += a->value.at(i, j) * b->value.at(i, j);
    out[i] = acc;
  }
  return detail::make_node(std::move(out), {a, b}, [m, n](Node& self) {
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.needs_grad) {
      Tensor g({m, n});
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
          g[i * n + j] = self.grad[i] * nb.value[i * n + j];
      na.accumulate(g.data(), g.size());
    }
    if (nb.needs_grad) {
      Tensor g({m, n});
      for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j)
          g[i * n + j] = self.grad[i] * na.value[i * n + j];
      nb.accumulate(g.data(), g.size());
    }
  });
}

inline VarPtr sum(const VarPtr& a) {
  double acc = 0.0;
  for (size_t i = 0; i < a->value.size(); ++i) acc += a->value[i];
  return detail::make_node(Tensor({1}, {acc}), {a}, [](Node& self) {
    Node& na = *self.inputs[0];
    if (!na.needs_grad) return;
    Tensor g(na.value.shape());
    for (size_t i = 0; i < g.size(); ++i) g[i] = self.grad[0];
    na.accumulate(g.data(), g.size());
  });
}

inline VarPtr mean(const VarPtr& a) {
  size_t n = a->value.size();
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a->value[i];
  return detail::make_node(Tensor({1}, {acc / static_cast<double>(n)}), {a},
                           [n](Node& self) {
                             Node& na = *self.inputs[0];
                             if (!na.needs_grad) return;
                             double s = self.grad[0] / static_cast<double>(n);
                             Tensor g(na.value.shape());
                             for (size_t i = 0; i < g.size(); ++i) g[i] = s;
                             na.accumulate(g.data(), g.size());
                           });
}

/// Mean binary cross entropy computed from logits in the numerically stable
/// form max(z,0) - z*y + log(1 + exp(-|z|)). Targets are constants.
inline VarPtr bce_with_logits_mean(const VarPtr& logits, const Tensor& targets) {
  size_t n = logits->value.size();
  if (targets.size() != n) {
    raise(ErrorCode::dimension, "targets length does not match logits");
  }
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double z = logits->value[i];
    double y = targets[i];
    acc += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  Tensor t = targets;
  return detail::make_node(
      Tensor({1}, {acc / static_cast<double>(n)}), {logits},
      [n, t = std::move(t)](Node& self) {
        Node& nl = *self.inputs[0];
        if (!nl.needs_grad) return;
        double s = self.grad[0] / static_cast<double>(n);
        Tensor g(nl.value.shape());
        for (size_t i = 0; i < n; ++i) {
          double z = nl.value[i];
          double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                              : std::exp(z) / (1.0 + std::exp(z));
          g[i] = s * (p - t[i]);
        }
        nl.accumulate(g.data(), g.size());
      });
}

/// Gathers rows of an embedding table [V,E] by integer code, one per batch
/// row, producing [B,E]. Gradients scatter back into the selected rows.
inline VarPtr embed_rows(const VarPtr& table, const std::vector<size_t>& codes) {
  const Tensor& tv = table->value;
  if (tv.rank() != 2) raise(ErrorCode::dimension, "embedding table needs rank 2");
  size_t v = tv.rows(), e = tv.cols(), b = codes.size();
  for (size_t c : codes) {
    if (c >= v) raise(ErrorCode::dimension, "embedding code out of range");
  }
  Tensor out({b, e});
  for (size_t i = 0; i < b; ++i)
    for (size_t j = 0; j < e; ++j) out.at(i, j) = tv.at(codes[i], j);
  return detail::make_node(std::move(out), {table},
                           [v, e, b, codes](Node& self) {
                             Node& nt = *self.inputs[0];
                             if (!nt.needs_grad) return;
                             Tensor g({v, e});
                             for (size_t i = 0; i < b; ++i)
                               for (size_t j = 0; j < e; ++j)
                                 g[codes[i] * e + j] += self.grad[i * e + j];
                             nt.accumulate(g.data(), g.size());
                           });
}

/// Runs reverse-mode accumulation from a scalar loss. Gradients land in the
/// .grad of every reachable node with needs_grad set.
inline void backward(const VarPtr& loss) {
  if (loss->value.size() != 1) {
    raise(ErrorCode::usage, "backward requires a scalar loss");
  }
  if (!loss->needs_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.get()};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Node* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (const VarPtr& in : node->inputs) {
      if (in->needs_grad && seen.insert(in.get()).second) {
        stack.push_back(in.get());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  loss->grad = Tensor({1}, {1.0});
  for (Node* node : order) {
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

}  // namespace emm
