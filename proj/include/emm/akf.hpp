// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "emm/deconstruct.hpp"
#include "emm/errors.hpp"
#include "emm/graph.hpp"
#include "emm/model.hpp"
#include "emm/rng.hpp"

namespace emm {

/// Trainable affine map. Weight layout matches dense layers: [in, out].
struct Linear {
  VarPtr w;
  VarPtr b;
  uint32_t in = 0;
  uint32_t out = 0;

  bool valid() const { return static_cast<bool>(w); }

  VarPtr operator()(const VarPtr& x) const { return add_rowvec(matmul(x, w), b); }
};

inline Linear make_linear(const std::string& id, uint32_t in, uint32_t out,
                          bool relu_follows, uint64_t seed) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w = make_leaf(detail::init_dense_weights(in, out, relu_follows, seed, id + "/w"),
                  true);
  l.b = make_leaf(Tensor::zeros({out}), true);
  return l;
}

/// Zero-weight layer for neutral starting points. Gate maps begin as uniform
/// mixtures and logit heads begin at the prior, which matters when the layer
/// sits on top of reused components whose activation scale is arbitrary: a
/// randomly scaled start would saturate the softmax or the output sigmoid
/// and waste the first epochs recovering from it.
inline Linear make_zero_linear(const std::string& id, uint32_t in,
                               uint32_t out) {
  (void)id;
  Linear l;
  l.in = in;
  l.out = out;
  l.w = make_leaf(Tensor::zeros({in, out}), true);
  l.b = make_leaf(Tensor::zeros({out}), true);
  return l;
}

/// Identity layer for dimension-preserving transforms that should pass the
/// incoming representation through unchanged until training says otherwise.
/// A ReLU after it is a no-op on activations that are already nonnegative,
/// so a freshly added merge path starts at the representation it wraps
/// instead of a random projection of it.
inline Linear make_identity_linear(const std::string& id, uint32_t dim) {
  (void)id;
  Linear l;
  l.in = dim;
  l.out = dim;
  Tensor w = Tensor::zeros({dim, dim});
  for (uint32_t i = 0; i < dim; ++i) w.at(i, i) = 1.0;
  l.w = make_leaf(std::move(w), true);
  l.b = make_leaf(Tensor::zeros({dim}), true);
  return l;
}

/// Softmax mixture weights over one task's experts.
struct TaskGate {
  size_t task = 0;
  Linear map;  // gate input dim -> expert count
};

/// Softmax preference over all tasks; the self entry is excluded when a
/// partner is chosen.
struct FusionGate {
  size_t task = 0;
  Linear map;  // gate input dim -> task count
};

/// How the two merge candidates are scored: each against itself as written,
/// or the partner keyed by the task's own query.
enum class MtmScore { self, cross };

/// Query/key/value transforms for the pairwise attention merge; each is one
/// dense layer followed by ReLU, dimension preserving.
struct MtmHead {
  size_t task = 0;
  uint32_t d = 0;
  Linear q;
  Linear k;
  Linear v;

  VarPtr query(const VarPtr& x) const { return relu(q(x)); }
  VarPtr key(const VarPtr& x) const { return relu(k(x)); }
  VarPtr value(const VarPtr& x) const { return relu(v(x)); }
};

/// One fusion level: per-task frozen expert segments plus this level's
/// trainable gates and attention heads.
struct AkfLevel {
  size_t index = 1;  // 1-based
  uint32_t in_dim = 0;
  uint32_t out_dim = 0;
  bool has_fusion = false;  // partner merge active (multi-task, not ablated)
  MtmScore score_mode = MtmScore::self;

  struct TaskSlot {
    std::vector<ModelComponent> experts;
    std::vector<Linear> adapters;  // aligned with experts; invalid = none
    TaskGate task_gate;
    FusionGate fusion_gate;  // valid only when has_fusion
    MtmHead mtm;             // valid only when has_fusion
  };
  std::vector<TaskSlot> tasks;
};

/// Builds a level over the given component groups. gate_in is the dimension
/// of whatever this level's gates consume (the raw input at level 1, the
/// previous level's output after that).
inline AkfLevel make_akf_level(
    size_t index, const std::vector<std::vector<const ModelComponent*>>& experts,
    uint32_t in_dim, uint32_t out_dim, uint32_t gate_in, bool with_fusion,
    MtmScore score_mode, uint64_t seed) {
  AkfLevel level;
  level.index = index;
  level.in_dim = in_dim;
  level.out_dim = out_dim;
  level.score_mode = score_mode;
  size_t n_tasks = experts.size();
  level.has_fusion = with_fusion && n_tasks >= 2;
  std::string prefix = "akf/level" + std::to_string(index);
  for (size_t t = 0; t < n_tasks; ++t) {
    AkfLevel::TaskSlot slot;
    std::string tp = prefix + "/task" + std::to_string(t);
    for (const ModelComponent* c : experts[t]) {
      slot.experts.push_back(*c);
      Linear adapter;
      if (c->needs_adapter) {
        adapter = make_linear(tp + "/adapter" + std::to_string(slot.adapters.size()),
                              c->out_dim, c->adapter_out, false, seed);
      }
      slot.adapters.push_back(std::move(adapter));
    }
    slot.task_gate.task = t;
    slot.task_gate.map = make_zero_linear(
        tp + "/gate", gate_in, static_cast<uint32_t>(slot.experts.size()));
    if (level.has_fusion) {
      slot.fusion_gate.task = t;
      slot.fusion_gate.map = make_zero_linear(
          tp + "/fusion", gate_in, static_cast<uint32_t>(n_tasks));
      slot.mtm.task = t;
      slot.mtm.d = out_dim;
      slot.mtm.q = make_identity_linear(tp + "/mtm/q", out_dim);
      slot.mtm.k = make_identity_linear(tp + "/mtm/k", out_dim);
      slot.mtm.v = make_identity_linear(tp + "/mtm/v", out_dim);
    }
    level.tasks.push_back(std::move(slot));
  }
  return level;
}

/// Runs every expert of every task on that task's input. Adapter maps are
/// applied where recorded so all outputs share the level dimension.
inline std::vector<std::vector<VarPtr>> run_experts(
    const AkfLevel& level, const std::vector<VarPtr>& inputs) {
  if (inputs.size() != level.tasks.size()) {
    raise(ErrorCode::dimension, "level " + std::to_string(level.index) +
                                    " expects one input per task");
  }
  std::vector<std::vector<VarPtr>> outputs;
  for (size_t t = 0; t < level.tasks.size(); ++t) {
    const AkfLevel::TaskSlot& slot = level.tasks[t];
    if (inputs[t]->value.cols() != level.in_dim) {
      raise(ErrorCode::dimension,
            "level " + std::to_string(level.index) + " task " +
                std::to_string(t) + " input dim " +
                std::to_string(inputs[t]->value.cols()) + " expected " +
                std::to_string(level.in_dim));
    }
    std::vector<VarPtr> hs;
    for (size_t j = 0; j < slot.experts.size(); ++j) {
      VarPtr h = component_forward(slot.experts[j], inputs[t]);
      if (slot.adapters[j].valid()) h = slot.adapters[j](h);
      hs.push_back(std::move(h));
    }
    outputs.push_back(std::move(hs));
  }
  return outputs;
}

/// Convex mixture of expert outputs under the task gate's softmax weights.
inline VarPtr intra_task_fuse(const TaskGate& gate, const VarPtr& gate_input,
                              const std::vector<VarPtr>& experts) {
  if (experts.size() != gate.map.out) {
    raise(ErrorCode::config,
          "task gate expects " + std::to_string(gate.map.out) + " experts, got " +
              std::to_string(experts.size()));
  }
  VarPtr weights = softmax_rows(gate.map(gate_input));
  VarPtr fused;
  for (size_t j = 0; j < experts.size(); ++j) {
    VarPtr term = rowscale(colselect(weights, j), experts[j]);
    fused = fused ? add(fused, term) : term;
  }
  return fused;
}

/// Batched partner choice for one task: per row, the highest-probability
/// task other than self, ties to the smallest index. The returned weight is
/// the softmax probability of the chosen task, differentiable through the
/// gate; the choice itself is a constant.
struct PartnerSelection {
  std::vector<size_t> partner;  // per batch row
  VarPtr weight;                // [B]
};

inline PartnerSelection select_partners(const VarPtr& probs, size_t self_task) {
  size_t b = probs->value.rows();
  size_t n_tasks = probs->value.cols();
  if (n_tasks < 2) {
    raise(ErrorCode::not_applicable, "partner selection needs at least 2 tasks");
  }
  if (self_task >= n_tasks) {
    raise(ErrorCode::usage, "self task index out of range");
  }
  PartnerSelection sel;
  sel.partner.resize(b);
  for (size_t r = 0; r < b; ++r) {
    size_t best = self_task == 0 ? 1 : 0;
    for (size_t j = 0; j < n_tasks; ++j) {
      if (j == self_task) continue;
      if (probs->value.at(r, j) > probs->value.at(r, best)) best = j;
    }
    sel.partner[r] = best;
  }
  VarPtr weight;
  for (size_t j = 0; j < n_tasks; ++j) {
    if (j == self_task) continue;
    Tensor mask({b});
    bool any = false;
    for (size_t r = 0; r < b; ++r) {
      if (sel.partner[r] == j) {
        mask[r] = 1.0;
        any = true;
      }
    }
    if (!any) continue;
    VarPtr term = mul(make_leaf(std::move(mask), false), colselect(probs, j));
    weight = weight ? add(weight, term) : term;
  }
  sel.weight = weight;
  return sel;
}

/// Single-row convenience: chosen partner index and its gate probability.
inline std::pair<size_t, double> select_partner(const FusionGate& gate,
                                                const Tensor& gate_input,
                                                size_t self_task) {
  Tensor row({1, gate_input.size()}, gate_input.buffer());
  VarPtr probs = softmax_rows(gate.map(make_leaf(std::move(row), false)));
  PartnerSelection sel = select_partners(probs, self_task);
  return {sel.partner[0], sel.weight->value[0]};
}

/// Two-branch attention merge of the self representation and the weighted
/// partner representation. Scores divide by sqrt(d);
/// equal inputs give exactly the value transform of either.
inline VarPtr mtm_merge(const MtmHead& head, const VarPtr& p_x, const VarPtr& p_y,
                        MtmScore mode = MtmScore::self) {
  if (p_x->value.cols() != head.d || p_y->value.cols() != head.d) {
    raise(ErrorCode::dimension, "merge inputs must have dim " +
                                    std::to_string(head.d));
  }
  double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head.d));
  VarPtr qx = head.query(p_x);
  VarPtr s_x, s_y;
  if (mode == MtmScore::self) {
    s_x = scale(rowdot(qx, head.key(p_x)), inv_sqrt_d);
    s_y = scale(rowdot(head.query(p_y), head.key(p_y)), inv_sqrt_d);
  } else {
    s_x = scale(rowdot(qx, head.key(p_x)), inv_sqrt_d);
    s_y = scale(rowdot(qx, head.key(p_y)), inv_sqrt_d);
  }
  VarPtr c = softmax_rows(stack_cols({s_x, s_y}));
  VarPtr z = add(rowscale(colselect(c, 0), head.value(p_x)),
                 rowscale(colselect(c, 1), head.value(p_y)));
  return z;
}

/// Full level forward: experts, intra-task mixture, then the partner merge
/// per task (skipped for a single task or when fusion is off).
inline std::vector<VarPtr> akf_forward(const AkfLevel& level,
                                       const std::vector<VarPtr>& inputs) {
  std::vector<std::vector<VarPtr>> h = run_experts(level, inputs);
  std::vector<VarPtr> fused;
  for (size_t t = 0; t < level.tasks.size(); ++t) {
    fused.push_back(intra_task_fuse(level.tasks[t].task_gate, inputs[t], h[t]));
  }
  if (!level.has_fusion) return fused;

  std::vector<VarPtr> merged;
  for (size_t t = 0; t < level.tasks.size(); ++t) {
    const AkfLevel::TaskSlot& slot = level.tasks[t];
    VarPtr probs = softmax_rows(slot.fusion_gate.map(inputs[t]));
    PartnerSelection sel = select_partners(probs, t);
    size_t b = inputs[t]->value.rows();
    VarPtr partner_h;
    for (size_t j = 0; j < level.tasks.size(); ++j) {
      if (j == t) continue;
      Tensor mask({b});
      bool any = false;
      for (size_t r = 0; r < b; ++r) {
        if (sel.partner[r] == j) {
          mask[r] = 1.0;
          any = true;
        }
      }
      if (!any) continue;
      VarPtr term = rowscale(make_leaf(std::move(mask), false), fused[j]);
      partner_h = partner_h ? add(partner_h, term) : term;
    }
    VarPtr p_y = rowscale(sel.weight, partner_h);
    merged.push_back(mtm_merge(slot.mtm, fused[t], p_y, level.score_mode));
  }
  return merged;
}

/// Registers this level's trainable tensors under stable ids.
inline void collect_level_trainables(
    const AkfLevel& level,
    std::vector<std::pair<std::string, VarPtr>>* out) {
  std::string prefix = "level" + std::to_string(level.index);
  for (size_t t = 0; t < level.tasks.size(); ++t) {
    const AkfLevel::TaskSlot& slot = level.tasks[t];
    std::string tp = prefix + "/task" + std::to_string(t);
    for (size_t j = 0; j < slot.adapters.size(); ++j) {
      if (!slot.adapters[j].valid()) continue;
      out->emplace_back(tp + "/adapter" + std::to_string(j) + "/w",
                        slot.adapters[j].w);
      out->emplace_back(tp + "/adapter" + std::to_string(j) + "/b",
                        slot.adapters[j].b);
    }
    out->emplace_back(tp + "/gate/w", slot.task_gate.map.w);
    out->emplace_back(tp + "/gate/b", slot.task_gate.map.b);
    if (level.has_fusion) {
      out->emplace_back(tp + "/fusion/w", slot.fusion_gate.map.w);
      out->emplace_back(tp + "/fusion/b", slot.fusion_gate.map.b);
      out->emplace_back(tp + "/mtm/q/w", slot.mtm.q.w);
      out->emplace_back(tp + "/mtm/q/b", slot.mtm.q.b);
      out->emplace_back(tp + "/mtm/k/w", slot.mtm.k.w);
      out->emplace_back(tp + "/mtm/k/b", slot.mtm.k.b);
      out->emplace_back(tp + "/mtm/v/w", slot.mtm.v.w);
      out->emplace_back(tp + "/mtm/v/b", slot.mtm.v.b);
    }
  }
}

}  // namespace emm
