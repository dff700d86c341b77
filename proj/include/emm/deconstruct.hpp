// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "emm/errors.hpp"
#include "emm/model.hpp"
#include "emm/signature.hpp"

namespace emm {

/// Alignment works on units rather than raw layers: a unit is one parametric
/// layer together with the activation layers that immediately follow it.
/// Matching whole units keeps a dense layer and its activation on the same
/// side of every cut, which raw per-layer subsequence matching does not
/// guarantee (an activation signature can spuriously match across units).
struct LayerUnit {
  std::vector<LayerSignature> sigs;
  size_t first = 0;  // index of the unit's first layer in the model
  size_t last = 0;   // index of the unit's last layer in the model

  bool operator==(const LayerUnit& o) const { return sigs == o.sigs; }
};

/// Groups layers [0, end) into units. A run of activations before the first
/// parametric layer forms a unit of its own.
inline std::vector<LayerUnit> build_units(
    const std::vector<LayerSignature>& sigs, size_t end) {
  std::vector<LayerUnit> units;
  for (size_t i = 0; i < end && i < sigs.size(); ++i) {
    bool parametric = layer_has_params(sigs[i].kind);
    if (parametric || units.empty()) {
      units.push_back(LayerUnit{{sigs[i]}, i, i});
    } else {
      units.back().sigs.push_back(sigs[i]);
      units.back().last = i;
    }
  }
  return units;
}

namespace detail {

/// Exact longest common subsequence over k integer sequences, memoized on
/// packed index tuples. Greedy matching when every head symbol agrees is
/// optimal and lands matches at the earliest index in every sequence.
class MultiLcs {
public:
  explicit MultiLcs(std::vector<std::vector<int>> seqs) : seqs_(std::move(seqs)) {
    if (seqs_.size() > 8) {
      raise(ErrorCode::usage, "structure alignment supports at most 8 models");
    }
    for (const auto& s : seqs_) {
      if (s.size() > 255) {
        raise(ErrorCode::usage, "structure alignment supports at most 255 units");
      }
    }
  }

  /// Matched positions, one index tuple per common element.
  std::vector<std::vector<size_t>> solve() {
    std::vector<size_t> idx(seqs_.size(), 0);
    std::vector<std::vector<size_t>> matches;
    while (true) {
      int best = length(idx);
      if (best == 0) break;
      if (heads_equal(idx)) {
        matches.push_back(idx);
        for (size_t j = 0; j < idx.size(); ++j) ++idx[j];
        continue;
      }
      for (size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= seqs_[j].size()) continue;
        std::vector<size_t> next = idx;
        ++next[j];
        if (length(next) == best) {
          idx = std::move(next);
          break;
        }
      }
    }
    return matches;
  }

private:
  bool heads_equal(const std::vector<size_t>& idx) const {
    for (size_t j = 0; j < idx.size(); ++j) {
      if (idx[j] >= seqs_[j].size()) return false;
    }
    int head = seqs_[0][idx[0]];
    for (size_t j = 1; j < idx.size(); ++j) {
      if (seqs_[j][idx[j]] != head) return false;
    }
    return true;
  }

  uint64_t pack(const std::vector<size_t>& idx) const {
    uint64_t key = 0;
    for (size_t v : idx) key = (key << 8) | v;
    return key;
  }

  int length(const std::vector<size_t>& idx) {
    for (size_t j = 0; j < idx.size(); ++j) {
      if (idx[j] >= seqs_[j].size()) return 0;
    }
    uint64_t key = pack(idx);
    auto it = memo_.find(key);
    if (it != memo_.end()) return it->second;
    if (memo_.size() > 4'000'000) {
      raise(ErrorCode::usage, "structure alignment state space too large");
    }
    int best;
    if (heads_equal(idx)) {
      std::vector<size_t> next = idx;
      for (size_t j = 0; j < next.size(); ++j) ++next[j];
      best = 1 + length(next);
    } else {
      best = 0;
      for (size_t j = 0; j < idx.size(); ++j) {
        if (idx[j] >= seqs_[j].size()) continue;
        std::vector<size_t> next = idx;
        ++next[j];
        best = std::max(best, length(next));
      }
    }
    memo_.emplace(key, best);
    return best;
  }

  std::vector<std::vector<int>> seqs_;
  std::unordered_map<uint64_t, int> memo_;
};

/// Assigns one integer symbol per distinct unit shape.
inline std::vector<std::vector<int>> encode_units(
    const std::vector<std::vector<LayerUnit>>& per_model,
    std::vector<std::vector<LayerSignature>>* symbols) {
  std::vector<std::vector<int>> encoded;
  for (const auto& units : per_model) {
    std::vector<int> row;
    for (const LayerUnit& u : units) {
      int sym = -1;
      for (size_t s = 0; s < symbols->size(); ++s) {
        if ((*symbols)[s] == u.sigs) {
          sym = static_cast<int>(s);
          break;
        }
      }
      if (sym < 0) {
        sym = static_cast<int>(symbols->size());
        symbols->push_back(u.sigs);
      }
      row.push_back(sym);
    }
    encoded.push_back(std::move(row));
  }
  return encoded;
}

}  // namespace detail

/// The aligned common structure of a pool: the ordered common units, and for
/// each model the layer index where each matched unit ends (the cut points).
struct CommonLayerSet {
  std::vector<std::vector<LayerSignature>> units;
  std::vector<std::vector<size_t>> cuts;  // [model][unit] -> last layer index

  size_t unit_count() const { return units.size(); }

  std::vector<LayerSignature> flattened() const {
    std::vector<LayerSignature> out;
    for (const auto& u : units)
      for (const LayerSignature& s : u) out.push_back(s);
    return out;
  }
};

/// Finds the longest ordered run of units shared by every model in the pool,
/// searching only layers before each model's head. An empty result is an
/// error naming the two models whose structures overlap least.
inline CommonLayerSet find_common_layers(const ModelPool& pool) {
  pool.validate();
  std::vector<std::vector<LayerUnit>> per_model;
  for (const TrainedModel& m : pool.models) {
    if (m.head_index == kNoHead) {
      raise(ErrorCode::usage, "model " + m.id + " has no head");
    }
    per_model.push_back(build_units(m.signatures(), m.head_index));
  }
  std::vector<std::vector<LayerSignature>> symbols;
  std::vector<std::vector<int>> encoded = detail::encode_units(per_model, &symbols);
  std::vector<std::vector<size_t>> matches = detail::MultiLcs(encoded).solve();

  if (matches.empty()) {
    size_t worst_a = 0, worst_b = 1;
    int worst = -1;
    for (size_t a = 0; a < encoded.size(); ++a) {
      for (size_t b = a + 1; b < encoded.size(); ++b) {
        int len = static_cast<int>(
            detail::MultiLcs({encoded[a], encoded[b]}).solve().size());
        if (worst < 0 || len < worst) {
          worst = len;
          worst_a = a;
          worst_b = b;
        }
      }
    }
    raise(ErrorCode::no_common_structure,
          "no common structure across pool; most dissimilar models: " +
              pool.models[worst_a].id + " and " + pool.models[worst_b].id);
  }

  CommonLayerSet common;
  size_t n_models = pool.models.size();
  common.cuts.assign(n_models, {});
  for (const std::vector<size_t>& match : matches) {
    common.units.push_back(per_model[0][match[0]].sigs);
    for (size_t m = 0; m < n_models; ++m) {
      common.cuts[m].push_back(per_model[m][match[m]].last);
    }
  }
  return common;
}

/// One frozen segment of a source model. An empty layer list is an identity
/// segment (used when a model has nothing left at the tail level).
struct ModelComponent {
  std::string model_id;
  std::string task;
  size_t level = 1;  // 1-based
  std::vector<ModelLayer> layers;
  uint32_t in_dim = 0;
  uint32_t out_dim = 0;
  bool needs_adapter = false;
  uint32_t adapter_out = 0;  // target dim when needs_adapter

  bool is_identity() const { return layers.empty(); }
};

inline VarPtr component_forward(const ModelComponent& comp, const VarPtr& x) {
  if (x->value.cols() != comp.in_dim) {
    raise(ErrorCode::dimension,
          "component from " + comp.model_id + " level " +
              std::to_string(comp.level) + " expects in dim " +
              std::to_string(comp.in_dim) + " got " +
              std::to_string(x->value.cols()));
  }
  return forward_range(comp.layers, 0, comp.layers.size(), x);
}

struct ComponentSet {
  std::vector<std::string> tasks;
  size_t level_count = 0;
  std::vector<uint32_t> level_dims;  // post-adapter out dim per level
  uint32_t input_dim = 0;

  struct Entry {
    std::string model_id;
    std::string task;
    std::vector<ModelComponent> components;
  };
  std::vector<Entry> entries;

  /// Components of one level grouped by task, tasks in pool order.
  std::vector<std::vector<const ModelComponent*>> by_task(size_t level) const {
    std::vector<std::vector<const ModelComponent*>> grouped(tasks.size());
    for (const Entry& e : entries) {
      for (size_t t = 0; t < tasks.size(); ++t) {
        if (tasks[t] != e.task) continue;
        grouped[t].push_back(&e.components[level]);
      }
    }
    return grouped;
  }

  void set_frozen(bool frozen) {
    for (Entry& e : entries) {
      for (ModelComponent& c : e.components) {
        for (ModelLayer& l : c.layers) {
          if (l.weights) l.weights->needs_grad = !frozen;
          if (l.bias) l.bias->needs_grad = !frozen;
        }
      }
    }
  }
};

enum class TailMode { strict, adapter };
enum class TailPolicy { keep, drop };

/// Splits every pooled model after each matched unit. The remainder past the
/// last cut, minus the original head, becomes a final extra level when kept
/// and non-empty anywhere; models with nothing left contribute identity
/// segments there. Strict mode requires the tail level to reach one agreed
/// dimension; adapter mode records a linear adapter wherever it does not.
inline ComponentSet deconstruct_pool(const ModelPool& pool,
                                     const CommonLayerSet& common,
                                     TailMode tail_mode,
                                     TailPolicy tail_policy = TailPolicy::keep) {
  if (common.unit_count() == 0) {
    raise(ErrorCode::no_common_structure, "common layer set is empty");
  }
  size_t n_models = pool.models.size();
  if (common.cuts.size() != n_models) {
    raise(ErrorCode::usage, "common layer set does not match pool size");
  }

  ComponentSet set;
  set.tasks = pool.tasks;
  set.input_dim = pool.models.front().input_dim();
  uint32_t last_common_dim = common.units.back().back().out_dim;

  std::vector<std::vector<ModelLayer>> tails(n_models);
  std::vector<uint32_t> tail_out(n_models, last_common_dim);
  bool any_tail = false;
  for (size_t m = 0; m < n_models; ++m) {
    const TrainedModel& model = pool.models[m];
    size_t last_cut = common.cuts[m].back();
    for (size_t i = last_cut + 1; i < model.head_index; ++i) {
      tails[m].push_back(model.layers[i]);
    }
    if (!tails[m].empty()) {
      any_tail = true;
      tail_out[m] = tails[m].back().sig.out_dim;
    }
  }

  bool tail_level = tail_policy == TailPolicy::keep && any_tail;
  uint32_t tail_dim = tail_out[0];
  if (tail_level && tail_mode == TailMode::strict) {
    std::string offenders;
    for (size_t m = 0; m < n_models; ++m) {
      if (tail_out[m] != tail_dim) {
        offenders += offenders.empty() ? "" : ", ";
        offenders += pool.models[m].id + " ends at " +
                     std::to_string(tail_out[m]) + " vs " +
                     std::to_string(tail_dim);
      }
    }
    if (!offenders.empty()) {
      raise(ErrorCode::tail_mismatch,
            "trailing segments disagree on output dim: " + offenders);
    }
  }

  set.level_count = common.unit_count() + (tail_level ? 1 : 0);
  for (const auto& unit : common.units) {
    set.level_dims.push_back(unit.back().out_dim);
  }
  if (tail_level) set.level_dims.push_back(tail_dim);

  for (size_t m = 0; m < n_models; ++m) {
    const TrainedModel& model = pool.models[m];
    ComponentSet::Entry entry;
    entry.model_id = model.id;
    entry.task = model.task;
    size_t start = 0;
    for (size_t k = 0; k < common.unit_count(); ++k) {
      size_t cut = common.cuts[m][k];
      ModelComponent comp;
      comp.model_id = model.id;
      comp.task = model.task;
      comp.level = k + 1;
      for (size_t i = start; i <= cut; ++i) comp.layers.push_back(model.layers[i]);
      comp.in_dim = comp.layers.front().sig.in_dim;
      comp.out_dim = comp.layers.back().sig.out_dim;
      entry.components.push_back(std::move(comp));
      start = cut + 1;
    }
    if (tail_level) {
      ModelComponent comp;
      comp.model_id = model.id;
      comp.task = model.task;
      comp.level = common.unit_count() + 1;
      comp.layers = tails[m];
      comp.in_dim = last_common_dim;
      comp.out_dim = tail_out[m];
      if (comp.out_dim != tail_dim) {
        comp.needs_adapter = true;
        comp.adapter_out = tail_dim;
      }
      entry.components.push_back(std::move(comp));
    }
    set.entries.push_back(std::move(entry));
  }
  return set;
}

/// Max absolute difference between the component-chain forward and the
/// head-truncated original forward on a probe batch.
inline double verify_roundtrip(const TrainedModel& model,
                               const std::vector<ModelComponent>& components,
                               const Tensor& probe) {
  VarPtr x = make_leaf(probe, false);
  VarPtr chain = x;
  for (const ModelComponent& comp : components) {
    chain = component_forward(comp, chain);
  }
  VarPtr truncated = forward_truncated(model, x);
  if (!chain->value.same_shape(truncated->value)) {
    raise(ErrorCode::dimension, "component chain output shape " +
                                    chain->value.shape_string() +
                                    " differs from truncated forward " +
                                    truncated->value.shape_string());
  }
  double worst = 0.0;
  for (size_t i = 0; i < chain->value.size(); ++i) {
    worst = std::max(worst, std::abs(chain->value[i] - truncated->value[i]));
  }
  return worst;
}

}  // namespace emm
