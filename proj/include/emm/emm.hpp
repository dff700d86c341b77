// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "emm/akf.hpp"
#include "emm/deconstruct.hpp"
#include "emm/errors.hpp"
#include "emm/graph.hpp"
#include "emm/metrics.hpp"
#include "emm/optim.hpp"
#include "emm/rng.hpp"
#include "emm/serialize.hpp"

namespace emm {

/// Per-task output head: one hidden dense + ReLU, then a single logit.
struct TowerHead {
  size_t task = 0;
  Linear hidden;
  Linear out;

  VarPtr logits(const VarPtr& z) const { return out(relu(hidden(z))); }
};

struct EmmBuildConfig {
  bool use_pretrained = true;
  bool use_mtm = true;
  MtmScore score_mode = MtmScore::self;
  uint32_t tower_hidden = 0;  // 0 picks max(4, d/2)
  uint64_t seed = 0;
};

/// The assembled multi-task model: stacked fusion levels and one tower per
/// task. Expert parameters are frozen exactly when use_pretrained is true;
/// everything else (gates, attention heads, adapters, towers, and the
/// experts themselves when retrained from scratch) is trainable.
struct EmmModel {
  std::vector<std::string> tasks;
  uint32_t input_dim = 0;
  std::vector<AkfLevel> levels;
  std::vector<TowerHead> towers;
  bool use_pretrained = true;
  bool use_mtm = true;

  std::vector<std::pair<std::string, VarPtr>> trainables() const {
    std::vector<std::pair<std::string, VarPtr>> out;
    for (const AkfLevel& level : levels) {
      if (!use_pretrained) {
        for (size_t t = 0; t < level.tasks.size(); ++t) {
          const AkfLevel::TaskSlot& slot = level.tasks[t];
          for (size_t j = 0; j < slot.experts.size(); ++j) {
            for (size_t i = 0; i < slot.experts[j].layers.size(); ++i) {
              const ModelLayer& l = slot.experts[j].layers[i];
              if (!l.weights) continue;
              std::string pid = "level" + std::to_string(level.index) + "/task" +
                                std::to_string(t) + "/expert" + std::to_string(j) +
                                "/layer" + std::to_string(i);
              out.emplace_back(pid + "/w", l.weights);
              out.emplace_back(pid + "/b", l.bias);
            }
          }
        }
      }
      collect_level_trainables(level, &out);
    }
    for (size_t t = 0; t < towers.size(); ++t) {
      std::string tp = "tower/task" + std::to_string(t);
      out.emplace_back(tp + "/hidden/w", towers[t].hidden.w);
      out.emplace_back(tp + "/hidden/b", towers[t].hidden.b);
      out.emplace_back(tp + "/out/w", towers[t].out.w);
      out.emplace_back(tp + "/out/b", towers[t].out.b);
    }
    return out;
  }

  /// Little-endian bytes of every expert parameter in a fixed order, the
  /// string compared before and after training to prove the freeze holds.
  std::vector<uint8_t> component_bytes() const {
    detail::ByteWriter w;
    for (const AkfLevel& level : levels) {
      for (const AkfLevel::TaskSlot& slot : level.tasks) {
        for (const ModelComponent& comp : slot.experts) {
          for (const ModelLayer& l : comp.layers) {
            if (!l.weights) continue;
            for (size_t i = 0; i < l.weights->value.size(); ++i)
              w.f64(l.weights->value[i]);
            for (size_t i = 0; i < l.bias->value.size(); ++i)
              w.f64(l.bias->value[i]);
          }
        }
      }
    }
    return w.data();
  }

  std::vector<std::pair<std::string, Tensor>> trainable_values() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [id, param] : trainables()) out.emplace_back(id, param->value);
    return out;
  }

  void load_trainable_values(
      const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::vector<std::pair<std::string, VarPtr>> params = trainables();
    if (entries.size() != params.size()) {
      raise(ErrorCode::format, "trainable set size mismatch: file has " +
                                   std::to_string(entries.size()) + ", model has " +
                                   std::to_string(params.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
      if (entries[i].first != params[i].first) {
        raise(ErrorCode::format, "trainable name mismatch at " + entries[i].first);
      }
      if (!entries[i].second.same_shape(params[i].second->value)) {
        raise(ErrorCode::format, "trainable shape mismatch at " + entries[i].first);
      }
      params[i].second->value = entries[i].second;
    }
  }
};

namespace detail {
/// Fresh untrained replacement for a component's parameters.
inline void reinit_components(ComponentSet* set, uint64_t seed) {
  for (ComponentSet::Entry& e : set->entries) {
    for (ModelComponent& comp : e.components) {
      for (size_t i = 0; i < comp.layers.size(); ++i) {
        ModelLayer& l = comp.layers[i];
        if (!l.weights) continue;
        bool relu_follows = i + 1 < comp.layers.size() &&
                            comp.layers[i + 1].sig.kind == LayerKind::relu;
        std::string pid = "scratch/" + e.model_id + "/level" +
                          std::to_string(comp.level) + "/layer" +
                          std::to_string(i);
        l.weights = make_leaf(
            init_dense_weights(l.sig.in_dim, l.sig.out_dim, relu_follows, seed,
                               pid + "/w"),
            true);
        l.bias = make_leaf(Tensor::zeros({l.sig.out_dim}), true);
      }
    }
  }
}
}  // namespace detail

/// Wires one fusion level per component level, then the towers. With
/// use_pretrained the expert parameters are frozen in place; without it they
/// are replaced by fresh trainable ones, so the same structure trains from
/// scratch. use_mtm=false builds no fusion gates or attention heads at all.
inline EmmModel build_emm(const ComponentSet& components,
                          const EmmBuildConfig& config) {
  if (components.level_count == 0 || components.entries.empty()) {
    raise(ErrorCode::config, "component set is empty");
  }
  ComponentSet working = components;
  if (config.use_pretrained) {
    working.set_frozen(true);
  } else {
    detail::reinit_components(&working, config.seed);
  }

  EmmModel model;
  model.tasks = working.tasks;
  model.input_dim = working.input_dim;
  model.use_pretrained = config.use_pretrained;
  model.use_mtm = config.use_mtm;

  uint32_t prev_dim = working.input_dim;
  for (size_t k = 0; k < working.level_count; ++k) {
    uint32_t out_dim = working.level_dims[k];
    std::vector<std::vector<const ModelComponent*>> experts = working.by_task(k);
    for (size_t t = 0; t < experts.size(); ++t) {
      for (const ModelComponent* c : experts[t]) {
        if (c->in_dim != prev_dim) {
          raise(ErrorCode::dimension,
                "level " + std::to_string(k + 1) + " component from " +
                    c->model_id + " expects in dim " + std::to_string(c->in_dim) +
                    " but level input is " + std::to_string(prev_dim));
        }
      }
    }
    model.levels.push_back(make_akf_level(k + 1, experts, prev_dim, out_dim,
                                          prev_dim, config.use_mtm,
                                          config.score_mode, config.seed));
    prev_dim = out_dim;
  }

  uint32_t hidden = config.tower_hidden
                        ? config.tower_hidden
                        : std::max<uint32_t>(4, prev_dim / 2);
  for (size_t t = 0; t < model.tasks.size(); ++t) {
    TowerHead tower;
    tower.task = t;
    std::string tp = "tower/task" + std::to_string(t);
    tower.hidden = make_linear(tp + "/hidden", prev_dim, hidden, true, config.seed);
    tower.out = make_zero_linear(tp + "/out", hidden, 1);
    model.towers.push_back(std::move(tower));
  }
  return model;
}

/// Per-task logits [B,1] for a batch already wrapped as a leaf.
inline std::vector<VarPtr> emm_task_logits(const EmmModel& model, const VarPtr& x) {
  if (x->value.cols() != model.input_dim) {
    raise(ErrorCode::dimension, "input dim " + std::to_string(x->value.cols()) +
                                    " does not match model input dim " +
                                    std::to_string(model.input_dim));
  }
  std::vector<VarPtr> z(model.tasks.size(), x);
  for (const AkfLevel& level : model.levels) z = akf_forward(level, z);
  std::vector<VarPtr> logits;
  for (size_t t = 0; t < model.towers.size(); ++t) {
    logits.push_back(model.towers[t].logits(z[t]));
  }
  return logits;
}

/// Per-task probabilities in (0,1) for a batch of rows.
inline std::vector<std::vector<double>> emm_forward(const EmmModel& model,
                                                    const Tensor& x) {
  std::vector<VarPtr> logits = emm_task_logits(model, make_leaf(x, false));
  std::vector<std::vector<double>> probs;
  for (const VarPtr& l : logits) probs.push_back(sigmoid(l)->value.buffer());
  return probs;
}

/// Evaluation forward, optionally sharded by rows across threads. Row-wise
/// independence of every op makes the sharded result bit-identical to the
/// single-threaded one.
inline std::vector<std::vector<double>> emm_predict(const EmmModel& model,
                                                    const Tensor& x,
                                                    size_t threads = 1) {
  size_t rows = x.rows();
  if (threads <= 1 || rows < 2 * threads) return emm_forward(model, x);
  size_t shard = (rows + threads - 1) / threads;
  std::vector<std::vector<std::vector<double>>> partial(threads);
  std::vector<std::thread> workers;
  size_t cols = x.cols();
  for (size_t w = 0; w < threads; ++w) {
    size_t begin = w * shard;
    size_t end = std::min(rows, begin + shard);
    if (begin >= end) break;
    workers.emplace_back([&, w, begin, end]() {
      Tensor slice({end - begin, cols});
      for (size_t r = begin; r < end; ++r)
        for (size_t c = 0; c < cols; ++c) slice.at(r - begin, c) = x.at(r, c);
      partial[w] = emm_forward(model, slice);
    });
  }
  for (std::thread& t : workers) t.join();
  std::vector<std::vector<double>> probs(model.tasks.size());
  for (size_t t = 0; t < probs.size(); ++t) {
    for (const auto& p : partial) {
      if (p.empty()) continue;
      probs[t].insert(probs[t].end(), p[t].begin(), p[t].end());
    }
  }
  return probs;
}

struct TrainRunConfig {
  uint64_t seed = 0;
  size_t epochs = 100;
  size_t batch_size = 1024;
  double learning_rate = 1e-3;
  double weight_decay = 1e-6;
  bool decoupled_decay = true;
  size_t eval_threads = 1;
};

struct EpochLog {
  size_t epoch = 0;
  std::vector<double> train_loss;  // per task, mean over the epoch's rows
  std::vector<double> val_auc;     // per task; NaN when no validation rows
};

/// Joint training: unweighted sum over tasks of mean binary cross entropy,
/// Adam on the trainable partition only. Returns one log entry per epoch.
inline std::vector<EpochLog> train_emm(
    EmmModel& model, const Tensor& x_train,
    const std::vector<std::vector<double>>& y_train, const Tensor& x_val,
    const std::vector<std::vector<double>>& y_val, const TrainRunConfig& run,
    const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  size_t n = x_train.rows();
  size_t n_tasks = model.tasks.size();
  if (y_train.size() != n_tasks) {
    raise(ErrorCode::data, "training labels must cover every task");
  }
  for (const auto& y : y_train) {
    if (y.size() != n) raise(ErrorCode::data, "label rows do not match features");
  }
  bool has_val = x_val.size() > 0;

  AdamConfig ac;
  ac.learning_rate = run.learning_rate;
  ac.weight_decay = run.weight_decay;
  ac.decoupled_decay = run.decoupled_decay;
  Adam opt(ac);
  for (const auto& [id, param] : model.trainables()) opt.add_parameter(id, param);

  size_t d = x_train.cols();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<EpochLog> logs;
  for (size_t epoch = 0; epoch < run.epochs; ++epoch) {
    RandomStream rs = stream_for(run.seed, "emm/shuffle/" + std::to_string(epoch));
    rs.shuffle(order);
    std::vector<double> loss_sums(n_tasks, 0.0);
    for (size_t start = 0; start < n; start += run.batch_size) {
      size_t b = std::min(run.batch_size, n - start);
      Tensor xb({b, d});
      std::vector<Tensor> yb(n_tasks, Tensor({b}));
      for (size_t r = 0; r < b; ++r) {
        size_t src = order[start + r];
        for (size_t c = 0; c < d; ++c) xb.at(r, c) = x_train.at(src, c);
        for (size_t t = 0; t < n_tasks; ++t) yb[t][r] = y_train[t][src];
      }
      std::vector<VarPtr> logits = emm_task_logits(model, make_leaf(std::move(xb), false));
      VarPtr total;
      for (size_t t = 0; t < n_tasks; ++t) {
        VarPtr task_loss = bce_with_logits_mean(logits[t], yb[t]);
        if (!task_loss->value.all_finite()) {
          raise(ErrorCode::numeric,
                "non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(start / run.batch_size) + " task " +
                    model.tasks[t]);
        }
        loss_sums[t] += task_loss->value[0] * static_cast<double>(b);
        total = total ? add(total, task_loss) : task_loss;
      }
      opt.zero_grad();
      backward(total);
      opt.step();
    }

    EpochLog log;
    log.epoch = epoch;
    for (size_t t = 0; t < n_tasks; ++t) {
      log.train_loss.push_back(loss_sums[t] / static_cast<double>(n));
    }
    if (has_val) {
      std::vector<std::vector<double>> probs =
          emm_predict(model, x_val, run.eval_threads);
      for (size_t t = 0; t < n_tasks; ++t) {
        bool has_pos = false, has_neg = false;
        for (double y : y_val[t]) (y == 1.0 ? has_pos : has_neg) = true;
        log.val_auc.push_back(has_pos && has_neg
                                  ? auc(probs[t], y_val[t])
                                  : std::nan(""));
      }
    } else {
      log.val_auc.assign(n_tasks, std::nan(""));
    }
    if (on_epoch) on_epoch(log);
    logs.push_back(std::move(log));
  }
  return logs;
}

}  // namespace emm
