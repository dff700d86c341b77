// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "emm/errors.hpp"
#include "emm/graph.hpp"
#include "emm/optim.hpp"
#include "emm/rng.hpp"
#include "emm/signature.hpp"
#include "emm/tensor.hpp"

namespace emm {

/// head_index value marking a file that stores a bag of layers rather than a
/// dimensionally chained network (used by the input encoder).
constexpr uint32_t kNoHead = std::numeric_limits<uint32_t>::max();

/// One layer of a trained model: structure plus (for parametric kinds) the
/// weight and bias leaves. Activation layers carry null parameters.
struct ModelLayer {
  LayerSignature sig;
  VarPtr weights;  // dense/embedding: [in_dim, out_dim]
  VarPtr bias;     // dense/embedding: [out_dim]
};

struct TrainedModel {
  std::string id;
  std::string task;
  std::vector<ModelLayer> layers;
  uint32_t head_index = kNoHead;

  std::vector<LayerSignature> signatures() const {
    std::vector<LayerSignature> sigs;
    sigs.reserve(layers.size());
    for (const ModelLayer& l : layers) sigs.push_back(l.sig);
    return sigs;
  }

  uint32_t input_dim() const {
    if (layers.empty()) raise(ErrorCode::usage, "model has no layers");
    return layers.front().sig.in_dim;
  }

  void set_frozen(bool frozen) {
    for (ModelLayer& l : layers) {
      if (l.weights) l.weights->needs_grad = !frozen;
      if (l.bias) l.bias->needs_grad = !frozen;
    }
  }
};

struct ModelPool {
  std::vector<std::string> tasks;
  std::vector<TrainedModel> models;

  std::vector<const TrainedModel*> models_for_task(const std::string& task) const {
    std::vector<const TrainedModel*> out;
    for (const TrainedModel& m : models) {
      if (m.task == task) out.push_back(&m);
    }
    return out;
  }

  void validate() const {
    if (models.empty()) raise(ErrorCode::config, "model pool is empty");
    uint32_t in = models.front().input_dim();
    for (const TrainedModel& m : models) {
      if (m.input_dim() != in) {
        raise(ErrorCode::dimension,
              "pool models disagree on input dim: " + m.id);
      }
    }
    for (const std::string& t : tasks) {
      if (models_for_task(t).empty()) {
        raise(ErrorCode::config, "pool has no model for task " + t);
      }
    }
  }
};

/// Checks that consecutive layer dims line up. Raises a dimension error
/// naming the model and the first offending boundary.
inline void check_layer_chain(const std::string& id,
                              const std::vector<LayerSignature>& sigs) {
  for (size_t i = 1; i < sigs.size(); ++i) {
    if (sigs[i].in_dim != sigs[i - 1].out_dim) {
      raise(ErrorCode::dimension, "model " + id + " layer " +
                                      std::to_string(i) + " expects in dim " +
                                      std::to_string(sigs[i].in_dim) +
                                      " but previous out dim is " +
                                      std::to_string(sigs[i - 1].out_dim));
    }
  }
}

namespace detail {
inline Tensor init_dense_weights(uint32_t in, uint32_t out, bool relu_follows,
                                 uint64_t seed, const std::string& param_id) {
  RandomStream rs = stream_for(seed, param_id);
  double limit = relu_follows
                     ? std::sqrt(6.0 / static_cast<double>(in))
                     : std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor w({in, out});
  for (size_t i = 0; i < w.size(); ++i) w[i] = rs.uniform(-limit, limit);
  return w;
}
}  // namespace detail

/// Builds an untrained MLP: dense+relu per hidden width, then a single-logit
/// head. An empty width list degenerates to the head alone.
inline TrainedModel build_mlp(const std::string& id, const std::string& task,
                              uint32_t input_dim,
                              const std::vector<uint32_t>& hidden_widths,
                              uint64_t seed) {
  if (input_dim == 0) raise(ErrorCode::config, "input dim must be positive");
  for (uint32_t w : hidden_widths) {
    if (w == 0) raise(ErrorCode::config, "hidden widths must be positive");
  }
  TrainedModel model;
  model.id = id;
  model.task = task;
  uint32_t in = input_dim;
  for (size_t h = 0; h < hidden_widths.size(); ++h) {
    uint32_t out = hidden_widths[h];
    std::string pid = id + "/dense" + std::to_string(h);
    ModelLayer dense;
    dense.sig = dense_sig(in, out);
    dense.weights =
        make_leaf(detail::init_dense_weights(in, out, true, seed, pid + "/w"), true);
    dense.bias = make_leaf(Tensor::zeros({out}), true);
    model.layers.push_back(std::move(dense));
    model.layers.push_back(ModelLayer{relu_sig(out), nullptr, nullptr});
    in = out;
  }
  ModelLayer head;
  head.sig = dense_sig(in, 1);
  head.weights = make_leaf(
      detail::init_dense_weights(in, 1, false, seed, id + "/head/w"), true);
  head.bias = make_leaf(Tensor::zeros({1}), true);
  model.head_index = static_cast<uint32_t>(model.layers.size());
  model.layers.push_back(std::move(head));
  return model;
}

/// Applies one layer to a batch of rows.
inline VarPtr apply_layer(const ModelLayer& layer, const VarPtr& x) {
  switch (layer.sig.kind) {
    case LayerKind::dense:
    case LayerKind::embedding_concat:
      return add_rowvec(matmul(x, layer.weights), layer.bias);
    case LayerKind::relu:
      return relu(x);
    case LayerKind::sigmoid:
      return sigmoid(x);
  }
  raise(ErrorCode::usage, "unhandled layer kind");
}

/// Forward through layers [begin, end).
inline VarPtr forward_range(const std::vector<ModelLayer>& layers, size_t begin,
                            size_t end, const VarPtr& x) {
  VarPtr h = x;
  for (size_t i = begin; i < end; ++i) h = apply_layer(layers[i], h);
  return h;
}

/// Full forward to the head logit, shape [B, 1].
inline VarPtr forward_logits(const TrainedModel& model, const VarPtr& x) {
  if (model.head_index == kNoHead) {
    raise(ErrorCode::usage, "model " + model.id + " has no head");
  }
  return forward_range(model.layers, 0, model.layers.size(), x);
}

/// Forward stopping just before the head layer: the representation the
/// deconstruction must reproduce. With no hidden layers this is the input.
inline VarPtr forward_truncated(const TrainedModel& model, const VarPtr& x) {
  if (model.head_index == kNoHead) {
    raise(ErrorCode::usage, "model " + model.id + " has no head");
  }
  return forward_range(model.layers, 0, model.head_index, x);
}

struct SingleTrainConfig {
  size_t epochs = 40;
  size_t batch_size = 256;
  double learning_rate = 1e-3;
  double weight_decay = 1e-6;
  bool decoupled_decay = true;
};

/// Trains a single-task model in place with sigmoid + binary cross entropy.
/// All shuffling flows from (seed, model id), so retraining with the same
/// inputs is bit-identical.
inline void train_single(TrainedModel& model, const Tensor& features,
                         const std::vector<double>& labels,
                         const SingleTrainConfig& config, uint64_t seed) {
  size_t n = features.rows();
  if (labels.size() != n) {
    raise(ErrorCode::data, "feature and label row counts differ");
  }
  for (double y : labels) {
    if (y != 0.0 && y != 1.0) {
      raise(ErrorCode::data, "non-binary label for task " + model.task);
    }
  }
  AdamConfig ac;
  ac.learning_rate = config.learning_rate;
  ac.weight_decay = config.weight_decay;
  ac.decoupled_decay = config.decoupled_decay;
  Adam opt(ac);
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const ModelLayer& l = model.layers[i];
    if (!l.weights) continue;
    opt.add_parameter(model.id + "/layer" + std::to_string(i) + "/w", l.weights);
    opt.add_parameter(model.id + "/layer" + std::to_string(i) + "/b", l.bias);
  }

  size_t d = features.cols();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    RandomStream rs =
        stream_for(seed, model.id + "/shuffle/" + std::to_string(epoch));
    rs.shuffle(order);
    for (size_t start = 0; start < n; start += config.batch_size) {
      size_t b = std::min(config.batch_size, n - start);
      Tensor xb({b, d});
      Tensor yb({b});
      for (size_t r = 0; r < b; ++r) {
        size_t src = order[start + r];
        for (size_t c = 0; c < d; ++c) xb.at(r, c) = features.at(src, c);
        yb[r] = labels[src];
      }
      VarPtr logits = forward_logits(model, make_leaf(std::move(xb), false));
      VarPtr loss = bce_with_logits_mean(logits, yb);
      if (!loss->value.all_finite()) {
        raise(ErrorCode::numeric,
              "non-finite loss training " + model.id + " epoch " +
                  std::to_string(epoch) + " batch " +
                  std::to_string(start / config.batch_size));
      }
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
  }
}

/// Batch of probabilities in (0,1), shape [B].
inline std::vector<double> predict_proba(const TrainedModel& model,
                                         const Tensor& features) {
  VarPtr logits = forward_logits(model, make_leaf(features, false));
  VarPtr p = sigmoid(logits);
  return p->value.buffer();
}

}  // namespace emm
