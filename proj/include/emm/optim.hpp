// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "emm/errors.hpp"
#include "emm/graph.hpp"

namespace emm {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  /// Decoupled decay subtracts lr*wd*w after the Adam update; the coupled
  /// variant folds wd*w into the gradient instead.
  bool decoupled_decay = true;
};

/// Adam over a fixed set of registered parameters. Parameters whose
/// needs_grad flag is off, or that received no gradient this step, are left
/// untouched, including their moment state.
class Adam {
public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void add_parameter(const std::string& id, const VarPtr& param) {
    for (const Slot& s : slots_) {
      if (s.id == id) raise(ErrorCode::usage, "duplicate parameter id " + id);
    }
    Slot slot;
    slot.id = id;
    slot.param = param;
    slot.m.assign(param->value.size(), 0.0);
    slot.v.assign(param->value.size(), 0.0);
    slots_.push_back(std::move(slot));
  }

  void zero_grad() {
    for (Slot& s : slots_) s.param->grad = Tensor();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (Slot& s : slots_) {
      Node& p = *s.param;
      if (!p.needs_grad || !p.has_grad()) continue;
      double* w = p.value.data();
      const double* g = p.grad.data();
      for (size_t i = 0; i < p.value.size(); ++i) {
        double gi = g[i];
        if (!config_.decoupled_decay) gi += config_.weight_decay * w[i];
        s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * gi;
        s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * gi * gi;
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        w[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
        if (config_.decoupled_decay) {
          w[i] -= config_.learning_rate * config_.weight_decay * w[i];
        }
      }
      p.value.require_finite("parameter " + s.id + " after optimizer step");
    }
  }

  size_t step_count() const { return t_; }
  const AdamConfig& config() const { return config_; }

private:
  struct Slot {
    std::string id;
    VarPtr param;
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamConfig config_;
  std::vector<Slot> slots_;
  size_t t_ = 0;
};

}  // namespace emm
