// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emm/akf.hpp"
#include "emm/deconstruct.hpp"
#include "emm/model.hpp"
#include "emm/optim.hpp"
#include "emm/rng.hpp"

using emm::AkfLevel;
using emm::dense_sig;
using emm::ErrorCode;
using emm::FusionGate;
using emm::Linear;
using emm::make_leaf;
using emm::ModelComponent;
using emm::ModelLayer;
using emm::MtmHead;
using emm::MtmScore;
using emm::relu_sig;
using emm::TaskGate;
using emm::Tensor;
using emm::VarPtr;

namespace {

Linear fixed_linear(uint32_t in, uint32_t out, std::vector<double> w,
                    std::vector<double> b) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w = make_leaf(Tensor::matrix(in, out, std::move(w)), true);
  l.b = make_leaf(Tensor::vector(std::move(b)), true);
  return l;
}

Linear identity_linear(uint32_t d) {
  std::vector<double> w(static_cast<size_t>(d) * d, 0.0);
  for (uint32_t i = 0; i < d; ++i) w[static_cast<size_t>(i) * d + i] = 1.0;
  return fixed_linear(d, d, std::move(w), std::vector<double>(d, 0.0));
}

/// Frozen dense+relu component for expert tests.
ModelComponent make_component(const std::string& id, const std::string& task,
                              uint32_t in, uint32_t out, uint64_t seed) {
  ModelComponent c;
  c.model_id = id;
  c.task = task;
  c.level = 1;
  c.in_dim = in;
  c.out_dim = out;
  emm::RandomStream rs = emm::stream_for(seed, id);
  Tensor w({in, out});
  for (size_t i = 0; i < w.size(); ++i) w[i] = rs.uniform(-0.8, 0.8);
  Tensor b({out});
  for (size_t i = 0; i < b.size(); ++i) b[i] = rs.uniform(-0.1, 0.1);
  ModelLayer dense;
  dense.sig = dense_sig(in, out);
  dense.weights = make_leaf(std::move(w), false);
  dense.bias = make_leaf(std::move(b), false);
  c.layers.push_back(std::move(dense));
  c.layers.push_back(ModelLayer{relu_sig(out), nullptr, nullptr});
  return c;
}

Tensor random_batch(size_t rows, size_t cols, uint64_t seed) {
  emm::RandomStream rs = emm::stream_for(seed, "batch");
  Tensor t({rows, cols});
  for (size_t i = 0; i < t.size(); ++i) t[i] = rs.normal();
  return t;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const emm::Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::usage;
}

std::vector<double> softmax3(double a, double b, double c) {
  double m = std::max(a, std::max(b, c));
  double ea = std::exp(a - m), eb = std::exp(b - m), ec = std::exp(c - m);
  double s = ea + eb + ec;
  return {ea / s, eb / s, ec / s};
}

std::vector<double> softmax2(double a, double b) {
  double m = std::max(a, b);
  double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}

}  // namespace

TEST_CASE("a biased task gate mixes experts three to one", "[akf]") {
  TaskGate gate;
  gate.task = 0;
  gate.map = fixed_linear(3, 2, std::vector<double>(6, 0.0),
                          {std::log(3.0), 0.0});
  VarPtr x = make_leaf(random_batch(4, 3, 1), false);
  VarPtr a = make_leaf(random_batch(4, 5, 2), false);
  VarPtr b = make_leaf(random_batch(4, 5, 3), false);
  VarPtr fused = emm::intra_task_fuse(gate, x, {a, b});
  REQUIRE(fused->value.rows() == 4);
  REQUIRE(fused->value.cols() == 5);
  for (size_t i = 0; i < fused->value.size(); ++i) {
    double expect = 0.75 * a->value[i] + 0.25 * b->value[i];
    REQUIRE(fused->value[i] == Catch::Approx(expect).margin(1e-9));
  }
}

TEST_CASE("gate weights are a softmax over experts", "[akf]") {
  emm::RandomStream rs = emm::stream_for(17, "gatecheck");
  std::vector<double> w(3 * 4), b(4);
  for (double& v : w) v = rs.normal();
  for (double& v : b) v = rs.normal();
  TaskGate gate;
  gate.map = fixed_linear(3, 4, w, b);
  VarPtr x = make_leaf(random_batch(6, 3, 4), false);
  VarPtr probs = emm::softmax_rows(gate.map(x));
  for (size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (size_t j = 0; j < 4; ++j) {
      double p = probs->value.at(r, j);
      REQUIRE(p > 0.0);
      REQUIRE(p < 1.0);
      s += p;
    }
    REQUIRE(s == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("the partner is the strongest task other than self", "[akf]") {
  FusionGate gate;
  gate.task = 0;
  gate.map = fixed_linear(1, 3, {0.0, 0.0, 0.0}, {10.0, 1.0, 5.0});
  auto [partner, weight] = emm::select_partner(gate, Tensor::vector({0.7}), 0);
  // Task 0 dominates the softmax but is excluded as self.
  REQUIRE(partner == 2);
  REQUIRE(weight == Catch::Approx(softmax3(10, 1, 5)[2]).margin(1e-12));
}

TEST_CASE("partner ties break to the smallest index", "[akf]") {
  FusionGate gate;
  gate.task = 2;
  gate.map = fixed_linear(2, 4, std::vector<double>(8, 0.0),
                          std::vector<double>(4, 0.0));
  auto [partner, weight] = emm::select_partner(gate, Tensor::vector({1.0, -1.0}), 2);
  REQUIRE(partner == 0);
  REQUIRE(weight == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("batched partner selection excludes self per row", "[akf]") {
  Tensor logits({3, 4},
                {0.0, 9.0, 3.0, 1.0,   // strongest other task is 2
                 5.0, 0.0, 5.0, 5.0,   // three-way tie -> task 0
                 0.0, 0.0, 0.0, 7.0}); // strongest other task is 3
  VarPtr probs = emm::softmax_rows(make_leaf(logits, true));
  emm::PartnerSelection sel = emm::select_partners(probs, 1);
  REQUIRE(sel.partner == std::vector<size_t>{2, 0, 3});
  for (size_t r = 0; r < 3; ++r) {
    REQUIRE(sel.weight->value[r] ==
            Catch::Approx(probs->value.at(r, sel.partner[r])).margin(1e-12));
  }
}

TEST_CASE("partner weights carry gradients back to the gate", "[akf]") {
  // Margins are far wider than the probe step, so the per-row choice is
  // locally constant and the weight is a smooth function of the logits.
  Tensor base({2, 4}, {0.0, 1.0, 3.0, -2.0, 2.0, -1.0, 0.5, 4.0});
  VarPtr logits = make_leaf(base, true);
  VarPtr probs = emm::softmax_rows(logits);
  emm::PartnerSelection sel = emm::select_partners(probs, 0);
  REQUIRE(sel.partner == std::vector<size_t>{2, 3});
  VarPtr loss = emm::sum(sel.weight);
  emm::backward(loss);
  Tensor grad = logits->grad;
  REQUIRE(grad.size() == base.size());

  double h = 1e-5;
  for (size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      Tensor t = base;
      t[i] += delta;
      VarPtr p = emm::softmax_rows(make_leaf(t, false));
      emm::PartnerSelection s = emm::select_partners(p, 0);
      REQUIRE(s.partner == std::vector<size_t>{2, 3});
      double acc = 0.0;
      for (size_t r = 0; r < 2; ++r) acc += s.weight->value[r];
      return acc;
    };
    double numeric = (eval(h) - eval(-h)) / (2 * h);
    REQUIRE(grad[i] == Catch::Approx(numeric).margin(1e-6));
  }
}

TEST_CASE("merge scores follow the scaled dot product", "[akf]") {
  MtmHead head;
  head.task = 0;
  head.d = 1;
  head.q = identity_linear(1);
  head.k = identity_linear(1);
  head.v = identity_linear(1);
  VarPtr px = make_leaf(Tensor::matrix(1, 1, {2.0}), false);
  VarPtr py = make_leaf(Tensor::matrix(1, 1, {1.0}), false);

  SECTION("each branch scored by itself") {
    // s_x = 2*2 = 4, s_y = 1*1 = 1.
    auto c = softmax2(4.0, 1.0);
    VarPtr z = emm::mtm_merge(head, px, py, MtmScore::self);
    REQUIRE(z->value[0] == Catch::Approx(c[0] * 2.0 + c[1] * 1.0).margin(1e-12));
  }
  SECTION("both branches keyed by the self query") {
    // s_x = 2*2 = 4, s_y = 2*1 = 2.
    auto c = softmax2(4.0, 2.0);
    VarPtr z = emm::mtm_merge(head, px, py, MtmScore::cross);
    REQUIRE(z->value[0] == Catch::Approx(c[0] * 2.0 + c[1] * 1.0).margin(1e-12));
  }
}

TEST_CASE("scores divide by the square root of the width", "[akf]") {
  MtmHead head;
  head.task = 0;
  head.d = 4;
  head.q = identity_linear(4);
  head.k = identity_linear(4);
  head.v = identity_linear(4);
  VarPtr px = make_leaf(Tensor::matrix(1, 4, {2, 0, 0, 0}), false);
  VarPtr py = make_leaf(Tensor::matrix(1, 4, {1, 0, 0, 0}), false);
  // s_x = 4/2 = 2, s_y = 1/2 = 0.5.
  auto c = softmax2(2.0, 0.5);
  VarPtr z = emm::mtm_merge(head, px, py, MtmScore::self);
  REQUIRE(z->value.at(0, 0) ==
          Catch::Approx(c[0] * 2.0 + c[1] * 1.0).margin(1e-12));
  for (size_t j = 1; j < 4; ++j) {
    REQUIRE(z->value.at(0, j) == 0.0);
  }
}

TEST_CASE("a log-nine score gap splits attention ninety to ten", "[akf]") {
  MtmHead head;
  head.task = 0;
  head.d = 1;
  head.q = identity_linear(1);
  head.k = identity_linear(1);
  head.v = identity_linear(1);
  double x = std::sqrt(1.0 + std::log(9.0));
  VarPtr px = make_leaf(Tensor::matrix(1, 1, {x}), false);
  VarPtr py = make_leaf(Tensor::matrix(1, 1, {1.0}), false);
  VarPtr z = emm::mtm_merge(head, px, py, MtmScore::self);
  REQUIRE(z->value[0] == Catch::Approx(0.9 * x + 0.1).margin(1e-12));
}

TEST_CASE("merging a representation with itself is the value transform", "[akf]") {
  MtmHead head;
  head.task = 1;
  head.d = 5;
  head.q = emm::make_linear("merge/q", 5, 5, true, 7);
  head.k = emm::make_linear("merge/k", 5, 5, true, 7);
  head.v = emm::make_linear("merge/v", 5, 5, true, 7);
  VarPtr p = make_leaf(random_batch(6, 5, 88), false);
  VarPtr v = head.value(p);
  for (MtmScore mode : {MtmScore::self, MtmScore::cross}) {
    VarPtr z = emm::mtm_merge(head, p, p, mode);
    REQUIRE(z->value.buffer() == v->value.buffer());
  }
}

TEST_CASE("a level runs experts through gates and the pair merge", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("m0", "t0", 3, 4, 1));
  comps.push_back(make_component("m1", "t0", 3, 4, 2));
  comps.push_back(make_component("m2", "t1", 3, 4, 3));
  comps.push_back(make_component("m3", "t1", 3, 4, 4));
  std::vector<std::vector<const ModelComponent*>> groups = {
      {&comps[0], &comps[1]}, {&comps[2], &comps[3]}};
  AkfLevel level =
      emm::make_akf_level(1, groups, 3, 4, 3, true, MtmScore::self, 9);
  REQUIRE(level.has_fusion);
  REQUIRE(level.tasks.size() == 2);

  std::vector<VarPtr> inputs = {make_leaf(random_batch(7, 3, 10), false),
                                make_leaf(random_batch(7, 3, 11), false)};
  std::vector<VarPtr> outs = emm::akf_forward(level, inputs);
  REQUIRE(outs.size() == 2);
  for (const VarPtr& o : outs) {
    REQUIRE(o->value.rows() == 7);
    REQUIRE(o->value.cols() == 4);
    REQUIRE(o->value.all_finite());
  }

  std::vector<std::pair<std::string, VarPtr>> trainables;
  emm::collect_level_trainables(level, &trainables);
  // Per task: gate w/b, fusion w/b, and three mtm maps with w/b each.
  REQUIRE(trainables.size() == 2 * (2 + 2 + 6));
}

TEST_CASE("a single task level skips partner fusion", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("m0", "solo", 3, 4, 21));
  comps.push_back(make_component("m1", "solo", 3, 4, 22));
  std::vector<std::vector<const ModelComponent*>> groups = {
      {&comps[0], &comps[1]}};
  AkfLevel level =
      emm::make_akf_level(1, groups, 3, 4, 3, true, MtmScore::self, 9);
  REQUIRE_FALSE(level.has_fusion);

  std::vector<VarPtr> inputs = {make_leaf(random_batch(5, 3, 30), false)};
  std::vector<VarPtr> outs = emm::akf_forward(level, inputs);
  REQUIRE(outs.size() == 1);
  REQUIRE(outs[0]->value.cols() == 4);

  std::vector<std::pair<std::string, VarPtr>> trainables;
  emm::collect_level_trainables(level, &trainables);
  REQUIRE(trainables.size() == 2);
  for (const auto& [name, v] : trainables) {
    REQUIRE(name.find("mtm") == std::string::npos);
    REQUIRE(name.find("fusion") == std::string::npos);
  }
}

TEST_CASE("recorded adapters map experts onto the level width", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("wide", "t0", 2, 3, 41));
  comps.back().needs_adapter = true;
  comps.back().adapter_out = 2;
  comps.push_back(make_component("fit", "t0", 2, 2, 42));
  std::vector<std::vector<const ModelComponent*>> groups = {
      {&comps[0], &comps[1]}};
  AkfLevel level =
      emm::make_akf_level(2, groups, 2, 2, 2, false, MtmScore::self, 50);
  REQUIRE(level.tasks[0].adapters[0].valid());
  REQUIRE_FALSE(level.tasks[0].adapters[1].valid());

  std::vector<VarPtr> inputs = {make_leaf(random_batch(5, 2, 43), false)};
  auto h = emm::run_experts(level, inputs);
  REQUIRE(h[0].size() == 2);
  REQUIRE(h[0][0]->value.cols() == 2);
  REQUIRE(h[0][1]->value.cols() == 2);

  std::vector<std::pair<std::string, VarPtr>> trainables;
  emm::collect_level_trainables(level, &trainables);
  bool has_adapter = false;
  for (const auto& [name, v] : trainables) {
    if (name.find("adapter0") != std::string::npos) has_adapter = true;
  }
  REQUIRE(has_adapter);
}

TEST_CASE("training a level leaves its experts untouched", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("m0", "t0", 3, 3, 61));
  comps.push_back(make_component("m1", "t0", 3, 3, 62));
  comps.push_back(make_component("m2", "t1", 3, 3, 63));
  std::vector<std::vector<const ModelComponent*>> groups = {
      {&comps[0], &comps[1]}, {&comps[2]}};
  AkfLevel level =
      emm::make_akf_level(1, groups, 3, 3, 3, true, MtmScore::self, 70);

  std::vector<std::vector<double>> expert_before;
  for (const ModelComponent& c : comps) {
    expert_before.push_back(c.layers[0].weights->value.buffer());
  }

  std::vector<std::pair<std::string, VarPtr>> trainables;
  emm::collect_level_trainables(level, &trainables);
  emm::Adam opt(emm::AdamConfig{});
  for (const auto& [name, v] : trainables) opt.add_parameter(name, v);
  std::vector<double> gate_before = level.tasks[0].task_gate.map.w->value.buffer();

  for (int step = 0; step < 5; ++step) {
    std::vector<VarPtr> inputs = {
        make_leaf(random_batch(6, 3, 100 + step), false),
        make_leaf(random_batch(6, 3, 200 + step), false)};
    std::vector<VarPtr> outs = emm::akf_forward(level, inputs);
    VarPtr loss = emm::mean(emm::add(outs[0], outs[1]));
    opt.zero_grad();
    emm::backward(loss);
    opt.step();
  }

  for (size_t i = 0; i < comps.size(); ++i) {
    REQUIRE(comps[i].layers[0].weights->value.buffer() == expert_before[i]);
  }
  REQUIRE(level.tasks[0].task_gate.map.w->value.buffer() != gate_before);
}

TEST_CASE("level gradients agree with finite differences", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("m0", "t0", 2, 2, 91));
  comps.push_back(make_component("m1", "t0", 2, 2, 92));
  comps.push_back(make_component("m2", "t1", 2, 2, 93));
  std::vector<std::vector<const ModelComponent*>> groups = {
      {&comps[0], &comps[1]}, {&comps[2]}};
  // Two tasks keep the partner choice constant, so the loss is smooth in
  // every trainable parameter.
  AkfLevel level =
      emm::make_akf_level(1, groups, 2, 2, 2, true, MtmScore::self, 95);

  Tensor x0 = random_batch(3, 2, 96);
  Tensor x1 = random_batch(3, 2, 97);
  auto eval = [&] {
    std::vector<VarPtr> inputs = {make_leaf(x0, false), make_leaf(x1, false)};
    std::vector<VarPtr> outs = emm::akf_forward(level, inputs);
    return emm::mean(emm::add(outs[0], outs[1]));
  };

  std::vector<std::pair<std::string, VarPtr>> trainables;
  emm::collect_level_trainables(level, &trainables);

  // Fresh gates and attention heads start with zero biases, which can put a
  // ReLU preactivation exactly on its kink (a fully clipped expert row feeds
  // the value transform nothing but its bias). Finite differences are only
  // meaningful where the loss is differentiable, so move every trainable to
  // a generic point first.
  emm::RandomStream nudge(981);
  for (const auto& [name, param] : trainables) {
    (void)name;
    for (size_t i = 0; i < param->value.size(); ++i) {
      param->value[i] += nudge.uniform(-0.2, 0.2);
    }
  }

  VarPtr loss = eval();
  emm::backward(loss);

  for (const auto& [name, param] : trainables) {
    Tensor grad = param->grad;
    REQUIRE(grad.size() == param->value.size());
    for (size_t i = 0; i < param->value.size(); ++i) {
      // A ReLU kink inside the probe window invalidates the difference
      // quotient without implicating the analytic gradient, so an entry
      // that misses the tolerance is re-measured with smaller windows; a
      // genuine gradient defect fails at every window.
      double err = 0.0;
      for (double h : {1e-5, 1e-6, 1e-7}) {
        double keep = param->value[i];
        param->value[i] = keep + h;
        double up = eval()->value[0];
        param->value[i] = keep - h;
        double down = eval()->value[0];
        param->value[i] = keep;
        double numeric = (up - down) / (2 * h);
        err = std::abs(grad[i] - numeric) /
              std::max({1.0, std::abs(grad[i]), std::abs(numeric)});
        if (err < 1e-4) break;
      }
      INFO(name << " element " << i);
      REQUIRE(err < 1e-4);
    }
  }
}

TEST_CASE("expert inputs must match the level input dim", "[akf]") {
  std::vector<ModelComponent> comps;
  comps.push_back(make_component("m0", "t0", 3, 4, 101));
  std::vector<std::vector<const ModelComponent*>> groups = {{&comps[0]}};
  AkfLevel level =
      emm::make_akf_level(1, groups, 3, 4, 3, false, MtmScore::self, 102);

  std::vector<VarPtr> wrong_dim = {make_leaf(random_batch(4, 5, 103), false)};
  REQUIRE(code_of([&] { emm::run_experts(level, wrong_dim); }) ==
          ErrorCode::dimension);
  std::vector<VarPtr> wrong_count = {make_leaf(random_batch(4, 3, 104), false),
                                     make_leaf(random_batch(4, 3, 105), false)};
  REQUIRE(code_of([&] { emm::run_experts(level, wrong_count); }) ==
          ErrorCode::dimension);
}

TEST_CASE("the task gate checks its expert count", "[akf]") {
  TaskGate gate;
  gate.map = fixed_linear(2, 3, std::vector<double>(6, 0.0),
                          std::vector<double>(3, 0.0));
  VarPtr x = make_leaf(random_batch(2, 2, 110), false);
  VarPtr a = make_leaf(random_batch(2, 4, 111), false);
  VarPtr b = make_leaf(random_batch(2, 4, 112), false);
  REQUIRE(code_of([&] { emm::intra_task_fuse(gate, x, {a, b}); }) ==
          ErrorCode::config);
}

TEST_CASE("partner selection needs at least two tasks", "[akf]") {
  VarPtr probs = emm::softmax_rows(make_leaf(Tensor::matrix(2, 1, {1.0, 2.0}), false));
  REQUIRE(code_of([&] { emm::select_partners(probs, 0); }) ==
          ErrorCode::not_applicable);
}
