// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "emm/deconstruct.hpp"
#include "emm/emm.hpp"
#include "emm/model.hpp"
#include "emm/rng.hpp"
#include "emm/serialize.hpp"

using emm::ComponentSet;
using emm::EmmBuildConfig;
using emm::EmmModel;
using emm::ErrorCode;
using emm::make_leaf;
using emm::ModelPool;
using emm::TailMode;
using emm::Tensor;
using emm::TrainedModel;
using emm::TrainRunConfig;
using emm::VarPtr;

namespace {

ModelPool small_pool(size_t n_tasks, size_t models_per_task, uint32_t input,
                     uint64_t seed) {
  ModelPool pool;
  for (size_t t = 0; t < n_tasks; ++t) {
    std::string task = "t" + std::to_string(t);
    pool.tasks.push_back(task);
    for (size_t m = 0; m < models_per_task; ++m) {
      // The second model per task is one unit deeper; the extra depth
      // becomes a shared tail level with identity segments elsewhere.
      std::vector<uint32_t> hidden =
          m == 0 ? std::vector<uint32_t>{4, 4} : std::vector<uint32_t>{4, 4, 4};
      pool.models.push_back(emm::build_mlp(
          task + "_m" + std::to_string(m), task, input, hidden,
          seed + 10 * t + m));
    }
  }
  return pool;
}

ComponentSet decompose(const ModelPool& pool) {
  return emm::deconstruct_pool(pool, emm::find_common_layers(pool),
                               TailMode::strict);
}

Tensor random_rows(size_t rows, size_t cols, uint64_t seed) {
  emm::RandomStream rs = emm::stream_for(seed, "rows");
  Tensor t({rows, cols});
  for (size_t i = 0; i < t.size(); ++i) t[i] = rs.normal();
  return t;
}

/// Labels linearly separable per task, so tiny models learn them quickly.
std::vector<std::vector<double>> easy_labels(const Tensor& x, size_t n_tasks) {
  std::vector<std::vector<double>> y(n_tasks);
  for (size_t t = 0; t < n_tasks; ++t) {
    for (size_t r = 0; r < x.rows(); ++r) {
      double v = x.at(r, t % x.cols()) + 0.25 * x.at(r, (t + 1) % x.cols());
      y[t].push_back(v > 0.0 ? 1.0 : 0.0);
    }
  }
  return y;
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

}  // namespace

TEST_CASE("without gating freedom the stack is the component chain plus tower", "[emm]") {
  // One expert per task and no pair merge: every gate mixes a single
  // branch with weight one, so the logits must equal running the original
  // model body and the new tower directly.
  ModelPool pool = small_pool(2, 1, 6, 3);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.use_mtm = false;
  bc.seed = 5;
  EmmModel model = emm::build_emm(set, bc);
  // Fresh towers hold zero output weights, which would make both sides of
  // the comparison identically zero; seed them so the equality is earned.
  emm::RandomStream tower_rs(321);
  for (auto& tw : model.towers) {
    for (size_t i = 0; i < tw.out.w->value.size(); ++i) {
      tw.out.w->value[i] = tower_rs.uniform(-0.5, 0.5);
    }
    for (size_t i = 0; i < tw.out.b->value.size(); ++i) {
      tw.out.b->value[i] = tower_rs.uniform(-0.5, 0.5);
    }
  }

  Tensor x = random_rows(9, 6, 44);
  std::vector<VarPtr> logits = emm::emm_task_logits(model, make_leaf(x, false));
  for (size_t t = 0; t < 2; ++t) {
    VarPtr z = emm::forward_truncated(pool.models[t], make_leaf(x, false));
    VarPtr expect = model.towers[t].logits(z);
    REQUIRE(logits[t]->value.buffer() == expect->value.buffer());
  }
}

TEST_CASE("build and training are bit-deterministic", "[emm]") {
  ModelPool pool = small_pool(2, 2, 6, 7);
  ComponentSet set = decompose(pool);
  Tensor x = random_rows(64, 6, 50);
  auto y = easy_labels(x, 2);
  Tensor xv = random_rows(16, 6, 51);
  auto yv = easy_labels(xv, 2);

  auto run_once = [&] {
    EmmBuildConfig bc;
    bc.seed = 9;
    EmmModel model = emm::build_emm(set, bc);
    TrainRunConfig rc;
    rc.seed = 9;
    rc.epochs = 3;
    rc.batch_size = 16;
    emm::train_emm(model, x, y, xv, yv, rc);
    return model.trainable_values();
  };

  auto first = run_once();
  auto second = run_once();
  REQUIRE(first.size() == second.size());
  for (size_t i = 0; i < first.size(); ++i) {
    REQUIRE(first[i].first == second[i].first);
    REQUIRE(first[i].second.buffer() == second[i].second.buffer());
  }
}

TEST_CASE("logged losses are per-task means of the joint objective", "[emm]") {
  ModelPool pool = small_pool(2, 1, 6, 13);
  ComponentSet set = decompose(pool);
  Tensor x = random_rows(20, 6, 60);
  auto y = easy_labels(x, 2);

  EmmBuildConfig bc;
  bc.seed = 21;
  EmmModel trained = emm::build_emm(set, bc);
  TrainRunConfig rc;
  rc.seed = 21;
  rc.epochs = 1;
  rc.batch_size = 20;  // a single batch per epoch
  auto logs = emm::train_emm(trained, x, y, Tensor(), {}, rc);
  REQUIRE(logs.size() == 1);
  REQUIRE(logs[0].train_loss.size() == 2);

  // A fresh identically seeded model reproduces the pre-step losses.
  EmmModel fresh = emm::build_emm(set, bc);
  std::vector<VarPtr> logits = emm::emm_task_logits(fresh, make_leaf(x, false));
  for (size_t t = 0; t < 2; ++t) {
    Tensor yt({x.rows()});
    for (size_t r = 0; r < x.rows(); ++r) yt[r] = y[t][r];
    VarPtr loss = emm::bce_with_logits_mean(logits[t], yt);
    REQUIRE(logs[0].train_loss[t] ==
            Catch::Approx(loss->value[0]).margin(1e-12));
  }
  for (double v : logs[0].val_auc) REQUIRE(std::isnan(v));
}

TEST_CASE("the stack works for one to four tasks", "[emm]") {
  for (size_t n_tasks : {1u, 2u, 3u, 4u}) {
    ModelPool pool = small_pool(n_tasks, 2, 5, 17 + n_tasks);
    ComponentSet set = decompose(pool);
    EmmBuildConfig bc;
    bc.seed = 23;
    EmmModel model = emm::build_emm(set, bc);
    REQUIRE(model.tasks.size() == n_tasks);
    for (const auto& level : model.levels) {
      REQUIRE(level.has_fusion == (n_tasks >= 2));
    }

    Tensor x = random_rows(32, 5, 70 + n_tasks);
    auto y = easy_labels(x, n_tasks);
    auto probs = emm::emm_forward(model, x);
    REQUIRE(probs.size() == n_tasks);
    for (const auto& p : probs) {
      REQUIRE(p.size() == 32);
      for (double v : p) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
      }
    }

    TrainRunConfig rc;
    rc.seed = 23;
    rc.epochs = 1;
    rc.batch_size = 16;
    auto logs = emm::train_emm(model, x, y, x, y, rc);
    REQUIRE(logs.size() == 1);
    REQUIRE(logs[0].train_loss.size() == n_tasks);
    REQUIRE(logs[0].val_auc.size() == n_tasks);
  }
}

TEST_CASE("pretrained experts stay frozen through training", "[emm]") {
  ModelPool pool = small_pool(2, 2, 6, 29);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 31;
  EmmModel model = emm::build_emm(set, bc);
  std::vector<uint8_t> before = model.component_bytes();

  Tensor x = random_rows(48, 6, 80);
  auto y = easy_labels(x, 2);
  TrainRunConfig rc;
  rc.seed = 31;
  rc.epochs = 2;
  rc.batch_size = 16;
  emm::train_emm(model, x, y, Tensor(), {}, rc);
  REQUIRE(model.component_bytes() == before);

  // The frozen leaves are the pool's own parameters.
  REQUIRE(model.levels[0].tasks[0].experts[0].layers[0].weights ==
          pool.models[0].layers[0].weights);
}

TEST_CASE("scratch experts are fresh and do train", "[emm]") {
  ModelPool pool = small_pool(2, 2, 6, 37);
  ComponentSet set = decompose(pool);
  EmmBuildConfig pre;
  pre.seed = 41;
  EmmBuildConfig scratch = pre;
  scratch.use_pretrained = false;

  EmmModel pre_model = emm::build_emm(set, pre);
  EmmModel scratch_model = emm::build_emm(set, scratch);
  REQUIRE(scratch_model.component_bytes() != pre_model.component_bytes());
  REQUIRE(scratch_model.trainables().size() > pre_model.trainables().size());

  std::vector<uint8_t> before = scratch_model.component_bytes();
  Tensor x = random_rows(48, 6, 81);
  auto y = easy_labels(x, 2);
  TrainRunConfig rc;
  rc.seed = 41;
  rc.epochs = 2;
  rc.batch_size = 16;
  emm::train_emm(scratch_model, x, y, Tensor(), {}, rc);
  REQUIRE(scratch_model.component_bytes() != before);

  // Rebuilding from the same set still sees the original pool parameters.
  EmmModel again = emm::build_emm(set, pre);
  REQUIRE(again.component_bytes() == pre_model.component_bytes());
}

TEST_CASE("disabling the pair merge removes its parameters", "[emm]") {
  ModelPool pool = small_pool(3, 1, 5, 43);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.use_mtm = false;
  bc.seed = 47;
  EmmModel model = emm::build_emm(set, bc);
  for (const auto& level : model.levels) {
    REQUIRE_FALSE(level.has_fusion);
  }
  for (const auto& [name, param] : model.trainables()) {
    REQUIRE(name.find("mtm") == std::string::npos);
    REQUIRE(name.find("fusion") == std::string::npos);
  }
}

TEST_CASE("trainable tensors round-trip through the list format", "[emm]") {
  ModelPool pool = small_pool(2, 2, 6, 53);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 59;
  EmmModel model = emm::build_emm(set, bc);

  Tensor x = random_rows(40, 6, 90);
  auto y = easy_labels(x, 2);
  TrainRunConfig rc;
  rc.seed = 59;
  rc.epochs = 2;
  rc.batch_size = 20;
  emm::train_emm(model, x, y, Tensor(), {}, rc);

  std::filesystem::path path =
      std::filesystem::path(EMM_TEST_TMP) / "emm_trainables.emt";
  std::filesystem::create_directories(path.parent_path());
  emm::save_tensor_list(model.trainable_values(), path);

  EmmModel restored = emm::build_emm(set, bc);
  restored.load_trainable_values(emm::load_tensor_list(path));

  Tensor probe = random_rows(12, 6, 91);
  auto expect = emm::emm_predict(model, probe);
  auto got = emm::emm_predict(restored, probe);
  REQUIRE(got == expect);
}

TEST_CASE("mismatched trainable names are rejected", "[emm]") {
  ModelPool pool = small_pool(2, 1, 5, 61);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 67;
  EmmModel model = emm::build_emm(set, bc);

  auto values = model.trainable_values();
  auto renamed = values;
  renamed[0].first += "_x";
  REQUIRE(code_of([&] { model.load_trainable_values(renamed); }) ==
          ErrorCode::format);

  auto shorter = values;
  shorter.pop_back();
  REQUIRE(code_of([&] { model.load_trainable_values(shorter); }) ==
          ErrorCode::format);

  auto reshaped = values;
  reshaped[0].second = Tensor::zeros({1, 1});
  REQUIRE(code_of([&] { model.load_trainable_values(reshaped); }) ==
          ErrorCode::format);
}

TEST_CASE("sharded prediction is bit-identical", "[emm]") {
  ModelPool pool = small_pool(3, 2, 6, 71);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 73;
  EmmModel model = emm::build_emm(set, bc);

  Tensor x = random_rows(25, 6, 92);
  auto single = emm::emm_predict(model, x, 1);
  for (size_t threads : {2u, 3u, 5u}) {
    REQUIRE(emm::emm_predict(model, x, threads) == single);
  }
}

TEST_CASE("tower width defaults from the final level dim", "[emm]") {
  ModelPool pool = small_pool(2, 1, 6, 79);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 83;
  EmmModel model = emm::build_emm(set, bc);
  // Final level dim is 4, so the default hidden width is max(4, 4/2) = 4.
  REQUIRE(model.towers[0].hidden.out == 4);
  REQUIRE(model.towers[0].out.in == 4);

  bc.tower_hidden = 7;
  EmmModel wide = emm::build_emm(set, bc);
  REQUIRE(wide.towers[0].hidden.out == 7);
  REQUIRE(wide.towers[1].hidden.out == 7);
  REQUIRE(wide.towers[0].out.in == 7);
}

TEST_CASE("training descends on separable data", "[emm]") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelPool pool = small_pool(2, 2, 6, 100 + seed);
    ComponentSet set = decompose(pool);
    EmmBuildConfig bc;
    bc.seed = seed;
    EmmModel model = emm::build_emm(set, bc);

    Tensor x = random_rows(240, 6, 93);
    auto y = easy_labels(x, 2);
    TrainRunConfig rc;
    rc.seed = seed;
    rc.epochs = 5;
    rc.batch_size = 24;
    rc.learning_rate = 3e-3;
    auto logs = emm::train_emm(model, x, y, Tensor(), {}, rc);
    REQUIRE(logs.size() == 5);
    for (size_t e = 1; e < logs.size(); ++e) {
      double prev = logs[e - 1].train_loss[0] + logs[e - 1].train_loss[1];
      double cur = logs[e].train_loss[0] + logs[e].train_loss[1];
      INFO("seed " << seed << " epoch " << e);
      REQUIRE(cur < prev);
    }
  }
}

TEST_CASE("single-class validation folds report no ranking score", "[emm]") {
  ModelPool pool = small_pool(2, 1, 5, 107);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 109;
  EmmModel model = emm::build_emm(set, bc);

  Tensor x = random_rows(16, 5, 94);
  auto y = easy_labels(x, 2);
  Tensor xv = random_rows(6, 5, 95);
  std::vector<std::vector<double>> yv = {
      std::vector<double>(6, 1.0),             // single class: no score
      {0.0, 1.0, 0.0, 1.0, 0.0, 1.0}};         // mixed: score defined
  TrainRunConfig rc;
  rc.seed = 109;
  rc.epochs = 1;
  rc.batch_size = 16;
  auto logs = emm::train_emm(model, x, y, xv, yv, rc);
  REQUIRE(std::isnan(logs[0].val_auc[0]));
  REQUIRE_FALSE(std::isnan(logs[0].val_auc[1]));
}

TEST_CASE("label shape errors are rejected before training", "[emm]") {
  ModelPool pool = small_pool(2, 1, 5, 113);
  ComponentSet set = decompose(pool);
  EmmBuildConfig bc;
  bc.seed = 127;
  EmmModel model = emm::build_emm(set, bc);
  Tensor x = random_rows(8, 5, 96);
  TrainRunConfig rc;
  rc.epochs = 1;

  std::vector<std::vector<double>> wrong_tasks = {std::vector<double>(8, 1.0)};
  REQUIRE(code_of([&] {
            emm::train_emm(model, x, wrong_tasks, Tensor(), {}, rc);
          }) == ErrorCode::data);

  std::vector<std::vector<double>> wrong_rows = {std::vector<double>(8, 1.0),
                                                 std::vector<double>(7, 0.0)};
  REQUIRE(code_of([&] {
            emm::train_emm(model, x, wrong_rows, Tensor(), {}, rc);
          }) == ErrorCode::data);

  Tensor narrow = random_rows(4, 3, 97);
  REQUIRE(code_of([&] { emm::emm_forward(model, narrow); }) ==
          ErrorCode::dimension);
}
