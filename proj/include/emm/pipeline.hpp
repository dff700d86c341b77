// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "emm/config.hpp"
#include "emm/data.hpp"
#include "emm/deconstruct.hpp"
#include "emm/emm.hpp"
#include "emm/metrics.hpp"
#include "emm/model.hpp"
#include "emm/serialize.hpp"

namespace emm {

// ---------------------------------------------------------------------------
// Run directory layout
// ---------------------------------------------------------------------------

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path models;
  std::filesystem::path manifests;
  std::filesystem::path logs;
  std::filesystem::path reports;
};

/// Run directory name: EMM_RUN_ID when set, else UTC timestamp plus seed.
inline std::string default_run_id(uint64_t seed) {
  if (const char* env = std::getenv("EMM_RUN_ID")) {
    if (*env) return env;
  }
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-seed" << seed;
  return os.str();
}

inline RunPaths make_run_paths(const std::string& out_dir, uint64_t seed) {
  RunPaths p;
  p.root = std::filesystem::path(out_dir) / default_run_id(seed);
  p.models = p.root / "models";
  p.manifests = p.root / "manifests";
  p.logs = p.root / "logs";
  p.reports = p.root / "reports";
  for (const auto& d : {p.models, p.manifests, p.logs, p.reports}) {
    std::error_code ec;
    std::filesystem::create_directories(d, ec);
    if (ec) raise(ErrorCode::data, "cannot create " + d.string());
  }
  return p;
}

// ---------------------------------------------------------------------------
// Pool training
// ---------------------------------------------------------------------------

struct PoolResult {
  ModelPool pool;
  InputEncoder encoder;
  Tensor features;  // whole dataset through the frozen encoder
  std::vector<std::vector<double>> single_auc;  // [task][model] on test rows
};

/// Trains one model together with the input encoder. The tables learn from
/// this first task only; afterwards the caller freezes them so every later
/// consumer sees one fixed representation.
inline void train_with_encoder(TrainedModel& model, InputEncoder& enc,
                               const TaskDataset& ds,
                               const std::vector<size_t>& rows,
                               const std::vector<double>& labels,
                               const SingleTrainConfig& config, uint64_t seed) {
  if (rows.size() != labels.size()) {
    raise(ErrorCode::data, "feature and label row counts differ");
  }
  AdamConfig ac;
  ac.learning_rate = config.learning_rate;
  ac.weight_decay = config.weight_decay;
  ac.decoupled_decay = config.decoupled_decay;
  Adam opt(ac);
  for (const auto& [id, param] : enc.trainables()) opt.add_parameter(id, param);
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const ModelLayer& l = model.layers[i];
    if (!l.weights) continue;
    opt.add_parameter(model.id + "/layer" + std::to_string(i) + "/w", l.weights);
    opt.add_parameter(model.id + "/layer" + std::to_string(i) + "/b", l.bias);
  }

  size_t n = rows.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    RandomStream rs =
        stream_for(seed, model.id + "/shuffle/" + std::to_string(epoch));
    rs.shuffle(order);
    for (size_t start = 0; start < n; start += config.batch_size) {
      size_t b = std::min(config.batch_size, n - start);
      std::vector<size_t> batch_rows(b);
      Tensor yb({b});
      for (size_t r = 0; r < b; ++r) {
        batch_rows[r] = rows[order[start + r]];
        yb[r] = labels[order[start + r]];
      }
      VarPtr x = encoder_batch(enc, ds, batch_rows);
      VarPtr loss = bce_with_logits_mean(forward_logits(model, x), yb);
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

/// Trains the whole pool: every architecture for every task, first model
/// jointly with the encoder. Reports per-model AUC on the held-out test rows.
inline PoolResult train_pool(const RunConfig& cfg, const TaskDataset& ds) {
  if (!cfg.tasks.empty() && cfg.tasks != ds.tasks) {
    std::string got;
    for (const std::string& t : ds.tasks) got += (got.empty() ? "" : ",") + t;
    raise(ErrorCode::config, "configured task list does not match dataset tasks (" +
                                 got + ")");
  }
  if (cfg.architectures.empty()) {
    raise(ErrorCode::config, "pool needs at least one architecture");
  }

  PoolResult out;
  out.pool.tasks = ds.tasks;
  out.encoder = make_input_encoder(ds, cfg.seed);
  std::vector<size_t> train_rows = ds.rows_of(Split::train);
  std::vector<size_t> test_rows = ds.rows_of(Split::test);
  if (train_rows.empty()) raise(ErrorCode::data, "no training rows");
  uint32_t width = out.encoder.encoded_width();

  bool first = true;
  for (size_t t = 0; t < ds.tasks.size(); ++t) {
    std::vector<double> y_train = ds.labels_at(t, train_rows);
    for (const ArchSpec& arch : cfg.architectures) {
      std::string id = ds.tasks[t] + "_" + arch.name;
      TrainedModel model = build_mlp(id, ds.tasks[t], width, arch.hidden, cfg.seed);
      if (first) {
        train_with_encoder(model, out.encoder, ds, train_rows, y_train,
                           cfg.pool_training, cfg.seed);
        out.encoder.set_frozen(true);
        out.features = encode_dataset(out.encoder, ds);
        first = false;
      } else {
        train_single(model, rows_subset(out.features, train_rows), y_train,
                     cfg.pool_training, cfg.seed);
      }
      out.pool.models.push_back(std::move(model));
    }
  }

  out.single_auc.resize(ds.tasks.size());
  if (!test_rows.empty()) {
    Tensor x_test = rows_subset(out.features, test_rows);
    for (size_t t = 0; t < ds.tasks.size(); ++t) {
      std::vector<double> y_test = ds.labels_at(t, test_rows);
      for (const TrainedModel* m : out.pool.models_for_task(ds.tasks[t])) {
        out.single_auc[t].push_back(auc(predict_proba(*m, x_test), y_test));
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prepared runs and fusion variants
// ---------------------------------------------------------------------------

struct PreparedRun {
  RunConfig cfg;
  TaskDataset ds;
  PoolResult pool;
  CommonLayerSet common;
  ComponentSet components;
  Tensor x_train, x_val, x_test;
  std::vector<std::vector<double>> y_train, y_val, y_test;  // [task][row]
};

/// Aligns the pool, splits it into components, and caches the per-split
/// feature and label views. Assumes cfg, ds, and pool are already in place.
inline void finish_prepare(PreparedRun* prep) {
  const RunConfig& cfg = prep->cfg;
  prep->common = find_common_layers(prep->pool.pool);
  prep->components =
      deconstruct_pool(prep->pool.pool, prep->common, cfg.tail_mode, cfg.tail);

  for (Split s : {Split::train, Split::val, Split::test}) {
    std::vector<size_t> rows = prep->ds.rows_of(s);
    Tensor x = rows.empty() ? Tensor() : rows_subset(prep->pool.features, rows);
    std::vector<std::vector<double>> y;
    for (size_t t = 0; t < prep->ds.tasks.size(); ++t) {
      y.push_back(prep->ds.labels_at(t, rows));
    }
    switch (s) {
      case Split::train:
        prep->x_train = std::move(x);
        prep->y_train = std::move(y);
        break;
      case Split::val:
        prep->x_val = std::move(x);
        prep->y_val = std::move(y);
        break;
      case Split::test:
        prep->x_test = std::move(x);
        prep->y_test = std::move(y);
        break;
    }
  }
}

inline PreparedRun prepare_run(const RunConfig& cfg) {
  PreparedRun prep;
  prep.cfg = cfg;
  prep.ds = load_dataset(cfg.dataset, cfg.seed);
  prep.pool = train_pool(cfg, prep.ds);
  finish_prepare(&prep);
  return prep;
}

/// Pool loaded from model files written by an earlier run. A sparse dataset
/// additionally needs the encoder file saved alongside them; a dense-only
/// one gets the identity encoding.
inline PoolResult pool_from_files(const TaskDataset& ds,
                                  const std::vector<std::string>& model_files,
                                  const std::string& encoder_file) {
  if (model_files.empty()) raise(ErrorCode::config, "no model files given");
  PoolResult out;
  out.pool.tasks = ds.tasks;
  for (const std::string& f : model_files) {
    TrainedModel m = load_model(f);
    bool known = false;
    for (const std::string& t : ds.tasks) known = known || t == m.task;
    if (!known) {
      raise(ErrorCode::config,
            "model " + m.id + " is for task " + m.task + " which the dataset lacks");
    }
    out.pool.models.push_back(std::move(m));
  }
  out.pool.validate();

  if (!encoder_file.empty()) {
    out.encoder = encoder_from_model(load_model(encoder_file), ds.dense_width);
  } else {
    if (!ds.codes.empty()) {
      raise(ErrorCode::config,
            "dataset has sparse columns; pass the encoder file saved with the pool");
    }
    out.encoder.dense_width = ds.dense_width;
  }
  out.encoder.set_frozen(true);
  out.features = encode_dataset(out.encoder, ds);
  if (out.pool.models.front().input_dim() != out.features.cols()) {
    raise(ErrorCode::dimension,
          "pool expects input dim " +
              std::to_string(out.pool.models.front().input_dim()) +
              " but the encoded dataset has " + std::to_string(out.features.cols()));
  }

  std::vector<size_t> test_rows = ds.rows_of(Split::test);
  out.single_auc.resize(ds.tasks.size());
  if (!test_rows.empty()) {
    Tensor x_test = rows_subset(out.features, test_rows);
    for (size_t t = 0; t < ds.tasks.size(); ++t) {
      std::vector<double> y_test = ds.labels_at(t, test_rows);
      for (const TrainedModel* m : out.pool.models_for_task(ds.tasks[t])) {
        out.single_auc[t].push_back(auc(predict_proba(*m, x_test), y_test));
      }
    }
  }
  return out;
}

inline PreparedRun prepare_run_with_pool(const RunConfig& cfg, TaskDataset ds,
                                         PoolResult pool) {
  PreparedRun prep;
  prep.cfg = cfg;
  prep.ds = std::move(ds);
  prep.pool = std::move(pool);
  finish_prepare(&prep);
  return prep;
}

inline std::string variant_name(bool use_pretrained, bool use_mtm) {
  if (use_pretrained) return use_mtm ? "full" : "baseline+p";
  return use_mtm ? "baseline+MTM" : "baseline";
}

struct VariantResult {
  std::string variant;
  EmmModel model;
  std::vector<EpochLog> logs;
  std::vector<double> task_auc;  // test split
  std::vector<GainEntry> gains;
  std::vector<uint8_t> frozen_before, frozen_after;
};

inline VariantResult run_variant(
    const PreparedRun& prep, bool use_pretrained, bool use_mtm,
    const std::function<void(const EpochLog&)>& on_epoch = nullptr) {
  EmmBuildConfig build;
  build.use_pretrained = use_pretrained;
  build.use_mtm = use_mtm;
  build.score_mode = prep.cfg.mtm_score;
  build.tower_hidden = prep.cfg.tower_hidden;
  build.seed = prep.cfg.seed;

  VariantResult out;
  out.variant = variant_name(use_pretrained, use_mtm);
  out.model = build_emm(prep.components, build);
  out.frozen_before = out.model.component_bytes();
  out.logs = train_emm(out.model, prep.x_train, prep.y_train, prep.x_val,
                       prep.y_val, prep.cfg.fuse_training, on_epoch);
  out.frozen_after = out.model.component_bytes();

  std::vector<std::vector<double>> probs =
      emm_predict(out.model, prep.x_test, prep.cfg.fuse_training.eval_threads);
  for (size_t t = 0; t < prep.ds.tasks.size(); ++t) {
    out.task_auc.push_back(auc(probs[t], prep.y_test[t]));
  }
  out.gains = gain_report(prep.ds.tasks, out.task_auc, prep.pool.single_auc);
  return out;
}

// ---------------------------------------------------------------------------
// JSON emission
// ---------------------------------------------------------------------------

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json ds;
  switch (cfg.dataset.kind) {
    case DatasetKind::csv: {
      ds["kind"] = "csv";
      ds["path"] = cfg.dataset.path;
      nlohmann::json cols = nlohmann::json::array();
      for (const ColumnSpec& c : cfg.dataset.columns.columns) {
        nlohmann::json col;
        col["name"] = c.name;
        col["role"] = c.role == ColumnRole::dense
                          ? "dense"
                          : (c.role == ColumnRole::sparse ? "sparse" : "label");
        if (!c.task.empty()) col["task"] = c.task;
        if (c.role == ColumnRole::sparse) col["embedding_dim"] = c.embedding_dim;
        cols.push_back(col);
      }
      ds["columns"] = cols;
      break;
    }
    case DatasetKind::synthetic:
      ds["kind"] = "synthetic";
      ds["rows"] = cfg.dataset.rows;
      ds["tasks"] = cfg.dataset.n_tasks;
      ds["correlation"] = cfg.dataset.correlation;
      break;
    case DatasetKind::census_like:
      ds["kind"] = "census_like";
      ds["rows"] = cfg.dataset.rows;
      break;
  }

  nlohmann::json archs;
  for (const ArchSpec& a : cfg.architectures) archs[a.name] = a.hidden;
  nlohmann::json root;
  root["dataset"] = ds;
  root["pool"] = {{"architectures", archs},
                  {"training",
                   {{"epochs", cfg.pool_training.epochs},
                    {"batch_size", cfg.pool_training.batch_size},
                    {"learning_rate", cfg.pool_training.learning_rate},
                    {"weight_decay", cfg.pool_training.weight_decay},
                    {"decoupled_decay", cfg.pool_training.decoupled_decay}}}};
  root["fusion"] = {{"training",
                     {{"epochs", cfg.fuse_training.epochs},
                      {"batch_size", cfg.fuse_training.batch_size},
                      {"learning_rate", cfg.fuse_training.learning_rate},
                      {"weight_decay", cfg.fuse_training.weight_decay},
                      {"decoupled_decay", cfg.fuse_training.decoupled_decay}}},
                    {"tower_hidden", cfg.tower_hidden},
                    {"use_pretrained", cfg.use_pretrained},
                    {"use_mtm", cfg.use_mtm}};
  root["seed"] = cfg.seed;
  root["tail"] = cfg.tail == TailPolicy::keep ? "keep" : "drop";
  root["tail_mode"] = cfg.tail_mode == TailMode::strict ? "strict" : "adapter";
  root["mtm_score"] = cfg.mtm_score == MtmScore::self ? "self" : "cross";
  root["out_dir"] = cfg.out_dir;
  return root;
}

inline nlohmann::json component_manifest_json(const ComponentSet& set,
                                              const CommonLayerSet& common,
                                              const RunConfig& cfg) {
  nlohmann::json root;
  root["input_dim"] = set.input_dim;
  root["level_count"] = set.level_count;
  root["level_dims"] = set.level_dims;
  root["tail"] = cfg.tail == TailPolicy::keep ? "keep" : "drop";
  root["tail_mode"] = cfg.tail_mode == TailMode::strict ? "strict" : "adapter";
  root["tasks"] = set.tasks;
  nlohmann::json entries = nlohmann::json::array();
  for (size_t i = 0; i < set.entries.size(); ++i) {
    const ComponentSet::Entry& e = set.entries[i];
    nlohmann::json je;
    je["model"] = e.model_id;
    je["task"] = e.task;
    if (i < common.cuts.size()) {
      // Prefix lengths: cut k keeps the first cuts[k] layers of the model.
      std::vector<size_t> prefix;
      for (size_t last : common.cuts[i]) prefix.push_back(last + 1);
      je["cuts"] = prefix;
    }
    nlohmann::json comps = nlohmann::json::array();
    for (const ModelComponent& c : e.components) {
      nlohmann::json jc;
      jc["level"] = c.level;
      jc["in_dim"] = c.in_dim;
      jc["out_dim"] = c.out_dim;
      jc["identity"] = c.is_identity();
      if (c.needs_adapter) jc["adapter_out"] = c.adapter_out;
      nlohmann::json layers = nlohmann::json::array();
      for (const ModelLayer& l : c.layers) layers.push_back(l.sig.to_string());
      jc["layers"] = layers;
      comps.push_back(jc);
    }
    je["components"] = comps;
    entries.push_back(je);
  }
  root["models"] = entries;
  return root;
}

/// Two line-delimited records per task and epoch, train loss then val AUC.
/// Absent quantities are emitted as nulls so every record has one schema.
inline void append_metric_records(std::ostream& os, const EpochLog& log,
                                  const std::vector<std::string>& tasks) {
  for (size_t t = 0; t < tasks.size(); ++t) {
    nlohmann::json train;
    train["epoch"] = log.epoch;
    train["task"] = tasks[t];
    train["split"] = "train";
    train["loss"] = log.train_loss[t];
    train["auc"] = nullptr;
    os << train.dump() << "\n";
    nlohmann::json val;
    val["epoch"] = log.epoch;
    val["task"] = tasks[t];
    val["split"] = "val";
    val["loss"] = nullptr;
    if (t < log.val_auc.size() && !std::isnan(log.val_auc[t])) {
      val["auc"] = log.val_auc[t];
    } else {
      val["auc"] = nullptr;
    }
    os << val.dump() << "\n";
  }
}

inline nlohmann::json report_json(const RunConfig& cfg, const std::string& variant,
                                  const std::vector<GainEntry>& gains) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const GainEntry& g : gains) {
    tasks.push_back({{"name", g.task},
                     {"auc", g.auc},
                     {"reference_auc", g.reference},
                     {"gain", g.gain}});
  }
  return nlohmann::json{{"dataset", cfg.dataset.describe()},
                        {"seed", cfg.seed},
                        {"variant", variant},
                        {"tasks", tasks}};
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) raise(ErrorCode::data, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Fused model bundles
// ---------------------------------------------------------------------------

constexpr uint32_t kBundleVersion = 1;

/// Writes everything eval needs into one directory: the pooled model files,
/// the frozen encoder, the trainable tensors, and a manifest tying them to
/// the generating config. Model bytes are deterministic in (config, seed).
inline void save_bundle(const std::filesystem::path& dir, const PreparedRun& prep,
                        const VariantResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) raise(ErrorCode::data, "cannot create " + dir.string());

  nlohmann::json manifest;
  manifest["format"] = "emm-bundle";
  manifest["version"] = kBundleVersion;
  manifest["variant"] = result.variant;
  RunConfig cfg = prep.cfg;
  cfg.use_pretrained = result.model.use_pretrained;
  cfg.use_mtm = result.model.use_mtm;
  manifest["config"] = run_config_to_json(cfg);
  manifest["tasks"] = prep.ds.tasks;
  manifest["dense_width"] = prep.ds.dense_width;
  manifest["input_dim"] = result.model.input_dim;

  nlohmann::json files = nlohmann::json::array();
  for (const TrainedModel& m : prep.pool.pool.models) {
    std::string name = m.id + ".emm";
    save_model(m, dir / name);
    files.push_back(name);
  }
  manifest["models"] = files;
  save_model(encoder_to_model(prep.pool.encoder), dir / "encoder.emm");
  manifest["encoder"] = "encoder.emm";
  save_tensor_list(result.model.trainable_values(), dir / "trainables.emt");
  manifest["trainables"] = "trainables.emt";

  nlohmann::json reference;
  for (const GainEntry& g : result.gains) reference[g.task] = g.reference;
  manifest["reference_auc"] = reference;
  write_json_file(dir / "manifest.json", manifest);
}

struct LoadedBundle {
  RunConfig cfg;
  std::string variant;
  ModelPool pool;
  InputEncoder encoder;
  EmmModel model;
  std::vector<std::pair<std::string, double>> reference_auc;
};

inline LoadedBundle load_bundle(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) raise(ErrorCode::data, "cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::format, std::string("bundle manifest parse error: ") + e.what());
  }
  if (!manifest.contains("format") || manifest["format"] != "emm-bundle") {
    raise(ErrorCode::format, "not a model bundle: " + dir.string());
  }
  if (manifest["version"].get<uint32_t>() != kBundleVersion) {
    raise(ErrorCode::version,
          "unsupported bundle version " + manifest["version"].dump());
  }

  LoadedBundle bundle;
  bundle.cfg = parse_run_config(manifest["config"]);
  bundle.variant = manifest["variant"].get<std::string>();
  bundle.pool.tasks = manifest["tasks"].get<std::vector<std::string>>();
  for (const auto& name : manifest["models"]) {
    bundle.pool.models.push_back(load_model(dir / name.get<std::string>()));
  }
  bundle.pool.validate();

  size_t dense_width = manifest["dense_width"].get<size_t>();
  bundle.encoder = encoder_from_model(
      load_model(dir / manifest["encoder"].get<std::string>()), dense_width);
  bundle.encoder.set_frozen(true);

  CommonLayerSet common = find_common_layers(bundle.pool);
  ComponentSet components = deconstruct_pool(bundle.pool, common,
                                             bundle.cfg.tail_mode, bundle.cfg.tail);
  EmmBuildConfig build;
  build.use_pretrained = bundle.cfg.use_pretrained;
  build.use_mtm = bundle.cfg.use_mtm;
  build.score_mode = bundle.cfg.mtm_score;
  build.tower_hidden = bundle.cfg.tower_hidden;
  build.seed = bundle.cfg.seed;
  bundle.model = build_emm(components, build);
  bundle.model.load_trainable_values(
      load_tensor_list(dir / manifest["trainables"].get<std::string>()));

  if (manifest.contains("reference_auc")) {
    for (const auto& [task, value] : manifest["reference_auc"].items()) {
      bundle.reference_auc.emplace_back(task, value.get<double>());
    }
  }
  return bundle;
}

}  // namespace emm
