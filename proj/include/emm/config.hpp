// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "emm/data.hpp"
#include "emm/deconstruct.hpp"
#include "emm/emm.hpp"
#include "emm/errors.hpp"
#include "emm/model.hpp"

namespace emm {

enum class DatasetKind { csv, synthetic, census_like };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::string path;          // csv
  FeatureSpec columns;       // csv
  size_t rows = 8000;        // generators
  size_t n_tasks = 2;        // synthetic
  double correlation = 0.8;  // synthetic

  std::string describe() const {
    switch (kind) {
      case DatasetKind::csv:
        return "csv:" + path;
      case DatasetKind::synthetic:
        return "synthetic(rows=" + std::to_string(rows) +
               ",tasks=" + std::to_string(n_tasks) +
               ",correlation=" + std::to_string(correlation) + ")";
      case DatasetKind::census_like:
        return "census_like(rows=" + std::to_string(rows) + ")";
    }
    return "unknown";
  }
};

struct ArchSpec {
  std::string name;
  std::vector<uint32_t> hidden;
};

struct RunConfig {
  DatasetConfig dataset;
  std::vector<std::string> tasks;  // optional; checked against the dataset
  std::vector<ArchSpec> architectures;
  SingleTrainConfig pool_training;
  TrainRunConfig fuse_training;
  uint32_t tower_hidden = 0;
  bool use_pretrained = true;
  bool use_mtm = true;
  uint64_t seed = 1;
  TailPolicy tail = TailPolicy::keep;
  TailMode tail_mode = TailMode::strict;
  MtmScore mtm_score = MtmScore::self;
  std::string out_dir = "runs";
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj,
                                const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (!allowed.count(key)) {
      raise(ErrorCode::config, "unknown key '" + key + "' in " + where);
    }
  }
}

inline double require_number(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number()) raise(ErrorCode::config, where + " must be a number");
  return j.get<double>();
}

inline size_t require_count(const nlohmann::json& j, const std::string& where) {
  if (!j.is_number_unsigned()) {
    raise(ErrorCode::config, where + " must be a non-negative integer");
  }
  return j.get<size_t>();
}

inline std::string require_string(const nlohmann::json& j, const std::string& where) {
  if (!j.is_string()) raise(ErrorCode::config, where + " must be a string");
  return j.get<std::string>();
}

inline FeatureSpec parse_columns(const nlohmann::json& arr) {
  if (!arr.is_array()) {
    raise(ErrorCode::config, "dataset.columns must be an array");
  }
  FeatureSpec spec;
  for (const auto& item : arr) {
    if (!item.is_object()) {
      raise(ErrorCode::config, "dataset.columns entries must be objects");
    }
    reject_unknown_keys(item, {"name", "role", "task", "embedding_dim"},
                        "dataset.columns[]");
    ColumnSpec col;
    col.name = require_string(item.at("name"), "column name");
    std::string role = require_string(item.at("role"), "column role");
    if (role == "dense") {
      col.role = ColumnRole::dense;
    } else if (role == "sparse") {
      col.role = ColumnRole::sparse;
    } else if (role == "label") {
      col.role = ColumnRole::label;
    } else {
      raise(ErrorCode::config, "column " + col.name + " has unknown role " + role);
    }
    if (item.contains("task")) col.task = require_string(item["task"], "column task");
    if (col.role == ColumnRole::label && col.task.empty()) col.task = col.name;
    if (item.contains("embedding_dim")) {
      col.embedding_dim =
          static_cast<uint32_t>(require_count(item["embedding_dim"], "embedding_dim"));
    }
    spec.columns.push_back(std::move(col));
  }
  spec.validate();
  return spec;
}

inline DatasetConfig parse_dataset(const nlohmann::json& obj) {
  if (!obj.is_object()) raise(ErrorCode::config, "dataset must be an object");
  reject_unknown_keys(obj, {"kind", "path", "columns", "rows", "tasks", "correlation"},
                      "dataset");
  DatasetConfig ds;
  std::string kind = require_string(obj.at("kind"), "dataset.kind");
  if (kind == "csv") {
    ds.kind = DatasetKind::csv;
    ds.path = require_string(obj.at("path"), "dataset.path");
    ds.columns = parse_columns(obj.at("columns"));
  } else if (kind == "synthetic") {
    ds.kind = DatasetKind::synthetic;
  } else if (kind == "census_like") {
    ds.kind = DatasetKind::census_like;
  } else {
    raise(ErrorCode::config, "unknown dataset kind " + kind);
  }
  if (obj.contains("rows")) ds.rows = require_count(obj["rows"], "dataset.rows");
  if (ds.rows == 0) raise(ErrorCode::config, "dataset.rows must be positive");
  if (obj.contains("tasks")) {
    if (ds.kind != DatasetKind::synthetic) {
      raise(ErrorCode::config, "dataset.tasks applies to synthetic data only");
    }
    ds.n_tasks = require_count(obj["tasks"], "dataset.tasks");
  }
  if (obj.contains("correlation")) {
    if (ds.kind != DatasetKind::synthetic) {
      raise(ErrorCode::config, "dataset.correlation applies to synthetic data only");
    }
    ds.correlation = require_number(obj["correlation"], "dataset.correlation");
  }
  return ds;
}

inline void parse_single_training(const nlohmann::json& obj, SingleTrainConfig* cfg) {
  reject_unknown_keys(
      obj, {"epochs", "batch_size", "learning_rate", "weight_decay", "decoupled_decay"},
      "pool.training");
  if (obj.contains("epochs")) cfg->epochs = require_count(obj["epochs"], "epochs");
  if (obj.contains("batch_size")) {
    cfg->batch_size = require_count(obj["batch_size"], "batch_size");
  }
  if (obj.contains("learning_rate")) {
    cfg->learning_rate = require_number(obj["learning_rate"], "learning_rate");
  }
  if (obj.contains("weight_decay")) {
    cfg->weight_decay = require_number(obj["weight_decay"], "weight_decay");
  }
  if (obj.contains("decoupled_decay")) {
    if (!obj["decoupled_decay"].is_boolean()) {
      raise(ErrorCode::config, "decoupled_decay must be a boolean");
    }
    cfg->decoupled_decay = obj["decoupled_decay"].get<bool>();
  }
  if (cfg->batch_size == 0 || cfg->epochs == 0) {
    raise(ErrorCode::config, "training epochs and batch size must be positive");
  }
}

inline void parse_fuse_training(const nlohmann::json& obj, TrainRunConfig* cfg) {
  reject_unknown_keys(
      obj, {"epochs", "batch_size", "learning_rate", "weight_decay", "decoupled_decay"},
      "fusion.training");
  if (obj.contains("epochs")) cfg->epochs = require_count(obj["epochs"], "epochs");
  if (obj.contains("batch_size")) {
    cfg->batch_size = require_count(obj["batch_size"], "batch_size");
  }
  if (obj.contains("learning_rate")) {
    cfg->learning_rate = require_number(obj["learning_rate"], "learning_rate");
  }
  if (obj.contains("weight_decay")) {
    cfg->weight_decay = require_number(obj["weight_decay"], "weight_decay");
  }
  if (obj.contains("decoupled_decay")) {
    if (!obj["decoupled_decay"].is_boolean()) {
      raise(ErrorCode::config, "decoupled_decay must be a boolean");
    }
    cfg->decoupled_decay = obj["decoupled_decay"].get<bool>();
  }
  if (cfg->batch_size == 0 || cfg->epochs == 0) {
    raise(ErrorCode::config, "training epochs and batch size must be positive");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& root) {
  if (!root.is_object()) raise(ErrorCode::config, "config root must be an object");
  detail::reject_unknown_keys(
      root,
      {"dataset", "tasks", "pool", "fusion", "seed", "tail", "tail_mode",
       "mtm_score", "out_dir"},
      "config");
  RunConfig cfg;
  if (!root.contains("dataset")) raise(ErrorCode::config, "config needs a dataset");
  cfg.dataset = detail::parse_dataset(root["dataset"]);

  if (root.contains("tasks")) {
    if (!root["tasks"].is_array()) {
      raise(ErrorCode::config, "tasks must be an array of names");
    }
    for (const auto& t : root["tasks"]) {
      cfg.tasks.push_back(detail::require_string(t, "tasks[]"));
    }
  }

  if (root.contains("pool")) {
    const auto& pool = root["pool"];
    detail::reject_unknown_keys(pool, {"architectures", "training"}, "pool");
    if (pool.contains("architectures")) {
      if (!pool["architectures"].is_object()) {
        raise(ErrorCode::config, "pool.architectures must map name to widths");
      }
      for (const auto& [name, widths] : pool["architectures"].items()) {
        if (!widths.is_array()) {
          raise(ErrorCode::config, "architecture " + name + " must be a width list");
        }
        ArchSpec arch;
        arch.name = name;
        for (const auto& w : widths) {
          arch.hidden.push_back(
              static_cast<uint32_t>(detail::require_count(w, "width")));
        }
        cfg.architectures.push_back(std::move(arch));
      }
      std::sort(cfg.architectures.begin(), cfg.architectures.end(),
                [](const ArchSpec& a, const ArchSpec& b) { return a.name < b.name; });
    }
    if (pool.contains("training")) {
      detail::parse_single_training(pool["training"], &cfg.pool_training);
    }
  }
  if (cfg.architectures.empty()) {
    cfg.architectures.push_back({"tm1", {8, 8, 8, 8}});
    cfg.architectures.push_back({"tm2", {16, 8, 8, 8, 8}});
  }

  if (root.contains("fusion")) {
    const auto& fusion = root["fusion"];
    detail::reject_unknown_keys(
        fusion, {"training", "tower_hidden", "use_pretrained", "use_mtm"}, "fusion");
    if (fusion.contains("training")) {
      detail::parse_fuse_training(fusion["training"], &cfg.fuse_training);
    }
    if (fusion.contains("tower_hidden")) {
      cfg.tower_hidden = static_cast<uint32_t>(
          detail::require_count(fusion["tower_hidden"], "tower_hidden"));
    }
    if (fusion.contains("use_pretrained")) {
      cfg.use_pretrained = fusion["use_pretrained"].get<bool>();
    }
    if (fusion.contains("use_mtm")) cfg.use_mtm = fusion["use_mtm"].get<bool>();
  }

  if (root.contains("seed")) {
    cfg.seed = detail::require_count(root["seed"], "seed");
  }
  if (root.contains("tail")) {
    std::string tail = detail::require_string(root["tail"], "tail");
    if (tail == "keep") {
      cfg.tail = TailPolicy::keep;
    } else if (tail == "drop") {
      cfg.tail = TailPolicy::drop;
    } else {
      raise(ErrorCode::config, "tail must be keep or drop");
    }
  }
  if (root.contains("tail_mode")) {
    std::string mode = detail::require_string(root["tail_mode"], "tail_mode");
    if (mode == "strict") {
      cfg.tail_mode = TailMode::strict;
    } else if (mode == "adapter") {
      cfg.tail_mode = TailMode::adapter;
    } else {
      raise(ErrorCode::config, "tail_mode must be strict or adapter");
    }
  }
  if (root.contains("mtm_score")) {
    std::string mode = detail::require_string(root["mtm_score"], "mtm_score");
    if (mode == "self") {
      cfg.mtm_score = MtmScore::self;
    } else if (mode == "cross") {
      cfg.mtm_score = MtmScore::cross;
    } else {
      raise(ErrorCode::config, "mtm_score must be self or cross");
    }
  }
  if (root.contains("out_dir")) {
    cfg.out_dir = detail::require_string(root["out_dir"], "out_dir");
  }
  cfg.fuse_training.seed = cfg.seed;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(ErrorCode::config, "cannot open config " + path);
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::config, "config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(root);
}

inline TaskDataset load_dataset(const DatasetConfig& cfg, uint64_t seed) {
  switch (cfg.kind) {
    case DatasetKind::csv:
      return ingest_csv(cfg.path, cfg.columns, seed);
    case DatasetKind::synthetic:
      return make_synthetic(cfg.rows, cfg.n_tasks, cfg.correlation, seed);
    case DatasetKind::census_like:
      return make_census_like(cfg.rows, seed);
  }
  raise(ErrorCode::config, "unhandled dataset kind");
}

}  // namespace emm
