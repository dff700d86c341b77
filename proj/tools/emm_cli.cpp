// SPDX-License-Identifier: Apache-2.0
//
// emm_cli: train a pool of single-task models, align and split them into
// component levels, fuse the levels into one multi-task model, and evaluate.
//
// Subcommands: train-single, deconstruct, fuse, eval, ablate, adapt.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emm/pipeline.hpp"

namespace {

using emm::ErrorCode;
using emm::RunConfig;
using emm::RunPaths;

size_t env_threads() {
  const char* env = std::getenv("EMM_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1 || v > 64) {
    emm::raise(ErrorCode::config, "EMM_THREADS must be an integer in [1, 64]");
  }
  return static_cast<size_t>(v);
}

struct CommonOpts {
  std::string config_path;
  long long seed = -1;
  long long tasks = 0;
  std::string out;
  std::string tail;
  std::string tail_mode;
  std::string mtm_score;
};

void add_common(CLI::App* cmd, CommonOpts* o, bool config_required = true) {
  CLI::Option* c = cmd->add_option("--config", o->config_path,
                                   "run configuration JSON file");
  if (config_required) c->required();
  cmd->add_option("--seed", o->seed, "override the config seed");
  cmd->add_option("--tasks", o->tasks, "synthetic data: number of tasks");
  cmd->add_option("--out", o->out, "override the output directory");
  cmd->add_option("--tail", o->tail, "trailing segments: keep or drop")
      ->check(CLI::IsMember({"keep", "drop"}));
  cmd->add_option("--tail-mode", o->tail_mode,
                  "trailing dim disagreement: strict or adapter")
      ->check(CLI::IsMember({"strict", "adapter"}));
  cmd->add_option("--mtm-score", o->mtm_score,
                  "attention score mode: self or cross")
      ->check(CLI::IsMember({"self", "cross"}));
}

void apply_overrides(RunConfig* cfg, const CommonOpts& o) {
  if (o.seed >= 0) cfg->seed = static_cast<uint64_t>(o.seed);
  if (!o.out.empty()) cfg->out_dir = o.out;
  if (o.tasks != 0) {
    if (o.tasks < 1) emm::raise(ErrorCode::config, "--tasks must be positive");
    if (cfg->dataset.kind != emm::DatasetKind::synthetic) {
      emm::raise(ErrorCode::config, "--tasks applies to synthetic datasets only");
    }
    cfg->dataset.n_tasks = static_cast<size_t>(o.tasks);
    cfg->tasks.clear();
  }
  if (o.tail == "keep") cfg->tail = emm::TailPolicy::keep;
  if (o.tail == "drop") cfg->tail = emm::TailPolicy::drop;
  if (o.tail_mode == "strict") cfg->tail_mode = emm::TailMode::strict;
  if (o.tail_mode == "adapter") cfg->tail_mode = emm::TailMode::adapter;
  if (o.mtm_score == "self") cfg->mtm_score = emm::MtmScore::self;
  if (o.mtm_score == "cross") cfg->mtm_score = emm::MtmScore::cross;
  cfg->fuse_training.seed = cfg->seed;
  cfg->fuse_training.eval_threads = env_threads();
}

RunConfig effective_config(const CommonOpts& o) {
  if (o.config_path.empty()) emm::raise(ErrorCode::config, "--config is required");
  RunConfig cfg = emm::load_run_config(o.config_path);
  apply_overrides(&cfg, o);
  return cfg;
}

void parse_variant(const std::string& name, bool* use_pretrained, bool* use_mtm) {
  if (name == "full") {
    *use_pretrained = true;
    *use_mtm = true;
  } else if (name == "baseline+p") {
    *use_pretrained = true;
    *use_mtm = false;
  } else if (name == "baseline+MTM") {
    *use_pretrained = false;
    *use_mtm = true;
  } else if (name == "baseline") {
    *use_pretrained = false;
    *use_mtm = false;
  } else {
    emm::raise(ErrorCode::config,
               "unknown variant " + name +
                   " (expected full, baseline, baseline+p, or baseline+MTM)");
  }
}

// -- train-single -----------------------------------------------------------

int cmd_train_single(const CommonOpts& o) {
  RunConfig cfg = effective_config(o);
  RunPaths paths = emm::make_run_paths(cfg.out_dir, cfg.seed);
  emm::TaskDataset ds = emm::load_dataset(cfg.dataset, cfg.seed);
  emm::PoolResult pool = emm::train_pool(cfg, ds);

  nlohmann::json models = nlohmann::json::array();
  for (const emm::TrainedModel& m : pool.pool.models) {
    std::string name = m.id + ".emm";
    emm::save_model(m, paths.models / name);
    models.push_back({{"file", name}, {"task", m.task}});
  }
  emm::save_model(emm::encoder_to_model(pool.encoder), paths.models / "encoder.emm");

  for (size_t t = 0; t < ds.tasks.size(); ++t) {
    std::vector<const emm::TrainedModel*> task_models =
        pool.pool.models_for_task(ds.tasks[t]);
    for (size_t j = 0; j < task_models.size(); ++j) {
      for (auto& entry : models) {
        if (entry["file"] == task_models[j]->id + ".emm") {
          entry["auc"] = pool.single_auc[t][j];
        }
      }
      std::cout << task_models[j]->id << "  test auc " << std::fixed
                << std::setprecision(5) << pool.single_auc[t][j] << "\n";
    }
  }
  nlohmann::json report{{"dataset", cfg.dataset.describe()},
                        {"seed", cfg.seed},
                        {"models", models}};
  emm::write_json_file(paths.reports / "pool_report.json", report);
  std::cout << "wrote " << (paths.models / "*.emm").string() << " and "
            << (paths.reports / "pool_report.json").string() << "\n";
  return 0;
}

// -- deconstruct --------------------------------------------------------------

int cmd_deconstruct(const CommonOpts& o, const std::vector<std::string>& files,
                    const std::string& encoder_file) {
  RunConfig cfg = effective_config(o);
  emm::ModelPool pool;
  if (!files.empty()) {
    for (const std::string& f : files) pool.models.push_back(emm::load_model(f));
    for (const emm::TrainedModel& m : pool.models) {
      bool seen = false;
      for (const std::string& t : pool.tasks) seen = seen || t == m.task;
      if (!seen) pool.tasks.push_back(m.task);
    }
    pool.validate();
  } else {
    emm::TaskDataset ds = emm::load_dataset(cfg.dataset, cfg.seed);
    emm::PoolResult trained = emm::train_pool(cfg, ds);
    pool = std::move(trained.pool);
  }
  (void)encoder_file;

  emm::CommonLayerSet common = emm::find_common_layers(pool);
  emm::ComponentSet comps =
      emm::deconstruct_pool(pool, common, cfg.tail_mode, cfg.tail);

  RunPaths paths = emm::make_run_paths(cfg.out_dir, cfg.seed);
  std::filesystem::path manifest = paths.manifests / "components.json";
  emm::write_json_file(manifest, emm::component_manifest_json(comps, common, cfg));

  std::cout << "common units: " << common.unit_count() << ", levels: "
            << comps.level_count << ", dims:";
  for (uint32_t d : comps.level_dims) std::cout << " " << d;
  std::cout << "\ncomponents per model: "
            << (comps.entries.empty() ? 0 : comps.entries[0].components.size())
            << ", total: "
            << (comps.entries.empty() ? 0
                                      : comps.entries.size() *
                                            comps.entries[0].components.size())
            << "\nwrote " << manifest.string() << "\n";
  return 0;
}

// -- fuse / ablate ------------------------------------------------------------

emm::VariantResult run_and_record(const emm::PreparedRun& prep,
                                  const RunPaths& paths, bool use_pretrained,
                                  bool use_mtm, const std::string& log_prefix) {
  std::string variant = emm::variant_name(use_pretrained, use_mtm);
  std::ofstream mlog(paths.logs / (log_prefix + variant + "_metrics.jsonl"));
  if (!mlog) {
    emm::raise(ErrorCode::data, "cannot write metrics log under " +
                                    paths.logs.string());
  }
  emm::VariantResult res =
      emm::run_variant(prep, use_pretrained, use_mtm,
                       [&](const emm::EpochLog& log) {
                         emm::append_metric_records(mlog, log, prep.ds.tasks);
                         mlog.flush();
                       });
  emm::write_json_file(paths.reports / (log_prefix + variant + "_report.json"),
                       emm::report_json(prep.cfg, res.variant, res.gains));
  emm::save_bundle(paths.models / (log_prefix + "emm_" + variant), prep, res);
  std::cout << "variant " << res.variant << "\n"
            << emm::format_gain_table(res.gains);
  return res;
}

emm::PreparedRun prepare_from_opts(const RunConfig& cfg,
                                   const std::vector<std::string>& files,
                                   const std::string& encoder_file) {
  emm::TaskDataset ds = emm::load_dataset(cfg.dataset, cfg.seed);
  if (files.empty()) {
    emm::PoolResult pool = emm::train_pool(cfg, ds);
    return emm::prepare_run_with_pool(cfg, std::move(ds), std::move(pool));
  }
  emm::PoolResult pool = emm::pool_from_files(ds, files, encoder_file);
  return emm::prepare_run_with_pool(cfg, std::move(ds), std::move(pool));
}

int cmd_fuse(const CommonOpts& o, const std::string& ablate,
             const std::vector<std::string>& files,
             const std::string& encoder_file) {
  RunConfig cfg = effective_config(o);
  RunPaths paths = emm::make_run_paths(cfg.out_dir, cfg.seed);
  emm::PreparedRun prep = prepare_from_opts(cfg, files, encoder_file);
  emm::write_json_file(paths.manifests / "components.json",
                       emm::component_manifest_json(prep.components, prep.common,
                                                    cfg));

  if (ablate == "all") {
    nlohmann::json variants = nlohmann::json::array();
    for (auto [up, um] : {std::pair{false, false}, std::pair{false, true},
                          std::pair{true, false}, std::pair{true, true}}) {
      emm::VariantResult res = run_and_record(prep, paths, up, um, "");
      variants.push_back(emm::report_json(cfg, res.variant, res.gains));
    }
    nlohmann::json combined{{"dataset", cfg.dataset.describe()},
                            {"seed", cfg.seed},
                            {"variants", variants}};
    emm::write_json_file(paths.reports / "ablation_report.json", combined);
    std::cout << "wrote " << (paths.reports / "ablation_report.json").string()
              << "\n";
    return 0;
  }

  bool up = cfg.use_pretrained;
  bool um = cfg.use_mtm;
  if (!ablate.empty() && ablate != "none") parse_variant(ablate, &up, &um);
  run_and_record(prep, paths, up, um, "");
  return 0;
}

// -- eval ---------------------------------------------------------------------

int cmd_eval(const CommonOpts& o, const std::string& model_path,
             const std::string& encoder_file) {
  if (model_path.empty()) emm::raise(ErrorCode::config, "--model is required");
  size_t threads = env_threads();

  if (std::filesystem::is_directory(model_path)) {
    emm::LoadedBundle bundle = emm::load_bundle(model_path);
    RunConfig cfg = bundle.cfg;
    if (!o.config_path.empty()) {
      RunConfig override_cfg = emm::load_run_config(o.config_path);
      cfg.dataset = override_cfg.dataset;
    }
    if (o.seed >= 0) cfg.seed = static_cast<uint64_t>(o.seed);
    if (!o.out.empty()) cfg.out_dir = o.out;

    emm::TaskDataset ds = emm::load_dataset(cfg.dataset, cfg.seed);
    if (ds.tasks != bundle.model.tasks) {
      emm::raise(ErrorCode::config,
                 "dataset tasks do not match the fused model's tasks");
    }
    emm::Tensor features = emm::encode_dataset(bundle.encoder, ds);
    std::vector<size_t> test_rows = ds.rows_of(emm::Split::test);
    if (test_rows.empty()) emm::raise(ErrorCode::data, "dataset has no test rows");
    emm::Tensor x_test = emm::rows_subset(features, test_rows);
    std::vector<std::vector<double>> probs =
        emm::emm_predict(bundle.model, x_test, threads);

    std::vector<emm::GainEntry> entries;
    for (size_t t = 0; t < ds.tasks.size(); ++t) {
      emm::GainEntry e;
      e.task = ds.tasks[t];
      e.auc = emm::auc(probs[t], ds.labels_at(t, test_rows));
      e.reference = std::nan("");
      for (const auto& [task, ref] : bundle.reference_auc) {
        if (task == e.task) e.reference = ref;
      }
      e.gain = e.auc - e.reference;
      entries.push_back(e);
    }
    RunPaths paths = emm::make_run_paths(cfg.out_dir, cfg.seed);
    emm::write_json_file(paths.reports / "eval_report.json",
                         emm::report_json(cfg, bundle.variant, entries));
    std::cout << emm::format_gain_table(entries);
    return 0;
  }

  // Single model file: one row of AUC against the configured dataset.
  emm::TrainedModel model = emm::load_model(model_path);
  RunConfig cfg = effective_config(o);
  emm::TaskDataset ds = emm::load_dataset(cfg.dataset, cfg.seed);
  emm::InputEncoder enc;
  if (!encoder_file.empty()) {
    enc = emm::encoder_from_model(emm::load_model(encoder_file), ds.dense_width);
  } else {
    if (!ds.codes.empty()) {
      emm::raise(ErrorCode::config,
                 "dataset has sparse columns; pass --encoder to evaluate");
    }
    enc.dense_width = ds.dense_width;
  }
  enc.set_frozen(true);
  emm::Tensor features = emm::encode_dataset(enc, ds);
  if (model.input_dim() != features.cols()) {
    emm::raise(ErrorCode::dimension,
               "model expects input dim " + std::to_string(model.input_dim()) +
                   " but the encoded dataset has " +
                   std::to_string(features.cols()));
  }
  size_t task_index = ds.tasks.size();
  for (size_t t = 0; t < ds.tasks.size(); ++t) {
    if (ds.tasks[t] == model.task) task_index = t;
  }
  if (task_index == ds.tasks.size()) {
    emm::raise(ErrorCode::config,
               "dataset has no labels for task " + model.task);
  }
  std::vector<size_t> test_rows = ds.rows_of(emm::Split::test);
  if (test_rows.empty()) emm::raise(ErrorCode::data, "dataset has no test rows");
  emm::Tensor x_test = emm::rows_subset(features, test_rows);

  emm::GainEntry e;
  e.task = model.task;
  e.auc = emm::auc(emm::predict_proba(model, x_test),
                   ds.labels_at(task_index, test_rows));
  e.reference = std::nan("");
  e.gain = std::nan("");
  RunPaths paths = emm::make_run_paths(cfg.out_dir, cfg.seed);
  emm::write_json_file(paths.reports / "eval_report.json",
                       emm::report_json(cfg, "single:" + model.id, {e}));
  std::cout << emm::format_gain_table({e});
  return 0;
}

// -- adapt ----------------------------------------------------------------------

int cmd_adapt(const CommonOpts& o, std::vector<long long> counts) {
  RunConfig base = effective_config(o);
  if (base.dataset.kind != emm::DatasetKind::synthetic) {
    emm::raise(ErrorCode::config, "adapt runs on synthetic datasets");
  }
  if (counts.empty()) counts = {1, 2, 3, 4};
  RunPaths paths = emm::make_run_paths(base.out_dir, base.seed);

  nlohmann::json runs = nlohmann::json::array();
  for (long long n : counts) {
    if (n < 1 || n > 15) {
      emm::raise(ErrorCode::config, "task count must be in [1, 15]");
    }
    RunConfig cfg = base;
    cfg.dataset.n_tasks = static_cast<size_t>(n);
    cfg.tasks.clear();
    std::cout << "tasks=" << n << "\n";
    emm::PreparedRun prep = emm::prepare_run(cfg);
    std::string prefix = "adapt" + std::to_string(n) + "_";
    emm::VariantResult res =
        run_and_record(prep, paths, cfg.use_pretrained, cfg.use_mtm, prefix);
    nlohmann::json entry = emm::report_json(cfg, res.variant, res.gains);
    entry["n_tasks"] = n;
    runs.push_back(entry);
  }
  nlohmann::json combined{{"dataset", base.dataset.describe()},
                          {"seed", base.seed},
                          {"runs", runs}};
  emm::write_json_file(paths.reports / "adapt_report.json", combined);
  std::cout << "wrote " << (paths.reports / "adapt_report.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fuse trained single-task networks into one multi-task model"};
  app.require_subcommand(1);
  int rc = 0;

  CommonOpts train_opts;
  CLI::App* train = app.add_subcommand(
      "train-single", "train one model per task and architecture");
  add_common(train, &train_opts);
  train->callback([&] { rc = cmd_train_single(train_opts); });

  CommonOpts dec_opts;
  std::vector<std::string> dec_models;
  std::string dec_encoder;
  CLI::App* dec = app.add_subcommand(
      "deconstruct", "align a pool and write its component manifest");
  add_common(dec, &dec_opts);
  dec->add_option("--models", dec_models, "saved pool model files");
  dec->add_option("--encoder", dec_encoder, "saved encoder file");
  dec->callback([&] { rc = cmd_deconstruct(dec_opts, dec_models, dec_encoder); });

  CommonOpts fuse_opts;
  std::string fuse_ablate = "none";
  std::vector<std::string> fuse_models;
  std::string fuse_encoder;
  CLI::App* fuse = app.add_subcommand(
      "fuse", "train the fused multi-task model and report gains");
  add_common(fuse, &fuse_opts);
  fuse->add_option("--ablate", fuse_ablate,
                   "none, all, or one of full|baseline|baseline+p|baseline+MTM");
  fuse->add_option("--models", fuse_models, "saved pool model files");
  fuse->add_option("--encoder", fuse_encoder, "saved encoder file");
  fuse->callback(
      [&] { rc = cmd_fuse(fuse_opts, fuse_ablate, fuse_models, fuse_encoder); });

  CommonOpts abl_opts;
  std::vector<std::string> abl_models;
  std::string abl_encoder;
  CLI::App* abl = app.add_subcommand(
      "ablate", "run all four fusion variants on one pool and seed");
  add_common(abl, &abl_opts);
  abl->add_option("--models", abl_models, "saved pool model files");
  abl->add_option("--encoder", abl_encoder, "saved encoder file");
  abl->callback([&] { rc = cmd_fuse(abl_opts, "all", abl_models, abl_encoder); });

  CommonOpts eval_opts;
  std::string eval_model;
  std::string eval_encoder;
  CLI::App* ev = app.add_subcommand(
      "eval", "evaluate a fused bundle directory or a single model file");
  add_common(ev, &eval_opts, false);
  ev->add_option("--model", eval_model, "bundle directory or model file")
      ->required();
  ev->add_option("--encoder", eval_encoder, "encoder file for single models");
  ev->callback([&] { rc = cmd_eval(eval_opts, eval_model, eval_encoder); });

  CommonOpts adapt_opts;
  std::vector<long long> adapt_counts;
  CLI::App* adapt = app.add_subcommand(
      "adapt", "sweep synthetic task counts and report per-task AUC");
  add_common(adapt, &adapt_opts);
  adapt->add_option("--count", adapt_counts,
                    "task counts to run (default 1 2 3 4)");
  adapt->callback([&] { rc = cmd_adapt(adapt_opts, adapt_counts); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const emm::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
