/*
 * Copyright 2026 The kvadapt Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

/** @file workflow.hpp Run configuration and the command implementations behind the CLI.
 *
 * A run lives in one workspace directory:
 *
 *     backbone/   frozen checkpoint + vocab.txt      (pretrain)
 *     data/<id>/  task datasets, generated on first use
 *     store/      adaptor store                      (add-task)
 *     reports/    CSV outputs
 *
 * Relative paths in the config are resolved against the workspace.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvadapt/audit.hpp"
#include "kvadapt/backbone.hpp"
#include "kvadapt/datasets.hpp"
#include "kvadapt/engine.hpp"
#include "kvadapt/pretrain.hpp"
#include "kvadapt/storage.hpp"
#include "kvadapt/suite.hpp"
#include "kvadapt/vocab.hpp"

namespace kvadapt {

namespace fs = std::filesystem;

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path workspace = "kvadapt_run";
  fs::path backbone_dir = "backbone";
  fs::path store_dir = "store";
  fs::path data_dir = "data";
  fs::path report_dir = "reports";

  BackboneConfig backbone;
  PretrainOptions pretrain;
  int pretrain_per_class = 40;

  int n_per_class = 40;
  int n_bags_per_class = 20;
  BagSizeRange bag_size;

  nlohmann::json train_patch = nlohmann::json::object();  // overrides on top of level defaults
  nlohmann::json train_slide = nlohmann::json::object();

  std::vector<TaskSpec> tasks;
  std::vector<TaskSpec> pretrain_tasks;

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : workspace / p; }
  fs::path backbone_path() const { return resolve(backbone_dir); }
  fs::path store_path() const { return resolve(store_dir); }
  fs::path data_path() const { return resolve(data_dir); }
  fs::path report_path() const { return resolve(report_dir); }

  TrainConfig train_config(Level level) const {
    TrainConfig c = TrainConfig::defaults_for(level);
    merge_json(level == Level::kPatch ? train_patch : train_slide, c);
    c.seed = seed;
    return c;
  }

  const TaskSpec& task(const std::string& id) const {
    for (const auto& t : tasks)
      if (t.task_id == id) return t;
    throw Error(ErrorKind::kInvalidTask, "task '" + id + "' is not in the config task list");
  }

  std::vector<TaskSpec> all_specs() const {
    std::vector<TaskSpec> all = pretrain_tasks;
    all.insert(all.end(), tasks.begin(), tasks.end());
    return all;
  }
};

/// `base` is where a relative "workspace" is anchored (normally the config file's directory).
inline RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base,
                                  std::optional<std::uint64_t> seed_override = {}) {
  RunConfig c;
  require(j.is_object(), ErrorKind::kConfig, "config must be a JSON object");
  if (seed_override) {
    c.seed = *seed_override;
  } else {
    require(j.contains("seed"), ErrorKind::kConfig, "config needs a \"seed\" (or pass --seed)");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  if (j.contains("workspace")) c.workspace = j.at("workspace").get<std::string>();
  if (c.workspace.is_relative()) c.workspace = base / c.workspace;
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    c.backbone_dir = p.value("backbone", c.backbone_dir.string());
    c.store_dir = p.value("store", c.store_dir.string());
    c.data_dir = p.value("data", c.data_dir.string());
    c.report_dir = p.value("reports", c.report_dir.string());
  }
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    c.pretrain.encoder_epochs = p.value("encoder_epochs", c.pretrain.encoder_epochs);
    c.pretrain.decoder_epochs = p.value("decoder_epochs", c.pretrain.decoder_epochs);
    c.pretrain.encoder_lr = p.value("encoder_lr", c.pretrain.encoder_lr);
    c.pretrain.decoder_lr = p.value("decoder_lr", c.pretrain.decoder_lr);
    c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
    c.pretrain.text_repeats = p.value("text_repeats", c.pretrain.text_repeats);
    c.pretrain_per_class = p.value("n_per_class", c.pretrain_per_class);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.n_per_class = d.value("n_per_class", c.n_per_class);
    c.n_bags_per_class = d.value("n_bags_per_class", c.n_bags_per_class);
    c.bag_size.min = d.value("bag_min", c.bag_size.min);
    c.bag_size.max = d.value("bag_max", c.bag_size.max);
  }
  if (j.contains("train")) {
    c.train_patch = j.at("train").value("patch", nlohmann::json::object());
    c.train_slide = j.at("train").value("slide", nlohmann::json::object());
  }
  c.tasks = j.contains("tasks") ? j.at("tasks").get<std::vector<TaskSpec>>() : default_downstream_tasks();
  if (j.contains("task_count")) {
    const auto n = j.at("task_count").get<std::size_t>();
    require(n >= 1 && n <= c.tasks.size(), ErrorKind::kConfig, "task_count out of range");
    c.tasks.resize(n);
  }
  c.pretrain_tasks =
      j.contains("pretrain_tasks") ? j.at("pretrain_tasks").get<std::vector<TaskSpec>>() : default_pretrain_tasks();
  require(!c.tasks.empty(), ErrorKind::kConfig, "config has no tasks");
  for (const auto& t : c.tasks) t.validate();
  for (std::size_t i = 0; i < c.tasks.size(); ++i)
    for (std::size_t k = i + 1; k < c.tasks.size(); ++k)
      require(c.tasks[i].task_id != c.tasks[k].task_id, ErrorKind::kConfig,
              "duplicate task id '" + c.tasks[i].task_id + "'");
  require(c.n_per_class > 0 && c.n_bags_per_class > 0 && c.bag_size.min >= 1 && c.bag_size.max >= c.bag_size.min,
          ErrorKind::kConfig, "bad data sizes");
  c.train_config(Level::kPatch);
  c.train_config(Level::kSlide);
  return c;
}

inline RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed_override = {}) {
  require(fs::exists(path), ErrorKind::kMissingFile, "config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j, path.parent_path(), seed_override);
}

/// Three-task config used by the README walkthrough and the determinism check.
inline nlohmann::json quickstart_config_json(std::uint64_t seed = 7) {
  return {{"seed", seed}, {"workspace", "quickstart_run"}, {"task_count", 3}};
}

// ---- workspace loading -----------------------------------------------------------

struct Workspace {
  BackboneBundle<float> bundle;
  Vocabulary vocab;
  AdaptorStore<float> store;
};

inline Workspace open_workspace(const RunConfig& cfg, bool need_store) {
  const fs::path bdir = cfg.backbone_path();
  require(fs::exists(bdir / "manifest.json"), ErrorKind::kMissingFile,
          "no backbone checkpoint at " + bdir.string() + "; run `kvadapt pretrain` first");
  Workspace w;
  w.bundle = load_backbone<float>(bdir);
  require(w.bundle.frozen, ErrorKind::kCompatibility, "checkpoint at " + bdir.string() + " is not frozen");
  w.vocab = Vocabulary::load(bdir / "vocab.txt");
  const fs::path sdir = cfg.store_path();
  if (fs::exists(sdir / "manifest.json")) {
    w.store = AdaptorStore<float>::load(sdir, w.bundle.checksum());
  } else {
    require(!need_store, ErrorKind::kMissingFile,
            "no adaptor store at " + sdir.string() + "; run `kvadapt add-task` first");
    w.store = AdaptorStore<float>(w.bundle.checksum());
  }
  return w;
}

/// Loads data/<id> if present, otherwise generates it from the config and saves it.
inline Dataset task_dataset(const RunConfig& cfg, const TaskSpec& spec) {
  const fs::path dir = cfg.data_path() / spec.task_id;
  if (fs::exists(dir / "task_spec.json")) {
    Dataset ds = load_dataset(dir);
    require(ds.spec == spec, ErrorKind::kInvalidData, "dataset at " + dir.string() + " was made for a different spec");
    return ds;
  }
  const std::uint64_t seed = cfg.seed ^ fnv1a("data/" + spec.task_id);
  Dataset ds = spec.level == Level::kPatch
                   ? generate_patch_task(spec, cfg.n_per_class, seed, cfg.backbone.image_size)
                   : generate_slide_task(spec, cfg.n_bags_per_class, cfg.bag_size, seed, cfg.backbone.image_size);
  save_dataset(ds, dir);
  return ds;
}

inline std::vector<const Item*> test_items(const Dataset& ds) {
  std::vector<const Item*> out;
  for (std::size_t i : ds.indices(Split::kTest)) out.push_back(&ds.items[i]);
  return out;
}

/// First `n` entries of a store, copied.
template <typename T>
AdaptorStore<T> store_prefix(const AdaptorStore<T>& store, std::size_t n) {
  AdaptorStore<T> out(store.backbone_checksum());
  for (std::size_t i = 0; i < n && i < store.size(); ++i) {
    const auto& e = store.entries()[i];
    out.add_task(e.spec, e.key, e.adaptors);
  }
  return out;
}

// ---- commands ----------------------------------------------------------------------

struct PretrainSummary {
  std::size_t vocab_size = 0;
  std::size_t params = 0;
  std::string checksum;
  std::vector<std::string> warnings;
};

inline PretrainSummary cmd_pretrain(const RunConfig& cfg) {
  const std::vector<TaskSpec> all = cfg.all_specs();
  const Vocabulary vocab = build_vocabulary(all);
  BackboneConfig bc = cfg.backbone;
  bc.vocab_size = static_cast<int>(vocab.size());
  bc.check_fits(all);
  const PretrainCorpus corpus =
      build_pretrain_corpus(cfg.pretrain_tasks, cfg.tasks, vocab, cfg.pretrain_per_class, cfg.seed ^ fnv1a("pretrain"),
                            bc.image_size);
  PretrainResult<float> r = pretrain_backbones<float>(bc, corpus, vocab, cfg.seed, cfg.pretrain);
  save_backbone(r.bundle, cfg.backbone_path(), &vocab);
  std::string trace = "stage,epoch,loss\n";
  for (const auto& p : r.trace) trace += p.stage + "," + std::to_string(p.epoch) + "," + detail::fmt(p.loss) + "\n";
  fs::create_directories(cfg.report_path());
  write_text(cfg.report_path() / "pretrain_trace.csv", trace);
  return {vocab.size(), r.bundle.param_count(), r.bundle.checksum(), r.warnings};
}

/// "auto" picks the first config task that is not stored yet.
inline std::string resolve_new_task(const RunConfig& cfg, const AdaptorStore<float>& store, const std::string& task) {
  if (task != "auto") return cfg.task(task).task_id;
  for (const auto& t : cfg.tasks)
    if (!store.contains(t.task_id)) return t.task_id;
  throw Error(ErrorKind::kConflict, "every config task is already in the store");
}

struct AddTaskSummary {
  std::string task_id;
  TrainTrace trace;
  std::size_t store_size = 0;
};

inline AddTaskSummary cmd_add_task(const RunConfig& cfg, const std::string& task) {
  Workspace w = open_workspace(cfg, false);
  const std::string id = resolve_new_task(cfg, w.store, task);
  const TaskSpec& spec = cfg.task(id);
  require(!w.store.contains(id), ErrorKind::kConflict, "task '" + id + "' is already in the store");
  const Dataset ds = task_dataset(cfg, spec);
  TrainedTask<float> t = train_task(spec, ds, w.bundle, w.store, w.vocab, cfg.train_config(spec.level));
  w.store.add_task(spec, std::move(t.key), std::move(t.adaptors));
  w.store.save(cfg.store_path());
  fs::create_directories(cfg.report_path() / "traces");
  write_text(cfg.report_path() / "traces" / (id + ".csv"), t.trace.to_csv());
  return {id, t.trace, w.store.size()};
}

inline TokenSequence prompt_tokens(const Vocabulary& vocab, const TaskSpec& spec, PromptMode mode) {
  return vocab.encode_prompt(prompt_for(spec, mode));
}

struct PredictRequest {
  std::string task = "auto";  // or a stored task id (bypasses retrieval)
  PromptMode mode = PromptMode::kFull;
  std::optional<fs::path> input;       // PNG or bag directory; default: the task's test split
  std::optional<std::string> prompt;   // explicit prompt text
};

/// Predictions as CSV: item,generated,retrieved_task,terminated[,attention].
inline std::string cmd_predict(const RunConfig& cfg, const PredictRequest& req) {
  Workspace w = open_workspace(cfg, true);
  const int max_len = cfg.train_config(Level::kPatch).max_generate_len;
  std::vector<Item> owned;
  Dataset ds;
  std::vector<const Item*> items;
  const TaskSpec* spec = nullptr;
  if (req.task != "auto") {
    const StoreEntry<float>* e = w.store.find(req.task);
    require(e != nullptr, ErrorKind::kInvalidTask, "task '" + req.task + "' is not in the store");
    spec = &e->spec;
  }
  if (req.input) {
    require(fs::exists(*req.input), ErrorKind::kMissingFile, "input not found: " + req.input->string());
    Item it;
    it.name = req.input->stem().string();
    if (fs::is_directory(*req.input))
      read_bag(*req.input, it);
    else
      it.images.push_back(read_png(*req.input));
    owned.push_back(std::move(it));
    items.push_back(&owned.front());
  } else {
    require(spec != nullptr, ErrorKind::kInvalidInput, "--task auto needs --input");
    ds = task_dataset(cfg, *spec);
    items = test_items(ds);
  }
  TokenSequence prompt;
  if (req.prompt)
    prompt = w.vocab.encode_prompt(*req.prompt);
  else {
    require(spec != nullptr, ErrorKind::kInvalidInput, "--task auto with --input needs --prompt");
    prompt = prompt_tokens(w.vocab, *spec, req.mode);
  }
  BagCache<float> cache;
  fill_bag_cache(cache, items, w.bundle);
  std::vector<GenerationResult> res;
  if (req.task == "auto") {
    res = infer_batch(items, prompt, w.bundle, w.store, w.vocab, max_len, &cache);
  } else {
    // bypass retrieval; the stored adaptors decode against the requested prompt
    StoreEntry<float>* e = w.store.find(req.task);
    ModelView<float> m = view_of(w.bundle, e->adaptors);
    m.prompt = &prompt;
    for (const Item* it : items) {
      GenerationResult r = generate_batch<float>({it}, m, w.vocab, max_len, &cache).front();
      r.retrieved_task_id = req.task;
      res.push_back(std::move(r));
    }
  }
  std::string out = "item,generated,retrieved_task,terminated,attention\n";
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::string att;
    if (res[i].attention)
      for (std::size_t k = 0; k < res[i].attention->size(); ++k)
        att += (k ? " " : "") + detail::fmt((*res[i].attention)[k]);
    out += items[i]->name + "," + res[i].label_text + "," + res[i].retrieved_task_id + "," +
           (res[i].terminated_by_eos ? "1" : "0") + "," + att + "\n";
  }
  return out;
}

struct EvaluateSummary {
  std::vector<MetricRow> rows;
};

/// Metric table over every stored task's test split; writes metrics.csv and predictions.csv.
inline EvaluateSummary cmd_evaluate(const RunConfig& cfg, const std::string& task = "auto",
                                    PromptMode mode = PromptMode::kFull) {
  Workspace w = open_workspace(cfg, true);
  const int max_len = cfg.train_config(Level::kPatch).max_generate_len;
  EvaluateSummary sum;
  std::string preds;
  bool first = true;
  for (const auto& e : w.store.entries()) {
    if (task != "auto" && e.spec.task_id != task) continue;
    const Dataset ds = task_dataset(cfg, e.spec);
    const auto items = test_items(ds);
    BagCache<float> cache;
    fill_bag_cache(cache, items, w.bundle);
    const TokenSequence prompt = prompt_tokens(w.vocab, e.spec, mode);
    std::vector<GenerationResult> res;
    if (task == "auto") {
      res = infer_batch(items, prompt, w.bundle, w.store, w.vocab, max_len, &cache);
    } else {
      res = predict_with_task(items, task, w.bundle, w.store, w.vocab, max_len, &cache);
    }
    const ConfusionMatrix cm = confusion_of(e.spec, items, res);
    sum.rows.push_back(summarize(e.spec.task_id, cm, e.spec.cancer_indices()));
    preds += predictions_csv(e.spec.task_id, items, res, first);
    first = false;
  }
  require(task == "auto" || !sum.rows.empty(), ErrorKind::kInvalidTask, "task '" + task + "' is not in the store");
  fs::create_directories(cfg.report_path());
  write_text(cfg.report_path() / "metrics.csv", metrics_csv(sum.rows));
  write_text(cfg.report_path() / "predictions.csv", preds);
  return sum;
}

inline std::vector<RetrievalRow> cmd_audit_prompts(const RunConfig& cfg) {
  Workspace w = open_workspace(cfg, true);
  std::vector<Dataset> data;
  for (const auto& e : w.store.entries()) data.push_back(task_dataset(cfg, e.spec));
  std::vector<const Dataset*> sets;
  for (const auto& d : data) sets.push_back(&d);
  BagCache<float> cache;
  std::vector<RetrievalRow> rows;
  for (PromptMode m : {PromptMode::kFull, PromptMode::kOrganOnly, PromptMode::kTaskOnly})
    for (auto& r : audit_retrieval(w.store, w.bundle, w.vocab, sets, m, &cache)) rows.push_back(r);
  fs::create_directories(cfg.report_path());
  write_text(cfg.report_path() / "retrieval.csv", retrieval_csv(rows));
  return rows;
}

struct ForgettingStep {
  std::string added_task;
  std::vector<ForgettingRow> rows;
};

/// Replays store growth: for each appended task, compares the earlier tasks'
/// test outputs under the store before and after the addition.
inline std::vector<ForgettingStep> cmd_audit_forgetting(const RunConfig& cfg) {
  Workspace w = open_workspace(cfg, true);
  const int max_len = cfg.train_config(Level::kPatch).max_generate_len;
  std::vector<Dataset> data;
  for (const auto& e : w.store.entries()) data.push_back(task_dataset(cfg, e.spec));
  std::vector<const Dataset*> sets;
  for (const auto& d : data) sets.push_back(&d);
  BagCache<float> cache;
  std::vector<ForgettingStep> steps;
  std::string csv = "added_task,task_id,n,changed\n";
  for (std::size_t k = 1; k < w.store.size(); ++k) {
    AdaptorStore<float> before = store_prefix(w.store, k);
    AdaptorStore<float> after = store_prefix(w.store, k + 1);
    ForgettingStep s{w.store.entries()[k].spec.task_id,
                     audit_forgetting(before, after, w.bundle, w.vocab, sets, max_len, &cache)};
    for (const auto& r : s.rows)
      csv += s.added_task + "," + r.task_id + "," + std::to_string(r.n) + "," + std::to_string(r.changed) + "\n";
    steps.push_back(std::move(s));
  }
  fs::create_directories(cfg.report_path());
  write_text(cfg.report_path() / "forgetting.csv", csv);
  return steps;
}

/// Trains every config task both ways against the workspace backbone (the
/// workspace store is not touched) and writes bench.csv.
inline BenchReport cmd_bench(const RunConfig& cfg) {
  Workspace w = open_workspace(cfg, false);
  std::vector<Dataset> data;
  for (const auto& t : cfg.tasks) data.push_back(task_dataset(cfg, t));
  std::vector<const Dataset*> sets;
  for (const auto& d : data) sets.push_back(&d);
  BenchReport rep = bench<float>(sets, w.bundle, w.vocab, [&](Level l) { return cfg.train_config(l); });
  fs::create_directories(cfg.report_path());
  write_text(cfg.report_path() / "bench.csv", rep.to_csv());
  return rep;
}

/// Attention percentile scores for slide bags, one CSV per bag under reports/heatmaps/<task>/.
/// `task` must name a stored slide task; `input` limits the export to one bag directory.
inline std::vector<fs::path> cmd_export_heatmap(const RunConfig& cfg, const std::string& task,
                                                const std::optional<fs::path>& input = {}) {
  Workspace w = open_workspace(cfg, true);
  const int max_len = cfg.train_config(Level::kSlide).max_generate_len;
  std::vector<std::string> ids;
  for (const auto& e : w.store.entries())
    if (e.spec.level == Level::kSlide && (task == "auto" || e.spec.task_id == task)) ids.push_back(e.spec.task_id);
  require(!ids.empty(), ErrorKind::kInvalidTask,
          task == "auto" ? "the store has no slide tasks" : "'" + task + "' is not a stored slide task");
  std::vector<fs::path> written;
  for (const auto& id : ids) {
    std::vector<Item> owned;
    Dataset ds;
    std::vector<const Item*> items;
    if (input) {
      Item it;
      it.name = input->filename().string();
      read_bag(*input, it);
      owned.push_back(std::move(it));
      items.push_back(&owned.front());
    } else {
      ds = task_dataset(cfg, w.store.find(id)->spec);
      items = test_items(ds);
    }
    BagCache<float> cache;
    fill_bag_cache(cache, items, w.bundle);
    const auto res = predict_with_task(items, id, w.bundle, w.store, w.vocab, max_len, &cache);
    const fs::path dir = cfg.report_path() / "heatmaps" / id;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < items.size(); ++i) {
      const fs::path out = dir / (items[i]->name + ".csv");
      write_text(out, heatmap_csv(export_heatmap_scores(*res[i].attention, items[i]->coords)));
      written.push_back(out);
    }
  }
  return written;
}

}  // namespace kvadapt
