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

/** @file audit.hpp Evaluation tables, retrieval and forgetting audits, the
 * storage/time bench, and attention heatmap scores.
 */

#pragma once

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvadapt/engine.hpp"
#include "kvadapt/metrics.hpp"

namespace kvadapt {

enum class PromptMode { kFull, kOrganOnly, kTaskOnly };

inline std::string to_string(PromptMode m) {
  switch (m) {
    case PromptMode::kFull: return "full";
    case PromptMode::kOrganOnly: return "organ_only";
    case PromptMode::kTaskOnly: return "task_only";
  }
  return "full";
}

inline PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "full") return PromptMode::kFull;
  if (s == "organ_only") return PromptMode::kOrganOnly;
  if (s == "task_only") return PromptMode::kTaskOnly;
  throw Error(ErrorKind::kConfig, "prompt mode must be full, organ_only or task_only, got '" + s + "'");
}

inline std::string prompt_for(const TaskSpec& spec, PromptMode mode) {
  switch (mode) {
    case PromptMode::kFull: return spec.prompt;
    case PromptMode::kOrganOnly: return make_organ_only_prompt(spec.organ);
    case PromptMode::kTaskOnly: return make_task_only_prompt(spec.category);
  }
  return spec.prompt;
}

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << v;
  return s.str();
}

}  // namespace detail

// ---- evaluation -------------------------------------------------------------------

struct Evaluation {
  MetricRow metrics;
  ConfusionMatrix confusion{1};
  std::vector<GenerationResult> predictions;
  std::vector<const Item*> items;
};

inline ConfusionMatrix confusion_of(const TaskSpec& spec, const std::vector<const Item*>& items,
                                    const std::vector<GenerationResult>& predictions) {
  require(items.size() == predictions.size(), ErrorKind::kDimension, "one prediction per item is required");
  ConfusionMatrix cm(static_cast<int>(spec.labels.size()));
  for (std::size_t i = 0; i < items.size(); ++i)
    cm.add(spec.label_index(items[i]->label), match_label(predictions[i].label_text, spec.labels));
  return cm;
}

/// Full-prompt inference (retrieval decides) on a dataset's test split.
template <typename T>
Evaluation evaluate_task(const Dataset& data, BackboneBundle<T>& bundle, AdaptorStore<T>& store,
                         const Vocabulary& vocab, int max_len, BagCache<T>* cache = nullptr) {
  Evaluation ev;
  for (std::size_t i : data.indices(Split::kTest)) ev.items.push_back(&data.items[i]);
  BagCache<T> local;
  if (cache == nullptr) cache = &local;
  fill_bag_cache(*cache, ev.items, bundle);
  ev.predictions = infer_batch(ev.items, vocab.encode_prompt(data.spec.prompt), bundle, store, vocab, max_len, cache);
  ev.confusion = confusion_of(data.spec, ev.items, ev.predictions);
  ev.metrics = summarize(data.spec.task_id, ev.confusion, data.spec.cancer_indices());
  return ev;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string s = "task_id,n,unparseable,acc,acc_cancer,macro_precision,macro_recall,macro_f1,qwk\n";
  for (const auto& r : rows)
    s += r.task_id + "," + std::to_string(r.n) + "," + std::to_string(r.unparseable) + "," + detail::fmt(r.acc) + "," +
         detail::fmt(r.acc_cancer) + "," + detail::fmt(r.macro_precision) + "," + detail::fmt(r.macro_recall) + "," +
         detail::fmt(r.macro_f1) + "," + detail::fmt(r.qwk) + "\n";
  return s;
}

inline std::string predictions_csv(const std::string& task_id, const std::vector<const Item*>& items,
                                   const std::vector<GenerationResult>& predictions, bool header = true) {
  std::string s = header ? "task_id,item,label,generated,retrieved_task,terminated\n" : "";
  for (std::size_t i = 0; i < items.size(); ++i)
    s += task_id + "," + items[i]->name + "," + items[i]->label + "," + predictions[i].label_text + "," +
         predictions[i].retrieved_task_id + "," + (predictions[i].terminated_by_eos ? "1" : "0") + "\n";
  return s;
}

// ---- retrieval audit ------------------------------------------------------------------

struct RetrievalRow {
  std::string task_id;
  PromptMode mode = PromptMode::kFull;
  long n = 0;
  long wrong = 0;
  double rate() const { return n == 0 ? 0.0 : static_cast<double>(wrong) / static_cast<double>(n); }
};

/// Phase-1 retrieval only, over each task's test split, with the prompt ablated per `mode`.
template <typename T>
std::vector<RetrievalRow> audit_retrieval(const AdaptorStore<T>& store, BackboneBundle<T>& bundle,
                                          const Vocabulary& vocab, const std::vector<const Dataset*>& test_sets,
                                          PromptMode mode, BagCache<T>* cache = nullptr) {
  require(!store.empty(), ErrorKind::kNoTasks, "the adaptor store is empty");
  BagCache<T> local;
  if (cache == nullptr) cache = &local;
  std::vector<RetrievalRow> rows;
  for (const Dataset* ds : test_sets) {
    std::vector<const Item*> items;
    for (std::size_t i : ds->indices(Split::kTest)) items.push_back(&ds->items[i]);
    fill_bag_cache(*cache, items, bundle);
    const Matrix<T> q = build_queries(items, vocab.encode_prompt(prompt_for(ds->spec, mode)), bundle, cache);
    RetrievalRow r{ds->spec.task_id, mode, static_cast<long>(items.size()), 0};
    for (Eigen::Index i = 0; i < q.rows(); ++i)
      if (store.retrieve(q.row(i), ds->spec.level).task_id != ds->spec.task_id) ++r.wrong;
    rows.push_back(r);
  }
  return rows;
}

inline std::string retrieval_csv(const std::vector<RetrievalRow>& rows) {
  std::string s = "task_id,prompt_mode,n,wrong,mis_retrieval_rate\n";
  for (const auto& r : rows)
    s += r.task_id + "," + to_string(r.mode) + "," + std::to_string(r.n) + "," + std::to_string(r.wrong) + "," +
         detail::fmt(r.rate()) + "\n";
  return s;
}

// ---- forgetting audit -------------------------------------------------------------------

struct ForgettingRow {
  std::string task_id;
  long n = 0;
  long changed = 0;
};

/// Re-runs inference for every task of `before` under both stores and counts differing outputs.
template <typename T>
std::vector<ForgettingRow> audit_forgetting(AdaptorStore<T>& before, AdaptorStore<T>& after,
                                            BackboneBundle<T>& bundle, const Vocabulary& vocab,
                                            const std::vector<const Dataset*>& test_sets, int max_len,
                                            BagCache<T>* cache = nullptr) {
  BagCache<T> local;
  if (cache == nullptr) cache = &local;
  std::vector<ForgettingRow> rows;
  for (const Dataset* ds : test_sets) {
    if (!before.contains(ds->spec.task_id)) continue;
    std::vector<const Item*> items;
    for (std::size_t i : ds->indices(Split::kTest)) items.push_back(&ds->items[i]);
    fill_bag_cache(*cache, items, bundle);
    const TokenSequence prompt = vocab.encode_prompt(ds->spec.prompt);
    const auto a = infer_batch(items, prompt, bundle, before, vocab, max_len, cache);
    const auto b = infer_batch(items, prompt, bundle, after, vocab, max_len, cache);
    ForgettingRow r{ds->spec.task_id, static_cast<long>(items.size()), 0};
    for (std::size_t i = 0; i < items.size(); ++i)
      if (!(a[i] == b[i])) ++r.changed;
    rows.push_back(r);
  }
  return rows;
}

inline std::string forgetting_csv(const std::vector<ForgettingRow>& rows) {
  std::string s = "task_id,n,changed\n";
  for (const auto& r : rows) s += r.task_id + "," + std::to_string(r.n) + "," + std::to_string(r.changed) + "\n";
  return s;
}

// ---- bench ------------------------------------------------------------------------------

struct BenchRow {
  std::string task_id;
  double adaptor_ms_per_image = 0.0;
  double full_ms_per_image = 0.0;
  std::uintmax_t adaptor_task_bytes = 0;  // adaptor set + key blobs
  std::uintmax_t full_task_bytes = 0;  // backbone + projector (+ aggregator) blobs
  std::uintmax_t adaptor_cumulative = 0;  // shared backbone + all task blobs so far
  std::uintmax_t full_cumulative = 0;
};

struct BenchReport {
  std::uintmax_t backbone_bytes = 0;
  std::vector<BenchRow> rows;

  double storage_ratio() const {
    return rows.empty() ? 0.0
                        : static_cast<double>(rows.back().adaptor_cumulative) /
                              static_cast<double>(rows.back().full_cumulative);
  }

  std::string to_csv() const {
    std::string s =
        "task_id,adaptor_ms_per_image,full_ms_per_image,adaptor_task_bytes,full_task_bytes,adaptor_cumulative_bytes,"
        "full_cumulative_bytes\n";
    for (const auto& r : rows)
      s += r.task_id + "," + detail::fmt(r.adaptor_ms_per_image) + "," + detail::fmt(r.full_ms_per_image) + "," +
           std::to_string(r.adaptor_task_bytes) + "," + std::to_string(r.full_task_bytes) + "," +
           std::to_string(r.adaptor_cumulative) + "," + std::to_string(r.full_cumulative) + "\n";
    return s;
  }
};

template <typename T>
std::uintmax_t blob_bytes(BackboneBundle<T>& b) {
  return static_cast<std::uintmax_t>(b.param_count()) * sizeof(float);
}

template <typename T>
std::uintmax_t task_blob_bytes(AdaptorSet<T>& set, const TaskKey<T>& key) {
  return static_cast<std::uintmax_t>(set.blob_bytes() + static_cast<std::size_t>(key.vector.value.size()) * sizeof(float));
}

template <typename T>
std::uintmax_t full_model_bytes(FullModel<T>& fm) {
  std::size_t n = fm.bundle.param_count();
  auto count = [&](const std::string&, Parameter<T>& p) { n += static_cast<std::size_t>(p.value.size()); };
  fm.projector.visit("projector", count);
  if (fm.aggregator) fm.aggregator->visit("aggregator", count);
  return static_cast<std::uintmax_t>(n) * sizeof(float);
}

/// Trains every task both ways (adaptors into a scratch store, and a full
/// fine-tuned copy) and records time per training image and serialized bytes.
template <typename T>
BenchReport bench(const std::vector<const Dataset*>& tasks, BackboneBundle<T>& bundle, const Vocabulary& vocab,
                  const std::function<TrainConfig(Level)>& config_for) {
  BenchReport rep;
  rep.backbone_bytes = blob_bytes(bundle);
  AdaptorStore<T> store(bundle.checksum());
  std::uintmax_t adaptors = rep.backbone_bytes, full = 0;
  for (const Dataset* ds : tasks) {
    const TrainConfig cfg = config_for(ds->spec.level);
    BenchRow r;
    r.task_id = ds->spec.task_id;
    TrainedTask<T> t = train_task(ds->spec, *ds, bundle, store, vocab, cfg);
    r.adaptor_ms_per_image = 1000.0 * t.trace.seconds / static_cast<double>(std::max<std::size_t>(1, t.trace.examples_seen));
    r.adaptor_task_bytes = task_blob_bytes(t.adaptors, t.key);
    store.add_task(ds->spec, std::move(t.key), std::move(t.adaptors));
    FullModel<T> fm = train_task_full_finetune(ds->spec, *ds, bundle, vocab, cfg);
    r.full_ms_per_image =
        1000.0 * fm.trace.seconds / static_cast<double>(std::max<std::size_t>(1, fm.trace.examples_seen));
    r.full_task_bytes = full_model_bytes(fm);
    adaptors += r.adaptor_task_bytes;
    full += r.full_task_bytes;
    r.adaptor_cumulative = adaptors;
    r.full_cumulative = full;
    rep.rows.push_back(r);
  }
  return rep;
}

// ---- heatmap -----------------------------------------------------------------------

struct HeatmapScore {
  PatchCoord coord;
  double score = 0.0;
};

/// Percentile rank of each weight within the bag (fraction of weights strictly
/// below it, so ties share a rank), then min-max normalized. A constant bag
/// maps to all zeros.
inline std::vector<HeatmapScore> export_heatmap_scores(const std::vector<float>& attention,
                                                       const std::vector<PatchCoord>& coords) {
  require(!attention.empty(), ErrorKind::kEmptyBag, "bag is empty");
  require(attention.size() == coords.size(), ErrorKind::kDimension, "one coordinate per attention weight");
  const std::size_t n = attention.size();
  std::vector<float> sorted = attention;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n; ++i)
    rank[i] = static_cast<double>(std::lower_bound(sorted.begin(), sorted.end(), attention[i]) - sorted.begin()) /
              static_cast<double>(n);
  const auto [lo, hi] = std::minmax_element(rank.begin(), rank.end());
  const double lo_v = *lo, span = *hi - *lo;
  std::vector<HeatmapScore> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {coords[i], span > 0.0 ? (rank[i] - lo_v) / span : 0.0};
  return out;
}

inline std::string heatmap_csv(const std::vector<HeatmapScore>& scores) {
  std::string s = "row,col,score\n";
  for (const auto& h : scores)
    s += std::to_string(h.coord.row) + "," + std::to_string(h.coord.col) + "," + detail::fmt(h.score) + "\n";
  return s;
}

}  // namespace kvadapt
