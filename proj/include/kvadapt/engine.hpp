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

/** @file engine.hpp Per-task training, greedy generation and retrieval-then-generate inference.
 *
 * Decoder input layout for one example:
 *
 *     position  0        1 .. P        P+1 .. P+n-1
 *     content   visual   prompt        label tokens (teacher forced)
 *
 * Position P predicts the first label token and position P+n-1 predicts EOS.
 */

#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "kvadapt/adaptors.hpp"
#include "kvadapt/backbone.hpp"
#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/optim.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/datasets.hpp"
#include "kvadapt/lora.hpp"
#include "kvadapt/storage.hpp"
#include "kvadapt/vocab.hpp"

namespace kvadapt {

struct TrainConfig {
  int epochs = 100;
  double lr = 1e-4;
  int batch_size = 16;  // clamped to the training split size
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double weight_decay = 0.01;
  bool early_stopping = false;
  int patience = 20;
  bool teacher_forcing = true;
  int max_generate_len = 8;
  std::uint64_t seed = 0;
  LoraHyper lora;
  int aggregator_hidden = 64;

  static TrainConfig patch_defaults() { return {}; }

  static TrainConfig slide_defaults() {
    TrainConfig c;
    c.epochs = 200;
    c.lr = 2e-4;
    c.optimizer = OptimizerKind::kAdam;
    c.early_stopping = true;
    return c;
  }

  static TrainConfig defaults_for(Level level) {
    return level == Level::kPatch ? patch_defaults() : slide_defaults();
  }

  void validate(const BackboneConfig& backbone) const {
    require(epochs >= 0, ErrorKind::kConfig, "epochs must be non-negative");
    require(lr >= 0.0, ErrorKind::kConfig, "learning rate must be non-negative");
    require(batch_size > 0, ErrorKind::kConfig, "batch size must be positive");
    require(patience > 0, ErrorKind::kConfig, "patience must be positive");
    require(max_generate_len > 0 && max_generate_len <= backbone.max_seq_len, ErrorKind::kConfig,
            "max_generate_len must be in [1, max_seq_len]");
    require(aggregator_hidden > 0, ErrorKind::kConfig, "aggregator_hidden must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"lr", c.lr},
       {"batch_size", c.batch_size},
       {"optimizer", c.optimizer == OptimizerKind::kAdamW ? "adamw" : "adam"},
       {"weight_decay", c.weight_decay},
       {"early_stopping", c.early_stopping},
       {"patience", c.patience},
       {"teacher_forcing", c.teacher_forcing},
       {"max_generate_len", c.max_generate_len},
       {"lora_rank", c.lora.rank},
       {"lora_alpha", c.lora.alpha},
       {"lora_dropout", c.lora.dropout},
       {"aggregator_hidden", c.aggregator_hidden}};
}

/// Missing keys keep the values already in `c`, so level defaults can be layered.
inline void merge_json(const nlohmann::json& j, TrainConfig& c) {
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) {
    const auto o = j.at("optimizer").get<std::string>();
    require(o == "adam" || o == "adamw", ErrorKind::kConfig, "optimizer must be adam or adamw");
    c.optimizer = o == "adamw" ? OptimizerKind::kAdamW : OptimizerKind::kAdam;
  }
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.early_stopping = j.value("early_stopping", c.early_stopping);
  c.patience = j.value("patience", c.patience);
  c.teacher_forcing = j.value("teacher_forcing", c.teacher_forcing);
  c.max_generate_len = j.value("max_generate_len", c.max_generate_len);
  c.lora.rank = j.value("lora_rank", c.lora.rank);
  c.lora.alpha = j.value("lora_alpha", c.lora.alpha);
  c.lora.dropout = j.value("lora_dropout", c.lora.dropout);
  c.aggregator_hidden = j.value("aggregator_hidden", c.aggregator_hidden);
}

struct GenerationResult {
  std::string label_text;
  TokenSequence token_ids;  // generated ids without the EOS
  bool terminated_by_eos = false;
  std::string retrieved_task_id;
  std::optional<std::vector<float>> attention;

  bool operator==(const GenerationResult&) const = default;
};

struct TraceRow {
  int epoch = 0;
  double key_loss = 0.0;
  double seq_loss = 0.0;
  double loss = 0.0;
  double val_metric = 0.0;  // validation sequence loss
  double lr = 0.0;
};

struct TrainTrace {
  std::vector<TraceRow> rows;
  int best_epoch = -1;
  bool stopped_early = false;
  double seconds = 0.0;
  std::size_t examples_seen = 0;

  std::string to_csv() const {
    std::ostringstream s;
    s.precision(9);
    s << "epoch,L_K,L_S,L,val_metric,lr\n";
    for (const auto& r : rows)
      s << r.epoch << ',' << r.key_loss << ',' << r.seq_loss << ',' << r.loss << ',' << r.val_metric << ',' << r.lr
        << '\n';
    return s.str();
  }
};

/// Mean cross-entropy of `target` under per-position logits (one row per target token).
template <typename T>
double sequence_loss(const Matrix<T>& logits, const TokenSequence& target) {
  require(logits.rows() == static_cast<Eigen::Index>(target.size()), ErrorKind::kDimension,
          "one logit row per target token is required");
  require(!target.empty(), ErrorKind::kInvalidInput, "empty target sequence");
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Eigen::RowVectorXd l = logits.row(r).template cast<double>();
    const double mx = l.maxCoeff();
    const double lse = mx + std::log((l.array() - mx).exp().sum());
    total += lse - l(target.ids[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<double>(logits.rows());
}

// ---- model views -----------------------------------------------------------------

/// Frozen patch embeddings of every bag, computed once per dataset.
template <typename T>
using BagCache = std::unordered_map<const Item*, Matrix<T>>;

template <typename T>
Matrix<T> encode_bag(const Item& bag, BackboneBundle<T>& bundle) {
  require(!bag.images.empty(), ErrorKind::kEmptyBag, "bag '" + bag.name + "' is empty");
  std::vector<const Image*> imgs;
  for (const auto& im : bag.images) imgs.push_back(&im);
  return encode_images<T>(imgs, bundle);
}

template <typename T>
void fill_bag_cache(BagCache<T>& cache, const std::vector<const Item*>& items, BackboneBundle<T>& bundle) {
  for (const Item* it : items)
    if (it->is_bag && !cache.contains(it)) cache.emplace(it, encode_bag(*it, bundle));
}

template <typename T>
Matrix<T> cached_bag(const Item& bag, BackboneBundle<T>& bundle, const BagCache<T>* cache) {
  if (cache != nullptr)
    if (const auto found = cache->find(&bag); found != cache->end()) return found->second;
  return encode_bag(bag, bundle);
}

/// Everything a forward pass needs; pointers are null when a part is absent.
template <typename T>
struct ModelView {
  BackboneBundle<T>* bundle = nullptr;
  LoraSet<T>* encoder_lora = nullptr;
  AttentionAggregator<T>* aggregator = nullptr;
  Projector<T>* projector = nullptr;
  LoraSet<T>* decoder_lora = nullptr;
  const TokenSequence* prompt = nullptr;
  Level level = Level::kPatch;
  bool live_bags = false;  // encode bag patches on the tape (full fine-tuning)
};

template <typename T>
ModelView<T> view_of(BackboneBundle<T>& bundle, AdaptorSet<T>& set) {
  ModelView<T> v;
  v.bundle = &bundle;
  v.encoder_lora = set.encoder_lora ? &*set.encoder_lora : nullptr;
  v.aggregator = set.aggregator ? &*set.aggregator : nullptr;
  v.projector = &set.projector;
  v.decoder_lora = &set.decoder_lora;
  v.prompt = &set.prompt;
  v.level = set.level;
  return v;
}

namespace detail {

/// Projected visual tokens, one row per item.
template <typename T>
Var visual_tokens(Tape<T>& tape, const std::vector<const Item*>& items, ModelView<T>& m, bool training, Rng* rng,
                  const BagCache<T>* cache, std::vector<std::vector<float>>* attention = nullptr) {
  const auto batch = static_cast<Eigen::Index>(items.size());
  ForwardContext<T> ctx{m.encoder_lora, training, rng};
  Var emb;
  if (m.level == Level::kPatch) {
    std::vector<const Image*> imgs;
    for (const Item* it : items) {
      require(!it->is_bag && it->images.size() == 1, ErrorKind::kInvalidInput, "patch task expects single images");
      imgs.push_back(&it->images.front());
    }
    emb = m.bundle->encoder.forward(tape, stack_patches<T>(imgs, m.bundle->config), batch, ctx);
  } else {
    require(m.aggregator != nullptr, ErrorKind::kInvalidInput, "slide task without an aggregator");
    std::vector<Var> rows;
    for (const Item* it : items) {
      require(it->is_bag, ErrorKind::kInvalidInput, "slide task expects bags");
      Var bag;
      if (m.live_bags) {
        std::vector<const Image*> imgs;
        for (const auto& im : it->images) imgs.push_back(&im);
        bag = m.bundle->encoder.forward(tape, stack_patches<T>(imgs, m.bundle->config),
                                        static_cast<Eigen::Index>(imgs.size()), ctx);
      } else {
        bag = tape.constant(cached_bag(*it, *m.bundle, cache));
      }
      const AggregateVars out = m.aggregator->forward(tape, bag);
      rows.push_back(out.embedding);
      if (attention != nullptr) {
        const auto& a = tape.value(out.attention);
        attention->emplace_back(a.data(), a.data() + a.size());
      }
    }
    emb = tape.concat_rows(rows);
  }
  return m.projector->forward(tape, emb);
}

/// Decoder logits for [visual, prompt, tokens...] sequences of equal length.
template <typename T>
Var decoder_logits(Tape<T>& tape, Var visual, const std::vector<std::vector<int>>& suffixes, ModelView<T>& m,
                   bool training, Rng* rng, Eigen::Index& length) {
  const auto batch = static_cast<Eigen::Index>(suffixes.size());
  const auto p = static_cast<Eigen::Index>(m.prompt->size());
  length = 0;
  for (const auto& s : suffixes) length = std::max<Eigen::Index>(length, 1 + p + static_cast<Eigen::Index>(s.size()));
  std::vector<int> ids(static_cast<std::size_t>(batch * length), Vocabulary::kPad);
  std::vector<Eigen::Index> slots;
  for (Eigen::Index b = 0; b < batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b * length);
    slots.push_back(b * length);
    for (Eigen::Index t = 0; t < p; ++t) ids[base + 1 + static_cast<std::size_t>(t)] = m.prompt->ids[static_cast<std::size_t>(t)];
    const auto& s = suffixes[static_cast<std::size_t>(b)];
    for (std::size_t t = 0; t < s.size(); ++t) ids[base + 1 + static_cast<std::size_t>(p) + t] = s[t];
  }
  ForwardContext<T> ctx{m.decoder_lora, training, rng};
  Var inputs = tape.overwrite_rows(m.bundle->decoder.embed(tape, ids), visual, slots);
  return m.bundle->decoder.logits(tape, m.bundle->decoder.hidden(tape, inputs, batch, length, ctx));
}

/// Teacher-forced sequence loss: mean over examples of the per-example mean token CE.
template <typename T>
Var teacher_forced_loss(Tape<T>& tape, Var visual, const std::vector<const TokenSequence*>& labels, ModelView<T>& m,
                        bool training, Rng* rng) {
  std::vector<std::vector<int>> suffixes;
  for (const auto* l : labels) suffixes.emplace_back(l->ids.begin(), l->ids.end() - 1);
  Eigen::Index length = 0;
  Var logits = decoder_logits(tape, visual, suffixes, m, training, rng, length);
  const auto p = static_cast<Eigen::Index>(m.prompt->size());
  const auto batch = static_cast<Eigen::Index>(labels.size());
  std::vector<int> targets(static_cast<std::size_t>(batch * length), -1);
  std::vector<T> weights(targets.size(), T(0));
  for (Eigen::Index b = 0; b < batch; ++b) {
    const auto& ids = labels[static_cast<std::size_t>(b)]->ids;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const std::size_t row = static_cast<std::size_t>(b * length + p) + j;
      targets[row] = ids[j];
      weights[row] = T(1) / static_cast<T>(ids.size() * static_cast<std::size_t>(batch));
    }
  }
  return tape.cross_entropy(logits, targets, weights);
}

}  // namespace detail

/// Greedy decoding for a batch of items that share one model and prompt.
/// Stops each sequence at EOS or after `max_len` generated tokens.
template <typename T>
std::vector<GenerationResult> generate_batch(const std::vector<const Item*>& items, ModelView<T>& m,
                                             const Vocabulary& vocab, int max_len, const BagCache<T>* cache = nullptr) {
  require(max_len > 0, ErrorKind::kConfig, "max generation length must be positive");
  require(static_cast<Eigen::Index>(m.prompt->size()) + max_len <= m.bundle->config.max_seq_len, ErrorKind::kLength,
          "prompt plus generation budget exceeds max_seq_len");
  std::vector<GenerationResult> out(items.size());
  if (items.empty()) return out;
  std::vector<std::vector<float>> attention;
  Matrix<T> vis;
  {
    Tape<T> tape;
    vis = tape.value(detail::visual_tokens(tape, items, m, false, nullptr, cache, &attention));
  }
  std::vector<std::vector<int>> gen(items.size());
  std::vector<bool> done(items.size(), false);
  for (int step = 0; step < max_len; ++step) {
    Tape<T> tape;
    Eigen::Index length = 0;
    Var logits = detail::decoder_logits(tape, tape.constant(vis), gen, m, false, nullptr, length);
    const Matrix<T>& l = tape.value(logits);
    bool all_done = true;
    for (std::size_t b = 0; b < items.size(); ++b) {
      if (done[b]) {
        gen[b].push_back(Vocabulary::kPad);  // keeps equal lengths; ignored
        continue;
      }
      Eigen::Index best = 0;
      l.row(static_cast<Eigen::Index>(b) * length + length - 1).maxCoeff(&best);
      if (static_cast<int>(best) == Vocabulary::kEos) {
        done[b] = true;
        out[b].terminated_by_eos = true;
        gen[b].push_back(Vocabulary::kPad);
      } else {
        out[b].token_ids.ids.push_back(static_cast<int>(best));
        gen[b].push_back(static_cast<int>(best));
        all_done = false;
      }
    }
    if (all_done) break;
  }
  for (std::size_t b = 0; b < items.size(); ++b) {
    out[b].token_ids.terminated = out[b].terminated_by_eos;
    out[b].label_text = vocab.decode(out[b].token_ids);
    if (m.level == Level::kSlide) out[b].attention = attention[b];
  }
  return out;
}

template <typename T>
GenerationResult generate(const Item& item, BackboneBundle<T>& bundle, AdaptorSet<T>& set, const Vocabulary& vocab,
                          int max_len) {
  ModelView<T> m = view_of(bundle, set);
  return generate_batch<T>({&item}, m, vocab, max_len).front();
}

// ---- queries and inference ---------------------------------------------------------

inline Level level_of(const Item& item) { return item.is_bag ? Level::kSlide : Level::kPatch; }

/// Query rows built with the unadapted backbones: patch -> image embedding,
/// slide -> elementwise max over the bag's patch embeddings.
template <typename T>
Matrix<T> build_queries(const std::vector<const Item*>& items, const TokenSequence& prompt, BackboneBundle<T>& bundle,
                        const BagCache<T>* cache = nullptr) {
  const RowVector<T> e_t = embed_prompt(prompt, bundle);
  Matrix<T> out(static_cast<Eigen::Index>(items.size()), bundle.config.d_v + bundle.config.d_t);
  std::vector<const Image*> singles;
  std::vector<std::size_t> single_rows;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item* it = items[i];
    if (it->is_bag) {
      const RowVector<T> e_v = aggregate_maxpool<T>(cached_bag(*it, bundle, cache));
      out.row(static_cast<Eigen::Index>(i)) = make_query<T>(e_v, e_t);
    } else {
      singles.push_back(&it->images.front());
      single_rows.push_back(i);
    }
  }
  if (!singles.empty()) {
    const Matrix<T> ev = encode_images<T>(singles, bundle);
    for (std::size_t k = 0; k < singles.size(); ++k)
      out.row(static_cast<Eigen::Index>(single_rows[k])) = make_query<T>(ev.row(static_cast<Eigen::Index>(k)), e_t);
  }
  return out;
}

/// Retrieval then generation for every item, all under the same prompt.
/// Items are generated in retrieval groups of at most `chunk`, in input order.
/// With chunk 1 an item's output does not depend on which other items were
/// retrieved to the same task (matrix kernels differ by batch shape).
template <typename T>
std::vector<GenerationResult> infer_batch(const std::vector<const Item*>& items, const TokenSequence& prompt,
                                          BackboneBundle<T>& bundle, AdaptorStore<T>& store, const Vocabulary& vocab,
                                          int max_len, const BagCache<T>* cache = nullptr, std::size_t chunk = 1) {
  require(!store.empty(), ErrorKind::kNoTasks, "the adaptor store is empty; run add-task first");
  const Matrix<T> queries = build_queries(items, prompt, bundle, cache);
  std::map<std::size_t, std::vector<std::size_t>> groups;
  std::vector<Retrieval<T>> hits;
  for (std::size_t i = 0; i < items.size(); ++i) {
    hits.push_back(store.retrieve(queries.row(static_cast<Eigen::Index>(i)), level_of(*items[i])));
    groups[hits.back().index].push_back(i);
  }
  std::vector<GenerationResult> out(items.size());
  for (auto& [index, members] : groups) {
    StoreEntry<T>& entry = store.entries()[index];
    ModelView<T> m = view_of(bundle, entry.adaptors);
    m.prompt = &prompt;  // decode against the caller's prompt
    for (std::size_t s = 0; s < members.size(); s += chunk) {
      std::vector<const Item*> part;
      for (std::size_t k = s; k < std::min(members.size(), s + chunk); ++k) part.push_back(items[members[k]]);
      auto res = generate_batch(part, m, vocab, max_len, cache);
      for (std::size_t k = 0; k < res.size(); ++k) {
        res[k].retrieved_task_id = entry.spec.task_id;
        out[members[s + k]] = std::move(res[k]);
      }
    }
  }
  return out;
}

template <typename T>
GenerationResult infer(const Item& item, const TokenSequence& prompt, BackboneBundle<T>& bundle,
                       AdaptorStore<T>& store, const Vocabulary& vocab, int max_len) {
  return infer_batch<T>({&item}, prompt, bundle, store, vocab, max_len).front();
}

/// Generation with a named task's adaptors, skipping retrieval.
template <typename T>
std::vector<GenerationResult> predict_with_task(const std::vector<const Item*>& items, const std::string& task_id,
                                                BackboneBundle<T>& bundle, AdaptorStore<T>& store,
                                                const Vocabulary& vocab, int max_len,
                                                const BagCache<T>* cache = nullptr, std::size_t chunk = 1) {
  StoreEntry<T>* entry = store.find(task_id);
  require(entry != nullptr, ErrorKind::kInvalidTask, "task '" + task_id + "' is not in the store");
  ModelView<T> m = view_of(bundle, entry->adaptors);
  std::vector<GenerationResult> out;
  for (std::size_t s = 0; s < items.size(); s += chunk) {
    std::vector<const Item*> part(items.begin() + static_cast<std::ptrdiff_t>(s),
                                  items.begin() + static_cast<std::ptrdiff_t>(std::min(items.size(), s + chunk)));
    for (auto& r : generate_batch(part, m, vocab, max_len, cache)) {
      r.retrieved_task_id = task_id;
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---- training ---------------------------------------------------------------------

template <typename T = float>
struct TrainedTask {
  TaskKey<T> key;
  AdaptorSet<T> adaptors;
  TrainTrace trace;
};

namespace detail {

template <typename T>
std::vector<const Item*> split_items(const Dataset& data, Split s) {
  std::vector<const Item*> out;
  for (std::size_t i : data.indices(s)) out.push_back(&data.items[i]);
  return out;
}

template <typename T>
double validation_loss(const std::vector<const Item*>& items, const std::vector<TokenSequence>& labels, ModelView<T>& m,
                       const BagCache<T>* cache) {
  if (items.empty()) return 0.0;
  constexpr std::size_t kChunk = 64;
  double total = 0.0;
  for (std::size_t s = 0; s < items.size(); s += kChunk) {
    const std::size_t e = std::min(items.size(), s + kChunk);
    std::vector<const Item*> part(items.begin() + static_cast<std::ptrdiff_t>(s),
                                  items.begin() + static_cast<std::ptrdiff_t>(e));
    std::vector<const TokenSequence*> lab;
    for (std::size_t k = s; k < e; ++k) lab.push_back(&labels[k]);
    Tape<T> tape;
    Var vis = visual_tokens(tape, part, m, false, nullptr, cache);
    total += tape.value(teacher_forced_loss(tape, vis, lab, m, false, nullptr))(0, 0) * static_cast<double>(e - s);
  }
  return total / static_cast<double>(items.size());
}

/// Free-running counterpart: the model's own argmax tokens are fed back and the
/// ground-truth tokens are scored position by position (reporting only).
template <typename T>
double free_running_loss(const std::vector<const Item*>& items, const std::vector<TokenSequence>& labels,
                         ModelView<T>& m, const BagCache<T>* cache) {
  double total = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tape<T> tape0;
    const Matrix<T> vis = tape0.value(visual_tokens(tape0, {items[i]}, m, false, nullptr, cache));
    std::vector<std::vector<int>> gen(1);
    Matrix<T> rows(static_cast<Eigen::Index>(labels[i].size()), m.bundle->config.vocab_size);
    for (std::size_t j = 0; j < labels[i].size(); ++j) {
      Tape<T> tape;
      Eigen::Index length = 0;
      const Matrix<T>& l = tape.value(decoder_logits(tape, tape.constant(vis), gen, m, false, nullptr, length));
      rows.row(static_cast<Eigen::Index>(j)) = l.row(length - 1);
      Eigen::Index best = 0;
      l.row(length - 1).maxCoeff(&best);
      gen[0].push_back(static_cast<int>(best));
    }
    total += sequence_loss<T>(rows, labels[i]);
  }
  return items.empty() ? 0.0 : total / static_cast<double>(items.size());
}

/// Shared optimization loop. `key` is null for the full fine-tuning baseline.
template <typename T>
TrainTrace optimize(const Dataset& data, ModelView<T>& m, std::vector<Parameter<T>*> params, TaskKey<T>* key,
                    const Matrix<T>& previous_keys, const Vocabulary& vocab, const TrainConfig& cfg,
                    const BagCache<T>* cache, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  const auto train = split_items<T>(data, Split::kTrain);
  const auto val = split_items<T>(data, Split::kVal);
  std::vector<TokenSequence> train_labels, val_labels;
  for (const Item* it : train) train_labels.push_back(vocab.encode_label(it->label));
  for (const Item* it : val) val_labels.push_back(vocab.encode_label(it->label));
  Matrix<T> queries;
  if (key != nullptr) {
    queries = build_queries(train, *m.prompt, *m.bundle, cache);
    params.push_back(&key->vector);
  }
  Adam<T> optim(params, cfg.optimizer, cfg.weight_decay);

  const std::size_t n = train.size();
  const std::size_t batch = std::min<std::size_t>(n, static_cast<std::size_t>(cfg.batch_size));
  const std::size_t steps_per_epoch = (n + batch - 1) / batch;
  const long total_steps = static_cast<long>(steps_per_epoch) * cfg.epochs;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  TrainTrace trace;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<Matrix<T>> best_values;
  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double lk_sum = 0.0, ls_sum = 0.0;
    double lr = 0.0;
    for (std::size_t s = 0; s < n; s += batch) {
      const std::size_t e = std::min(n, s + batch);
      std::vector<const Item*> part;
      std::vector<const TokenSequence*> lab;
      Matrix<T> q(static_cast<Eigen::Index>(e - s), queries.cols());
      for (std::size_t k = s; k < e; ++k) {
        part.push_back(train[order[k]]);
        lab.push_back(&train_labels[order[k]]);
        if (key != nullptr) q.row(static_cast<Eigen::Index>(k - s)) = queries.row(static_cast<Eigen::Index>(order[k]));
      }
      Tape<T> tape;
      Var vis = visual_tokens(tape, part, m, true, &rng, cache);
      Var ls = teacher_forced_loss(tape, vis, lab, m, true, &rng);
      Var total = ls;
      double lk_value = 0.0;
      if (key != nullptr) {
        Var lk = key_loss(tape, tape.param(key->vector), q, previous_keys);
        lk_value = tape.value(lk)(0, 0);
        total = tape.add(lk, ls);
      }
      optim.zero_grad();
      tape.backward(total);
      lr = cosine_lr(cfg.lr, optim.steps(), total_steps);
      optim.step(lr);
      const double w = static_cast<double>(e - s) / static_cast<double>(n);
      lk_sum += lk_value * w;
      ls_sum += tape.value(ls)(0, 0) * w;
      trace.examples_seen += e - s;
    }
    const double val_metric =
        cfg.teacher_forcing ? validation_loss(val, val_labels, m, cache) : free_running_loss(val, val_labels, m, cache);
    trace.rows.push_back({epoch, lk_sum, ls_sum, lk_sum + ls_sum, val_metric, lr});
    if (cfg.early_stopping) {
      if (val_metric < best_val) {
        best_val = val_metric;
        trace.best_epoch = epoch;
        since_best = 0;
        best_values.clear();
        for (Parameter<T>* p : params) best_values.push_back(p->value);
      } else if (++since_best >= cfg.patience) {
        trace.stopped_early = true;
        break;
      }
    }
  }
  if (cfg.early_stopping && !best_values.empty())
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  if (!cfg.early_stopping) trace.best_epoch = cfg.epochs - 1;
  trace.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return trace;
}

}  // namespace detail

/// Trains a new key and adaptor set for `spec` against a frozen bundle. The
/// store is read (previous keys) but not modified; call store.add_task with
/// the result.
template <typename T>
TrainedTask<T> train_task(const TaskSpec& spec, const Dataset& data, BackboneBundle<T>& bundle,
                          const AdaptorStore<T>& store, const Vocabulary& vocab, const TrainConfig& cfg,
                          BagCache<T>* cache = nullptr) {
  require(bundle.frozen, ErrorKind::kInvalidInput, "backbone must be frozen before adding tasks");
  require(!store.contains(spec.task_id), ErrorKind::kConflict, "task '" + spec.task_id + "' is already in the store");
  require(!data.items.empty(), ErrorKind::kInvalidData, "dataset for '" + spec.task_id + "' is empty");
  require(data.spec == spec, ErrorKind::kInvalidData, "dataset was generated for a different task spec");
  data.validate();
  cfg.validate(bundle.config);
  require(static_cast<int>(vocab.size()) == bundle.config.vocab_size, ErrorKind::kCompatibility,
          "vocabulary does not match the backbone");

  BagCache<T> local;
  if (cache == nullptr) cache = &local;
  if (spec.level == Level::kSlide) {
    std::vector<const Item*> all;
    for (const auto& it : data.items) all.push_back(&it);
    fill_bag_cache(*cache, all, bundle);
  }

  Rng rng(cfg.seed ^ fnv1a(spec.task_id));
  TrainedTask<T> out;
  out.key = TaskKey<T>::init(spec.task_id, bundle.config.d_v + bundle.config.d_t, rng);
  out.adaptors = AdaptorSet<T>::init(spec.level, bundle.config, vocab.encode_prompt(spec.prompt), spec.labels,
                                     cfg.lora, rng, cfg.aggregator_hidden);
  ModelView<T> m = view_of(bundle, out.adaptors);
  out.trace = detail::optimize(data, m, out.adaptors.parameters(), &out.key, store.key_matrix(), vocab, cfg, cache, rng);
  return out;
}

/// Baseline: a private copy of the backbone, unfrozen and trained end to end
/// with its own projector (and aggregator for slides); no LoRA, no key.
template <typename T = float>
struct FullModel {
  BackboneBundle<T> bundle;
  Projector<T> projector;
  std::optional<AttentionAggregator<T>> aggregator;
  TokenSequence prompt;
  std::vector<std::string> labels;
  Level level = Level::kPatch;
  TrainTrace trace;

  ModelView<T> view() {
    ModelView<T> v;
    v.bundle = &bundle;
    v.aggregator = aggregator ? &*aggregator : nullptr;
    v.projector = &projector;
    v.prompt = &prompt;
    v.level = level;
    v.live_bags = true;
    return v;
  }

  void save(const std::filesystem::path& dir, const Vocabulary* vocab = nullptr) {
    save_backbone(bundle, dir / "backbone", vocab);
    auto dump = [&](const std::string& name, Parameter<T>& p) { write_file(dir / (name + ".bin"), to_blob(p.value)); };
    projector.visit("projector", dump);
    if (aggregator) aggregator->visit("aggregator", dump);
  }
};

template <typename T>
FullModel<T> train_task_full_finetune(const TaskSpec& spec, const Dataset& data, const BackboneBundle<T>& bundle,
                                      const Vocabulary& vocab, const TrainConfig& cfg) {
  require(!data.items.empty(), ErrorKind::kInvalidData, "dataset for '" + spec.task_id + "' is empty");
  data.validate();
  cfg.validate(bundle.config);
  FullModel<T> fm;
  fm.bundle = bundle;
  fm.bundle.frozen = false;
  fm.bundle.set_trainable(true);
  Rng rng(cfg.seed ^ fnv1a(spec.task_id) ^ 0x5bd1e995ULL);
  fm.projector = Projector<T>::init(bundle.config.d_v, bundle.config.d_t, rng);
  if (spec.level == Level::kSlide) fm.aggregator = AttentionAggregator<T>::init(bundle.config.d_v, cfg.aggregator_hidden, rng);
  fm.prompt = vocab.encode_prompt(spec.prompt);
  fm.labels = spec.labels;
  fm.level = spec.level;
  std::vector<Parameter<T>*> params;
  fm.bundle.visit([&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
  fm.projector.visit("projector", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
  if (fm.aggregator) fm.aggregator->visit("aggregator", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
  ModelView<T> m = fm.view();
  fm.trace = detail::optimize<T>(data, m, params, nullptr, Matrix<T>(0, 0), vocab, cfg, nullptr, rng);
  return fm;
}

}  // namespace kvadapt
