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

/** @file pretrain.hpp Builds the shared backbones before any downstream task is seen.
 *
 * Stage 1 trains the encoder to classify (task, class) pairs of held-out
 * image tasks through a linear head that is thrown away afterwards. Stage 2
 * freezes the encoder and trains the decoder on next-token prediction over
 * [visual slot, prompt, label, EOS] sequences; the slot carries a throwaway
 * linear projection of the image embedding for held-out images, and is zero
 * for text-only prompt/label pairs.
 */

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kvadapt/backbone.hpp"
#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/optim.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/datasets.hpp"
#include "kvadapt/vocab.hpp"

namespace kvadapt {

struct TextPair {
  TokenSequence prompt;
  TokenSequence label;  // ends with EOS
};

struct PretrainCorpus {
  std::vector<Dataset> image_tasks;  // held-out, patch level
  std::vector<TextPair> text;        // prompt/label pairs without images
};

struct PretrainOptions {
  int encoder_epochs = 30;
  int decoder_epochs = 40;
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
  int batch_size = 32;
  int text_repeats = 16;  // each text-only pair is seen this many times per epoch
};

struct PretrainTracePoint {
  std::string stage;  // "encoder" or "decoder"
  int epoch = 0;
  double loss = 0.0;
};

template <typename T = float>
struct PretrainResult {
  BackboneBundle<T> bundle;
  std::vector<PretrainTracePoint> trace;
  std::vector<std::string> warnings;
};

/// Held-out image tasks plus every prompt/label pair of the given downstream tasks.
inline PretrainCorpus build_pretrain_corpus(const std::vector<TaskSpec>& pretrain_tasks,
                                            const std::vector<TaskSpec>& downstream, const Vocabulary& vocab,
                                            int n_per_class, std::uint64_t seed, int image_size = 32) {
  PretrainCorpus corpus;
  for (const auto& p : pretrain_tasks) {
    for (const auto& d : downstream)
      require(p.task_id != d.task_id, ErrorKind::kInvalidTask,
              "pretraining task '" + p.task_id + "' is also a downstream task");
    corpus.image_tasks.push_back(generate_patch_task(p, n_per_class, seed, image_size));
  }
  for (const auto& d : downstream)
    for (const auto& l : d.labels) corpus.text.push_back({vocab.encode_prompt(d.prompt), vocab.encode_label(l)});
  return corpus;
}

namespace detail {

inline bool decreased(const std::vector<PretrainTracePoint>& trace, const std::string& stage) {
  const PretrainTracePoint* first = nullptr;
  const PretrainTracePoint* last = nullptr;
  for (const auto& p : trace)
    if (p.stage == stage) {
      if (first == nullptr) first = &p;
      last = &p;
    }
  return first == nullptr || first == last || last->loss < first->loss;
}

}  // namespace detail

template <typename T = float>
PretrainResult<T> pretrain_backbones(const BackboneConfig& config, const PretrainCorpus& corpus,
                                     const Vocabulary& vocab, std::uint64_t seed, const PretrainOptions& opt = {}) {
  config.validate();
  require(config.vocab_size == static_cast<int>(vocab.size()), ErrorKind::kConfig,
          "backbone vocab_size does not match the vocabulary");
  require(opt.batch_size > 0 && opt.encoder_epochs >= 0 && opt.decoder_epochs >= 0, ErrorKind::kConfig,
          "bad pretraining options");
  PretrainResult<T> result;
  result.bundle = BackboneBundle<T>::init(config, seed);
  BackboneBundle<T>& b = result.bundle;
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);

  // Flattened image corpus with joint (task, class) targets; train split only.
  std::vector<const Image*> images;
  std::vector<int> joint;
  std::vector<TextPair> image_text;
  int n_joint = 0;
  for (const auto& ds : corpus.image_tasks) {
    require(ds.spec.level == Level::kPatch, ErrorKind::kInvalidTask, "pretraining image tasks must be patch level");
    const TokenSequence prompt = vocab.encode_prompt(ds.spec.prompt);
    for (std::size_t i : ds.indices(Split::kTrain)) {
      images.push_back(&ds.items[i].images.front());
      joint.push_back(n_joint + ds.spec.label_index(ds.items[i].label));
      image_text.push_back({prompt, vocab.encode_label(ds.items[i].label)});
    }
    n_joint += static_cast<int>(ds.spec.labels.size());
  }

  // ---- stage 1: encoder ----
  if (opt.encoder_epochs > 0 && !images.empty()) {
    Linear<T> head = Linear<T>::init(config.d_v, n_joint, 1.0 / std::sqrt(static_cast<double>(config.d_v)), rng);
    std::vector<Parameter<T>*> params;
    b.encoder.visit("encoder", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
    head.visit("head", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
    Adam<T> optim(params, OptimizerKind::kAdamW);
    const std::size_t n = images.size();
    const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    const std::size_t total = steps_per_epoch * static_cast<std::size_t>(opt.encoder_epochs);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (int epoch = 0; epoch < opt.encoder_epochs; ++epoch) {
      rng.shuffle(order.begin(), order.end());
      double sum = 0.0;
      for (std::size_t s = 0; s < n; s += opt.batch_size) {
        const std::size_t e = std::min(n, s + opt.batch_size);
        std::vector<const Image*> batch;
        std::vector<int> targets;
        for (std::size_t k = s; k < e; ++k) {
          batch.push_back(images[order[k]]);
          targets.push_back(joint[order[k]]);
        }
        Tape<T> tape;
        ForwardContext<T> ctx;
        Var emb = b.encoder.forward(tape, stack_patches<T>(batch, config), static_cast<Eigen::Index>(batch.size()), ctx);
        Var loss = tape.cross_entropy(head.forward(tape, emb), targets,
                                      std::vector<T>(batch.size(), T(1) / static_cast<T>(batch.size())));
        optim.zero_grad();
        tape.backward(loss);
        optim.step(cosine_lr(opt.encoder_lr, optim.steps(), total));
        sum += tape.value(loss)(0, 0) * static_cast<double>(batch.size());
      }
      result.trace.push_back({"encoder", epoch, sum / static_cast<double>(n)});
    }
  }

  // ---- stage 2: decoder ----
  if (opt.decoder_epochs > 0) {
    const Matrix<T> image_emb = images.empty() ? Matrix<T>(0, config.d_v) : encode_images<T>(images, b);
    Linear<T> slot = Linear<T>::init(config.d_v, config.d_t, 1.0 / std::sqrt(static_cast<double>(config.d_v)), rng);
    std::vector<Parameter<T>*> params;
    b.decoder.visit("decoder", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
    slot.visit("slot", [&](const std::string&, Parameter<T>& p) { params.push_back(&p); });
    Adam<T> optim(params, OptimizerKind::kAdamW);

    // Entry index >= 0: image example; < 0: text pair (-1 - k).
    std::vector<long> entries;
    for (std::size_t i = 0; i < image_text.size(); ++i) entries.push_back(static_cast<long>(i));
    for (int r = 0; r < opt.text_repeats; ++r)
      for (std::size_t k = 0; k < corpus.text.size(); ++k) entries.push_back(-1 - static_cast<long>(k));
    require(!entries.empty(), ErrorKind::kInvalidData, "pretraining corpus is empty");
    const std::size_t n = entries.size();
    const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
    const std::size_t total = steps_per_epoch * static_cast<std::size_t>(opt.decoder_epochs);
    for (int epoch = 0; epoch < opt.decoder_epochs; ++epoch) {
      rng.shuffle(entries.begin(), entries.end());
      double sum = 0.0;
      for (std::size_t s = 0; s < n; s += opt.batch_size) {
        const std::size_t e = std::min(n, s + opt.batch_size);
        const auto batch = static_cast<Eigen::Index>(e - s);
        std::vector<const TextPair*> pairs;
        for (std::size_t k = s; k < e; ++k)
          pairs.push_back(entries[k] >= 0 ? &image_text[static_cast<std::size_t>(entries[k])]
                                          : &corpus.text[static_cast<std::size_t>(-1 - entries[k])]);
        Eigen::Index length = 0;
        for (const auto* p : pairs)
          length = std::max<Eigen::Index>(length, 1 + static_cast<Eigen::Index>(p->prompt.size() + p->label.size()));
        std::vector<int> ids(static_cast<std::size_t>(batch * length), Vocabulary::kPad);
        std::vector<int> targets(ids.size(), -1);
        int n_targets = 0;
        for (Eigen::Index r = 0; r < batch; ++r) {
          std::vector<int> text = pairs[static_cast<std::size_t>(r)]->prompt.ids;
          const auto& lab = pairs[static_cast<std::size_t>(r)]->label.ids;
          text.insert(text.end(), lab.begin(), lab.end());
          for (std::size_t t = 0; t < text.size(); ++t) {
            ids[static_cast<std::size_t>(r * length) + 1 + t] = text[t];
            targets[static_cast<std::size_t>(r * length) + t] = text[t];
            ++n_targets;
          }
        }
        Matrix<T> emb = Matrix<T>::Zero(batch, config.d_v);
        Matrix<T> has_image = Matrix<T>::Zero(batch, config.d_t);
        for (Eigen::Index r = 0; r < batch; ++r)
          if (entries[s + static_cast<std::size_t>(r)] >= 0) {
            emb.row(r) = image_emb.row(entries[s + static_cast<std::size_t>(r)]);
            has_image.row(r).setOnes();
          }
        Tape<T> tape;
        ForwardContext<T> ctx;
        Var vis = tape.mul_const(slot.forward(tape, tape.constant(emb)), has_image);
        std::vector<Eigen::Index> rows;
        for (Eigen::Index r = 0; r < batch; ++r) rows.push_back(r * length);
        Var inputs = tape.overwrite_rows(b.decoder.embed(tape, ids), vis, rows);
        Var logits = b.decoder.logits(tape, b.decoder.hidden(tape, inputs, batch, length, ctx));
        Var loss = tape.cross_entropy(logits, targets, std::vector<T>(ids.size(), T(1) / static_cast<T>(n_targets)));
        optim.zero_grad();
        tape.backward(loss);
        optim.step(cosine_lr(opt.decoder_lr, optim.steps(), total));
        sum += tape.value(loss)(0, 0) * static_cast<double>(batch);
      }
      result.trace.push_back({"decoder", epoch, sum / static_cast<double>(n)});
    }
  }

  for (const char* stage : {"encoder", "decoder"})
    if (!detail::decreased(result.trace, stage))
      result.warnings.push_back(std::string("pretraining did not reduce the ") + stage + " loss");
  result.bundle = freeze(std::move(result.bundle));
  return result;
}

}  // namespace kvadapt
