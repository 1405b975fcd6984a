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

/** @file backbone.hpp The shared frozen models.
 *
 * A patch-token visual encoder and a causal text decoder, both pre-LN
 * transformers with fixed sinusoidal positions. Every attention projection
 * can carry a LoRA adapter; the models themselves never see task state.
 */

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/sha256.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/image.hpp"
#include "kvadapt/lora.hpp"
#include "kvadapt/vocab.hpp"

namespace kvadapt {

struct BackboneConfig {
  int image_size = 32;
  int patch_size = 8;
  int d_v = 64;
  int d_t = 64;
  int n_layers_v = 2;
  int n_layers_t = 2;
  int n_heads = 4;
  int max_seq_len = 32;
  int vocab_size = 0;
  int ffn_mult = 4;

  int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
  int patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0, ErrorKind::kConfig,
            "image_size must be a positive multiple of patch_size");
    require(n_heads > 0 && d_v % n_heads == 0 && d_t % n_heads == 0, ErrorKind::kConfig,
            "d_v and d_t must be divisible by n_heads");
    require(n_layers_v >= 1 && n_layers_t >= 1, ErrorKind::kConfig, "need at least one layer per backbone");
    require(vocab_size >= 2, ErrorKind::kConfig, "vocab_size must include PAD and EOS");
    require(max_seq_len >= 2, ErrorKind::kConfig, "max_seq_len too small");
  }

  /// Longest prompt + longest label + visual token + EOS must fit.
  void check_fits(const std::vector<TaskSpec>& tasks) const {
    for (const auto& t : tasks) {
      std::size_t longest = 0;
      for (const auto& l : t.labels) longest = std::max(longest, split_words(l).size());
      const std::size_t need = split_words(t.prompt).size() + longest + 2;
      require(need <= static_cast<std::size_t>(max_seq_len), ErrorKind::kConfig,
              "task '" + t.task_id + "' needs max_seq_len >= " + std::to_string(need));
    }
  }

  bool operator==(const BackboneConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"d_v", c.d_v},
                     {"d_t", c.d_t},               {"n_layers_v", c.n_layers_v}, {"n_layers_t", c.n_layers_t},
                     {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size},
                     {"ffn_mult", c.ffn_mult}};
}

inline void from_json(const nlohmann::json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.d_v = j.value("d_v", d.d_v);
  c.d_t = j.value("d_t", d.d_t);
  c.n_layers_v = j.value("n_layers_v", d.n_layers_v);
  c.n_layers_t = j.value("n_layers_t", d.n_layers_t);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.ffn_mult = j.value("ffn_mult", d.ffn_mult);
}

/// Visits (name, parameter) pairs in a fixed order.
template <typename T>
using ParamVisitor = std::function<void(const std::string&, Parameter<T>&)>;

constexpr double kInitStd = 0.02;

/// Sinusoidal positions are scaled down so they do not swamp 0.02-scale embeddings.
constexpr double kPositionScale = 0.1;

template <typename T>
struct Linear {
  Parameter<T> weight;  // in x out
  Parameter<T> bias;    // 1 x out

  static Linear init(Eigen::Index in, Eigen::Index out, double stddev, Rng& rng) {
    Linear l;
    l.weight = Parameter<T>(gaussian<T>(in, out, stddev, rng));
    l.bias = Parameter<T>(Matrix<T>::Zero(1, out));
    return l;
  }

  Var forward(Tape<T>& tape, Var x) { return tape.add_row(tape.matmul(x, tape.param(weight)), tape.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gain;
  Parameter<T> bias;

  static LayerNorm init(Eigen::Index width) {
    LayerNorm n;
    n.gain = Parameter<T>(Matrix<T>::Ones(1, width));
    n.bias = Parameter<T>(Matrix<T>::Zero(1, width));
    return n;
  }

  Var forward(Tape<T>& tape, Var x) { return tape.layer_norm(x, tape.param(gain), tape.param(bias)); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
  }
};

/// Per-call context threaded through the transformer blocks.
template <typename T>
struct ForwardContext {
  LoraSet<T>* lora = nullptr;
  bool training = false;
  Rng* rng = nullptr;
};

template <typename T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> q, k, v, o;
  Linear<T> fc1, fc2;

  static TransformerBlock init(Eigen::Index width, int ffn_mult, Rng& rng) {
    TransformerBlock b;
    b.ln1 = LayerNorm<T>::init(width);
    b.ln2 = LayerNorm<T>::init(width);
    b.q = Linear<T>::init(width, width, kInitStd, rng);
    b.k = Linear<T>::init(width, width, kInitStd, rng);
    b.v = Linear<T>::init(width, width, kInitStd, rng);
    b.o = Linear<T>::init(width, width, kInitStd, rng);
    b.fc1 = Linear<T>::init(width, width * ffn_mult, kInitStd, rng);
    b.fc2 = Linear<T>::init(width * ffn_mult, width, kInitStd, rng);
    return b;
  }

  Var forward(Tape<T>& tape, Var x, Eigen::Index batch, Eigen::Index length, int heads, bool causal,
              Component component, int layer, ForwardContext<T>& ctx) {
    Var h = ln1.forward(tape, x);
    auto project = [&](Linear<T>& lin, char m) {
      Var xw = tape.matmul(h, tape.param(lin.weight));
      if (ctx.lora != nullptr) {
        if (LoraAdapter<T>* a = ctx.lora->find(component, layer, m))
          xw = apply_lora(tape, h, xw, *a, ctx.training, ctx.rng);
      }
      return tape.add_row(xw, tape.param(lin.bias));
    };
    Var attn = tape.attention(project(q, 'q'), project(k, 'k'), project(v, 'v'), batch, length, heads, causal);
    x = tape.add(x, o.forward(tape, attn));
    Var f = fc2.forward(tape, tape.gelu(fc1.forward(tape, ln2.forward(tape, x))));
    return tape.add(x, f);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    ln1.visit(prefix + ".ln1", fn);
    q.visit(prefix + ".attn.q", fn);
    k.visit(prefix + ".attn.k", fn);
    v.visit(prefix + ".attn.v", fn);
    o.visit(prefix + ".attn.o", fn);
    ln2.visit(prefix + ".ln2", fn);
    fc1.visit(prefix + ".ffn.fc1", fn);
    fc2.visit(prefix + ".ffn.fc2", fn);
  }
};

/// Patch-token encoder; the image embedding is the mean of the final-layer
/// (post-norm) patch states.
template <typename T>
struct Encoder {
  Linear<T> patch_embed;
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_f;
  int heads = 4;
  Matrix<T> positions;

  static Encoder init(const BackboneConfig& c, Rng& rng) {
    Encoder e;
    e.patch_embed = Linear<T>::init(c.patch_dim(), c.d_v, kInitStd, rng);
    for (int l = 0; l < c.n_layers_v; ++l) e.blocks.push_back(TransformerBlock<T>::init(c.d_v, c.ffn_mult, rng));
    e.ln_f = LayerNorm<T>::init(c.d_v);
    e.heads = c.n_heads;
    e.positions = sinusoidal_positions<T>(c.num_patches(), c.d_v) * T(kPositionScale);
    return e;
  }

  /// patches: (batch * num_patches) x patch_dim, images stacked. Returns batch x d_v.
  Var forward(Tape<T>& tape, const Matrix<T>& patches, Eigen::Index batch, ForwardContext<T>& ctx) {
    const Eigen::Index n = positions.rows();
    require(patches.rows() == batch * n && patches.cols() == patch_embed.weight.value.rows(), ErrorKind::kDimension,
            "encoder input has the wrong shape");
    Var x = patch_embed.forward(tape, tape.constant(patches));
    x = tape.add(x, tape.constant(positions.replicate(batch, 1)));
    for (std::size_t l = 0; l < blocks.size(); ++l)
      x = blocks[l].forward(tape, x, batch, n, heads, false, Component::kEncoder, static_cast<int>(l), ctx);
    return tape.mean_segments(ln_f.forward(tape, x), batch, n);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    patch_embed.visit(prefix + ".patch_embed", fn);
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].visit(prefix + ".blocks." + std::to_string(l), fn);
    ln_f.visit(prefix + ".ln_f", fn);
  }
};

/// Causal decoder over a sequence of d_t input vectors.
template <typename T>
struct Decoder {
  Parameter<T> token_embed;  // vocab x d_t
  std::vector<TransformerBlock<T>> blocks;
  LayerNorm<T> ln_f;
  Linear<T> lm_head;
  int heads = 4;
  Matrix<T> positions;

  static Decoder init(const BackboneConfig& c, Rng& rng) {
    Decoder d;
    d.token_embed = Parameter<T>(gaussian<T>(c.vocab_size, c.d_t, kInitStd, rng));
    for (int l = 0; l < c.n_layers_t; ++l) d.blocks.push_back(TransformerBlock<T>::init(c.d_t, c.ffn_mult, rng));
    d.ln_f = LayerNorm<T>::init(c.d_t);
    d.lm_head = Linear<T>::init(c.d_t, c.vocab_size, kInitStd, rng);
    d.heads = c.n_heads;
    d.positions = sinusoidal_positions<T>(c.max_seq_len, c.d_t) * T(kPositionScale);
    return d;
  }

  Eigen::Index max_len() const { return positions.rows(); }

  Var embed(Tape<T>& tape, const std::vector<int>& ids) { return tape.embedding(tape.param(token_embed), ids); }

  /// inputs: (batch * length) x d_t. Returns the final (post-norm) hidden states.
  Var hidden(Tape<T>& tape, Var inputs, Eigen::Index batch, Eigen::Index length, ForwardContext<T>& ctx) {
    require(length >= 1 && length <= max_len(), ErrorKind::kLength,
            "sequence length " + std::to_string(length) + " exceeds max_seq_len " + std::to_string(max_len()));
    require(tape.value(inputs).rows() == batch * length, ErrorKind::kDimension, "decoder input row count");
    Var x = tape.add(inputs, tape.constant(positions.topRows(length).replicate(batch, 1)));
    for (std::size_t l = 0; l < blocks.size(); ++l)
      x = blocks[l].forward(tape, x, batch, length, heads, true, Component::kDecoder, static_cast<int>(l), ctx);
    return ln_f.forward(tape, x);
  }

  Var logits(Tape<T>& tape, Var hidden_states) { return lm_head.forward(tape, hidden_states); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".token_embed", token_embed);
    for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].visit(prefix + ".blocks." + std::to_string(l), fn);
    ln_f.visit(prefix + ".ln_f", fn);
    lm_head.visit(prefix + ".lm_head", fn);
  }
};

template <typename T = float>
struct BackboneBundle {
  BackboneConfig config;
  Encoder<T> encoder;
  Decoder<T> decoder;
  bool frozen = false;
  std::uint64_t seed = 0;

  /// Seeded random initialization; every matrix ~ N(0, 0.02).
  static BackboneBundle init(const BackboneConfig& c, std::uint64_t seed) {
    c.validate();
    Rng rng(seed);
    Rng enc_rng = rng.fork();
    Rng dec_rng = rng.fork();
    BackboneBundle b;
    b.config = c;
    b.seed = seed;
    b.encoder = Encoder<T>::init(c, enc_rng);
    b.decoder = Decoder<T>::init(c, dec_rng);
    return b;
  }

  void visit(const ParamVisitor<T>& fn) {
    encoder.visit("encoder", fn);
    decoder.visit("decoder", fn);
  }

  std::vector<std::pair<std::string, Parameter<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Parameter<T>*>> out;
    visit([&](const std::string& n, Parameter<T>& p) { out.emplace_back(n, &p); });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Parameter<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  void set_trainable(bool trainable) {
    visit([&](const std::string&, Parameter<T>& p) { p.trainable = trainable; });
  }

  /// SHA-256 over every (name, shape, float32 bytes) in visit order.
  std::string checksum() const {
    Sha256 sha;
    const_cast<BackboneBundle*>(this)->visit([&](const std::string& n, Parameter<T>& p) {
      sha.update(n);
      sha.update(std::string_view("\0", 1));
      sha.update(std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
      const auto blob = to_blob(p.value);
      sha.update_bytes(std::span<const char>(blob.data(), blob.size()));
    });
    return sha.hex();
  }
};

/// Marks the bundle frozen: no optimizer will touch its parameters, while
/// gradients still flow through them to upstream trainables.
template <typename T>
BackboneBundle<T> freeze(BackboneBundle<T> b) {
  b.frozen = true;
  b.set_trainable(false);
  return b;
}

template <typename To, typename From>
BackboneBundle<To> cast_bundle(const BackboneBundle<From>& src) {
  auto& from = const_cast<BackboneBundle<From>&>(src);
  BackboneBundle<To> out = BackboneBundle<To>::init(src.config, src.seed);
  auto dst = out.named_parameters();
  auto srcp = from.named_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i].second->value = srcp[i].second->value.template cast<To>();
    dst[i].second->trainable = srcp[i].second->trainable;
  }
  out.frozen = src.frozen;
  return out;
}

// ---- inference helpers (no trainable state involved) -------------------------

template <typename T>
Matrix<T> stack_patches(const std::vector<const Image*>& images, const BackboneConfig& c) {
  Matrix<T> out(static_cast<Eigen::Index>(images.size()) * c.num_patches(), c.patch_dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i]->height == c.image_size && images[i]->width == c.image_size, ErrorKind::kDimension,
            "image is " + std::to_string(images[i]->height) + "x" + std::to_string(images[i]->width) +
                ", backbone expects " + std::to_string(c.image_size));
    out.middleRows(static_cast<Eigen::Index>(i) * c.num_patches(), c.num_patches()) =
        to_patches<T>(*images[i], c.patch_size);
  }
  return out;
}

/// Image embeddings for a batch of images, one row each.
template <typename T>
Matrix<T> encode_images(const std::vector<const Image*>& images, BackboneBundle<T>& bundle,
                        LoraSet<T>* lora = nullptr) {
  Matrix<T> out(static_cast<Eigen::Index>(images.size()), bundle.config.d_v);
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < images.size(); start += kChunk) {
    const std::size_t end = std::min(images.size(), start + kChunk);
    std::vector<const Image*> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                   images.begin() + static_cast<std::ptrdiff_t>(end));
    Tape<T> tape;
    ForwardContext<T> ctx{lora, false, nullptr};
    Var e = bundle.encoder.forward(tape, stack_patches<T>(part, bundle.config),
                                   static_cast<Eigen::Index>(part.size()), ctx);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(part.size())) = tape.value(e);
  }
  return out;
}

template <typename T>
RowVector<T> encode_image(const Image& image, BackboneBundle<T>& bundle, LoraSet<T>* lora = nullptr) {
  return encode_images<T>({&image}, bundle, lora).row(0);
}

/// Mean of the decoder's final hidden states over the prompt tokens.
template <typename T>
RowVector<T> embed_prompt(const TokenSequence& prompt, BackboneBundle<T>& bundle) {
  require(!prompt.empty(), ErrorKind::kInvalidInput, "prompt is empty");
  for (int id : prompt.ids)
    require(id != Vocabulary::kEos, ErrorKind::kInvalidInput, "prompt must not contain EOS");
  Tape<T> tape;
  ForwardContext<T> ctx;
  const auto n = static_cast<Eigen::Index>(prompt.size());
  Var h = bundle.decoder.hidden(tape, bundle.decoder.embed(tape, prompt.ids), 1, n, ctx);
  return tape.value(tape.mean_segments(h, 1, n)).row(0);
}

/// Next-token logits after a sequence of d_t input vectors.
template <typename T>
RowVector<T> decode_step(const Matrix<T>& input_states, BackboneBundle<T>& bundle, LoraSet<T>* lora = nullptr) {
  require(input_states.cols() == bundle.config.d_t, ErrorKind::kDimension, "decoder inputs must be d_t wide");
  require(input_states.rows() >= 1, ErrorKind::kInvalidInput, "decoder needs at least one input");
  Tape<T> tape;
  ForwardContext<T> ctx{lora, false, nullptr};
  Var h = bundle.decoder.hidden(tape, tape.constant(input_states), 1, input_states.rows(), ctx);
  Var l = bundle.decoder.logits(tape, h);
  return tape.value(l).row(input_states.rows() - 1);
}

// ---- checkpoint ----------------------------------------------------------------

/// Directory with manifest.json plus one raw float32 blob per named matrix.
template <typename T>
void save_backbone(const BackboneBundle<T>& bundle, const std::filesystem::path& dir,
                   const Vocabulary* vocab = nullptr) {
  std::filesystem::create_directories(dir);
  auto& b = const_cast<BackboneBundle<T>&>(bundle);
  nlohmann::json matrices = nlohmann::json::array();
  b.visit([&](const std::string& name, Parameter<T>& p) {
    const auto blob = to_blob(p.value);
    write_file(dir / name, blob);
    matrices.push_back({{"name", name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
  });
  nlohmann::json manifest{{"config", bundle.config},
                          {"seed", bundle.seed},
                          {"checksum", bundle.checksum()},
                          {"frozen", bundle.frozen},
                          {"matrices", matrices}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  if (vocab != nullptr) vocab->save(dir / "vocab.txt");
}

template <typename T = float>
BackboneBundle<T> load_backbone(const std::filesystem::path& dir) {
  require(std::filesystem::exists(dir / "manifest.json"), ErrorKind::kMissingFile,
          "no backbone checkpoint at " + dir.string());
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  const auto config = manifest.at("config").get<BackboneConfig>();
  auto bundle = BackboneBundle<T>::init(config, manifest.at("seed").get<std::uint64_t>());
  bundle.visit([&](const std::string& name, Parameter<T>& p) {
    const auto bytes = read_file(dir / name);
    p.value = from_blob<T>(bytes, p.value.rows(), p.value.cols());
  });
  require(bundle.checksum() == manifest.at("checksum").get<std::string>(), ErrorKind::kCompatibility,
          "backbone checksum mismatch in " + dir.string());
  if (manifest.value("frozen", false)) bundle = freeze(std::move(bundle));
  return bundle;
}

}  // namespace kvadapt
