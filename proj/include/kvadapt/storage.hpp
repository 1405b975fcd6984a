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

/** @file storage.hpp Key/value adaptor storage.
 *
 * Each task owns one trainable key and one adaptor set. Keys are compared to
 * queries (concatenated image and prompt embeddings) by cosine similarity;
 * the best match selects the adaptor set used for generation.
 *
 * On disk a store is a directory:
 *
 *     manifest.json          task list, shapes, backbone checksum
 *     <task_id>/key.bin      raw little-endian float32
 *     <task_id>/<name>.bin   one blob per adaptor matrix, row-major
 */

#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kvadapt/adaptors.hpp"
#include "kvadapt/backbone.hpp"
#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/lora.hpp"
#include "kvadapt/task_spec.hpp"
#include "kvadapt/vocab.hpp"

namespace kvadapt {

template <typename T = float>
struct TaskKey {
  Parameter<T> vector;  // 1 x (d_v + d_t)
  std::string task_id;
  int insertion_index = 0;

  static TaskKey init(std::string id, Eigen::Index dim, Rng& rng) {
    TaskKey k;
    k.vector = Parameter<T>(gaussian<T>(1, dim, 0.02, rng));
    k.task_id = std::move(id);
    return k;
  }
};

template <typename T = float>
struct AdaptorSet {
  Level level = Level::kPatch;
  std::optional<LoraSet<T>> encoder_lora;              // patch level only
  std::optional<AttentionAggregator<T>> aggregator;    // slide level only
  Projector<T> projector;
  LoraSet<T> decoder_lora;
  TokenSequence prompt;
  std::vector<std::string> labels;

  static AdaptorSet init(Level level, const BackboneConfig& c, TokenSequence prompt,
                         std::vector<std::string> labels, const LoraHyper& hyper, Rng& rng,
                         Eigen::Index aggregator_hidden = 64) {
    AdaptorSet s;
    s.level = level;
    if (level == Level::kPatch)
      s.encoder_lora = make_lora_set<T>(Component::kEncoder, c.n_layers_v, c.d_v, hyper, rng);
    else
      s.aggregator = AttentionAggregator<T>::init(c.d_v, aggregator_hidden, rng);
    s.projector = Projector<T>::init(c.d_v, c.d_t, rng);
    s.decoder_lora = make_lora_set<T>(Component::kDecoder, c.n_layers_t, c.d_t, hyper, rng);
    s.prompt = std::move(prompt);
    s.labels = std::move(labels);
    s.validate();
    return s;
  }

  void validate() const {
    require(!labels.empty(), ErrorKind::kInvalidTask, "adaptor set has no labels");
    if (level == Level::kPatch)
      require(encoder_lora.has_value() && !aggregator.has_value(), ErrorKind::kInvalidTask,
              "patch adaptor sets hold encoder LoRA, projector and decoder LoRA");
    else
      require(aggregator.has_value() && !encoder_lora.has_value(), ErrorKind::kInvalidTask,
              "slide adaptor sets hold aggregator, projector and decoder LoRA");
    if (encoder_lora) encoder_lora->validate();
    decoder_lora.validate();
  }

  void visit(const ParamVisitor<T>& fn) {
    if (encoder_lora)
      for (auto& a : encoder_lora->adapters) {
        fn("encoder_lora." + a.target.name() + ".A", a.A);
        fn("encoder_lora." + a.target.name() + ".B", a.B);
      }
    if (aggregator) aggregator->visit("aggregator", fn);
    projector.visit("projector", fn);
    for (auto& a : decoder_lora.adapters) {
      fn("decoder_lora." + a.target.name() + ".A", a.A);
      fn("decoder_lora." + a.target.name() + ".B", a.B);
    }
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    visit([&](const std::string&, Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Parameter<T>& p) { n += static_cast<std::size_t>(p.value.size()); });
    return n;
  }

  /// Bytes of all adaptor blobs when serialized.
  std::size_t blob_bytes() { return param_count() * sizeof(float); }

  bool same_values(const AdaptorSet& other) const {
    auto& self = const_cast<AdaptorSet&>(*this);
    auto& rhs = const_cast<AdaptorSet&>(other);
    std::vector<const Matrix<T>*> a, b;
    self.visit([&](const std::string&, Parameter<T>& p) { a.push_back(&p.value); });
    rhs.visit([&](const std::string&, Parameter<T>& p) { b.push_back(&p.value); });
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols() || *a[i] != *b[i]) return false;
    return level == other.level && prompt == other.prompt && labels == other.labels;
  }
};

// ---- queries and the key loss ------------------------------------------------

template <typename T>
RowVector<T> make_query(const RowVector<T>& e_v, const RowVector<T>& e_t) {
  RowVector<T> q(e_v.cols() + e_t.cols());
  q << e_v, e_t;
  return q;
}

template <typename T>
double cosine(const RowVector<T>& a, const RowVector<T>& b) {
  require(a.cols() == b.cols(), ErrorKind::kDimension, "cosine of vectors with different lengths");
  const Eigen::RowVectorXd da = a.template cast<double>();
  const Eigen::RowVectorXd db = b.template cast<double>();
  const double na = da.norm();
  const double nb = db.norm();
  require(na > 0.0 && nb > 0.0, ErrorKind::kDegenerateVector, "zero-norm vector in cosine similarity");
  return da.dot(db) / (na * nb);
}

/// -cos(key, query) + mean_i cos(key, previous_i); the push term is 0 with no previous keys.
template <typename T>
double key_loss(const RowVector<T>& key, const RowVector<T>& query, const std::vector<RowVector<T>>& previous) {
  double loss = -cosine(key, query);
  if (!previous.empty()) {
    double push = 0.0;
    for (const auto& p : previous) push += cosine(key, p);
    loss += push / static_cast<double>(previous.size());
  }
  return loss;
}

/// Tape form over a batch of queries: -mean_b cos(key, Q_b) + mean_i cos(key, previous_i).
template <typename T>
Var key_loss(Tape<T>& tape, Var key, const Matrix<T>& queries, const Matrix<T>& previous) {
  Var pull = tape.scale(tape.mean_all(tape.cosine_rows(key, tape.constant(queries))), T(-1));
  if (previous.rows() == 0) return pull;
  Var push = tape.mean_all(tape.cosine_rows(key, tape.constant(previous)));
  return tape.add(pull, push);
}

// ---- the store ----------------------------------------------------------------

template <typename T = float>
struct StoreEntry {
  TaskSpec spec;
  TaskKey<T> key;
  AdaptorSet<T> adaptors;
};

template <typename T = float>
struct Retrieval {
  std::size_t index = 0;
  std::string task_id;
  double similarity = 0.0;
};

template <typename T = float>
class AdaptorStore {
 public:
  AdaptorStore() = default;
  explicit AdaptorStore(std::string backbone_checksum) : backbone_checksum_(std::move(backbone_checksum)) {}

  const std::string& backbone_checksum() const { return backbone_checksum_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<StoreEntry<T>>& entries() const { return entries_; }
  std::vector<StoreEntry<T>>& entries() { return entries_; }

  bool contains(const std::string& id) const { return find(id) != nullptr; }

  const StoreEntry<T>* find(const std::string& id) const {
    for (const auto& e : entries_)
      if (e.spec.task_id == id) return &e;
    return nullptr;
  }
  StoreEntry<T>* find(const std::string& id) {
    for (auto& e : entries_)
      if (e.spec.task_id == id) return &e;
    return nullptr;
  }

  /// Keys of every stored task, one row each.
  Matrix<T> key_matrix() const {
    if (entries_.empty()) return Matrix<T>(0, 0);
    Matrix<T> out(static_cast<Eigen::Index>(entries_.size()), entries_.front().key.vector.value.cols());
    for (std::size_t i = 0; i < entries_.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = entries_[i].key.vector.value;
    return out;
  }

  /// Appends a trained pair; never touches existing entries.
  void add_task(TaskSpec spec, TaskKey<T> key, AdaptorSet<T> adaptors) {
    require(!contains(spec.task_id), ErrorKind::kConflict, "task '" + spec.task_id + "' is already in the store");
    require(key.vector.value.size() > 0 && key.vector.value.allFinite(), ErrorKind::kInvalidInput,
            "task key must be finite");
    if (!entries_.empty())
      require(key.vector.value.cols() == entries_.front().key.vector.value.cols(), ErrorKind::kDimension,
              "task key width differs from the stored keys");
    adaptors.validate();
    key.task_id = spec.task_id;
    key.insertion_index = static_cast<int>(entries_.size());
    key.vector.trainable = false;
    for (Parameter<T>* p : adaptors.parameters()) p->trainable = false;
    entries_.push_back({std::move(spec), std::move(key), std::move(adaptors)});
  }

  /// Highest cosine similarity wins; ties go to the earliest inserted task.
  /// With `level` set only tasks of that level compete (a bag cannot run
  /// through patch adaptors and vice versa).
  Retrieval<T> retrieve(const RowVector<T>& query, std::optional<Level> level = {}) const {
    require(!entries_.empty(), ErrorKind::kNoTasks, "the adaptor store is empty");
    Retrieval<T> best;
    best.similarity = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (level && entries_[i].spec.level != *level) continue;
      any = true;
      const double s = cosine<T>(query, entries_[i].key.vector.value.row(0));
      if (s > best.similarity) {
        best.index = i;
        best.similarity = s;
        best.task_id = entries_[i].spec.task_id;
      }
    }
    require(any, ErrorKind::kNoTasks, "the adaptor store holds no " + to_string(*level) + "-level tasks");
    return best;
  }

  // ---- persistence ----

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& e : entries_) {
      const auto task_dir = dir / e.spec.task_id;
      std::filesystem::create_directories(task_dir);
      write_file(task_dir / "key.bin", to_blob(e.key.vector.value));
      nlohmann::json tensors = nlohmann::json::array();
      tensors.push_back({{"name", "key"}, {"rows", 1}, {"cols", e.key.vector.value.cols()}});
      auto& set = const_cast<AdaptorSet<T>&>(e.adaptors);
      set.visit([&](const std::string& name, Parameter<T>& p) {
        write_file(task_dir / (name + ".bin"), to_blob(p.value));
        tensors.push_back({{"name", name}, {"rows", p.value.rows()}, {"cols", p.value.cols()}});
      });
      nlohmann::json lora = nlohmann::json::array();
      auto describe = [&](const LoraSet<T>& s) {
        for (const auto& a : s.adapters)
          lora.push_back({{"target", a.target.name()},
                          {"component", to_string(a.target.component)},
                          {"layer", a.target.layer},
                          {"matrix", std::string(1, a.target.matrix)},
                          {"rank", a.rank},
                          {"alpha", a.alpha},
                          {"dropout_p", a.dropout}});
      };
      if (e.adaptors.encoder_lora) describe(*e.adaptors.encoder_lora);
      describe(e.adaptors.decoder_lora);
      tasks.push_back({{"id", e.spec.task_id},
                       {"spec", e.spec},
                       {"level", to_string(e.adaptors.level)},
                       {"prompt", e.spec.prompt},
                       {"prompt_ids", e.adaptors.prompt.ids},
                       {"labels", e.adaptors.labels},
                       {"insertion_index", e.key.insertion_index},
                       {"tensors", tensors},
                       {"lora", lora}});
    }
    nlohmann::json manifest{{"format", "kvadapt-store-1"}, {"backbone_checksum", backbone_checksum_}, {"tasks", tasks}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  }

  /// Loads a store; if `expected_checksum` is given it must match the store's backbone.
  static AdaptorStore load(const std::filesystem::path& dir, const std::optional<std::string>& expected_checksum = {}) {
    require(std::filesystem::exists(dir / "manifest.json"), ErrorKind::kMissingFile,
            "no adaptor store at " + dir.string());
    const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    AdaptorStore store(manifest.at("backbone_checksum").get<std::string>());
    if (expected_checksum)
      require(*expected_checksum == store.backbone_checksum_, ErrorKind::kCompatibility,
              "store was trained against backbone " + store.backbone_checksum_ + ", loaded backbone is " +
                  *expected_checksum);
    for (const auto& t : manifest.at("tasks")) {
      StoreEntry<T> e;
      e.spec = t.at("spec").get<TaskSpec>();
      const auto task_dir = dir / e.spec.task_id;
      auto blob = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        return from_blob<T>(read_file(task_dir / (name + ".bin")), rows, cols);
      };
      std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> shapes;
      for (const auto& s : t.at("tensors"))
        shapes[s.at("name").get<std::string>()] = {s.at("rows").get<Eigen::Index>(), s.at("cols").get<Eigen::Index>()};
      auto shape = [&](const std::string& name) {
        const auto it = shapes.find(name);
        require(it != shapes.end(), ErrorKind::kSchema, "tensor '" + name + "' missing from manifest");
        return it->second;
      };
      const auto [kr, kc] = shape("key");
      e.key.vector = Parameter<T>(blob("key", kr, kc), false);
      e.key.task_id = e.spec.task_id;
      e.key.insertion_index = t.at("insertion_index").get<int>();

      AdaptorSet<T>& s = e.adaptors;
      s.level = parse_level(t.at("level").get<std::string>());
      s.prompt.ids = t.at("prompt_ids").get<std::vector<int>>();
      s.labels = t.at("labels").get<std::vector<std::string>>();
      LoraSet<T> enc, dec;
      for (const auto& l : t.at("lora")) {
        LoraAdapter<T> a;
        a.target = {parse_component(l.at("component").get<std::string>()), l.at("layer").get<int>(),
                    l.at("matrix").get<std::string>().at(0)};
        a.rank = l.at("rank").get<int>();
        a.alpha = l.at("alpha").get<double>();
        a.dropout = l.at("dropout_p").get<double>();
        (a.target.component == Component::kEncoder ? enc : dec).adapters.push_back(std::move(a));
      }
      if (s.level == Level::kPatch) s.encoder_lora = std::move(enc);
      s.decoder_lora = std::move(dec);
      if (s.level == Level::kSlide) s.aggregator = AttentionAggregator<T>{};
      // Projector layer count is fixed; allocate the four layers before reading.
      s.projector.layers.resize(4);
      s.visit([&](const std::string& name, Parameter<T>& p) {
        const auto [r, c] = shape(name);
        p = Parameter<T>(blob(name, r, c), false);
      });
      s.validate();
      store.entries_.push_back(std::move(e));
    }
    return store;
  }

 private:
  std::string backbone_checksum_;
  std::vector<StoreEntry<T>> entries_;
};

/// Total size in bytes of every regular file under `dir`.
inline std::uintmax_t directory_bytes(const std::filesystem::path& dir) {
  std::uintmax_t total = 0;
  for (const auto& f : std::filesystem::recursive_directory_iterator(dir))
    if (f.is_regular_file()) total += f.file_size();
  return total;
}

}  // namespace kvadapt
