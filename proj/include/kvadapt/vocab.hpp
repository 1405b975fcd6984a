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

#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/task_spec.hpp"

namespace kvadapt {

struct TokenSequence {
  std::vector<int> ids;
  bool terminated = false;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  bool operator==(const TokenSequence&) const = default;
};

/// Closed word-level vocabulary. Ids 0 and 1 are always PAD and EOS; every
/// other word follows in lexicographic order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kEosToken = "<eos>";

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Words beyond the two specials; sorted and deduplicated here.
  explicit Vocabulary(const std::vector<std::string>& words) {
    std::set<std::string> unique(words.begin(), words.end());
    tokens_ = {kPadToken, kEosToken};
    for (const auto& w : unique) {
      require(w != kPadToken && w != kEosToken, ErrorKind::kInvalidTask, "word collides with a special token");
      tokens_.push_back(w);
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) id_of_[tokens_[i]] = static_cast<int>(i);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& word) const { return id_of_.count(word) != 0; }

  int id(const std::string& word) const {
    const auto it = id_of_.find(word);
    require(it != id_of_.end(), ErrorKind::kOutOfVocabulary, "word '" + word + "' is not in the vocabulary");
    return it->second;
  }

  TokenSequence encode_prompt(const std::string& text) const {
    TokenSequence seq;
    for (const auto& w : split_words(text)) seq.ids.push_back(id(w));
    return seq;
  }

  TokenSequence encode_label(const std::string& text) const {
    TokenSequence seq = encode_prompt(text);
    seq.ids.push_back(kEos);
    seq.terminated = true;
    return seq;
  }

  std::string decode(const TokenSequence& seq) const { return decode(seq.ids); }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      if (id == kPad || id == kEos) continue;
      if (!out.empty()) out.push_back(' ');
      out += token(id);
    }
    return out;
  }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + "\n";
    return out;
  }

  static Vocabulary parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    require(lines.size() >= 2 && lines[0] == kPadToken && lines[1] == kEosToken, ErrorKind::kSchema,
            "vocabulary file must start with the PAD and EOS lines");
    Vocabulary v(std::vector<std::string>(lines.begin() + 2, lines.end()));
    require(v.tokens_.size() == lines.size(), ErrorKind::kSchema, "vocabulary file has duplicate tokens");
    require(v.tokens_ == lines, ErrorKind::kSchema, "vocabulary file is not in canonical order");
    return v;
  }

  void save(const std::filesystem::path& path) const { write_text(path, serialize()); }
  static Vocabulary load(const std::filesystem::path& path) { return parse(read_text(path)); }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> id_of_;
};

/// Every word of every prompt and label, deduplicated, after the specials.
inline Vocabulary build_vocabulary(const std::vector<TaskSpec>& tasks) {
  std::vector<std::string> words;
  for (const auto& t : tasks) {
    t.validate();
    for (const auto& w : split_words(t.prompt)) words.push_back(w);
    for (const auto& l : t.labels)
      for (const auto& w : split_words(l)) words.push_back(w);
  }
  return Vocabulary(words);
}

}  // namespace kvadapt
