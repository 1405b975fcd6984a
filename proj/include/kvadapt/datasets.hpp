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

/** @file datasets.hpp Seeded synthetic tissue-like tasks and their on-disk form.
 *
 * Patch images are procedural textures: the organ picks the base palette,
 * the task category picks the stripe orientation, and the class index picks
 * stripe frequency and blob count. Slide-level items are bags of such
 * patches labelled by the highest class present (for two classes this is
 * the usual "any positive patch" rule).
 *
 * Dataset directory:
 *
 *     task_spec.json
 *     labels.csv                 filename,label,split
 *     images/<name>.png          patch items
 *     images/<bag>/<r>_<c>.png   slide items, one file per patch
 */

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "kvadapt/core/error.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/image.hpp"
#include "kvadapt/task_spec.hpp"

namespace kvadapt {

enum class Split { kTrain, kVal, kTest };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw Error(ErrorKind::kSchema, "unknown split '" + s + "'");
}

struct PatchCoord {
  int row = 0;
  int col = 0;
  bool operator==(const PatchCoord&) const = default;
};

/// One labelled example: a single patch image, or a bag of patches with grid coordinates.
struct Item {
  std::string name;
  std::vector<Image> images;
  std::vector<PatchCoord> coords;  // bags only
  bool is_bag = false;
  std::string label;
  Split split = Split::kTrain;

  bool operator==(const Item&) const = default;
};

struct Dataset {
  TaskSpec spec;
  std::vector<Item> items;
  std::uint64_t seed = 0;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < items.size(); ++i)
      if (items[i].split == s) out.push_back(i);
    return out;
  }

  std::map<std::string, std::array<std::size_t, 3>> class_counts() const {
    std::map<std::string, std::array<std::size_t, 3>> out;
    for (const auto& it : items) ++out[it.label][static_cast<std::size_t>(it.split)];
    return out;
  }

  void validate() const {
    spec.validate();
    require(!items.empty(), ErrorKind::kInvalidData, "dataset for '" + spec.task_id + "' is empty");
    std::set<std::string> names;
    for (const auto& it : items) {
      require(spec.label_index(it.label) >= 0, ErrorKind::kSchema,
              "item '" + it.name + "' has label '" + it.label + "' outside the task labels");
      require(names.insert(it.name).second, ErrorKind::kInvalidData, "duplicate item name '" + it.name + "'");
      require(!it.images.empty(), ErrorKind::kInvalidData, "item '" + it.name + "' has no images");
      require(it.is_bag == (spec.level == Level::kSlide), ErrorKind::kInvalidData,
              "item '" + it.name + "' does not match the task level");
    }
    for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
      require(!indices(s).empty(), ErrorKind::kInvalidData, "split '" + to_string(s) + "' is empty");
  }

  bool operator==(const Dataset&) const = default;
};

// ---- procedural textures -------------------------------------------------------

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct Rgb {
  double r, g, b;
};

/// Base colour per organ; shared by all tasks on that organ.
inline Rgb organ_palette(const std::string& organ) {
  static const std::map<std::string, Rgb> kKnown = {
      {"colon", {0.85, 0.45, 0.60}},    {"prostate", {0.55, 0.35, 0.75}}, {"breast", {0.90, 0.70, 0.75}},
      {"gastric", {0.70, 0.55, 0.40}},  {"kidney", {0.45, 0.60, 0.80}},   {"lung", {0.60, 0.80, 0.55}},
      {"liver", {0.75, 0.40, 0.35}},    {"bladder", {0.50, 0.75, 0.75}},  {"skin", {0.80, 0.65, 0.45}},
      {"pancreas", {0.40, 0.45, 0.55}}, {"ovary", {0.65, 0.50, 0.55}},    {"thyroid", {0.55, 0.70, 0.40}},
  };
  if (const auto it = kKnown.find(organ); it != kKnown.end()) return it->second;
  const std::uint64_t h = fnv1a(organ);
  auto channel = [&](int shift) { return 0.35 + 0.55 * static_cast<double>((h >> shift) & 0xff) / 255.0; };
  return {channel(0), channel(8), channel(16)};
}

/// Stripe orientation in radians per task category.
inline double category_angle(const std::string& category) {
  static const std::map<std::string, double> kKnown = {
      {"cancer grade", 0.0},
      {"tissue type", std::numbers::pi / 2},
      {"metastasis screening", std::numbers::pi / 4},
      {"polyp type", 3 * std::numbers::pi / 4},
      {"cancer subtype", std::numbers::pi / 8},
      {"tumor detection", 5 * std::numbers::pi / 8},
  };
  if (const auto it = kKnown.find(category); it != kKnown.end()) return it->second;
  return static_cast<double>(fnv1a(category) % 16) * std::numbers::pi / 16;
}

struct TextureParams {
  Rgb base;
  double angle = 0.0;
  double frequency = 1.5;  // cycles across the image
  int blobs = 1;
  double noise = 0.04;
};

inline TextureParams texture_for(const TaskSpec& spec, int class_index) {
  TextureParams p;
  p.base = organ_palette(spec.organ);
  p.angle = category_angle(spec.category);
  p.frequency = 1.5 + 1.5 * class_index;
  p.blobs = 1 + 2 * class_index;
  return p;
}

inline Image render_texture(const TextureParams& p, int size, Rng& rng) {
  Image img(size, size);
  std::vector<double> px(static_cast<std::size_t>(size) * size * 3);
  const double cs = std::cos(p.angle);
  const double sn = std::sin(p.angle);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = (x * cs + y * sn) / size;
      const double stripe = std::sin(2 * std::numbers::pi * p.frequency * u);
      const double shade = 0.75 + 0.25 * stripe;
      const std::size_t o = (static_cast<std::size_t>(y) * size + x) * 3;
      px[o] = p.base.r * shade;
      px[o + 1] = p.base.g * shade;
      px[o + 2] = p.base.b * shade;
    }
  // Nuclei-like dark blobs.
  const Rgb nucleus{0.30, 0.15, 0.40};
  for (int b = 0; b < p.blobs; ++b) {
    const double cx = rng.uniform(2, size - 2);
    const double cy = rng.uniform(2, size - 2);
    const double radius = rng.uniform(1.5, 2.5);
    for (int y = std::max(0, static_cast<int>(cy - radius) - 1); y < std::min(size, static_cast<int>(cy + radius) + 2); ++y)
      for (int x = std::max(0, static_cast<int>(cx - radius) - 1); x < std::min(size, static_cast<int>(cx + radius) + 2);
           ++x) {
        if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > radius * radius) continue;
        const std::size_t o = (static_cast<std::size_t>(y) * size + x) * 3;
        px[o] = 0.5 * px[o] + 0.5 * nucleus.r;
        px[o + 1] = 0.5 * px[o + 1] + 0.5 * nucleus.g;
        px[o + 2] = 0.5 * px[o + 2] + 0.5 * nucleus.b;
      }
  }
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double v = std::clamp(px[i] + rng.normal(0.0, p.noise), 0.0, 1.0);
    img.data[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

namespace detail {

/// 70/15/15 per class, rounded down for val/test, remainder to train; order shuffled.
inline std::vector<Split> split_plan(std::size_t n, Rng& rng) {
  const std::size_t n_val = n * 15 / 100;
  const std::size_t n_test = n * 15 / 100;
  std::vector<Split> plan(n, Split::kTrain);
  for (std::size_t i = 0; i < n_val; ++i) plan[i] = Split::kVal;
  for (std::size_t i = 0; i < n_test; ++i) plan[n_val + i] = Split::kTest;
  rng.shuffle(plan.begin(), plan.end());
  return plan;
}

inline std::string item_name(const char* prefix, std::size_t i) {
  std::ostringstream s;
  s << prefix << std::setw(5) << std::setfill('0') << i;
  return s.str();
}

}  // namespace detail

inline Dataset generate_patch_task(const TaskSpec& spec, int n_per_class, std::uint64_t seed, int image_size = 32) {
  spec.validate();
  require(spec.level == Level::kPatch, ErrorKind::kInvalidTask, "task '" + spec.task_id + "' is not patch level");
  require(n_per_class >= 10, ErrorKind::kTooSmall, "need at least 10 items per class, got " + std::to_string(n_per_class));
  Rng rng(seed ^ fnv1a(spec.task_id));
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  std::size_t counter = 0;
  for (std::size_t c = 0; c < spec.labels.size(); ++c) {
    const auto plan = detail::split_plan(static_cast<std::size_t>(n_per_class), rng);
    const TextureParams tex = texture_for(spec, static_cast<int>(c));
    for (int i = 0; i < n_per_class; ++i) {
      Item it;
      it.name = detail::item_name("img_", counter++);
      it.images.push_back(render_texture(tex, image_size, rng));
      it.label = spec.labels[c];
      it.split = plan[static_cast<std::size_t>(i)];
      ds.items.push_back(std::move(it));
    }
  }
  ds.validate();
  return ds;
}

struct BagSizeRange {
  int min = 8;
  int max = 16;
};

inline Dataset generate_slide_task(const TaskSpec& spec, int n_bags_per_class, BagSizeRange bag_size, std::uint64_t seed,
                                   int image_size = 32) {
  spec.validate();
  require(spec.level == Level::kSlide, ErrorKind::kInvalidTask, "task '" + spec.task_id + "' is not slide level");
  require(n_bags_per_class >= 10, ErrorKind::kTooSmall,
          "need at least 10 bags per class, got " + std::to_string(n_bags_per_class));
  require(bag_size.min >= 1 && bag_size.max >= bag_size.min, ErrorKind::kInvalidInput, "bad bag size range");
  Rng rng(seed ^ fnv1a(spec.task_id));
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  std::vector<TextureParams> textures;
  for (std::size_t c = 0; c < spec.labels.size(); ++c) textures.push_back(texture_for(spec, static_cast<int>(c)));
  std::size_t counter = 0;
  for (std::size_t grade = 0; grade < spec.labels.size(); ++grade) {
    const auto plan = detail::split_plan(static_cast<std::size_t>(n_bags_per_class), rng);
    for (int i = 0; i < n_bags_per_class; ++i) {
      const int n = bag_size.min + static_cast<int>(rng.index(static_cast<std::size_t>(bag_size.max - bag_size.min + 1)));
      std::vector<int> classes(static_cast<std::size_t>(n), 0);
      if (grade > 0) {
        const double fraction = rng.uniform(0.1, 0.5);
        const int positives = std::max(1, static_cast<int>(std::lround(fraction * n)));
        for (int p = 0; p < n; ++p)
          classes[static_cast<std::size_t>(p)] =
              p < positives ? static_cast<int>(grade) : static_cast<int>(rng.index(grade));
        rng.shuffle(classes.begin(), classes.end());
      }
      Item it;
      it.name = detail::item_name("bag_", counter++);
      it.is_bag = true;
      const int grid = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
      for (int p = 0; p < n; ++p) {
        it.images.push_back(render_texture(textures[static_cast<std::size_t>(classes[static_cast<std::size_t>(p)])],
                                           image_size, rng));
        it.coords.push_back({p / grid, p % grid});
      }
      it.label = spec.labels[grade];
      it.split = plan[static_cast<std::size_t>(i)];
      ds.items.push_back(std::move(it));
    }
  }
  ds.validate();
  return ds;
}

// ---- on-disk format -------------------------------------------------------------

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  nlohmann::json spec = ds.spec;
  spec["seed"] = ds.seed;
  write_text(dir / "task_spec.json", spec.dump(2) + "\n");
  std::string csv = "filename,label,split\n";
  for (const auto& it : ds.items) {
    if (it.is_bag) {
      fs::create_directories(dir / "images" / it.name);
      for (std::size_t p = 0; p < it.images.size(); ++p)
        write_png(dir / "images" / it.name /
                      (std::to_string(it.coords[p].row) + "_" + std::to_string(it.coords[p].col) + ".png"),
                  it.images[p]);
      csv += detail::csv_field(it.name);
    } else {
      write_png(dir / "images" / (it.name + ".png"), it.images.front());
      csv += detail::csv_field(it.name + ".png");
    }
    csv += "," + detail::csv_field(it.label) + "," + to_string(it.split) + "\n";
  }
  write_text(dir / "labels.csv", csv);
}

/// Reads a bag directory of <row>_<col>.png patches into `item`, sorted by coordinate.
inline void read_bag(const std::filesystem::path& dir, Item& item) {
  namespace fs = std::filesystem;
  std::vector<std::pair<PatchCoord, fs::path>> patches;
  for (const auto& f : fs::directory_iterator(dir)) {
    if (f.path().extension() != ".png") continue;
    const std::string stem = f.path().stem().string();
    const auto us = stem.find('_');
    require(us != std::string::npos, ErrorKind::kSchema, "bag patch name must be <row>_<col>.png: " + stem);
    patches.push_back({{std::stoi(stem.substr(0, us)), std::stoi(stem.substr(us + 1))}, f.path()});
  }
  std::sort(patches.begin(), patches.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.row, a.first.col) < std::tie(b.first.row, b.first.col);
  });
  require(!patches.empty(), ErrorKind::kEmptyBag, "bag " + dir.string() + " has no patches");
  item.is_bag = true;
  for (const auto& [coord, p] : patches) {
    item.coords.push_back(coord);
    item.images.push_back(read_png(p));
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  require(fs::exists(dir / "task_spec.json"), ErrorKind::kMissingFile, "missing " + (dir / "task_spec.json").string());
  require(fs::exists(dir / "labels.csv"), ErrorKind::kMissingFile, "missing " + (dir / "labels.csv").string());
  const auto spec_json = nlohmann::json::parse(read_text(dir / "task_spec.json"));
  Dataset ds;
  ds.spec = spec_json.get<TaskSpec>();
  ds.seed = spec_json.value("seed", std::uint64_t{0});
  std::istringstream csv(read_text(dir / "labels.csv"));
  std::string line;
  std::getline(csv, line);
  require(detail::csv_split(line) == std::vector<std::string>{"filename", "label", "split"}, ErrorKind::kSchema,
          "labels.csv header must be filename,label,split");
  int row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::csv_split(line);
    require(fields.size() == 3, ErrorKind::kSchema, "labels.csv row " + std::to_string(row) + " needs 3 fields");
    require(ds.spec.label_index(fields[1]) >= 0, ErrorKind::kSchema,
            "labels.csv row " + std::to_string(row) + ": unknown label '" + fields[1] + "'");
    Item it;
    it.label = fields[1];
    it.split = parse_split(fields[2]);
    const fs::path path = dir / "images" / fields[0];
    if (ds.spec.level == Level::kSlide) {
      require(fs::is_directory(path), ErrorKind::kMissingFile,
              "labels.csv row " + std::to_string(row) + ": missing bag directory " + path.string());
      it.is_bag = true;
      it.name = fields[0];
      read_bag(path, it);
    } else {
      require(fs::exists(path), ErrorKind::kMissingFile,
              "labels.csv row " + std::to_string(row) + ": missing image file " + path.string());
      it.name = path.stem().string();
      it.images.push_back(read_png(path));
    }
    ds.items.push_back(std::move(it));
  }
  ds.validate();
  return ds;
}

// ---- oracle used to certify the generator ------------------------------------------

/// Nearest-centroid classifier over 2x2-average-downsampled pixels, trained on
/// the train split and scored on the test split.
inline double nearest_centroid_accuracy(const Dataset& ds) {
  auto features = [](const Image& img) {
    const int h = img.height / 2;
    const int w = img.width / 2;
    std::vector<double> f(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c)
          f[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
              (img.value(2 * y, 2 * x, c) + img.value(2 * y + 1, 2 * x, c) + img.value(2 * y, 2 * x + 1, c) +
               img.value(2 * y + 1, 2 * x + 1, c)) /
              4.0;
    return f;
  };
  const std::size_t n_classes = ds.spec.labels.size();
  std::vector<std::vector<double>> centroid(n_classes);
  std::vector<int> count(n_classes, 0);
  for (std::size_t i : ds.indices(Split::kTrain)) {
    const auto f = features(ds.items[i].images.front());
    const auto c = static_cast<std::size_t>(ds.spec.label_index(ds.items[i].label));
    if (centroid[c].empty()) centroid[c].assign(f.size(), 0.0);
    for (std::size_t k = 0; k < f.size(); ++k) centroid[c][k] += f[k];
    ++count[c];
  }
  for (std::size_t c = 0; c < n_classes; ++c)
    for (auto& v : centroid[c]) v /= std::max(1, count[c]);
  std::size_t correct = 0;
  const auto test = ds.indices(Split::kTest);
  for (std::size_t i : test) {
    const auto f = features(ds.items[i].images.front());
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (centroid[c].empty()) continue;
      double d = 0;
      for (std::size_t k = 0; k < f.size(); ++k) d += (f[k] - centroid[c][k]) * (f[k] - centroid[c][k]);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    if (static_cast<int>(best) == ds.spec.label_index(ds.items[i].label)) ++correct;
  }
  return test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace kvadapt
