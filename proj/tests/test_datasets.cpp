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

#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace kvadapt;

namespace {

TaskSpec patch_spec() { return default_downstream_tasks()[0]; }
TaskSpec slide_spec() { return default_downstream_tasks()[4]; }

Eigen::VectorXd pixels(const Image& img) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(img.data.size()));
  for (std::size_t i = 0; i < img.data.size(); ++i) v(static_cast<Eigen::Index>(i)) = img.data[i];
  return v;
}

}  // namespace

TEST(Datasets, GenerationIsSeeded) {
  const auto a = generate_patch_task(patch_spec(), 12, 5);
  EXPECT_EQ(a, generate_patch_task(patch_spec(), 12, 5));
  EXPECT_NE(a.items, generate_patch_task(patch_spec(), 12, 6).items);
}

TEST(Datasets, SplitsAreSeventyFifteenFifteenPerClass) {
  const auto ds = generate_patch_task(patch_spec(), 40, 1);
  ASSERT_EQ(ds.items.size(), 160u);
  for (const auto& [label, counts] : ds.class_counts()) {
    EXPECT_EQ(counts[0], 28u) << label;
    EXPECT_EQ(counts[1], 6u) << label;
    EXPECT_EQ(counts[2], 6u) << label;
  }
}

TEST(Datasets, TooFewItemsIsAnError) {
  try {
    generate_patch_task(patch_spec(), 9, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kTooSmall);
  }
  EXPECT_THROW(generate_slide_task(slide_spec(), 9, {}, 1), Error);
  EXPECT_THROW(generate_slide_task(patch_spec(), 10, {}, 1), Error);
  EXPECT_THROW(generate_slide_task(slide_spec(), 10, {5, 4}, 1), Error);
}

TEST(Datasets, PatchTasksAreLearnableByNearestCentroid) {
  for (const auto& spec : default_downstream_tasks()) {
    if (spec.level != Level::kPatch) continue;
    EXPECT_GE(nearest_centroid_accuracy(generate_patch_task(spec, 40, 3)), 0.9) << spec.task_id;
  }
}

TEST(Datasets, BagLabelIsTheHighestPatchClass) {
  const TaskSpec slide = slide_spec();
  TaskSpec as_patch = slide;
  as_patch.level = Level::kPatch;
  const auto ref = generate_patch_task(as_patch, 60, 2);
  std::vector<Eigen::VectorXd> centroid(slide.labels.size());
  std::vector<int> count(slide.labels.size(), 0);
  for (const auto& it : ref.items) {
    const auto c = static_cast<std::size_t>(slide.label_index(it.label));
    centroid[c] = count[c]++ == 0 ? pixels(it.images[0]) : Eigen::VectorXd(centroid[c] + pixels(it.images[0]));
  }
  for (std::size_t c = 0; c < centroid.size(); ++c) centroid[c] /= count[c];

  const auto ds = generate_slide_task(slide, 10, {4, 9}, 2);
  int agree = 0;
  for (const auto& bag : ds.items) {
    ASSERT_TRUE(bag.is_bag);
    ASSERT_GE(bag.images.size(), 4u);
    ASSERT_LE(bag.images.size(), 9u);
    int highest = 0;
    for (const auto& img : bag.images) {
      int best = 0;
      for (std::size_t c = 1; c < centroid.size(); ++c)
        if ((pixels(img) - centroid[c]).norm() < (pixels(img) - centroid[static_cast<std::size_t>(best)]).norm())
          best = static_cast<int>(c);
      highest = std::max(highest, best);
    }
    agree += highest == slide.label_index(bag.label);
  }
  EXPECT_GE(agree, static_cast<int>(0.9 * static_cast<double>(ds.items.size())));
}

TEST(Datasets, SaveLoadRoundTrip) {
  const auto dir = kvtest::scratch_dir("datasets_roundtrip");
  const auto patch = generate_patch_task(patch_spec(), 10, 4);
  save_dataset(patch, dir / "patch");
  EXPECT_EQ(load_dataset(dir / "patch"), patch);
  const auto slide = generate_slide_task(slide_spec(), 10, {3, 6}, 4);
  save_dataset(slide, dir / "slide");
  EXPECT_EQ(load_dataset(dir / "slide"), slide);
}

TEST(Datasets, LoadErrorsNameTheRow) {
  const auto dir = kvtest::scratch_dir("datasets_errors");
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingFile);
  }
  save_dataset(generate_patch_task(patch_spec(), 10, 4), dir);
  auto csv = read_text(dir / "labels.csv");
  const auto bad = csv;
  {
    std::ofstream out(dir / "labels.csv", std::ios::app);
    out << "img_00000.png,cartilage,test\n";
  }
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kSchema);
    EXPECT_NE(std::string(e.what()).find("row 42"), std::string::npos) << e.what();
  }
  write_text(dir / "labels.csv", bad);
  std::filesystem::remove(dir / "images" / "img_00003.png");
  try {
    load_dataset(dir);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kMissingFile);
    EXPECT_NE(std::string(e.what()).find("row 5"), std::string::npos) << e.what();
  }
}

TEST(Datasets, EmptyBagDirectory) {
  const auto dir = kvtest::scratch_dir("datasets_bag");
  Item it;
  try {
    read_bag(dir, it);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kEmptyBag);
  }
}
