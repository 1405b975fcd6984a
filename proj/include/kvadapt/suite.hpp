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

/** @file suite.hpp The built-in synthetic task list used by the quickstart and the acceptance run. */

#pragma once

#include <vector>

#include "kvadapt/task_spec.hpp"

namespace kvadapt {

/// Downstream tasks in the order they are added. The first five are three
/// patch tasks then two slide tasks.
inline std::vector<TaskSpec> default_downstream_tasks() {
  return {
      TaskSpec::make("colon_tissue", "colon", "tissue type", {"adipose", "mucosa", "stroma", "tumor"}, Level::kPatch,
                     {"tumor"}),
      TaskSpec::make("prostate_grade", "prostate", "cancer grade", {"benign", "low grade", "high grade"},
                     Level::kPatch, {"low grade", "high grade"}),
      TaskSpec::make("breast_subtype", "breast", "cancer subtype", {"ductal", "lobular"}, Level::kPatch,
                     {"ductal", "lobular"}),
      TaskSpec::make("breast_metastasis", "breast", "metastasis screening", {"normal", "metastasis"}, Level::kSlide,
                     {"metastasis"}),
      TaskSpec::make("kidney_grade", "kidney", "cancer grade", {"benign", "low grade", "high grade"}, Level::kSlide,
                     {"low grade", "high grade"}),
      TaskSpec::make("lung_tissue", "lung", "tissue type", {"normal", "adenocarcinoma", "squamous"}, Level::kPatch,
                     {"adenocarcinoma", "squamous"}),
      TaskSpec::make("colon_polyp", "colon", "polyp type", {"hyperplastic", "adenoma"}, Level::kPatch, {"adenoma"}),
      TaskSpec::make("gastric_grade", "gastric", "cancer grade", {"benign", "well differentiated", "poorly differentiated"},
                     Level::kPatch, {"well differentiated", "poorly differentiated"}),
  };
}

/// Held-out image tasks for backbone pretraining; disjoint from the downstream ids.
/// Each organ appears under two categories so that palette alone cannot
/// separate the joint classes.
inline std::vector<TaskSpec> default_pretrain_tasks() {
  return {
      TaskSpec::make("pre_skin_tissue", "skin", "tissue type", {"epidermis", "dermis", "tumor"}, Level::kPatch),
      TaskSpec::make("pre_skin_polyp", "skin", "polyp type", {"hyperplastic", "adenoma"}, Level::kPatch),
      TaskSpec::make("pre_liver_grade", "liver", "cancer grade", {"benign", "low grade", "high grade"}, Level::kPatch),
      TaskSpec::make("pre_liver_metastasis", "liver", "metastasis screening", {"normal", "metastasis"}, Level::kPatch),
      TaskSpec::make("pre_bladder_detection", "bladder", "tumor detection", {"normal", "tumor"}, Level::kPatch),
      TaskSpec::make("pre_bladder_subtype", "bladder", "cancer subtype", {"papillary", "invasive"}, Level::kPatch),
      TaskSpec::make("pre_thyroid_subtype", "thyroid", "cancer subtype", {"papillary", "follicular"}, Level::kPatch),
      TaskSpec::make("pre_thyroid_tissue", "thyroid", "tissue type", {"normal", "stroma", "tumor"}, Level::kPatch),
      TaskSpec::make("pre_pancreas_tissue", "pancreas", "tissue type", {"normal", "stroma", "tumor", "necrosis"},
                     Level::kPatch),
      TaskSpec::make("pre_pancreas_grade", "pancreas", "cancer grade", {"benign", "low grade", "high grade"},
                     Level::kPatch),
      TaskSpec::make("pre_ovary_metastasis", "ovary", "metastasis screening", {"normal", "metastasis"}, Level::kPatch),
      TaskSpec::make("pre_ovary_polyp", "ovary", "polyp type", {"hyperplastic", "adenoma"}, Level::kPatch),
  };
}

}  // namespace kvadapt
