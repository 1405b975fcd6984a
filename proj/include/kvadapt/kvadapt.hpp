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

/** @file kvadapt.hpp Umbrella header. */

#pragma once

#include "kvadapt/adaptors.hpp"
#include "kvadapt/audit.hpp"
#include "kvadapt/backbone.hpp"
#include "kvadapt/core/autograd.hpp"
#include "kvadapt/core/error.hpp"
#include "kvadapt/core/optim.hpp"
#include "kvadapt/core/tensor.hpp"
#include "kvadapt/datasets.hpp"
#include "kvadapt/engine.hpp"
#include "kvadapt/image.hpp"
#include "kvadapt/lora.hpp"
#include "kvadapt/metrics.hpp"
#include "kvadapt/pretrain.hpp"
#include "kvadapt/storage.hpp"
#include "kvadapt/suite.hpp"
#include "kvadapt/task_spec.hpp"
#include "kvadapt/vocab.hpp"
#include "kvadapt/workflow.hpp"
