/*
 * Copyright 2026 The HistoMIL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "histomil/error.hpp"
#include "histomil/experiment.hpp"
#include "histomil/explain.hpp"
#include "histomil/features.hpp"
#include "histomil/imaging.hpp"
#include "histomil/metrics.hpp"
#include "histomil/model/baselines.hpp"
#include "histomil/model/checkpoint.hpp"
#include "histomil/model/common.hpp"
#include "histomil/model/transformer.hpp"
#include "histomil/parallel.hpp"
#include "histomil/plot.hpp"
#include "histomil/png_io.hpp"
#include "histomil/quantile.hpp"
#include "histomil/rng.hpp"
#include "histomil/stain.hpp"
#include "histomil/synth.hpp"
#include "histomil/train.hpp"
