// Copyright (c) 2026 The compose-probe Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "compose_probe/error.hpp"
#include "compose_probe/rng.hpp"
#include "compose_probe/codec.hpp"
#include "compose_probe/crop_planner.hpp"
#include "compose_probe/image_io.hpp"
#include "compose_probe/lexicon.hpp"
#include "compose_probe/caption_segmenter.hpp"
#include "compose_probe/embedding.hpp"
#include "compose_probe/emb_store.hpp"
#include "compose_probe/encoder_client.hpp"
#include "compose_probe/embedding_source.hpp"
#include "compose_probe/sgi.hpp"
#include "compose_probe/retrieval.hpp"
#include "compose_probe/scene_graph.hpp"
#include "compose_probe/scene_synth.hpp"
#include "compose_probe/biscor.hpp"
#include "compose_probe/align_params.hpp"
#include "compose_probe/align_model.hpp"
#include "compose_probe/align_train.hpp"
#include "compose_probe/scorers.hpp"
