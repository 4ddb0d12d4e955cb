// Copyright 2026 the capseg authors
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

#ifndef CAPSEG_PROMPTKIT_HPP
#define CAPSEG_PROMPTKIT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "capseg/synthgen.hpp"

namespace capseg::promptkit {

// Prompt annotations derived from ground-truth masks, plus the groups of
// independently jittered annotations of the same sample that the
// multi-distribution consistency losses train against. One prompt element
// per entity, so the entity <-> prompt-token binding is explicit.

enum class PromptMode { point, box };
enum class Polarity { foreground, background };

struct PromptElement {
  int entity_index = 0;
  PromptMode mode = PromptMode::point;
  Polarity polarity = Polarity::foreground;
  // point: (x, y) in px; box: (x_min, y_min, x_max, y_max)
  double x = 0.0, y = 0.0;
  double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
  // jitter displacements actually applied; these are the prompt-side
  // irrelevant factors the irrelevance-exclusion audit correlates against
  std::vector<double> jitter_applied;
};

struct PromptAnnotation {
  std::vector<PromptElement> elements;  // element k annotates entity k
};

struct PromptGroup {
  const synthgen::SceneSample* sample = nullptr;
  std::vector<PromptAnnotation> annotations;  // |annotations| == n_t
  double jitter = 0.0;
  PromptMode mode = PromptMode::box;
};

// point mode: pixel near the mask centroid, uniformly jittered within radius
// floor(jitter*min(h,w)); box mode: tight bbox with each edge independently
// displaced uniformly in +-floor(jitter*min(h,w)); coords clipped to bounds
PromptAnnotation annotate(const synthgen::SceneSample& sample, PromptMode mode, double jitter,
                          std::uint64_t rng_seed);

PromptGroup make_prompt_groups(const synthgen::SceneSample& sample, int n_t, double jitter,
                               std::uint64_t rng_seed, PromptMode mode = PromptMode::box);

// line-oriented plain-text records: sample_id entity mode coords...
std::string serialize(const PromptAnnotation& ann, int sample_id);
std::vector<PromptAnnotation> parse_annotations(const std::string& text);

}  // namespace capseg::promptkit

#endif  // CAPSEG_PROMPTKIT_HPP
