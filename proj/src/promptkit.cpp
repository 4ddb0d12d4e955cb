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

#include "capseg/promptkit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "capseg/io.hpp"

namespace capseg::promptkit {

namespace {
double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }
}  // namespace

PromptAnnotation annotate(const synthgen::SceneSample& sample, PromptMode mode, double jitter,
                          std::uint64_t rng_seed) {
  config_require(jitter >= 0.0, "annotate: jitter must be >= 0");
  const int h = sample.h, w = sample.w;
  const double radius = std::floor(jitter * std::min(h, w));
  Rng rng(rng_seed);

  PromptAnnotation ann;
  for (size_t e = 0; e < sample.entities.size(); ++e) {
    const auto& ent = sample.entities[e];
    data_require(ent.area() > 0, "annotate: empty entity mask");
    PromptElement el;
    el.entity_index = static_cast<int>(e);
    el.mode = mode;
    el.polarity = Polarity::foreground;
    if (mode == PromptMode::point) {
      double cx = 0, cy = 0;
      ent.centroid(h, w, &cx, &cy);
      const double dx = rng.uniform(-radius, radius);
      const double dy = rng.uniform(-radius, radius);
      el.x = clampd(cx + dx, 0.0, w - 1.0);
      el.y = clampd(cy + dy, 0.0, h - 1.0);
      el.jitter_applied = {dx, dy};
    } else {
      int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
      ent.bbox(h, w, &x0, &y0, &x1, &y1);
      const double d0 = rng.uniform(-radius, radius);
      const double d1 = rng.uniform(-radius, radius);
      const double d2 = rng.uniform(-radius, radius);
      const double d3 = rng.uniform(-radius, radius);
      // edges displaced independently; an inverted box is repaired by
      // swapping the pair, which keeps the displacement marginals clean
      double xm = x0 + d0, xM = x1 + d2;
      double ym = y0 + d1, yM = y1 + d3;
      if (xM < xm) std::swap(xm, xM);
      if (yM < ym) std::swap(ym, yM);
      el.x_min = clampd(xm, 0.0, w - 2.0);
      el.y_min = clampd(ym, 0.0, h - 2.0);
      el.x_max = clampd(xM, el.x_min + 0.5, w - 1.0);
      el.y_max = clampd(yM, el.y_min + 0.5, h - 1.0);
      el.jitter_applied = {d0, d1, d2, d3};
    }
    ann.elements.push_back(std::move(el));
  }
  return ann;
}

PromptGroup make_prompt_groups(const synthgen::SceneSample& sample, int n_t, double jitter,
                               std::uint64_t rng_seed, PromptMode mode) {
  config_require(n_t >= 2, "make_prompt_groups: consistency needs n_t >= 2");
  PromptGroup group;
  group.sample = &sample;
  group.jitter = jitter;
  group.mode = mode;
  Rng root(rng_seed);
  for (int i = 0; i < n_t; ++i)
    group.annotations.push_back(
        annotate(sample, mode, jitter, root.fork("member", static_cast<std::uint64_t>(i)).key()));
  return group;
}

std::string serialize(const PromptAnnotation& ann, int sample_id) {
  std::ostringstream os;
  for (const auto& el : ann.elements) {
    os << sample_id << " " << el.entity_index << " ";
    if (el.mode == PromptMode::point) {
      os << "point " << (el.polarity == Polarity::foreground ? "fg" : "bg") << " "
         << io::fmt_double(el.x) << " " << io::fmt_double(el.y);
    } else {
      os << "box fg " << io::fmt_double(el.x_min) << " " << io::fmt_double(el.y_min) << " "
         << io::fmt_double(el.x_max) << " " << io::fmt_double(el.y_max);
    }
    os << "\n";
  }
  return os.str();
}

std::vector<PromptAnnotation> parse_annotations(const std::string& text) {
  std::vector<PromptAnnotation> out;
  std::istringstream is(text);
  std::string line;
  int cur_sample = -1;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int sample_id = 0, entity = 0;
    std::string mode, pol;
    ls >> sample_id >> entity >> mode >> pol;
    data_require(static_cast<bool>(ls), "bad annotation line: " + line);
    if (sample_id != cur_sample) {
      out.emplace_back();
      cur_sample = sample_id;
    }
    PromptElement el;
    el.entity_index = entity;
    el.polarity = pol == "bg" ? Polarity::background : Polarity::foreground;
    if (mode == "point") {
      el.mode = PromptMode::point;
      ls >> el.x >> el.y;
    } else if (mode == "box") {
      el.mode = PromptMode::box;
      ls >> el.x_min >> el.y_min >> el.x_max >> el.y_max;
    } else {
      throw DataError("unknown prompt mode: " + mode);
    }
    data_require(static_cast<bool>(ls), "bad annotation coords: " + line);
    out.back().elements.push_back(el);
  }
  return out;
}

}  // namespace capseg::promptkit
