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

#ifndef CAPSEG_SYNTHGEN_HPP
#define CAPSEG_SYNTHGEN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "capseg/common.hpp"

namespace capseg::synthgen {

// Synthetic multi-entity scenes from an explicit generating-factor model.
// Class identity and masks are pure functions of the causal factors; the
// irrelevant factors (background hue, illumination gain, pixel noise,
// distractor blobs) only touch pixels. That separation is what the causal
// calibration experiments measure against.

enum class FactorKind { causal, irrelevant };
enum class FactorBinding { per_entity, per_scene };

struct FactorSpec {
  std::string name;
  FactorKind kind;
  FactorBinding binding;
  double lo = 0.0;
  double hi = 0.0;  // domain [lo, hi]; empty when hi < lo
};

std::vector<FactorSpec> default_factor_specs();
// throws ContractError when causal/irrelevant names overlap or a causal
// factor binds per-scene
void validate_factor_specs(const std::vector<FactorSpec>& specs);

enum class ShapeFamily { disk, rectangle, triangle, ring, cross };
enum class TextureFamily { solid, stripes, dots };
enum class Split { base, target };

const char* shape_name(ShapeFamily s);
const char* texture_name(TextureFamily t);

struct ClassDef {
  int id = 0;
  ShapeFamily shape = ShapeFamily::disk;
  TextureFamily texture = TextureFamily::solid;
  Split split = Split::base;
};

struct ClassVocabulary {
  std::vector<ClassDef> classes;

  const ClassDef& by_id(int id) const;
  std::vector<int> base_ids() const;
  std::vector<int> target_ids() const;
};

// 2:1 base:target split (rounded, at least one target class)
ClassVocabulary make_vocabulary(int n_classes, std::uint64_t seed);

struct CausalFactors {
  int class_id = 0;
  double cx = 0.0, cy = 0.0;  // shape center, pixels
  double scale = 0.0;         // primary radius / half-extent, pixels
  double aspect = 1.0;
  double tex_freq = 1.0;
  double tex_phase = 0.0;
  double orient = 0.0;  // texture orientation selector in [0,1)
};

struct Distractor {
  double cx = 0.0, cy = 0.0, r = 0.0, intensity = 0.5;
};

struct SceneFactors {
  double bg_hue = 0.0;
  double illum_gain = 1.0;
  double noise_sigma = 0.0;
  std::vector<Distractor> distractors;
  std::uint64_t noise_seed = 0;  // realization stream for the additive noise

  // flattened numeric view used by the irrelevance-correlation audit
  std::vector<double> numeric() const;
  static std::vector<std::string> numeric_names();
};

struct FactorRecord {
  std::vector<CausalFactors> entities;
  SceneFactors scene;
};

struct EntityInstance {
  int class_id = 0;
  std::vector<std::uint8_t> mask;  // h*w, values 0/1
  CausalFactors factors;

  long long area() const;
  // centroid of mask pixel centers, (x, y)
  void centroid(int h, int w, double* x, double* y) const;
  // tight inclusive bounding box in pixel indices
  void bbox(int h, int w, int* x0, int* y0, int* x1, int* y1) const;
};

struct SceneSample {
  int h = 0, w = 0;
  std::vector<double> image;  // h*w*3 in [0,1], row-major rgb
  std::vector<EntityInstance> entities;
  FactorRecord record;
  std::uint64_t seed = 0;
};

struct GeneratorConfig {
  int h = 64;
  int w = 64;
  int min_entities = 1;
  int max_entities = 4;
  int max_distractors = 2;
};

SceneSample sample_scene(std::uint64_t seed, const ClassVocabulary& vocab,
                         const std::vector<FactorSpec>& factors, const std::vector<int>& pool,
                         const GeneratorConfig& cfg);

// deterministic renderer behind sample_scene; exposed so tests can hold the
// causal record fixed while sweeping irrelevant factors
SceneSample render_scene(const FactorRecord& record, const ClassVocabulary& vocab,
                         const GeneratorConfig& cfg, std::uint64_t seed);

FactorRecord factor_probe(const SceneSample& sample);

struct DatasetConfig {
  GeneratorConfig geom;
  int vocab_size = 9;
  int n_train = 32;
  int n_test_base = 16;
  int n_test_target = 16;
  // extra base-class scenes used only to pre-train the trunk
  int n_warmup = 0;
  std::uint64_t seed = 0;
};

struct DatasetSplit {
  std::vector<SceneSample> train;
  std::vector<SceneSample> test_base;
  std::vector<SceneSample> test_target;
  std::vector<SceneSample> warmup;  // base classes only, trunk pre-training
  ClassVocabulary vocabulary;
};

DatasetSplit make_dataset(const DatasetConfig& cfg);

// images as 16-bit ppm, masks as pgm, plus plain-text manifest and vocabulary
void export_dataset(const DatasetSplit& ds, const std::string& dir);

}  // namespace capseg::synthgen

#endif  // CAPSEG_SYNTHGEN_HPP
