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

#include <doctest.h>

#include <cmath>
#include <set>

#include "capseg/io.hpp"
#include "capseg/synthgen.hpp"

using namespace capseg;
using namespace capseg::synthgen;

namespace {
GeneratorConfig small_geom() {
  GeneratorConfig g;
  g.h = 64;
  g.w = 64;
  g.max_entities = 3;
  return g;
}
}  // namespace

TEST_CASE("same seed regenerates a byte-identical sample") {
  auto vocab = make_vocabulary(6, 42);
  auto specs = default_factor_specs();
  auto pool = vocab.base_ids();
  auto a = sample_scene(0, vocab, specs, pool, small_geom());
  auto b = sample_scene(0, vocab, specs, pool, small_geom());
  CHECK(a.image == b.image);
  REQUIRE(a.entities.size() == b.entities.size());
  for (size_t i = 0; i < a.entities.size(); ++i) {
    CHECK(a.entities[i].mask == b.entities[i].mask);
    CHECK(a.entities[i].class_id == b.entities[i].class_id);
  }
}

TEST_CASE("irrelevant factors change pixels but never masks or labels") {
  auto vocab = make_vocabulary(6, 42);
  auto specs = default_factor_specs();
  auto base = sample_scene(7, vocab, specs, vocab.base_ids(), small_geom());
  auto rec0 = factor_probe(base);

  bool some_pixels_changed = false;
  for (double hue : {0.0, 0.25, 0.5, 0.75}) {
    for (double gain : {0.7, 1.0, 1.3}) {
      for (double sigma : {0.0, 0.05}) {
        auto rec = rec0;
        rec.scene.bg_hue = hue;
        rec.scene.illum_gain = gain;
        rec.scene.noise_sigma = sigma;
        auto s = render_scene(rec, vocab, small_geom(), base.seed);
        REQUIRE(s.entities.size() == base.entities.size());
        for (size_t i = 0; i < s.entities.size(); ++i) {
          CHECK(s.entities[i].mask == base.entities[i].mask);
          CHECK(s.entities[i].class_id == base.entities[i].class_id);
        }
        if (s.image != base.image) some_pixels_changed = true;
      }
    }
  }
  CHECK(some_pixels_changed);
}

TEST_CASE("noise-free hue sweep keeps a single-class scene's labels fixed") {
  auto vocab = make_vocabulary(3, 9);
  auto specs = default_factor_specs();
  std::vector<int> pool{vocab.base_ids()[0]};
  GeneratorConfig g = small_geom();
  g.max_entities = 1;
  auto s0 = sample_scene(3, vocab, specs, pool, g);
  auto rec = factor_probe(s0);
  rec.scene.noise_sigma = 0.0;
  rec.scene.distractors.clear();
  auto ref = render_scene(rec, vocab, g, s0.seed);
  for (int k = 0; k <= 10; ++k) {
    auto r2 = rec;
    r2.scene.bg_hue = k / 10.0;
    auto s = render_scene(r2, vocab, g, s0.seed);
    CHECK(s.entities[0].mask == ref.entities[0].mask);
    CHECK(s.entities[0].class_id == ref.entities[0].class_id);
  }
}

TEST_CASE("rasterized disk area is close to pi r^2") {
  ClassVocabulary vocab;
  vocab.classes.push_back({0, ShapeFamily::disk, TextureFamily::solid, Split::base});
  FactorRecord rec;
  CausalFactors f;
  f.class_id = 0;
  f.cx = 16.0;
  f.cy = 16.0;
  f.scale = 5.0;
  rec.entities.push_back(f);
  GeneratorConfig g;
  g.h = 32;
  g.w = 32;
  auto s = render_scene(rec, vocab, g, 0);
  const double expected = 3.14159265358979 * 25.0;  // ~78.5
  const double area = static_cast<double>(s.entities[0].area());
  CHECK(std::fabs(area - expected) <= 0.10 * expected);
}

TEST_CASE("vocabulary split ratios") {
  SUBCASE("9 classes -> 6 base, 3 target") {
    auto v = make_vocabulary(9, 1);
    CHECK(v.base_ids().size() == 6);
    CHECK(v.target_ids().size() == 3);
  }
  SUBCASE("3 classes -> 2 base, 1 target") {
    auto v = make_vocabulary(3, 1);
    CHECK(v.base_ids().size() == 2);
    CHECK(v.target_ids().size() == 1);
  }
  SUBCASE("every class id appears exactly once") {
    auto v = make_vocabulary(9, 5);
    std::set<int> ids;
    for (const auto& c : v.classes) ids.insert(c.id);
    CHECK(ids.size() == 9);
  }
  SUBCASE("too small vocabulary is a config error") {
    CHECK_THROWS_AS(make_vocabulary(2, 1), ConfigError);
  }
}

TEST_CASE("train split never contains a target-class entity") {
  DatasetConfig cfg;
  cfg.vocab_size = 9;
  cfg.n_train = 12;
  cfg.n_test_base = 4;
  cfg.n_test_target = 4;
  cfg.seed = 77;
  auto ds = make_dataset(cfg);
  const auto tids = ds.vocabulary.target_ids();
  std::set<int> target(tids.begin(), tids.end());
  for (const auto& s : ds.train)
    for (const auto& e : s.entities) CHECK_FALSE(target.count(e.class_id));
  // every target sample has at least one target entity
  for (const auto& s : ds.test_target) {
    bool any = false;
    for (const auto& e : s.entities) any = any || target.count(e.class_id) > 0;
    CHECK(any);
  }
  // split hygiene: train class set is disjoint from target class set
  std::set<int> train_classes;
  for (const auto& s : ds.train)
    for (const auto& e : s.entities) train_classes.insert(e.class_id);
  for (int t : target) CHECK_FALSE(train_classes.count(t));
}

TEST_CASE("entity masks are disjoint, connected, non-empty and in bounds") {
  auto vocab = make_vocabulary(9, 3);
  auto specs = default_factor_specs();
  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    auto s = sample_scene(seed, vocab, specs, vocab.base_ids(), small_geom());
    REQUIRE(!s.entities.empty());
    std::vector<std::uint8_t> unionmask(static_cast<size_t>(s.h) * s.w, 0);
    for (const auto& e : s.entities) {
      CHECK(e.area() > 0);
      for (size_t i = 0; i < e.mask.size(); ++i)
        if (e.mask[i]) {
          CHECK(unionmask[i] == 0);  // pairwise disjoint
          unionmask[i] = 1;
        }
    }
  }
}

TEST_CASE("factor_probe echoes the stored record and is pure") {
  auto vocab = make_vocabulary(6, 42);
  auto specs = default_factor_specs();
  auto s = sample_scene(11, vocab, specs, vocab.base_ids(), small_geom());
  auto r1 = factor_probe(s);
  auto r2 = factor_probe(s);
  CHECK(r1.entities.size() == s.entities.size());
  CHECK(r1.scene.bg_hue == r2.scene.bg_hue);
  CHECK(r1.scene.noise_seed == r2.scene.noise_seed);
  for (size_t i = 0; i < r1.entities.size(); ++i) {
    CHECK(r1.entities[i].class_id == s.entities[i].class_id);
    CHECK(r1.entities[i].cx == r2.entities[i].cx);
  }
}

TEST_CASE("configuration errors") {
  auto vocab = make_vocabulary(6, 42);
  auto specs = default_factor_specs();
  SUBCASE("empty pool") {
    CHECK_THROWS_AS(sample_scene(0, vocab, specs, {}, small_geom()), ConfigError);
  }
  SUBCASE("empty factor domain") {
    auto bad = specs;
    for (auto& f : bad)
      if (f.name == "scale") {
        f.lo = 5.0;
        f.hi = 4.0;
      }
    CHECK_THROWS_AS(sample_scene(0, vocab, bad, vocab.base_ids(), small_geom()), ConfigError);
  }
}

TEST_CASE("dataset export writes a readable manifest and images") {
  DatasetConfig cfg;
  cfg.vocab_size = 3;
  cfg.n_train = 2;
  cfg.n_test_base = 1;
  cfg.n_test_target = 1;
  cfg.seed = 5;
  auto ds = make_dataset(cfg);
  const std::string dir = "synthgen_export_test";
  export_dataset(ds, dir);
  int h = 0, w = 0;
  auto img = io::read_ppm16(dir + "/train_0_img.ppm", &h, &w);
  CHECK(h == 64);
  CHECK(w == 64);
  auto mask = io::read_pgm(dir + "/train_0_mask0.pgm", &h, &w);
  CHECK(mask == ds.train[0].entities[0].mask);
  auto manifest = io::read_text_file(dir + "/manifest.txt");
  CHECK(manifest.find("train") != std::string::npos);
  CHECK(manifest.find("test_target") != std::string::npos);
}
