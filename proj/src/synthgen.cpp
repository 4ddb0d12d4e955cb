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

#include "capseg/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <filesystem>
#include <set>
#include <sstream>

#include "capseg/io.hpp"

namespace capseg::synthgen {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

Rgb class_color(int class_id) {
  const double hue = std::fmod(0.13 + 0.61803398875 * class_id, 1.0);
  return hsv_to_rgb(hue, 0.6, 0.85);
}

const FactorSpec& spec_by_name(const std::vector<FactorSpec>& specs, const std::string& name) {
  for (const auto& s : specs)
    if (s.name == name) return s;
  throw ConfigError("missing factor spec: " + name);
}

double draw_in_domain(Rng& rng, const std::vector<FactorSpec>& specs, const std::string& name) {
  const auto& s = spec_by_name(specs, name);
  config_require(s.hi >= s.lo, "empty factor domain: " + name);
  return rng.uniform(s.lo, s.hi);
}

bool inside_shape(const ClassDef& cls, const CausalFactors& f, double px, double py) {
  const double dx = px - f.cx;
  const double dy = py - f.cy;
  const double s = f.scale;
  switch (cls.shape) {
    case ShapeFamily::disk:
      return dx * dx + dy * dy <= s * s;
    case ShapeFamily::rectangle: {
      const double hw = s * f.aspect;
      const double hh = s / f.aspect;
      return std::fabs(dx) <= hw && std::fabs(dy) <= hh;
    }
    case ShapeFamily::triangle: {
      // apex up: width grows linearly from apex to base
      if (dy < -s || dy > s) return false;
      return std::fabs(dx) <= (dy + s) * 0.5;
    }
    case ShapeFamily::ring: {
      const double d2 = dx * dx + dy * dy;
      const double rin = 0.5 * s;
      return d2 <= s * s && d2 >= rin * rin;
    }
    case ShapeFamily::cross: {
      const double arm = std::max(1.6, 0.35 * s);
      if (std::fabs(dx) > s || std::fabs(dy) > s) return false;
      return std::fabs(dx) <= arm || std::fabs(dy) <= arm;
    }
  }
  return false;
}

std::vector<std::uint8_t> rasterize(const ClassDef& cls, const CausalFactors& f, int h, int w) {
  std::vector<std::uint8_t> mask(static_cast<size_t>(h) * w, 0);
  const int y0 = std::max(0, static_cast<int>(f.cy - f.scale * 2 - 2));
  const int y1 = std::min(h - 1, static_cast<int>(f.cy + f.scale * 2 + 2));
  const int x0 = std::max(0, static_cast<int>(f.cx - f.scale * 2 - 2));
  const int x1 = std::min(w - 1, static_cast<int>(f.cx + f.scale * 2 + 2));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (inside_shape(cls, f, x + 0.5, y + 0.5)) mask[static_cast<size_t>(y) * w + x] = 1;
  return mask;
}

bool connected(const std::vector<std::uint8_t>& mask, int h, int w) {
  long long total = 0;
  int sy = -1, sx = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[static_cast<size_t>(y) * w + x]) {
        ++total;
        if (sy < 0) {
          sy = y;
          sx = x;
        }
      }
  if (total == 0) return false;
  std::vector<std::uint8_t> seen(mask.size(), 0);
  std::deque<std::pair<int, int>> q{{sy, sx}};
  seen[static_cast<size_t>(sy) * w + sx] = 1;
  long long reached = 0;
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop_front();
    ++reached;
    const int dy[4] = {-1, 1, 0, 0};
    const int dx[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const int ny = y + dy[k], nx = x + dx[k];
      if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
      const size_t idx = static_cast<size_t>(ny) * w + nx;
      if (mask[idx] && !seen[idx]) {
        seen[idx] = 1;
        q.emplace_back(ny, nx);
      }
    }
  }
  return reached == total;
}

bool overlaps(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i] && b[i]) return true;
  return false;
}

double texture_tone(const ClassDef& cls, const CausalFactors& f, double px, double py) {
  switch (cls.texture) {
    case TextureFamily::solid:
      return 1.0;
    case TextureFamily::stripes: {
      const double theta = f.orient * kPi;
      const double t = (px * std::cos(theta) + py * std::sin(theta)) / 4.0;
      return std::sin(2.0 * kPi * f.tex_freq * t + f.tex_phase) > 0.0 ? 1.0 : 0.62;
    }
    case TextureFamily::dots: {
      const double u = std::sin(2.0 * kPi * f.tex_freq * px / 5.0 + f.tex_phase);
      const double v = std::sin(2.0 * kPi * f.tex_freq * py / 5.0 + f.tex_phase);
      return u * v > 0.3 ? 0.58 : 1.0;
    }
  }
  return 1.0;
}

}  // namespace

std::vector<FactorSpec> default_factor_specs() {
  using FK = FactorKind;
  using FB = FactorBinding;
  return {
      {"pos_u", FK::causal, FB::per_entity, 0.0, 1.0},
      {"pos_v", FK::causal, FB::per_entity, 0.0, 1.0},
      {"scale", FK::causal, FB::per_entity, 5.0, 10.0},
      {"aspect", FK::causal, FB::per_entity, 0.7, 1.5},
      {"tex_freq", FK::causal, FB::per_entity, 0.7, 1.4},
      {"tex_phase", FK::causal, FB::per_entity, 0.0, 2.0 * kPi},
      {"orient", FK::causal, FB::per_entity, 0.0, 1.0},
      {"bg_hue", FK::irrelevant, FB::per_scene, 0.0, 1.0},
      {"illum_gain", FK::irrelevant, FB::per_scene, 0.7, 1.3},
      {"noise_sigma", FK::irrelevant, FB::per_scene, 0.0, 0.06},
      {"distractor_count", FK::irrelevant, FB::per_scene, 0.0, 2.0},
  };
}

void validate_factor_specs(const std::vector<FactorSpec>& specs) {
  std::set<std::string> causal, irrelevant;
  for (const auto& s : specs) {
    if (s.kind == FactorKind::causal) {
      contract_require(s.binding == FactorBinding::per_entity, "causal factors bind per-entity");
      causal.insert(s.name);
    } else {
      irrelevant.insert(s.name);
    }
  }
  for (const auto& n : causal)
    contract_require(!irrelevant.count(n), "factor name in both causal and irrelevant sets: " + n);
}

const char* shape_name(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::disk: return "disk";
    case ShapeFamily::rectangle: return "rectangle";
    case ShapeFamily::triangle: return "triangle";
    case ShapeFamily::ring: return "ring";
    case ShapeFamily::cross: return "cross";
  }
  return "?";
}

const char* texture_name(TextureFamily t) {
  switch (t) {
    case TextureFamily::solid: return "solid";
    case TextureFamily::stripes: return "stripes";
    case TextureFamily::dots: return "dots";
  }
  return "?";
}

const ClassDef& ClassVocabulary::by_id(int id) const {
  for (const auto& c : classes)
    if (c.id == id) return c;
  throw ContractError("unknown class id");
}

std::vector<int> ClassVocabulary::base_ids() const {
  std::vector<int> ids;
  for (const auto& c : classes)
    if (c.split == Split::base) ids.push_back(c.id);
  return ids;
}

std::vector<int> ClassVocabulary::target_ids() const {
  std::vector<int> ids;
  for (const auto& c : classes)
    if (c.split == Split::target) ids.push_back(c.id);
  return ids;
}

ClassVocabulary make_vocabulary(int n_classes, std::uint64_t seed) {
  config_require(n_classes >= 3, "vocabulary needs at least 3 classes for a 2:1 split");
  std::vector<std::pair<ShapeFamily, TextureFamily>> combos;
  for (int s = 0; s < 5; ++s)
    for (int t = 0; t < 3; ++t)
      combos.emplace_back(static_cast<ShapeFamily>(s), static_cast<TextureFamily>(t));
  config_require(n_classes <= static_cast<int>(combos.size()),
                 "vocabulary larger than available shape/texture combos");
  Rng rng = Rng(seed).fork("vocab");
  for (size_t i = combos.size(); i > 1; --i)
    std::swap(combos[i - 1], combos[rng.uniform_int(i)]);

  const int n_target = std::max(1, (n_classes + 1) / 3);
  ClassVocabulary vocab;
  for (int i = 0; i < n_classes; ++i) {
    ClassDef c;
    c.id = i;
    c.shape = combos[static_cast<size_t>(i)].first;
    c.texture = combos[static_cast<size_t>(i)].second;
    c.split = (i < n_classes - n_target) ? Split::base : Split::target;
    vocab.classes.push_back(c);
  }
  return vocab;
}

std::vector<double> SceneFactors::numeric() const {
  std::vector<double> v{bg_hue, illum_gain, noise_sigma, static_cast<double>(distractors.size())};
  return v;
}

std::vector<std::string> SceneFactors::numeric_names() {
  return {"bg_hue", "illum_gain", "noise_sigma", "distractor_count"};
}

long long EntityInstance::area() const {
  long long a = 0;
  for (auto m : mask) a += m;
  return a;
}

void EntityInstance::centroid(int h, int w, double* x, double* y) const {
  (void)h;
  double sx = 0, sy = 0;
  long long n = 0;
  for (size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      sy += static_cast<double>(i / static_cast<size_t>(w)) + 0.5;
      sx += static_cast<double>(i % static_cast<size_t>(w)) + 0.5;
      ++n;
    }
  data_require(n > 0, "centroid of empty mask");
  *x = sx / static_cast<double>(n);
  *y = sy / static_cast<double>(n);
}

void EntityInstance::bbox(int h, int w, int* x0, int* y0, int* x1, int* y1) const {
  *x0 = w;
  *y0 = h;
  *x1 = -1;
  *y1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (mask[static_cast<size_t>(y) * w + x]) {
        *x0 = std::min(*x0, x);
        *y0 = std::min(*y0, y);
        *x1 = std::max(*x1, x);
        *y1 = std::max(*y1, y);
      }
  data_require(*x1 >= 0, "bbox of empty mask");
}

SceneSample render_scene(const FactorRecord& record, const ClassVocabulary& vocab,
                         const GeneratorConfig& cfg, std::uint64_t seed) {
  const int h = cfg.h, w = cfg.w;
  SceneSample s;
  s.h = h;
  s.w = w;
  s.record = record;
  s.seed = seed;

  for (const auto& f : record.entities) {
    EntityInstance e;
    e.class_id = f.class_id;
    e.factors = f;
    e.mask = rasterize(vocab.by_id(f.class_id), f, h, w);
    data_require(e.area() > 0, "entity rasterized to empty mask");
    s.entities.push_back(std::move(e));
  }

  const Rgb bg = hsv_to_rgb(record.scene.bg_hue, 0.25, 0.42);
  s.image.resize(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t p = (static_cast<size_t>(y) * w + x) * 3;
      s.image[p] = bg.r;
      s.image[p + 1] = bg.g;
      s.image[p + 2] = bg.b;
    }

  for (const auto& d : record.scene.distractors) {
    const int y0 = std::max(0, static_cast<int>(d.cy - d.r - 1));
    const int y1 = std::min(h - 1, static_cast<int>(d.cy + d.r + 1));
    const int x0 = std::max(0, static_cast<int>(d.cx - d.r - 1));
    const int x1 = std::min(w - 1, static_cast<int>(d.cx + d.r + 1));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x + 0.5 - d.cx, dy = y + 0.5 - d.cy;
        if (dx * dx + dy * dy > d.r * d.r) continue;
        const size_t p = (static_cast<size_t>(y) * w + x) * 3;
        s.image[p] = d.intensity;
        s.image[p + 1] = d.intensity;
        s.image[p + 2] = d.intensity;
      }
  }

  for (const auto& e : s.entities) {
    const ClassDef& cls = vocab.by_id(e.class_id);
    const Rgb fg = class_color(e.class_id);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!e.mask[static_cast<size_t>(y) * w + x]) continue;
        const double tone = texture_tone(cls, e.factors, x + 0.5, y + 0.5);
        const size_t p = (static_cast<size_t>(y) * w + x) * 3;
        s.image[p] = fg.r * tone;
        s.image[p + 1] = fg.g * tone;
        s.image[p + 2] = fg.b * tone;
      }
  }

  Rng noise(record.scene.noise_seed);
  const double gain = record.scene.illum_gain;
  const double sigma = record.scene.noise_sigma;
  for (auto& v : s.image) {
    v = v * gain + (sigma > 0.0 ? sigma * noise.normal() : 0.0);
    v = std::min(1.0, std::max(0.0, v));
  }
  return s;
}

SceneSample sample_scene(std::uint64_t seed, const ClassVocabulary& vocab,
                         const std::vector<FactorSpec>& factors, const std::vector<int>& pool,
                         const GeneratorConfig& cfg) {
  config_require(!pool.empty(), "sample_scene: empty class pool");
  contract_require(cfg.h >= 16 && cfg.w >= 16, "sample_scene: image too small");
  validate_factor_specs(factors);
  for (const auto& f : factors) config_require(f.hi >= f.lo, "empty factor domain: " + f.name);

  Rng causal = Rng(seed).fork("causal");
  Rng irrel = Rng(seed).fork("irrelevant");

  FactorRecord rec;
  const int want =
      static_cast<int>(causal.uniform_range(cfg.min_entities, std::max(cfg.min_entities, cfg.max_entities)));

  std::vector<std::vector<std::uint8_t>> masks;
  for (int e = 0; e < want; ++e) {
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      CausalFactors f;
      f.class_id = pool[causal.uniform_int(pool.size())];
      f.scale = draw_in_domain(causal, factors, "scale");
      f.aspect = draw_in_domain(causal, factors, "aspect");
      f.tex_freq = draw_in_domain(causal, factors, "tex_freq");
      f.tex_phase = draw_in_domain(causal, factors, "tex_phase");
      f.orient = draw_in_domain(causal, factors, "orient");
      const double margin = f.scale + 2.0;
      if (2.0 * margin >= std::min(cfg.h, cfg.w)) continue;
      f.cx = margin + draw_in_domain(causal, factors, "pos_u") * (cfg.w - 2.0 * margin);
      f.cy = margin + draw_in_domain(causal, factors, "pos_v") * (cfg.h - 2.0 * margin);

      auto mask = rasterize(vocab.by_id(f.class_id), f, cfg.h, cfg.w);
      long long area = 0;
      for (auto m : mask) area += m;
      if (area < 12 || !connected(mask, cfg.h, cfg.w)) continue;
      bool clash = false;
      for (const auto& other : masks)
        if (overlaps(mask, other)) {
          clash = true;
          break;
        }
      if (clash) continue;
      masks.push_back(std::move(mask));
      rec.entities.push_back(f);
      placed = true;
    }
    // an unplaceable entity is dropped; at least one always fits
  }
  data_require(!rec.entities.empty(), "sample_scene: could not place any entity");

  rec.scene.bg_hue = draw_in_domain(irrel, factors, "bg_hue");
  rec.scene.illum_gain = draw_in_domain(irrel, factors, "illum_gain");
  rec.scene.noise_sigma = draw_in_domain(irrel, factors, "noise_sigma");
  const auto& dc = spec_by_name(factors, "distractor_count");
  const int max_d = std::min(cfg.max_distractors, static_cast<int>(dc.hi));
  const int min_d = static_cast<int>(dc.lo);
  const int n_distr = static_cast<int>(irrel.uniform_range(min_d, std::max(min_d, max_d)));
  for (int d = 0; d < n_distr; ++d) {
    for (int attempt = 0; attempt < 40; ++attempt) {
      Distractor dist;
      dist.r = irrel.uniform(2.0, 4.0);
      dist.cx = irrel.uniform(dist.r + 1.0, cfg.w - dist.r - 1.0);
      dist.cy = irrel.uniform(dist.r + 1.0, cfg.h - dist.r - 1.0);
      dist.intensity = irrel.uniform(0.25, 0.85);
      // keep distractors off the entities so they never change a mask
      bool clash = false;
      for (const auto& mask : masks) {
        const int y0 = std::max(0, static_cast<int>(dist.cy - dist.r - 1));
        const int y1 = std::min(cfg.h - 1, static_cast<int>(dist.cy + dist.r + 1));
        const int x0 = std::max(0, static_cast<int>(dist.cx - dist.r - 1));
        const int x1 = std::min(cfg.w - 1, static_cast<int>(dist.cx + dist.r + 1));
        for (int y = y0; y <= y1 && !clash; ++y)
          for (int x = x0; x <= x1 && !clash; ++x) {
            const double dx = x + 0.5 - dist.cx, dy = y + 0.5 - dist.cy;
            if (dx * dx + dy * dy <= dist.r * dist.r && mask[static_cast<size_t>(y) * cfg.w + x])
              clash = true;
          }
      }
      if (clash) continue;
      rec.scene.distractors.push_back(dist);
      break;
    }
  }
  rec.scene.noise_seed = Rng(seed).fork("noise").key();

  return render_scene(rec, vocab, cfg, seed);
}

FactorRecord factor_probe(const SceneSample& sample) { return sample.record; }

DatasetSplit make_dataset(const DatasetConfig& cfg) {
  config_require(cfg.vocab_size >= 3, "vocabulary size must be >= 3");
  config_require(cfg.n_train > 0 && cfg.n_test_base > 0 && cfg.n_test_target > 0,
                 "dataset needs positive sample counts per split");

  DatasetSplit ds;
  ds.vocabulary = make_vocabulary(cfg.vocab_size, cfg.seed);
  const auto specs = default_factor_specs();
  const auto base = ds.vocabulary.base_ids();
  const auto target = ds.vocabulary.target_ids();

  Rng root(cfg.seed);
  auto scene_seed = [&](const char* split, int i) {
    return root.fork(split, static_cast<std::uint64_t>(i)).key();
  };

  for (int i = 0; i < cfg.n_train; ++i)
    ds.train.push_back(sample_scene(scene_seed("train", i), ds.vocabulary, specs, base, cfg.geom));
  for (int i = 0; i < cfg.n_test_base; ++i)
    ds.test_base.push_back(
        sample_scene(scene_seed("test_base", i), ds.vocabulary, specs, base, cfg.geom));
  for (int i = 0; i < cfg.n_test_target; ++i)
    ds.test_target.push_back(
        sample_scene(scene_seed("test_target", i), ds.vocabulary, specs, target, cfg.geom));
  for (int i = 0; i < cfg.n_warmup; ++i)
    ds.warmup.push_back(sample_scene(scene_seed("warmup", i), ds.vocabulary, specs, base, cfg.geom));
  return ds;
}

void export_dataset(const DatasetSplit& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ostringstream manifest;
  manifest << "# capseg dataset manifest v1\n";
  manifest << "# sample_id split seed n_entities class_ids\n";
  std::ostringstream vocab;
  vocab << "# class_id shape texture split\n";
  for (const auto& c : ds.vocabulary.classes)
    vocab << c.id << " " << shape_name(c.shape) << " " << texture_name(c.texture) << " "
          << (c.split == Split::base ? "base" : "target") << "\n";
  io::write_text_file(dir + "/vocabulary.txt", vocab.str());

  int sample_id = 0;
  auto dump_split = [&](const std::vector<SceneSample>& split, const char* name) {
    for (const auto& s : split) {
      std::ostringstream stem;
      stem << dir << "/" << name << "_" << sample_id;
      io::write_ppm16(stem.str() + "_img.ppm", s.h, s.w, s.image);
      manifest << sample_id << " " << name << " " << s.seed << " " << s.entities.size() << " ";
      for (size_t e = 0; e < s.entities.size(); ++e) {
        io::write_pgm(stem.str() + "_mask" + std::to_string(e) + ".pgm", s.h, s.w,
                      s.entities[e].mask);
        manifest << (e ? "," : "") << s.entities[e].class_id;
      }
      manifest << "\n";
      ++sample_id;
    }
  };
  dump_split(ds.train, "train");
  dump_split(ds.test_base, "test_base");
  dump_split(ds.test_target, "test_target");
  dump_split(ds.warmup, "warmup");
  io::write_text_file(dir + "/manifest.txt", manifest.str());
}

}  // namespace capseg::synthgen
