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

#include "capseg/minisam.hpp"
#include "capseg/objectives.hpp"

using namespace capseg;
using namespace capseg::minisam;
using ad::Tensor;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.image_size = 64;
  mc.patch = 8;
  mc.dim = 32;
  mc.heads = 4;
  mc.depth = 2;
  mc.init_seed = 11;
  return mc;
}

std::vector<double> random_image(Rng& rng, int hw) {
  std::vector<double> img(static_cast<size_t>(hw) * hw * 3);
  for (auto& v : img) v = rng.uniform();
  return img;
}

promptkit::PromptAnnotation box_ann(double x0, double y0, double x1, double y1, int entity) {
  promptkit::PromptElement el;
  el.entity_index = entity;
  el.mode = promptkit::PromptMode::box;
  el.x_min = x0;
  el.y_min = y0;
  el.x_max = x1;
  el.y_max = y1;
  promptkit::PromptAnnotation ann;
  ann.elements.push_back(el);
  return ann;
}

promptkit::PromptElement point_el(double x, double y, promptkit::Polarity pol, int entity) {
  promptkit::PromptElement el;
  el.entity_index = entity;
  el.mode = promptkit::PromptMode::point;
  el.polarity = pol;
  el.x = x;
  el.y = y;
  return el;
}

}  // namespace

TEST_CASE("patch token counts follow the config") {
  Rng rng(3);
  {
    Model m(small_config());
    auto img = random_image(rng, 64);
    auto tok = m.encode_image(img, 64, 64);
    CHECK(tok.dim(0) == 64);  // (64/8)^2
    CHECK(tok.dim(1) == 32);
    auto tok2 = m.encode_image(img, 64, 64);
    CHECK(tok.value() == tok2.value());  // deterministic, frozen trunk semantics
  }
  {
    ModelConfig mc;
    mc.image_size = 16;
    mc.patch = 16;
    mc.dim = 8;
    mc.heads = 2;
    mc.depth = 1;
    Model m(mc);
    auto img = random_image(rng, 16);
    CHECK(m.encode_image(img, 16, 16).dim(0) == 1);  // single patch
  }
  {
    Model m(small_config());
    auto img = random_image(rng, 16);
    CHECK_THROWS_AS(m.encode_image(img, 16, 16), ConfigError);  // shape mismatch
  }
}

TEST_CASE("config validation") {
  ModelConfig mc = small_config();
  mc.heads = 5;  // 32 % 5 != 0
  CHECK_THROWS_AS(Model{mc}, ConfigError);
  mc = small_config();
  mc.patch = 7;
  CHECK_THROWS_AS(Model{mc}, ConfigError);
  mc = small_config();
  mc.lora_rank = 0;
  CHECK_THROWS_AS(Model{mc}, ConfigError);
}

TEST_CASE("prompt encoding: cardinality, purity, type embeddings") {
  Model m(small_config());
  promptkit::PromptAnnotation ann;
  ann.elements.push_back(point_el(10, 12, promptkit::Polarity::foreground, 0));
  ann.elements.push_back(point_el(40, 20, promptkit::Polarity::foreground, 1));
  ann.elements.push_back(point_el(30, 50, promptkit::Polarity::background, 2));
  auto emb = m.encode_prompts(ann);
  CHECK(emb.tokens.dim(0) == 3);
  CHECK(emb.entity_of == std::vector<int>{0, 1, 2});

  SUBCASE("same coordinate, same polarity: identical tokens") {
    promptkit::PromptAnnotation two;
    two.elements.push_back(point_el(10, 12, promptkit::Polarity::foreground, 0));
    two.elements.push_back(point_el(10, 12, promptkit::Polarity::foreground, 1));
    auto e = m.encode_prompts(two);
    for (int j = 0; j < e.tokens.dim(1); ++j)
      CHECK(e.tokens.value()[static_cast<size_t>(j)] ==
            e.tokens.value()[static_cast<size_t>(e.tokens.dim(1) + j)]);
  }

  SUBCASE("opposite polarity differs by exactly the type-embedding difference") {
    promptkit::PromptAnnotation two;
    two.elements.push_back(point_el(10, 12, promptkit::Polarity::foreground, 0));
    two.elements.push_back(point_el(10, 12, promptkit::Polarity::background, 1));
    auto e = m.encode_prompts(two);
    const auto& te = m.params().at("type_emb").value();
    const int d = e.tokens.dim(1);
    for (int j = 0; j < d; ++j) {
      const double diff = e.tokens.value()[static_cast<size_t>(j)] -
                          e.tokens.value()[static_cast<size_t>(d + j)];
      CHECK(diff == doctest::Approx(te[static_cast<size_t>(j)] - te[static_cast<size_t>(d + j)])
                        .epsilon(1e-12));
    }
  }

  SUBCASE("out-of-bounds coordinates are a data error") {
    promptkit::PromptAnnotation bad;
    bad.elements.push_back(point_el(100.0, 12, promptkit::Polarity::foreground, 0));
    CHECK_THROWS_AS(m.encode_prompts(bad), DataError);
  }
}

TEST_CASE("forward: shapes, row-stochastic attention, calibration identity") {
  Model m(small_config());
  Rng rng(5);
  auto tok = m.encode_image(random_image(rng, 64), 64, 64);

  promptkit::PromptAnnotation ann;
  ann.elements.push_back(point_el(10, 12, promptkit::Polarity::foreground, 0));
  ann.elements.push_back(point_el(40, 44, promptkit::Polarity::foreground, 1));
  auto emb = m.encode_prompts(ann);

  auto fr = m.forward(tok, emb);
  CHECK(fr.seg.logits.dim(0) == 2);       // one logit map per entity token
  CHECK(fr.seg.logits.dim(1) == 64 * 64);

  auto row_sums_ok = [](const Tensor& a) {
    for (int i = 0; i < a.dim(0); ++i) {
      double s = 0;
      for (int j = 0; j < a.dim(1); ++j) s += a.value()[static_cast<size_t>(i) * a.dim(1) + j];
      if (std::fabs(s - 1.0) > 1e-5) return false;
    }
    return true;
  };
  for (const auto& layer : fr.attn.layer_head)
    for (const auto& blk : layer) {
      CHECK(blk.prompt_to_prompt.dim(0) == 3);  // 2 entities + sink
      CHECK(blk.prompt_to_prompt.dim(1) == 3);
      CHECK(blk.prompt_to_image.dim(0) == 3);
      CHECK(blk.prompt_to_image.dim(1) == 64);
      CHECK(blk.image_to_prompt.dim(0) == 64);
      CHECK(blk.image_to_prompt.dim(1) == 3);
      CHECK(row_sums_ok(blk.prompt_to_prompt));
      CHECK(row_sums_ok(blk.prompt_to_image));
      CHECK(row_sums_ok(blk.image_to_prompt));
    }

  SUBCASE("absent calibration vs explicit zeros: bit-identical outputs") {
    CalibrationTensor ct;
    ct.layout = m.layout(2);
    ct.layer_head.assign(2, std::vector<CalibBlock>(4));
    for (auto& layer : ct.layer_head)
      for (auto& blk : layer) {
        blk.prompt_to_image = Tensor::zeros({3, 64});
        blk.image_to_prompt = Tensor::zeros({64, 3});
      }
    auto fr0 = m.forward(tok, emb, nullptr);
    auto frz = m.forward(tok, emb, &ct);
    CHECK(fr0.seg.logits.value() == frz.seg.logits.value());
  }

  SUBCASE("calibration shape mismatch is a contract violation") {
    CalibrationTensor ct;
    ct.layout = m.layout(2);
    ct.layer_head.assign(2, std::vector<CalibBlock>(4));
    for (auto& layer : ct.layer_head)
      for (auto& blk : layer) {
        blk.prompt_to_image = Tensor::zeros({4, 64});  // wrong token count
        blk.image_to_prompt = Tensor::zeros({64, 4});
      }
    CHECK_THROWS_AS(m.forward(tok, emb, &ct), ContractError);
  }
}

TEST_CASE("lora: identity at zero init, parameter counts, errors") {
  Model m(small_config());
  Rng rng(9);
  auto img = random_image(rng, 64);
  auto ann = box_ann(10, 10, 30, 28, 0);

  auto tok = m.encode_image(img, 64, 64);
  auto emb = m.encode_prompts(ann);
  auto before = m.forward(tok, emb);

  m.freeze_trunk();
  m.add_lora();
  auto after = m.forward(tok, emb);
  CHECK(before.seg.logits.value() == after.seg.logits.value());  // exact equality

  SUBCASE("effective weight equals base at init and shifts with up") {
    auto w0 = m.effective_weight("dec0.self.wq");
    CHECK(w0.value() == m.params().at("dec0.self.wq").value());
    auto& up = m.params().at("lora.dec0.self.wq.up");
    up.mutable_value()[0] = 0.5;
    auto w1 = m.effective_weight("dec0.self.wq");
    CHECK(w1.value() != m.params().at("dec0.self.wq").value());
    auto changed = m.forward(tok, emb);
    CHECK(changed.seg.logits.value() != before.seg.logits.value());
  }

  SUBCASE("adapter parameter count is 2*d*r per projection") {
    for (int r : {2, 4, 8}) {
      ModelConfig mc = small_config();
      mc.lora_rank = r;
      Model mm(mc);
      mm.add_lora();
      const auto names = mm.lora_param_names();
      long long count = mm.params().count_in(names);
      // 2 layers x 3 attentions x {q, v} projections
      CHECK(count == 2ll * 3 * 2 * (2ll * 32 * r));
      // and the adapted forward runs without shape errors
      auto t = mm.encode_image(img, 64, 64);
      CHECK_NOTHROW(mm.forward(t, mm.encode_prompts(ann)));
    }
  }

  SUBCASE("unknown projection target is a configuration error") {
    Model mm(small_config());
    CHECK_THROWS_AS(mm.add_lora({"dec9.self.wq"}), ConfigError);
  }
}

TEST_CASE("gradients flow only into adapters, prompt embeddings and mask head") {
  Model m(small_config());
  m.freeze_trunk();
  m.add_lora();
  Rng rng(21);
  auto tok = m.encode_image(random_image(rng, 64), 64, 64);
  promptkit::PromptAnnotation ann;
  ann.elements.push_back(point_el(20, 20, promptkit::Polarity::foreground, 0));
  auto fr = m.forward(tok, m.encode_prompts(ann));

  synthgen::SceneSample s;
  s.h = 64;
  s.w = 64;
  synthgen::EntityInstance e;
  e.mask = std::vector<std::uint8_t>(64 * 64, 0);
  for (int i = 1000; i < 1400; ++i) e.mask[static_cast<size_t>(i)] = 1;
  s.entities.push_back(e);
  Tensor loss = objectives::seg_loss(fr.seg, s);

  std::vector<std::string> trainable = m.head_param_names();
  for (const auto& n : m.lora_param_names()) trainable.push_back(n);
  std::vector<Tensor> leaves;
  for (const auto& n : trainable) leaves.push_back(m.params().at(n));
  auto grads = ad::grad(loss, leaves, false);

  // frozen trunk params never enter the graph
  for (const auto& n : m.trunk_param_names()) CHECK_FALSE(m.params().at(n).requires_grad());
  // at least the mask head and lora down receive nonzero gradient signal
  double head_norm = 0.0, lora_norm = 0.0;
  for (size_t i = 0; i < trainable.size(); ++i) {
    double n2 = 0;
    for (double v : grads[i].value()) n2 += v * v;
    if (trainable[i].rfind("lora.", 0) == 0) lora_norm += n2;
    else head_norm += n2;
  }
  CHECK(head_norm > 0.0);
  CHECK(lora_norm > 0.0);
}

TEST_CASE("permuting prompt tokens permutes the output maps") {
  Model m(small_config());
  Rng rng(31);
  auto tok = m.encode_image(random_image(rng, 64), 64, 64);

  promptkit::PromptAnnotation ann;
  ann.elements.push_back(point_el(12, 14, promptkit::Polarity::foreground, 0));
  ann.elements.push_back(point_el(44, 40, promptkit::Polarity::foreground, 1));
  ann.elements.push_back(point_el(30, 52, promptkit::Polarity::background, 2));
  promptkit::PromptAnnotation perm;
  perm.elements = {ann.elements[2], ann.elements[0], ann.elements[1]};

  auto fa = m.forward(tok, m.encode_prompts(ann));
  auto fb = m.forward(tok, m.encode_prompts(perm));
  CHECK(fb.seg.entity_of == std::vector<int>{2, 0, 1});

  const int hw = 64 * 64;
  auto row_close = [&](const Tensor& a, int ra, const Tensor& b, int rb) {
    for (int j = 0; j < hw; ++j) {
      const double va = a.value()[static_cast<size_t>(ra) * hw + j];
      const double vb = b.value()[static_cast<size_t>(rb) * hw + j];
      if (std::fabs(va - vb) > 1e-9 * std::max(1.0, std::fabs(va))) return false;
    }
    return true;
  };
  CHECK(row_close(fa.seg.logits, 2, fb.seg.logits, 0));
  CHECK(row_close(fa.seg.logits, 0, fb.seg.logits, 1));
  CHECK(row_close(fa.seg.logits, 1, fb.seg.logits, 2));
}

TEST_CASE("named-array round trip restores the model bitwise") {
  Model a(small_config());
  a.add_lora();
  auto arrays = a.to_arrays("model.");

  Model b(small_config());
  b.add_lora();
  // perturb then restore
  b.params().at("mask_head.w1").mutable_value()[0] += 1.0;
  b.from_arrays(arrays, "model.");
  for (const auto& name : a.all_param_names())
    CHECK(a.params().at(name).value() == b.params().at(name).value());

  SUBCASE("missing parameter is a data error") {
    arrays.erase("model.mask_bias");
    CHECK_THROWS_AS(b.from_arrays(arrays, "model."), DataError);
  }
}

TEST_CASE("config hash is stable and sensitive") {
  ModelConfig a = small_config();
  ModelConfig b = small_config();
  CHECK(a.hash() == b.hash());
  b.dim = 16;
  CHECK(a.hash() != b.hash());
}
