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

#include "capseg/capl.hpp"

using namespace capseg;
using namespace capseg::capl;
using ad::Tensor;

namespace {

minisam::ModelConfig model_cfg() {
  minisam::ModelConfig mc;
  mc.image_size = 64;
  mc.patch = 8;
  mc.dim = 32;
  mc.heads = 4;
  mc.depth = 2;
  mc.init_seed = 17;
  return mc;
}

CaplConfig capl_cfg() {
  CaplConfig cc;
  cc.dim = 32;
  cc.hidden = 32;
  cc.calib_dim = 8;
  cc.layers = 2;
  cc.heads = 4;
  cc.init_seed = 23;
  return cc;
}

promptkit::PromptAnnotation two_points() {
  promptkit::PromptAnnotation ann;
  for (int e = 0; e < 2; ++e) {
    promptkit::PromptElement el;
    el.entity_index = e;
    el.mode = promptkit::PromptMode::point;
    el.x = 15.0 + 30.0 * e;
    el.y = 20.0 + 22.0 * e;
    ann.elements.push_back(el);
  }
  return ann;
}

std::vector<double> random_image(Rng& rng) {
  std::vector<double> img(64 * 64 * 3);
  for (auto& v : img) v = rng.uniform();
  return img;
}

void randomize_theta(Capl& cp, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& name : cp.param_names())
    for (auto& v : cp.params().at(name).mutable_value()) v += 0.3 * rng.normal();
}

}  // namespace

TEST_CASE("gates are exactly one at init, so reweighting is the identity") {
  minisam::Model model(model_cfg());
  Capl cp(capl_cfg());
  auto emb = model.encode_prompts(two_points());
  auto g = cp.gates(emb.tokens);
  for (double v : g.value()) CHECK(v == 1.0);
  auto rw = cp.reweight_prompts(emb);
  CHECK(rw.tokens.value() == emb.tokens.value());  // bitwise
  CHECK(rw.entity_of == emb.entity_of);

  SUBCASE("purity: two calls give identical output") {
    randomize_theta(cp, 5);
    auto a = cp.reweight_prompts(emb);
    auto b = cp.reweight_prompts(emb);
    CHECK(a.tokens.value() == b.tokens.value());
  }

  SUBCASE("dim mismatch is a contract violation") {
    minisam::PromptEmbedding bad;
    bad.tokens = Tensor::zeros({2, 16});
    bad.entity_of = {0, 1};
    CHECK_THROWS_AS(cp.reweight_prompts(bad), ContractError);
  }
}

TEST_CASE("full identity stack: zero lora, unit gates, zero calibration") {
  minisam::Model model(model_cfg());
  Capl cp(capl_cfg());
  Rng rng(3);
  for (int trial = 0; trial < 4; ++trial) {
    auto tok = model.encode_image(random_image(rng), 64, 64);
    auto emb = model.encode_prompts(two_points());
    auto bare = model.forward(tok, emb);

    auto rw = cp.reweight_prompts(emb);
    auto ct = cp.emit_calibration(rw.tokens, tok, model.layout(rw.tokens.dim(0)));
    auto wrapped = model.forward(tok, rw, &ct);
    CHECK(bare.seg.logits.value() == wrapped.seg.logits.value());  // bit-identical
  }

  // with lora attached at zero the equality still holds
  minisam::Model m2(model_cfg());
  auto tok = m2.encode_image(random_image(rng), 64, 64);
  auto emb = m2.encode_prompts(two_points());
  auto bare = m2.forward(tok, emb);
  m2.freeze_trunk();
  m2.add_lora();
  auto rw = cp.reweight_prompts(emb);
  auto ct = cp.emit_calibration(rw.tokens, tok, m2.layout(rw.tokens.dim(0)));
  auto wrapped = m2.forward(tok, rw, &ct);
  CHECK(bare.seg.logits.value() == wrapped.seg.logits.value());
}

TEST_CASE("calibration tensor: zero at init, sink slices always zero, finite entries") {
  minisam::Model model(model_cfg());
  Capl cp(capl_cfg());
  Rng rng(7);
  auto tok = model.encode_image(random_image(rng), 64, 64);
  auto emb = model.encode_prompts(two_points());

  auto at_init = cp.emit_calibration(emb.tokens, tok, model.layout(2));
  for (const auto& layer : at_init.layer_head)
    for (const auto& blk : layer) {
      for (double v : blk.prompt_to_image.value()) CHECK(v == 0.0);
      for (double v : blk.image_to_prompt.value()) CHECK(v == 0.0);
    }

  randomize_theta(cp, 9);
  auto ct = cp.emit_calibration(emb.tokens, tok, model.layout(2));
  bool any_nonzero = false;
  for (const auto& layer : ct.layer_head)
    for (const auto& blk : layer) {
      const int tk = blk.prompt_to_image.dim(0);
      const int p = blk.prompt_to_image.dim(1);
      for (int j = 0; j < p; ++j) {
        CHECK(blk.prompt_to_image.value()[static_cast<size_t>(tk - 1) * p + j] == 0.0);  // sink row
        CHECK(blk.image_to_prompt.value()[static_cast<size_t>(j) * tk + (tk - 1)] == 0.0);
      }
      for (double v : blk.prompt_to_image.value()) {
        CHECK(std::isfinite(v));
        if (v != 0.0) any_nonzero = true;
      }
    }
  CHECK(any_nonzero);

  SUBCASE("layout mismatch is a contract violation") {
    auto layout = model.layout(2);
    layout.layers = 3;
    CHECK_THROWS_AS(cp.emit_calibration(emb.tokens, tok, layout), ContractError);
  }
}

TEST_CASE("scaling a token toward zero monotonically removes its attention influence") {
  minisam::Model model(model_cfg());
  Rng rng(13);
  auto tok = model.encode_image(random_image(rng), 64, 64);
  auto emb = model.encode_prompts(two_points());
  const int d = emb.tokens.dim(1);

  auto forward_gated = [&](double gamma) {
    std::vector<double> gate(static_cast<size_t>(2 * d), 1.0);
    for (int j = 0; j < d; ++j) gate[static_cast<size_t>(j)] = gamma;  // token 0 only
    minisam::PromptEmbedding gated;
    gated.tokens = ad::mul(emb.tokens, Tensor::leaf({2, d}, gate));
    gated.entity_of = emb.entity_of;
    return model.forward(tok, gated);
  };

  auto baseline = forward_gated(0.0);
  auto influence = [&](const minisam::ForwardResult& fr) {
    // total departure of the image->prompt column for token 0 from the
    // gate-zero reference, summed over layers/heads/rows
    double s = 0.0;
    for (size_t l = 0; l < fr.attn.layer_head.size(); ++l)
      for (size_t h = 0; h < fr.attn.layer_head[l].size(); ++h) {
        const auto& a = fr.attn.layer_head[l][h].image_to_prompt;
        const auto& b = baseline.attn.layer_head[l][h].image_to_prompt;
        const int tk = a.dim(1);
        for (int r = 0; r < a.dim(0); ++r)
          s += std::fabs(a.value()[static_cast<size_t>(r) * tk] -
                         b.value()[static_cast<size_t>(r) * tk]);
      }
    return s;
  };

  double prev = -1.0;
  for (double gamma : {0.1, 0.25, 0.5, 0.75, 1.0}) {
    const double inf = influence(forward_gated(gamma));
    CHECK(inf >= prev - 1e-9);  // non-decreasing in the gate
    prev = inf;
  }
  CHECK(prev > 0.0);
}

TEST_CASE("entity attention mask: range, degenerate maps, bad index") {
  minisam::Model model(model_cfg());
  Capl cp(capl_cfg());
  Rng rng(17);
  auto tok = model.encode_image(random_image(rng), 64, 64);
  auto emb = model.encode_prompts(two_points());
  auto fr = model.forward(tok, emb);

  auto mask = entity_attention_mask(fr.attn, 0, 8, 64, 64);
  double mn = 1e300, mx = -1e300;
  for (double v : mask.value()) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  CHECK(mn >= 0.0);
  CHECK(mx <= 1.0);
  CHECK(mx == doctest::Approx(1.0));  // min-max normalization attains both ends
  CHECK(mn == doctest::Approx(0.0));

  SUBCASE("uniform attention gives the all-zero mask") {
    minisam::AttentionRecord rec;
    rec.layout = model.layout(1);
    rec.layer_head.assign(1, std::vector<minisam::AttnBlockMaps>(1));
    rec.layer_head[0][0].image_to_prompt = Tensor::full({64, 2}, 0.5);
    rec.layer_head[0][0].prompt_to_image = Tensor::full({2, 64}, 1.0 / 64);
    rec.layer_head[0][0].prompt_to_prompt = Tensor::full({2, 2}, 0.5);
    auto zero = entity_attention_mask(rec, 0, 8, 64, 64);
    for (double v : zero.value()) CHECK(v == 0.0);
  }

  SUBCASE("entity index out of range is a contract violation") {
    CHECK_THROWS_AS(entity_attention_mask(fr.attn, 2, 8, 64, 64), ContractError);
    CHECK_THROWS_AS(entity_attention_mask(fr.attn, -1, 8, 64, 64), ContractError);
  }
}

TEST_CASE("the learner stays small next to the segmentation model") {
  minisam::Model model(model_cfg());
  model.add_lora();
  Capl cp(capl_cfg());
  long long model_count = 0;
  for (const auto& name : model.all_param_names())
    model_count += model.params().at(name).size();
  CHECK(static_cast<double>(cp.param_count()) < 0.2 * static_cast<double>(model_count));
}

TEST_CASE("capl parameters round-trip through named arrays") {
  Capl a(capl_cfg());
  randomize_theta(a, 29);
  auto arrays = a.to_arrays("capl.");
  Capl b(capl_cfg());
  b.from_arrays(arrays, "capl.");
  for (const auto& name : a.param_names())
    CHECK(a.params().at(name).value() == b.params().at(name).value());
}
