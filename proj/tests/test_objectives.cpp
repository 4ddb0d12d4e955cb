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
#include <limits>

#include "capseg/objectives.hpp"

using namespace capseg;
using namespace capseg::objectives;
using ad::Tensor;

namespace {

// independent pixel-count oracle: plain loops, no shared code path
void count_oracle(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b,
                  long long* inter, long long* na, long long* nb, long long* uni) {
  *inter = *na = *nb = *uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) ++*inter;
    if (a[i]) ++*na;
    if (b[i]) ++*nb;
    if (a[i] || b[i]) ++*uni;
  }
}

std::vector<std::uint8_t> random_mask(Rng& rng, int n, double p) {
  std::vector<std::uint8_t> m(static_cast<size_t>(n));
  for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("dice and iou hand oracle") {
  // |A|=2, |B|=2, |A and B|=1 -> dice 0.5, iou 1/3
  std::vector<std::uint8_t> a{1, 1, 0, 0};
  std::vector<std::uint8_t> b{1, 0, 1, 0};
  CHECK(dice_score(a, b) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(iou_score(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  CHECK(dice_score(a, a) == 1.0);
  CHECK(iou_score(a, a) == 1.0);

  std::vector<std::uint8_t> c{0, 0, 1, 1};
  CHECK(dice_score(a, c) == 0.0);
  CHECK(iou_score(a, c) == 0.0);

  std::vector<std::uint8_t> z{0, 0, 0, 0};
  CHECK(dice_score(z, z) == 1.0);  // both-empty convention
  CHECK(iou_score(z, z) == 1.0);

  CHECK_THROWS_AS(dice_score(a, std::vector<std::uint8_t>{1, 0}), ContractError);
  CHECK_THROWS_AS(iou_score(a, std::vector<std::uint8_t>{1, 0}), ContractError);
  CHECK_THROWS_AS(dice_score(a, std::vector<std::uint8_t>{2, 0, 0, 0}), DataError);
}

TEST_CASE("dice/iou match the brute-force oracle exactly on 1000 random 8x8 pairs") {
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const double pa = rng.uniform(0.0, 1.0);
    const double pb = rng.uniform(0.0, 1.0);
    auto a = random_mask(rng, 64, pa);
    auto b = random_mask(rng, 64, pb);
    long long inter, na, nb, uni;
    count_oracle(a, b, &inter, &na, &nb, &uni);
    const double want_dice = (na + nb == 0) ? 1.0 : 2.0 * inter / static_cast<double>(na + nb);
    const double want_iou = (uni == 0) ? 1.0 : static_cast<double>(inter) / uni;
    CHECK(dice_score(a, b) == want_dice);  // exact, same integer arithmetic
    CHECK(iou_score(a, b) == want_iou);
  }
}

TEST_CASE("dice equals 2*iou/(1+iou) to 1e-12") {
  Rng rng(405);
  for (int trial = 0; trial < 500; ++trial) {
    auto a = random_mask(rng, 64, rng.uniform());
    auto b = random_mask(rng, 64, rng.uniform());
    const double d = dice_score(a, b);
    const double i = iou_score(a, b);
    CHECK(std::fabs(d - 2.0 * i / (1.0 + i)) <= 1e-12);
    CHECK(d >= i);  // dice dominates iou
  }
}

TEST_CASE("seg loss limits and oracle") {
  SUBCASE("confident correct prediction drives the loss under 1e-6") {
    std::vector<std::uint8_t> t{1, 0, 1, 1};
    std::vector<double> z;
    for (auto v : t) z.push_back(v ? 20.0 : -20.0);
    Tensor logits = Tensor::leaf({1, 4}, z);
    CHECK(seg_loss_logits(logits, {&t}).item() < 1e-6);
  }

  SUBCASE("all-zero logits cost ln 2 per pixel") {
    std::vector<std::uint8_t> t{1, 0, 1, 0};
    Tensor logits = Tensor::zeros({1, 4});
    CHECK(seg_loss_logits(logits, {&t}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SUBCASE("random 4x4 case matches a naive double-loop oracle within 1e-9") {
    Rng rng(11);
    std::vector<std::uint8_t> t = random_mask(rng, 16, 0.4);
    std::vector<double> z(16);
    for (auto& v : z) v = rng.normal() * 2.0;
    Tensor logits = Tensor::leaf({1, 16}, z);
    double oracle = 0.0;
    for (int i = 0; i < 16; ++i) {
      const double zi = z[static_cast<size_t>(i)];
      const double ti = t[static_cast<size_t>(i)];
      // direct -[t log s + (1-t) log(1-s)]
      const double s = 1.0 / (1.0 + std::exp(-zi));
      oracle += -(ti * std::log(s) + (1.0 - ti) * std::log(1.0 - s));
    }
    oracle /= 16.0;
    CHECK(seg_loss_logits(logits, {&t}).item() == doctest::Approx(oracle).epsilon(1e-9));
  }

  SUBCASE("gradient matches central finite differences, rel err < 1e-4") {
    Rng rng(13);
    std::vector<std::uint8_t> t = random_mask(rng, 16, 0.5);
    std::vector<double> z(16);
    for (auto& v : z) v = rng.normal();
    Tensor logits = Tensor::leaf({1, 16}, z, true);
    for (auto kind : {SegLossKind::bce, SegLossKind::soft_dice}) {
      auto g = ad::grad(seg_loss_logits(logits, {&t}, kind), {logits}, false);
      const double eps = 1e-6;
      for (int i = 0; i < 16; ++i) {
        const double keep = logits.value()[static_cast<size_t>(i)];
        logits.mutable_value()[static_cast<size_t>(i)] = keep + eps;
        const double fp = seg_loss_logits(logits, {&t}, kind).item();
        logits.mutable_value()[static_cast<size_t>(i)] = keep - eps;
        const double fm = seg_loss_logits(logits, {&t}, kind).item();
        logits.mutable_value()[static_cast<size_t>(i)] = keep;
        const double fd = (fp - fm) / (2 * eps);
        const double an = g[0].value()[static_cast<size_t>(i)];
        CHECK(std::fabs(an - fd) / std::max({std::fabs(fd), std::fabs(an), 1e-8}) < 1e-4);
      }
    }
  }

  SUBCASE("non-binary truth is a data error") {
    std::vector<std::uint8_t> bad{2, 0, 0, 0};
    Tensor logits = Tensor::zeros({1, 4});
    CHECK_THROWS_AS(seg_loss_logits(logits, {&bad}), DataError);
  }
}

TEST_CASE("task consistency loss is the exact sum of its components") {
  Tensor a = Tensor::scalar(0.3);
  Tensor b = Tensor::scalar(0.5);
  auto tc = task_consistency_loss({a, b});
  CHECK(tc.total.item() == 0.3 + 0.5);
  CHECK(tc.components.size() == 2);

  // permutation invariance of the total
  auto tc2 = task_consistency_loss({b, a});
  CHECK(tc2.total.item() == tc.total.item());

  CHECK_THROWS_AS(task_consistency_loss({a}), DataError);
}

namespace {

// record with a single 1x1 layer/head whose image->prompt column reproduces
// the truth mask exactly once upsampled (grid == image size: identity)
minisam::AttentionRecord perfect_record(const synthgen::SceneSample& s, int grid) {
  minisam::AttentionRecord rec;
  rec.layout.layers = 1;
  rec.layout.heads = 1;
  rec.layout.n_tokens = 2;  // entity + sink
  rec.layout.n_patches = grid * grid;
  rec.layout.entity_of = {0, -1};
  minisam::AttnBlockMaps blk;
  std::vector<double> ip(static_cast<size_t>(grid) * grid * 2);
  for (int p = 0; p < grid * grid; ++p) {
    const double v = s.entities[0].mask[static_cast<size_t>(p)] ? 1.0 : 0.0;
    ip[static_cast<size_t>(p) * 2] = v;
    ip[static_cast<size_t>(p) * 2 + 1] = 1.0 - v;
  }
  blk.image_to_prompt = ad::Tensor::leaf({grid * grid, 2}, std::move(ip));
  blk.prompt_to_prompt = ad::Tensor::full({2, 2}, 0.5);
  blk.prompt_to_image = ad::Tensor::full({2, grid * grid}, 1.0 / (grid * grid));
  rec.layer_head = {{blk}};
  return rec;
}

minisam::CalibrationTensor zero_calib(int tk, int p) {
  minisam::CalibrationTensor ct;
  ct.layout.layers = 1;
  ct.layout.heads = 1;
  ct.layout.n_tokens = tk;
  ct.layout.n_patches = p;
  minisam::CalibBlock blk;
  blk.prompt_to_image = ad::Tensor::zeros({tk, p});
  blk.image_to_prompt = ad::Tensor::zeros({p, tk});
  ct.layer_head = {{blk}};
  return ct;
}

}  // namespace

TEST_CASE("entity loss vanishes for perfect attention masks and zero calibration") {
  synthgen::SceneSample s;
  s.h = 4;
  s.w = 4;
  synthgen::EntityInstance e;
  e.class_id = 0;
  e.mask = {0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  s.entities.push_back(e);

  auto rec = perfect_record(s, 4);
  auto calib = zero_calib(2, 16);
  auto el = entity_loss(rec, calib, s, 0.4, 4);
  CHECK(el.l1_term.item() == 0.0);
  CHECK(el.mask_term.item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(el.total.item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("doubling the calibration tensor exactly doubles the l1 term") {
  synthgen::SceneSample s;
  s.h = 4;
  s.w = 4;
  synthgen::EntityInstance e;
  e.mask = std::vector<std::uint8_t>(16, 0);
  e.mask[5] = 1;
  e.mask[6] = 1;
  s.entities.push_back(e);
  auto rec = perfect_record(s, 4);

  Rng rng(7);
  auto ct = zero_calib(2, 16);
  std::vector<double> vals(32);
  for (auto& v : vals) v = rng.normal();
  ct.layer_head[0][0].image_to_prompt = ad::Tensor::leaf({16, 2}, vals);

  auto el1 = entity_loss(rec, ct, s, 1.0, 4);
  // direct summation oracle over the entity column (column 0 of 2)
  double oracle = 0.0;
  for (int p = 0; p < 16; ++p) oracle += std::fabs(vals[static_cast<size_t>(p) * 2]);
  oracle /= 16.0;
  CHECK(el1.l1_term.item() == doctest::Approx(oracle).epsilon(1e-12));

  for (auto& v : vals) v *= 2.0;
  ct.layer_head[0][0].image_to_prompt = ad::Tensor::leaf({16, 2}, vals);
  auto el2 = entity_loss(rec, ct, s, 1.0, 4);
  CHECK(el2.l1_term.item() == doctest::Approx(2.0 * el1.l1_term.item()).epsilon(1e-12));

  SUBCASE("negative lambda_xi is a configuration error") {
    CHECK_THROWS_AS(entity_loss(rec, ct, s, -0.1, 4), ConfigError);
  }
}

TEST_CASE("loss report validation") {
  LossReport r;
  r.seg_per_group = {0.5, 0.7};
  r.task_loss = 1.2;
  r.entity_total = 0.1;
  r.outer_total = 0.7;
  CHECK_NOTHROW(r.validate());

  SUBCASE("task loss must equal the component sum") {
    r.task_loss = 1.4;
    CHECK_THROWS_AS(r.validate(), ContractError);
  }
  SUBCASE("non-finite values are divergence") {
    r.task_loss = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(r.validate(), DivergenceError);
  }
  SUBCASE("negative component is divergence") {
    r.seg_per_group = {-0.1, 1.3};
    CHECK_THROWS_AS(r.validate(), DivergenceError);
  }
}

TEST_CASE("metrics report csv carries seed and config hash per row") {
  MetricsReport m;
  m.rows.push_back({0, 0, "base", 0.9, 0.82});
  m.rows.push_back({0, 1, "target", 0.5, 0.33});
  auto csv = m.to_csv(42, "cafe0123");
  CHECK(csv.header.size() == 7);
  CHECK(csv.rows.size() == 2);
  CHECK(csv.rows[0][5] == "42");
  CHECK(csv.rows[1][6] == "cafe0123");
  CHECK(m.mean_dice() == doctest::Approx(0.7));
  CHECK(m.mean_dice_for("target") == doctest::Approx(0.5));
}
