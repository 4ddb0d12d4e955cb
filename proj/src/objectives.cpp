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

#include "capseg/objectives.hpp"

#include <cmath>

namespace capseg::objectives {

using ad::Tensor;

namespace {

Tensor truth_tensor(const std::vector<const std::vector<std::uint8_t>*>& truth, long long hw) {
  const int e = static_cast<int>(truth.size());
  std::vector<double> t(static_cast<size_t>(e) * hw);
  for (int i = 0; i < e; ++i) {
    data_require(static_cast<long long>(truth[static_cast<size_t>(i)]->size()) == hw,
                 "truth mask size mismatch");
    for (long long j = 0; j < hw; ++j) {
      const auto v = (*truth[static_cast<size_t>(i)])[static_cast<size_t>(j)];
      data_require(v <= 1, "truth mask is not binary");
      t[static_cast<size_t>(i) * hw + j] = static_cast<double>(v);
    }
  }
  return Tensor::leaf({e, static_cast<int>(hw)}, std::move(t));
}

std::vector<const std::vector<std::uint8_t>*> bound_truth(const minisam::SegOutput& out,
                                                          const synthgen::SceneSample& sample) {
  std::vector<const std::vector<std::uint8_t>*> truth;
  for (int ent : out.entity_of) {
    data_require(ent >= 0 && ent < static_cast<int>(sample.entities.size()),
                 "entity binding out of range");
    truth.push_back(&sample.entities[static_cast<size_t>(ent)].mask);
  }
  return truth;
}

}  // namespace

Tensor seg_loss_logits(const Tensor& logits,
                       const std::vector<const std::vector<std::uint8_t>*>& truth,
                       SegLossKind kind) {
  contract_require(logits.ndim() == 2, "seg_loss: logits must be [entities, pixels]");
  contract_require(static_cast<int>(truth.size()) == logits.dim(0),
                   "seg_loss: entity count mismatch");
  Tensor t = truth_tensor(truth, logits.dim(1));
  // mean of softplus(z) - z*t over entities and pixels
  Tensor bce = ad::mean_all(ad::sub(ad::softplus(logits), ad::mul(logits, t)));
  if (kind == SegLossKind::bce) return bce;
  Tensor dice = soft_dice_loss(ad::sigmoid(logits), truth);
  if (kind == SegLossKind::soft_dice) return dice;
  return ad::add(bce, dice);
}

Tensor seg_loss(const minisam::SegOutput& out, const synthgen::SceneSample& sample,
                SegLossKind kind) {
  return seg_loss_logits(out.logits, bound_truth(out, sample), kind);
}

Tensor soft_dice_loss(const Tensor& probs,
                      const std::vector<const std::vector<std::uint8_t>*>& truth) {
  contract_require(probs.ndim() == 2, "soft_dice: probs must be [entities, pixels]");
  Tensor t = truth_tensor(truth, probs.dim(1));
  Tensor inter = ad::sum_rows(ad::mul(probs, t));
  Tensor ps = ad::sum_rows(probs);
  Tensor ts = ad::sum_rows(t);
  Tensor num = ad::add_scalar(ad::mul_scalar(inter, 2.0), 1.0);
  Tensor den = ad::add_scalar(ad::add(ps, ts), 1.0);
  Tensor dice = ad::mul(num, ad::reciprocal(den));
  return ad::mean_all(ad::add_scalar(ad::neg(dice), 1.0));
}

TaskConsistency task_consistency_loss(const std::vector<Tensor>& per_distribution) {
  data_require(per_distribution.size() >= 2, "task consistency needs >= 2 distributions");
  TaskConsistency out;
  out.components = per_distribution;
  out.total = per_distribution[0];
  for (size_t i = 1; i < per_distribution.size(); ++i)
    out.total = ad::add(out.total, per_distribution[i]);
  return out;
}

EntityLoss entity_loss(const minisam::AttentionRecord& rec,
                       const minisam::CalibrationTensor& calib,
                       const synthgen::SceneSample& sample, double lambda_xi, int grid) {
  config_require(lambda_xi >= 0.0, "lambda_xi must be >= 0");
  contract_require(!rec.layer_head.empty(), "entity_loss: empty attention record");
  const int tk = rec.layout.n_tokens;

  EntityLoss out;
  bool first = true;
  for (int row = 0; row < tk - 1; ++row) {
    const int ent = rec.layout.entity_of[static_cast<size_t>(row)];
    data_require(ent >= 0 && ent < static_cast<int>(sample.entities.size()),
                 "entity_loss: missing entity binding");
    Tensor mask = capl::entity_attention_mask(rec, row, grid, sample.h, sample.w);
    Tensor term = soft_dice_loss(mask, {&sample.entities[static_cast<size_t>(ent)].mask});
    out.mask_term = first ? term : ad::add(out.mask_term, term);
    first = false;
  }

  // sparsity on the calibration tensor's entity slices of the image->prompt
  // block, linear in the tensor entries
  if (calib.defined()) {
    Tensor acc;
    int count = 0;
    for (const auto& layer : calib.layer_head)
      for (const auto& blk : layer) {
        Tensor ent_cols = ad::slice_cols(blk.image_to_prompt, 0, tk - 1);
        Tensor m = ad::mean_all(ad::vabs(ent_cols));
        acc = count == 0 ? m : ad::add(acc, m);
        ++count;
      }
    out.l1_term = ad::mul_scalar(acc, 1.0 / count);
  } else {
    out.l1_term = Tensor::zeros({1});
  }

  // sparsity on the calibrated post-softmax maps themselves: entity columns
  // of the prompt self-attention and image->prompt blocks
  {
    Tensor acc;
    int count = 0;
    for (const auto& layer : rec.layer_head)
      for (const auto& blk : layer) {
        Tensor ip_cols = ad::slice_cols(blk.image_to_prompt, 0, tk - 1);
        Tensor pp_cols = ad::slice_cols(blk.prompt_to_prompt, 0, tk - 1);
        Tensor m = ad::add(ad::mean_all(vabs(ip_cols)), ad::mean_all(vabs(pp_cols)));
        acc = count == 0 ? m : ad::add(acc, m);
        ++count;
      }
    out.attn_term = ad::mul_scalar(acc, 1.0 / count);
  }
  out.total = ad::add(out.mask_term, ad::mul_scalar(out.l1_term, lambda_xi));
  return out;
}

double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  contract_require(pred.size() == truth.size(), "dice: mask shape mismatch");
  long long inter = 0, a = 0, b = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    data_require(pred[i] <= 1 && truth[i] <= 1, "dice: masks must be binary");
    inter += pred[i] & truth[i];
    a += pred[i];
    b += truth[i];
  }
  if (a + b == 0) return 1.0;  // vacuous agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double iou_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  contract_require(pred.size() == truth.size(), "iou: mask shape mismatch");
  long long inter = 0, uni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    data_require(pred[i] <= 1 && truth[i] <= 1, "iou: masks must be binary");
    inter += pred[i] & truth[i];
    uni += (pred[i] | truth[i]);
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> binarize_logits(const Tensor& logits, int row) {
  const int hw = logits.dim(1);
  std::vector<std::uint8_t> mask(static_cast<size_t>(hw));
  const auto& v = logits.value();
  for (int j = 0; j < hw; ++j)
    mask[static_cast<size_t>(j)] = v[static_cast<size_t>(row) * hw + j] >= 0.0 ? 1 : 0;
  return mask;
}

void LossReport::validate() const {
  auto finite = [](double x) { return std::isfinite(x); };
  double sum = 0.0;
  for (double s : seg_per_group) {
    if (!finite(s) || s < 0.0) throw DivergenceError("non-finite or negative group seg loss");
    sum += s;
  }
  if (!finite(task_loss) || !finite(entity_total) || !finite(outer_total))
    throw DivergenceError("non-finite loss report");
  contract_require(std::fabs(task_loss - sum) <= 1e-6 * std::max(1.0, std::fabs(sum)),
                   "task loss must equal the sum of group seg losses");
}

double MetricsReport::mean_dice() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.dice;
  return s / static_cast<double>(rows.size());
}

double MetricsReport::mean_iou() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.iou;
  return s / static_cast<double>(rows.size());
}

double MetricsReport::mean_dice_for(const std::string& split) const {
  double s = 0.0;
  int n = 0;
  for (const auto& r : rows)
    if (r.split == split) {
      s += r.dice;
      ++n;
    }
  return n ? s / n : 0.0;
}

io::Csv MetricsReport::to_csv(std::uint64_t seed, const std::string& config_hash) const {
  io::Csv csv;
  csv.header = {"sample_id", "entity_index", "split", "dice", "iou", "seed", "config_hash"};
  for (const auto& r : rows)
    csv.add_row({std::to_string(r.sample_id), std::to_string(r.entity_index), r.split,
                 io::fmt_double(r.dice), io::fmt_double(r.iou), std::to_string(seed), config_hash});
  return csv;
}

}  // namespace capseg::objectives
