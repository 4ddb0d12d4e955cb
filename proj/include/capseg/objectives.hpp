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

#ifndef CAPSEG_OBJECTIVES_HPP
#define CAPSEG_OBJECTIVES_HPP

#include "capseg/capl.hpp"
#include "capseg/minisam.hpp"
#include "capseg/synthgen.hpp"

namespace capseg::objectives {

enum class SegLossKind { bce, soft_dice, bce_dice };

// mean over entities and pixels of the pixelwise negative log-likelihood
// (bce) or mean soft-dice loss with smoothing 1.0 (soft_dice); truth rows are
// selected by the output's entity binding
ad::Tensor seg_loss(const minisam::SegOutput& out, const synthgen::SceneSample& sample,
                    SegLossKind kind = SegLossKind::bce);
ad::Tensor seg_loss_logits(const ad::Tensor& logits,
                           const std::vector<const std::vector<std::uint8_t>*>& truth,
                           SegLossKind kind = SegLossKind::bce);

// soft dice loss 1 - (2*sum(p*t)+1)/(sum(p)+sum(t)+1), p in [0,1], per row
ad::Tensor soft_dice_loss(const ad::Tensor& probs,
                          const std::vector<const std::vector<std::uint8_t>*>& truth);

struct TaskConsistency {
  ad::Tensor total;                    // sum over the n_t distributions
  std::vector<ad::Tensor> components;  // per-distribution seg losses
};
// combine per-distribution seg losses into the task consistency objective
TaskConsistency task_consistency_loss(const std::vector<ad::Tensor>& per_distribution);

struct EntityLoss {
  ad::Tensor total;      // mask_term + lambda_xi * l1_term
  ad::Tensor mask_term;  // sum over entities of soft-dice(attention mask, truth)
  ad::Tensor l1_term;    // mean |calibration| over entity cross-attention slices
  // mean post-softmax attention mass on the entity slices of the prompt
  // self-attention and image->prompt blocks; reported here, added to the
  // training objective by the trainer (the sink token makes it suppressible)
  ad::Tensor attn_term;
};
// grid is the patch grid side; calibration may be undefined (l1 term 0)
EntityLoss entity_loss(const minisam::AttentionRecord& rec,
                       const minisam::CalibrationTensor& calib,
                       const synthgen::SceneSample& sample, double lambda_xi, int grid);

// scalar metrics on binary masks; both-empty pairs score 1.0
double dice_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);
double iou_score(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);

// sigmoid(logit) >= 0.5 binarization of one logit row
std::vector<std::uint8_t> binarize_logits(const ad::Tensor& logits, int row);

struct LossReport {
  std::vector<double> seg_per_group;
  double task_loss = 0.0;
  double entity_total = 0.0;
  double outer_total = 0.0;
  double lambda_xi = 0.0;
  double lambda_en = 0.0;

  // throws DivergenceError on non-finite parts, ContractError when the task
  // loss is not the sum of the per-group components
  void validate() const;
};

struct MetricsRow {
  int sample_id = 0;
  int entity_index = 0;
  std::string split;
  double dice = 0.0;
  double iou = 0.0;
};

struct MetricsReport {
  std::vector<MetricsRow> rows;

  double mean_dice() const;
  double mean_iou() const;
  double mean_dice_for(const std::string& split) const;
  io::Csv to_csv(std::uint64_t seed, const std::string& config_hash) const;
};

}  // namespace capseg::objectives

#endif  // CAPSEG_OBJECTIVES_HPP
