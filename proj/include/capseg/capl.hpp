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

#ifndef CAPSEG_CAPL_HPP
#define CAPSEG_CAPL_HPP

#include "capseg/minisam.hpp"

namespace capseg::capl {

// The causal prompt learner. Two small MLPs:
//  - the task module emits per-coordinate multiplicative gates in (0, 2) for
//    the prompt embeddings, identity (gate = 1) at init;
//  - the entity module emits an additive pre-softmax calibration tensor for
//    the cross-attention blocks, exactly zero at init and always zero on the
//    prompt->prompt block and the sink token slices.

struct CaplConfig {
  int dim = 32;        // must match the model embed dim
  int hidden = 32;     // task module hidden width (= dim per default)
  int calib_dim = 8;   // rank of the calibration bilinear form
  int layers = 2;      // decoder layers to calibrate (= model depth)
  int heads = 4;       // heads per layer (= model heads)
  std::uint64_t init_seed = 2;

  void validate() const;
};

class Capl {
 public:
  explicit Capl(const CaplConfig& cfg);

  const CaplConfig& config() const { return cfg_; }
  minisam::ParamStore& params() { return params_; }
  const minisam::ParamStore& params() const { return params_; }
  std::vector<std::string> param_names() const;
  long long param_count() const;

  // per-token, per-coordinate gates in (0, 2): 2 * sigmoid(mlp(tokens))
  ad::Tensor gates(const ad::Tensor& tokens, const minisam::ParamView& view) const;
  ad::Tensor gates(const ad::Tensor& tokens) const;

  minisam::PromptEmbedding reweight_prompts(const minisam::PromptEmbedding& emb,
                                            const minisam::ParamView& view) const;
  minisam::PromptEmbedding reweight_prompts(const minisam::PromptEmbedding& emb) const;

  // prompt_states: [T, d] reweighted entity tokens; image_states: [P, d]
  minisam::CalibrationTensor emit_calibration(const ad::Tensor& prompt_states,
                                              const ad::Tensor& image_states,
                                              const minisam::AttnLayout& layout,
                                              const minisam::ParamView& view) const;
  minisam::CalibrationTensor emit_calibration(const ad::Tensor& prompt_states,
                                              const ad::Tensor& image_states,
                                              const minisam::AttnLayout& layout) const;

  io::NamedArrays to_arrays(const std::string& prefix) const;
  void from_arrays(const io::NamedArrays& arrays, const std::string& prefix);
  void set_trainable(bool trainable);

 private:
  CaplConfig cfg_;
  minisam::ParamStore params_;
};

// image->prompt attention column for entity token `token_row`, averaged over
// layers and heads, reshaped to the patch grid, bilinearly upsampled to h*w
// and min-max normalized into [0,1]; a constant map degenerates to zeros
ad::Tensor entity_attention_mask(const minisam::AttentionRecord& rec, int token_row, int grid,
                                 int h, int w);

}  // namespace capseg::capl

#endif  // CAPSEG_CAPL_HPP
