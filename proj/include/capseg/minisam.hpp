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

#ifndef CAPSEG_MINISAM_HPP
#define CAPSEG_MINISAM_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capseg/io.hpp"
#include "capseg/promptkit.hpp"
#include "capseg/tensor.hpp"

namespace capseg::minisam {

// A miniature promptable segmentation model: patch image encoder, prompt
// encoder, and a two-way transformer mask decoder whose attention maps are
// exposed per layer/head, partitioned into prompt->prompt, prompt->image and
// image->prompt blocks. A learned sink token rides along with the entity
// prompt tokens so attention mass on entity tokens is free to shrink.

struct ModelConfig {
  int image_size = 64;
  int patch = 8;
  int dim = 32;
  int heads = 4;
  int depth = 2;
  int mlp_hidden = 64;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  double pe_scale = 1.5;
  std::uint64_t init_seed = 1;

  int grid() const { return image_size / patch; }
  int n_patches() const { return grid() * grid(); }
  int head_dim() const { return dim / heads; }
  void validate() const;
  std::string canonical() const;
  std::string hash() const;  // hex of fnv1a64(canonical)
};

struct ParamStore {
  std::map<std::string, ad::Tensor> m;

  ad::Tensor& at(const std::string& name);
  const ad::Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return m.count(name) > 0; }
  long long count_in(const std::vector<std::string>& names) const;
};

// overlay view used to evaluate a module at substituted parameter tensors
// (the inner-loop iterates theta' without touching the leaves)
class ParamView {
 public:
  explicit ParamView(const ParamStore& base) : base_(&base), overlay_(nullptr) {}
  ParamView(const ParamStore& base, const std::map<std::string, ad::Tensor>& overlay)
      : base_(&base), overlay_(&overlay) {}
  const ad::Tensor& at(const std::string& name) const;

 private:
  const ParamStore* base_;
  const std::map<std::string, ad::Tensor>* overlay_;
};

struct PromptEmbedding {
  ad::Tensor tokens;           // [T, d], entity tokens only
  std::vector<int> entity_of;  // size T
};

struct AttnLayout {
  int layers = 0;
  int heads = 0;
  int n_tokens = 0;   // entity tokens + sink
  int n_patches = 0;
  std::vector<int> entity_of;  // size n_tokens, -1 for the sink token
};

// calibration values added to pre-softmax attention scores; the
// prompt->prompt block is identically zero and is not materialized
struct CalibBlock {
  ad::Tensor prompt_to_image;  // [Tk, P]
  ad::Tensor image_to_prompt;  // [P, Tk]
};
struct CalibrationTensor {
  std::vector<std::vector<CalibBlock>> layer_head;  // [layer][head]
  AttnLayout layout;
  bool defined() const { return !layer_head.empty(); }
};

struct AttnBlockMaps {
  ad::Tensor prompt_to_prompt;  // [Tk, Tk] post-softmax
  ad::Tensor prompt_to_image;   // [Tk, P]
  ad::Tensor image_to_prompt;   // [P, Tk]
};
struct AttentionRecord {
  std::vector<std::vector<AttnBlockMaps>> layer_head;  // [layer][head]
  AttnLayout layout;
};

struct SegOutput {
  ad::Tensor logits;  // [n_entities, H*W], row k for entity bound to token k
  int h = 0, w = 0;
  std::vector<int> entity_of;  // size n_entities
};

struct ForwardResult {
  SegOutput seg;
  AttentionRecord attn;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // parameter grouping: trunk freezes after warm-up; phi = lora + prompt
  // embeddings + mask head stays trainable
  std::vector<std::string> trunk_param_names() const;
  std::vector<std::string> head_param_names() const;
  std::vector<std::string> lora_param_names() const;
  std::vector<std::string> all_param_names() const;

  void add_lora();  // default placement: q and v of every decoder attention
  void add_lora(const std::vector<std::string>& target_projections);
  bool has_lora() const { return lora_added_; }
  // frozen weight + (alpha/r) * down * up, for tests and inspection
  ad::Tensor effective_weight(const std::string& proj_name) const;

  void set_trainable(const std::vector<std::string>& names, bool trainable);
  void freeze_trunk();

  ad::Tensor encode_image(const std::vector<double>& image, int h, int w) const;  // [P, d]
  PromptEmbedding encode_prompts(const promptkit::PromptAnnotation& ann) const;

  AttnLayout layout(int n_entity_tokens) const;

  // image_tokens: [P, d] from encode_image (detachable when the trunk is
  // frozen); calib must match layout(n_entity_tokens) when present
  ForwardResult forward(const ad::Tensor& image_tokens, const PromptEmbedding& prompts,
                        const CalibrationTensor* calib = nullptr) const;

  io::NamedArrays to_arrays(const std::string& prefix) const;
  void from_arrays(const io::NamedArrays& arrays, const std::string& prefix);

 private:
  ad::Tensor attention(const std::string& prefix, const ad::Tensor& xq, const ad::Tensor& xkv,
                       const CalibrationTensor* calib, int layer, int which_block,
                       std::vector<std::vector<AttnBlockMaps>>* record) const;
  ad::Tensor linear(const std::string& prefix, const ad::Tensor& x) const;
  ad::Tensor maybe_lora(const std::string& proj, const ad::Tensor& x, const ad::Tensor& base_out) const;
  ad::Tensor layernorm(const std::string& prefix, const ad::Tensor& x) const;
  ad::Tensor fourier_pe(const std::vector<double>& feats4) const;

  ModelConfig cfg_;
  ParamStore params_;
  bool lora_added_ = false;
  std::vector<std::string> lora_targets_;
};

}  // namespace capseg::minisam

#endif  // CAPSEG_MINISAM_HPP
