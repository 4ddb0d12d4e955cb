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

#include "capseg/capl.hpp"

#include <cmath>

namespace capseg::capl {

using ad::Tensor;
using minisam::ParamView;

void CaplConfig::validate() const {
  config_require(dim >= 2 && hidden >= 1, "capl dims must be positive");
  config_require(calib_dim >= 1, "calib_dim must be >= 1");
  config_require(layers >= 1 && heads >= 1, "capl layout must be positive");
}

Capl::Capl(const CaplConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(mix64(cfg_.init_seed ^ 0xca91ull));
  const int d = cfg_.dim, hid = cfg_.hidden;
  const int out_dim = cfg_.layers * cfg_.heads * 2 * cfg_.calib_dim;

  auto normal_init = [&](ad::Shape shape, double scale) {
    std::vector<double> v(static_cast<size_t>(ad::numel(shape)));
    for (auto& x : v) x = rng.normal() * scale;
    return Tensor::leaf(std::move(shape), std::move(v), true);
  };

  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  // task module: last layer zero so gates start at exactly 1
  params_.m.emplace("task.w1", normal_init({d, hid}, s1));
  params_.m.emplace("task.b1", Tensor::zeros({hid}, true));
  params_.m.emplace("task.w2", Tensor::zeros({hid, d}, true));
  params_.m.emplace("task.b2", Tensor::zeros({d}, true));
  // entity module: last layer zero so the calibration tensor starts at 0
  params_.m.emplace("ent.w1", normal_init({d, hid}, s1));
  params_.m.emplace("ent.b1", Tensor::zeros({hid}, true));
  params_.m.emplace("ent.w2", Tensor::zeros({hid, out_dim}, true));
  params_.m.emplace("ent.b2", Tensor::zeros({out_dim}, true));
  params_.m.emplace("ent.pproj", normal_init({d, cfg_.calib_dim}, s1));
}

std::vector<std::string> Capl::param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_.m) out.push_back(name);
  return out;
}

long long Capl::param_count() const {
  long long n = 0;
  for (const auto& [name, t] : params_.m) n += t.size();
  return n;
}

Tensor Capl::gates(const Tensor& tokens, const ParamView& view) const {
  const int rows = tokens.dim(0);
  Tensor h = ad::relu(ad::add(ad::matmul(tokens, view.at("task.w1")),
                              ad::broadcast_row(view.at("task.b1"), rows)));
  Tensor pre = ad::add(ad::matmul(h, view.at("task.w2")),
                       ad::broadcast_row(view.at("task.b2"), rows));
  return ad::mul_scalar(ad::sigmoid(pre), 2.0);
}

Tensor Capl::gates(const Tensor& tokens) const { return gates(tokens, ParamView(params_)); }

minisam::PromptEmbedding Capl::reweight_prompts(const minisam::PromptEmbedding& emb,
                                                const ParamView& view) const {
  contract_require(emb.tokens.defined() && emb.tokens.dim(1) == cfg_.dim,
                   "reweight_prompts: embedding dim mismatch");
  minisam::PromptEmbedding out;
  out.tokens = ad::mul(emb.tokens, gates(emb.tokens, view));
  out.entity_of = emb.entity_of;
  return out;
}

minisam::PromptEmbedding Capl::reweight_prompts(const minisam::PromptEmbedding& emb) const {
  return reweight_prompts(emb, ParamView(params_));
}

minisam::CalibrationTensor Capl::emit_calibration(const Tensor& prompt_states,
                                                  const Tensor& image_states,
                                                  const minisam::AttnLayout& layout,
                                                  const ParamView& view) const {
  contract_require(layout.layers == cfg_.layers && layout.heads == cfg_.heads,
                   "emit_calibration: layout mismatch");
  contract_require(prompt_states.dim(1) == cfg_.dim && image_states.dim(1) == cfg_.dim,
                   "emit_calibration: state dim mismatch");
  const int t = prompt_states.dim(0);
  const int p = image_states.dim(0);
  contract_require(layout.n_tokens == t + 1, "emit_calibration: token count mismatch");
  contract_require(layout.n_patches == p, "emit_calibration: patch count mismatch");

  const int dc = cfg_.calib_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dc));

  Tensor h = ad::relu(ad::add(ad::matmul(prompt_states, view.at("ent.w1")),
                              ad::broadcast_row(view.at("ent.b1"), t)));
  Tensor kq = ad::add(ad::matmul(h, view.at("ent.w2")),
                      ad::broadcast_row(view.at("ent.b2"), t));  // [t, L*H*2*dc]
  Tensor pkeys_t = ad::transpose(ad::matmul(image_states, view.at("ent.pproj")));  // [dc, p]

  minisam::CalibrationTensor out;
  out.layout = layout;
  out.layer_head.resize(static_cast<size_t>(cfg_.layers));
  Tensor zero_row = Tensor::zeros({1, p});
  Tensor zero_col = Tensor::zeros({p, 1});
  int off = 0;
  for (int l = 0; l < cfg_.layers; ++l) {
    out.layer_head[static_cast<size_t>(l)].resize(static_cast<size_t>(cfg_.heads));
    for (int hh = 0; hh < cfg_.heads; ++hh) {
      Tensor k_pi = ad::slice_cols(kq, off, off + dc);
      off += dc;
      Tensor k_ip = ad::slice_cols(kq, off, off + dc);
      off += dc;
      // [t, p] entity slices; sink row/column stays zero
      Tensor pi = ad::mul_scalar(ad::matmul(k_pi, pkeys_t), scale);
      Tensor ip_t = ad::mul_scalar(ad::matmul(k_ip, pkeys_t), scale);  // [t, p]
      auto& blk = out.layer_head[static_cast<size_t>(l)][static_cast<size_t>(hh)];
      blk.prompt_to_image = ad::concat_rows({pi, zero_row});            // [t+1, p]
      blk.image_to_prompt = ad::concat_cols({ad::transpose(ip_t), zero_col});  // [p, t+1]
    }
  }
  return out;
}

minisam::CalibrationTensor Capl::emit_calibration(const Tensor& prompt_states,
                                                  const Tensor& image_states,
                                                  const minisam::AttnLayout& layout) const {
  return emit_calibration(prompt_states, image_states, layout, ParamView(params_));
}

io::NamedArrays Capl::to_arrays(const std::string& prefix) const {
  io::NamedArrays out;
  for (const auto& [name, t] : params_.m) out[prefix + name] = {t.shape(), t.value()};
  return out;
}

void Capl::from_arrays(const io::NamedArrays& arrays, const std::string& prefix) {
  for (auto& [name, t] : params_.m) {
    auto it = arrays.find(prefix + name);
    data_require(it != arrays.end(), "checkpoint missing capl parameter: " + name);
    data_require(it->second.shape == t.shape(), "checkpoint shape mismatch: " + name);
    t.mutable_value() = it->second.data;
  }
}

void Capl::set_trainable(bool trainable) {
  for (auto& [name, t] : params_.m) t.raw()->requires_grad = trainable;
}

Tensor entity_attention_mask(const minisam::AttentionRecord& rec, int token_row, int grid, int h,
                             int w) {
  contract_require(!rec.layer_head.empty(), "attention record is empty");
  const int tk = rec.layout.n_tokens;
  contract_require(token_row >= 0 && token_row < tk - 1, "entity token row out of range");

  Tensor acc;
  int count = 0;
  for (const auto& layer : rec.layer_head)
    for (const auto& blk : layer) {
      Tensor col = ad::slice_cols(blk.image_to_prompt, token_row, token_row + 1);  // [P, 1]
      acc = count == 0 ? col : ad::add(acc, col);
      ++count;
    }
  Tensor avg = ad::mul_scalar(acc, 1.0 / count);         // [P, 1]
  Tensor rowvec = ad::transpose(avg);                    // [1, P]
  contract_require(rowvec.dim(1) == grid * grid, "patch grid mismatch");
  Tensor up = ad::upsample_bilinear(rowvec, grid, h, w);  // [1, h*w]

  Tensor mn = ad::vmin_all(up);
  Tensor mx = ad::vmax_all(up);
  const double range = mx.item() - mn.item();
  if (range < 1e-12) return Tensor::zeros({1, h * w});  // degenerate constant map
  Tensor shifted = ad::sub(up, ad::broadcast_full(mn, up.shape()));
  Tensor inv = ad::reciprocal(ad::sub(mx, mn));
  return ad::mul(shifted, ad::broadcast_full(inv, up.shape()));
}

}  // namespace capseg::capl
