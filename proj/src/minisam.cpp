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

#include "capseg/minisam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace capseg::minisam {

using ad::Tensor;

namespace {
constexpr double kTwoPi = 6.28318530717958647692;

std::vector<double> normal_vec(Rng& rng, long long n, double scale) {
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}
}  // namespace

void ModelConfig::validate() const {
  config_require(image_size >= 16, "image_size must be >= 16");
  config_require(patch >= 1 && image_size % patch == 0, "patch size must divide image size");
  config_require(heads >= 1 && dim % heads == 0, "embed dim must be divisible by heads");
  config_require(dim % 2 == 0, "embed dim must be even");
  config_require(depth >= 1, "decoder depth must be >= 1");
  config_require(lora_rank >= 1, "lora rank must be >= 1");
  config_require(mlp_hidden >= 1, "mlp hidden must be >= 1");
}

std::string ModelConfig::canonical() const {
  std::ostringstream os;
  os << "image=" << image_size << " patch=" << patch << " dim=" << dim << " heads=" << heads
     << " depth=" << depth << " mlp=" << mlp_hidden << " rank=" << lora_rank
     << " alpha=" << lora_alpha << " pe=" << pe_scale << " init_seed=" << init_seed;
  return os.str();
}

std::string ModelConfig::hash() const {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canonical())));
  return buf;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = m.find(name);
  contract_require(it != m.end(), "unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = m.find(name);
  contract_require(it != m.end(), "unknown parameter: " + name);
  return it->second;
}

long long ParamStore::count_in(const std::vector<std::string>& names) const {
  long long n = 0;
  for (const auto& name : names) n += at(name).size();
  return n;
}

const Tensor& ParamView::at(const std::string& name) const {
  if (overlay_) {
    auto it = overlay_->find(name);
    if (it != overlay_->end()) return it->second;
  }
  return base_->at(name);
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.init_seed);
  const int d = cfg_.dim;

  auto add = [&](const std::string& name, ad::Shape shape, double scale, bool trainable = true) {
    const long long n = ad::numel(shape);
    params_.m.emplace(name,
                      Tensor::leaf(std::move(shape),
                                   scale == 0.0 ? std::vector<double>(static_cast<size_t>(n), 0.0)
                                                : normal_vec(rng, n, scale),
                                   trainable));
  };
  auto add_ones = [&](const std::string& name, ad::Shape shape) {
    params_.m.emplace(name, Tensor::full(std::move(shape), 1.0, true));
  };

  const int pdim = cfg_.patch * cfg_.patch * 3;
  add("patch_proj.w", {pdim, d}, 1.0 / std::sqrt(static_cast<double>(pdim)));
  add("patch_proj.b", {d}, 0.0);
  add("pe_freq", {4, d / 2}, cfg_.pe_scale, /*trainable=*/false);

  const double ws = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg_.depth; ++l) {
    for (const char* a : {"self", "p2i", "i2p"}) {
      const std::string p = "dec" + std::to_string(l) + "." + a;
      for (const char* wn : {".wq", ".wk", ".wv", ".wo"}) add(p + wn, {d, d}, ws);
      for (const char* bn : {".bq", ".bk", ".bv", ".bo"}) add(p + bn, {d}, 0.0);
    }
    const std::string p = "dec" + std::to_string(l);
    for (int i = 1; i <= 4; ++i) {
      add_ones(p + ".ln" + std::to_string(i) + ".g", {d});
      add(p + ".ln" + std::to_string(i) + ".b", {d}, 0.0);
    }
    add(p + ".mlp.w1", {d, cfg_.mlp_hidden}, ws);
    add(p + ".mlp.b1", {cfg_.mlp_hidden}, 0.0);
    add(p + ".mlp.w2", {cfg_.mlp_hidden, d}, 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_hidden)));
    add(p + ".mlp.b2", {d}, 0.0);
  }
  add_ones("final_ln_tok.g", {d});
  add("final_ln_tok.b", {d}, 0.0);
  add_ones("final_ln_img.g", {d});
  add("final_ln_img.b", {d}, 0.0);

  add("type_emb", {2, d}, 0.5);
  add("sink_token", {1, d}, 0.5);
  add("mask_head.w1", {d, d}, ws);
  add("mask_head.b1", {d}, 0.0);
  add("mask_head.w2", {d, d}, ws);
  add("mask_head.b2", {d}, 0.0);
  add("mask_img.w", {d, d}, ws);
  add("mask_img.b", {d}, 0.0);
  add("mask_bias", {1}, 0.0);
  params_.at("mask_bias").mutable_value()[0] = -2.0;  // start near the background prior
}

std::vector<std::string> Model::trunk_param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_.m) {
    if (name.rfind("lora.", 0) == 0) continue;
    if (name == "type_emb" || name == "sink_token" || name == "mask_bias") continue;
    if (name.rfind("mask_head.", 0) == 0 || name.rfind("mask_img.", 0) == 0) continue;
    out.push_back(name);
  }
  return out;
}

std::vector<std::string> Model::head_param_names() const {
  std::vector<std::string> out{"type_emb", "sink_token", "mask_bias"};
  for (const auto& [name, t] : params_.m)
    if (name.rfind("mask_head.", 0) == 0 || name.rfind("mask_img.", 0) == 0) out.push_back(name);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> Model::lora_param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_.m)
    if (name.rfind("lora.", 0) == 0) out.push_back(name);
  return out;
}

std::vector<std::string> Model::all_param_names() const {
  std::vector<std::string> out;
  for (const auto& [name, t] : params_.m) out.push_back(name);
  return out;
}

void Model::add_lora() {
  std::vector<std::string> targets;
  for (int l = 0; l < cfg_.depth; ++l)
    for (const char* a : {"self", "p2i", "i2p"}) {
      targets.push_back("dec" + std::to_string(l) + "." + a + ".wq");
      targets.push_back("dec" + std::to_string(l) + "." + a + ".wv");
    }
  add_lora(targets);
}

void Model::add_lora(const std::vector<std::string>& target_projections) {
  contract_require(!lora_added_, "lora already added");
  Rng rng(mix64(cfg_.init_seed ^ 0x10adull));
  const int d = cfg_.dim;
  const int r = cfg_.lora_rank;
  for (const auto& t : target_projections) {
    config_require(params_.has(t), "lora adapter targets unknown projection: " + t);
    config_require(params_.at(t).ndim() == 2, "lora target is not a weight matrix: " + t);
    params_.m.emplace(
        "lora." + t + ".down",
        Tensor::leaf({d, r},
                     normal_vec(rng, static_cast<long long>(d) * r,
                                1.0 / std::sqrt(static_cast<double>(d))),
                     true));
    params_.m.emplace("lora." + t + ".up", Tensor::zeros({r, d}, true));
  }
  lora_targets_ = target_projections;
  lora_added_ = true;
}

Tensor Model::effective_weight(const std::string& proj_name) const {
  const Tensor& base = params_.at(proj_name);
  if (!params_.has("lora." + proj_name + ".down")) return base;
  const Tensor& down = params_.at("lora." + proj_name + ".down");
  const Tensor& up = params_.at("lora." + proj_name + ".up");
  const double s = cfg_.lora_alpha / static_cast<double>(cfg_.lora_rank);
  return ad::add(base, ad::mul_scalar(ad::matmul(down, up), s));
}

void Model::set_trainable(const std::vector<std::string>& names, bool trainable) {
  for (const auto& n : names) {
    if (n == "pe_freq") continue;  // positional frequencies stay fixed
    params_.at(n).raw()->requires_grad = trainable;
  }
}

void Model::freeze_trunk() { set_trainable(trunk_param_names(), false); }

Tensor Model::linear(const std::string& prefix, const Tensor& x) const {
  return ad::add(ad::matmul(x, params_.at(prefix + ".w")),
                 ad::broadcast_row(params_.at(prefix + ".b"), x.dim(0)));
}

Tensor Model::maybe_lora(const std::string& proj, const Tensor& x, const Tensor& base_out) const {
  if (!params_.has("lora." + proj + ".down")) return base_out;
  const Tensor& down = params_.at("lora." + proj + ".down");
  const Tensor& up = params_.at("lora." + proj + ".up");
  const double s = cfg_.lora_alpha / static_cast<double>(cfg_.lora_rank);
  return ad::add(base_out, ad::mul_scalar(ad::matmul(ad::matmul(x, down), up), s));
}

Tensor Model::layernorm(const std::string& prefix, const Tensor& x) const {
  const int n = x.dim(1);
  const double inv_n = 1.0 / n;
  Tensor mu = ad::mul_scalar(ad::sum_rows(x), inv_n);
  Tensor xc = ad::sub(x, ad::broadcast_col(mu, n));
  Tensor var = ad::mul_scalar(ad::sum_rows(ad::mul(xc, xc)), inv_n);
  Tensor inv = ad::reciprocal(ad::vsqrt(ad::add_scalar(var, 1e-5)));
  Tensor xn = ad::mul(xc, ad::broadcast_col(inv, n));
  const Tensor& g = params_.at(prefix + ".g");
  const Tensor& b = params_.at(prefix + ".b");
  return ad::add(ad::mul(xn, ad::broadcast_row(g, x.dim(0))), ad::broadcast_row(b, x.dim(0)));
}

Tensor Model::fourier_pe(const std::vector<double>& feats4) const {
  const auto& freq = params_.at("pe_freq").value();
  const int half = cfg_.dim / 2;
  std::vector<double> row(static_cast<size_t>(cfg_.dim));
  for (int j = 0; j < half; ++j) {
    double arg = 0.0;
    for (int i = 0; i < 4; ++i)
      arg += feats4[static_cast<size_t>(i)] * freq[static_cast<size_t>(i) * half + j];
    arg *= kTwoPi;
    row[static_cast<size_t>(j)] = std::sin(arg);
    row[static_cast<size_t>(half + j)] = std::cos(arg);
  }
  return Tensor::leaf({1, cfg_.dim}, std::move(row));
}

Tensor Model::encode_image(const std::vector<double>& image, int h, int w) const {
  config_require(h == cfg_.image_size && w == cfg_.image_size, "image dims do not match config");
  config_require(static_cast<long long>(image.size()) == 3ll * h * w, "image buffer size mismatch");
  const int g = cfg_.grid(), ps = cfg_.patch;
  const int pdim = ps * ps * 3;
  std::vector<double> patches(static_cast<size_t>(g) * g * pdim);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      double* dst = &patches[(static_cast<size_t>(gy) * g + gx) * pdim];
      for (int py = 0; py < ps; ++py)
        for (int px = 0; px < ps; ++px) {
          const size_t src = ((static_cast<size_t>(gy * ps + py) * w) + (gx * ps + px)) * 3;
          const size_t d0 = (static_cast<size_t>(py) * ps + px) * 3;
          dst[d0] = image[src];
          dst[d0 + 1] = image[src + 1];
          dst[d0 + 2] = image[src + 2];
        }
    }
  Tensor x = Tensor::leaf({g * g, pdim}, std::move(patches));
  Tensor tok = ad::add(ad::matmul(x, params_.at("patch_proj.w")),
                       ad::broadcast_row(params_.at("patch_proj.b"), g * g));

  std::vector<Tensor> pe_rows;
  pe_rows.reserve(static_cast<size_t>(g) * g);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx)
      pe_rows.push_back(
          fourier_pe({(gx + 0.5) * ps / w, (gy + 0.5) * ps / h, 0.0, 0.0}));
  return ad::add(tok, ad::concat_rows(pe_rows));
}

PromptEmbedding Model::encode_prompts(const promptkit::PromptAnnotation& ann) const {
  data_require(!ann.elements.empty(), "annotation has no elements");
  const double size = cfg_.image_size;
  PromptEmbedding out;
  std::vector<Tensor> rows;
  for (const auto& el : ann.elements) {
    std::vector<double> feats;
    if (el.mode == promptkit::PromptMode::point) {
      data_require(el.x >= 0 && el.x <= size - 1 && el.y >= 0 && el.y <= size - 1,
                   "point prompt out of bounds");
      feats = {el.x / size, el.y / size, 0.0, 0.0};
    } else {
      data_require(el.x_min >= 0 && el.y_min >= 0 && el.x_max <= size - 1 && el.y_max <= size - 1,
                   "box prompt out of bounds");
      data_require(el.x_max > el.x_min && el.y_max > el.y_min, "box prompt has no area");
      feats = {(el.x_min + el.x_max) * 0.5 / size, (el.y_min + el.y_max) * 0.5 / size,
               (el.x_max - el.x_min) / size, (el.y_max - el.y_min) / size};
    }
    const int type = el.polarity == promptkit::Polarity::background ? 1 : 0;
    rows.push_back(
        ad::add(fourier_pe(feats), ad::slice_rows(params_.at("type_emb"), type, type + 1)));
    out.entity_of.push_back(el.entity_index);
  }
  out.tokens = ad::concat_rows(rows);
  return out;
}

AttnLayout Model::layout(int n_entity_tokens) const {
  AttnLayout lo;
  lo.layers = cfg_.depth;
  lo.heads = cfg_.heads;
  lo.n_tokens = n_entity_tokens + 1;
  lo.n_patches = cfg_.n_patches();
  lo.entity_of.resize(static_cast<size_t>(lo.n_tokens), -1);
  return lo;
}

Tensor Model::attention(const std::string& prefix, const Tensor& xq, const Tensor& xkv,
                        const CalibrationTensor* calib, int layer, int which_block,
                        std::vector<std::vector<AttnBlockMaps>>* record) const {
  const int nh = cfg_.heads, dh = cfg_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const int mq = xq.dim(0), mkv = xkv.dim(0);

  Tensor q = ad::add(ad::matmul(xq, params_.at(prefix + ".wq")),
                     ad::broadcast_row(params_.at(prefix + ".bq"), mq));
  q = maybe_lora(prefix + ".wq", xq, q);
  Tensor k = ad::add(ad::matmul(xkv, params_.at(prefix + ".wk")),
                     ad::broadcast_row(params_.at(prefix + ".bk"), mkv));
  Tensor v = ad::add(ad::matmul(xkv, params_.at(prefix + ".wv")),
                     ad::broadcast_row(params_.at(prefix + ".bv"), mkv));
  v = maybe_lora(prefix + ".wv", xkv, v);

  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<size_t>(nh));
  for (int h = 0; h < nh; ++h) {
    Tensor qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = ad::mul_scalar(ad::matmul(qh, ad::transpose(kh)), scale);
    if (calib && which_block == 1)
      scores = ad::add(
          scores,
          calib->layer_head[static_cast<size_t>(layer)][static_cast<size_t>(h)].prompt_to_image);
    if (calib && which_block == 2)
      scores = ad::add(
          scores,
          calib->layer_head[static_cast<size_t>(layer)][static_cast<size_t>(h)].image_to_prompt);
    Tensor a = ad::softmax_rows(scores);
    if (record) {
      auto& slot = (*record)[static_cast<size_t>(layer)][static_cast<size_t>(h)];
      if (which_block == 0) slot.prompt_to_prompt = a;
      if (which_block == 1) slot.prompt_to_image = a;
      if (which_block == 2) slot.image_to_prompt = a;
    }
    head_outs.push_back(ad::matmul(a, vh));
  }
  Tensor out = ad::concat_cols(head_outs);
  return ad::add(ad::matmul(out, params_.at(prefix + ".wo")),
                 ad::broadcast_row(params_.at(prefix + ".bo"), mq));
}

ForwardResult Model::forward(const Tensor& image_tokens, const PromptEmbedding& prompts,
                             const CalibrationTensor* calib) const {
  const int P = cfg_.n_patches();
  contract_require(image_tokens.ndim() == 2 && image_tokens.dim(0) == P &&
                       image_tokens.dim(1) == cfg_.dim,
                   "image token shape mismatch");
  const int T = prompts.tokens.dim(0);
  const int Tk = T + 1;
  AttnLayout lo = layout(T);
  for (int t = 0; t < T; ++t)
    lo.entity_of[static_cast<size_t>(t)] = prompts.entity_of[static_cast<size_t>(t)];

  if (calib && calib->defined()) {
    contract_require(static_cast<int>(calib->layer_head.size()) == cfg_.depth,
                     "calibration layer count mismatch");
    for (const auto& layer : calib->layer_head) {
      contract_require(static_cast<int>(layer.size()) == cfg_.heads,
                       "calibration head count mismatch");
      for (const auto& blk : layer) {
        contract_require(blk.prompt_to_image.dim(0) == Tk && blk.prompt_to_image.dim(1) == P,
                         "calibration prompt_to_image shape mismatch");
        contract_require(blk.image_to_prompt.dim(0) == P && blk.image_to_prompt.dim(1) == Tk,
                         "calibration image_to_prompt shape mismatch");
      }
    }
  }
  const CalibrationTensor* use_calib = (calib && calib->defined()) ? calib : nullptr;

  Tensor tokens = ad::concat_rows({prompts.tokens, params_.at("sink_token")});
  Tensor img = image_tokens;

  AttentionRecord rec;
  rec.layout = lo;
  rec.layer_head.assign(static_cast<size_t>(cfg_.depth),
                        std::vector<AttnBlockMaps>(static_cast<size_t>(cfg_.heads)));

  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string p = "dec" + std::to_string(l);
    tokens = layernorm(
        p + ".ln1",
        ad::add(tokens, attention(p + ".self", tokens, tokens, use_calib, l, 0, &rec.layer_head)));
    tokens = layernorm(
        p + ".ln2",
        ad::add(tokens, attention(p + ".p2i", tokens, img, use_calib, l, 1, &rec.layer_head)));
    Tensor h1 = ad::relu(ad::add(ad::matmul(tokens, params_.at(p + ".mlp.w1")),
                                 ad::broadcast_row(params_.at(p + ".mlp.b1"), Tk)));
    Tensor h2 = ad::add(ad::matmul(h1, params_.at(p + ".mlp.w2")),
                        ad::broadcast_row(params_.at(p + ".mlp.b2"), Tk));
    tokens = layernorm(p + ".ln3", ad::add(tokens, h2));
    img = layernorm(
        p + ".ln4",
        ad::add(img, attention(p + ".i2p", img, tokens, use_calib, l, 2, &rec.layer_head)));
  }
  tokens = layernorm("final_ln_tok", tokens);
  img = layernorm("final_ln_img", img);

  Tensor ent_tokens = ad::slice_rows(tokens, 0, T);
  Tensor mh = ad::relu(ad::add(ad::matmul(ent_tokens, params_.at("mask_head.w1")),
                               ad::broadcast_row(params_.at("mask_head.b1"), T)));
  Tensor mt = ad::add(ad::matmul(mh, params_.at("mask_head.w2")),
                      ad::broadcast_row(params_.at("mask_head.b2"), T));
  Tensor imf = ad::add(ad::matmul(img, params_.at("mask_img.w")),
                       ad::broadcast_row(params_.at("mask_img.b"), P));
  Tensor m = ad::mul_scalar(ad::matmul(mt, ad::transpose(imf)),
                            1.0 / std::sqrt(static_cast<double>(cfg_.dim)));
  m = ad::add(m, ad::broadcast_full(params_.at("mask_bias"), {T, P}));

  ForwardResult out;
  out.seg.h = cfg_.image_size;
  out.seg.w = cfg_.image_size;
  out.seg.entity_of = prompts.entity_of;
  out.seg.logits = ad::upsample_bilinear(m, cfg_.grid(), cfg_.image_size, cfg_.image_size);
  out.attn = std::move(rec);
  return out;
}

io::NamedArrays Model::to_arrays(const std::string& prefix) const {
  io::NamedArrays out;
  for (const auto& [name, t] : params_.m) out[prefix + name] = {t.shape(), t.value()};
  return out;
}

void Model::from_arrays(const io::NamedArrays& arrays, const std::string& prefix) {
  for (auto& [name, t] : params_.m) {
    auto it = arrays.find(prefix + name);
    data_require(it != arrays.end(), "checkpoint missing parameter: " + name);
    data_require(it->second.shape == t.shape(), "checkpoint shape mismatch: " + name);
    t.mutable_value() = it->second.data;
  }
}

}  // namespace capseg::minisam
