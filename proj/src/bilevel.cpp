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

#include "capseg/bilevel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>

namespace capseg::bilevel {

using ad::Tensor;
using minisam::ParamView;

const char* arm_name(Arm a) {
  switch (a) {
    case Arm::causal: return "causal";
    case Arm::task: return "task";
    case Arm::learnable: return "learnable";
    case Arm::fixed: return "fixed";
    case Arm::plug: return "plug";
  }
  return "?";
}

Arm arm_from_name(const std::string& name) {
  for (Arm a : {Arm::causal, Arm::task, Arm::learnable, Arm::fixed, Arm::plug})
    if (name == arm_name(a)) return a;
  throw ConfigError("unknown arm: " + name);
}

void BiLevelConfig::validate() const {
  config_require(inner_steps >= 1, "inner_steps must be >= 1");
  config_require(inner_lr >= 0.0, "inner_lr must be >= 0");
  config_require(outer_lr > 0.0, "outer_lr must be > 0");
  config_require(lambda_en >= 0.0 && lambda_xi >= 0.0, "loss weights must be >= 0");
  config_require(n_t >= 2, "n_t must be >= 2");
  config_require(epochs >= 1 && batch_size >= 1, "epochs and batch_size must be >= 1");
  config_require(warmup_epochs >= 0, "warmup_epochs must be >= 0");
}

// --- Adam ---

Adam::Adam(double lr, double beta1, double beta2, double eps, double weight_decay)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void Adam::step(minisam::ParamStore& store, const std::vector<std::string>& names,
                const std::vector<Tensor>& grads) {
  contract_require(names.size() == grads.size(), "adam: name/grad count mismatch");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < names.size(); ++i) {
    Tensor& p = store.at(names[i]);
    const auto& g = grads[i].value();
    auto& v = p.mutable_value();
    contract_require(g.size() == v.size(), "adam: grad size mismatch for " + names[i]);
    auto& mom = state_[names[i]];
    if (mom.m.empty()) {
      mom.m.assign(v.size(), 0.0);
      mom.v.assign(v.size(), 0.0);
    }
    for (size_t j = 0; j < v.size(); ++j) {
      if (!std::isfinite(g[j])) throw DivergenceError("non-finite gradient in " + names[i]);
      mom.m[j] = beta1_ * mom.m[j] + (1.0 - beta1_) * g[j];
      mom.v[j] = beta2_ * mom.v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double mhat = mom.m[j] / bc1;
      const double vhat = mom.v[j] / bc2;
      // decoupled weight decay
      v[j] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * v[j]);
    }
  }
}

io::NamedArrays Adam::to_arrays(const std::string& prefix) const {
  io::NamedArrays out;
  for (const auto& [name, mom] : state_) {
    out[prefix + name + ".m"] = {{static_cast<int>(mom.m.size())}, mom.m};
    out[prefix + name + ".v"] = {{static_cast<int>(mom.v.size())}, mom.v};
  }
  out[prefix + "t"] = {{1}, {static_cast<double>(t_)}};
  return out;
}

void Adam::from_arrays(const io::NamedArrays& arrays, const std::string& prefix) {
  state_.clear();
  t_ = 0;
  for (const auto& [name, e] : arrays) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = name.substr(prefix.size());
    if (rest == "t") {
      t_ = static_cast<long long>(e.data[0]);
    } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".m") == 0) {
      state_[rest.substr(0, rest.size() - 2)].m = e.data;
    } else if (rest.size() > 2 && rest.compare(rest.size() - 2, 2, ".v") == 0) {
      state_[rest.substr(0, rest.size() - 2)].v = e.data;
    }
  }
}

// --- batch assembly and loss evaluation ---

BatchData make_batch(const minisam::Model& model,
                     const std::vector<const synthgen::SceneSample*>& samples, int n_t,
                     double jitter, promptkit::PromptMode mode, std::uint64_t seed,
                     const std::vector<Tensor>* token_cache) {
  BatchData batch;
  batch.samples = samples;
  batch.n_t = n_t;
  Rng root(seed);
  batch.member_anns.resize(static_cast<size_t>(n_t));
  for (size_t b = 0; b < samples.size(); ++b) {
    if (token_cache) {
      batch.image_tokens.push_back((*token_cache)[b]);
    } else {
      batch.image_tokens.push_back(
          model.encode_image(samples[b]->image, samples[b]->h, samples[b]->w));
    }
    for (int i = 0; i < n_t; ++i)
      batch.member_anns[static_cast<size_t>(i)].push_back(promptkit::annotate(
          *samples[b], mode, jitter,
          root.fork("ann", (static_cast<std::uint64_t>(b) << 8) ^ static_cast<std::uint64_t>(i))
              .key()));
  }
  return batch;
}

BatchLosses eval_batch(const minisam::Model& model, const capl::Capl& cp, const ParamView& theta,
                       const BatchData& batch, const EvalOptions& opts) {
  const int n_t = batch.n_t;
  const int b_count = static_cast<int>(batch.samples.size());
  contract_require(b_count > 0, "eval_batch: empty batch");

  std::vector<Tensor> comp_acc(static_cast<size_t>(n_t));
  Tensor ent_acc, mask_acc, l1_acc;
  bool ent_first = true;

  for (int b = 0; b < b_count; ++b) {
    const auto& sample = *batch.samples[static_cast<size_t>(b)];
    for (int i = 0; i < n_t; ++i) {
      auto emb = model.encode_prompts(batch.member_anns[static_cast<size_t>(i)][static_cast<size_t>(b)]);
      if (opts.use_gates) emb = cp.reweight_prompts(emb, theta);
      minisam::CalibrationTensor ct;
      if (opts.use_calib)
        ct = cp.emit_calibration(emb.tokens, batch.image_tokens[static_cast<size_t>(b)],
                                 model.layout(emb.tokens.dim(0)), theta);
      auto fr = model.forward(batch.image_tokens[static_cast<size_t>(b)], emb,
                              opts.use_calib ? &ct : nullptr);
      Tensor sl = objectives::seg_loss(fr.seg, sample, opts.seg_kind);
      auto& slot = comp_acc[static_cast<size_t>(i)];
      slot = slot.defined() ? ad::add(slot, sl) : sl;
      if (opts.use_calib) {
        auto el = objectives::entity_loss(fr.attn, ct, sample, opts.lambda_xi,
                                          model.config().grid());
        // training objective also sparsifies the calibrated attention maps
        Tensor tot = ad::add(el.total, ad::mul_scalar(el.attn_term, opts.lambda_xi));
        if (ent_first) {
          ent_acc = tot;
          mask_acc = el.mask_term;
          l1_acc = el.l1_term;
          ent_first = false;
        } else {
          ent_acc = ad::add(ent_acc, tot);
          mask_acc = ad::add(mask_acc, el.mask_term);
          l1_acc = ad::add(l1_acc, el.l1_term);
        }
      }
    }
  }

  BatchLosses out;
  const double inv_b = 1.0 / b_count;
  for (auto& c : comp_acc) out.per_distribution.push_back(ad::mul_scalar(c, inv_b));
  if (!ent_first) {
    const double inv = 1.0 / (static_cast<double>(b_count) * n_t);
    out.entity_total = ad::mul_scalar(ent_acc, inv);
    out.entity_mask = ad::mul_scalar(mask_acc, inv);
    out.entity_l1 = ad::mul_scalar(l1_acc, inv);
  } else {
    out.entity_total = Tensor::zeros({1});
    out.entity_mask = Tensor::zeros({1});
    out.entity_l1 = Tensor::zeros({1});
  }
  return out;
}

ThetaOverlay inner_unroll(const minisam::Model& model, const capl::Capl& cp,
                          const BatchData& batch, const EvalOptions& opts, int k_steps,
                          double inner_lr, bool unrolled, double* inner_before,
                          double* inner_after) {
  const auto names = cp.param_names();
  std::vector<Tensor> cur;
  cur.reserve(names.size());
  for (const auto& n : names) cur.push_back(cp.params().at(n));

  ThetaOverlay overlay;
  for (int k = 0; k < k_steps; ++k) {
    ParamView view = overlay.empty() ? ParamView(cp.params()) : ParamView(cp.params(), overlay);
    BatchLosses bl = eval_batch(model, cp, view, batch, opts);
    Tensor inner = bl.per_distribution[0];
    for (size_t i = 1; i < bl.per_distribution.size(); ++i)
      inner = ad::add(inner, bl.per_distribution[i]);
    if (opts.use_calib) inner = ad::add(inner, bl.entity_total);
    if (!std::isfinite(inner.item())) throw DivergenceError("non-finite inner loss");
    if (k == 0 && inner_before) *inner_before = inner.item();

    auto grads = ad::grad(inner, cur, /*create_graph=*/unrolled);
    ThetaOverlay next;
    for (size_t i = 0; i < names.size(); ++i) {
      Tensor g = unrolled ? grads[i] : grads[i].detach();
      next[names[i]] = ad::sub(cur[i], ad::mul_scalar(g, inner_lr));
    }
    overlay = std::move(next);
    cur.clear();
    for (const auto& n : names) cur.push_back(overlay.at(n));
  }
  if (inner_after) {
    ParamView view(cp.params(), overlay);
    BatchLosses bl = eval_batch(model, cp, view, batch, opts);
    Tensor inner = bl.per_distribution[0];
    for (size_t i = 1; i < bl.per_distribution.size(); ++i)
      inner = ad::add(inner, bl.per_distribution[i]);
    if (opts.use_calib) inner = ad::add(inner, bl.entity_total);
    *inner_after = inner.item();
  }
  return overlay;
}

// --- Trainer ---

capl::CaplConfig Trainer::derive_capl_config(const minisam::ModelConfig& mc,
                                             std::uint64_t seed) {
  capl::CaplConfig cc;
  cc.dim = mc.dim;
  cc.hidden = mc.dim;
  cc.calib_dim = 8;
  cc.layers = mc.depth;
  cc.heads = mc.heads;
  cc.init_seed = mix64(seed ^ 0xca91ull);
  return cc;
}

Trainer::Trainer(const synthgen::DatasetSplit& data, const minisam::ModelConfig& mc,
                 const BiLevelConfig& bc)
    : data_(&data), mc_(mc), bc_(bc) {
  bc_.validate();
  config_require(!data.train.empty(), "training split is empty");
  // the trunk plays the pretrained-backbone role: its init and warm-up are
  // a pure function of the model config, shared by every run seed
  minisam::ModelConfig derived = mc_;
  derived.init_seed = mix64(fnv1a64(mc_.canonical()) ^ 0x5eedull);
  mc_ = derived;
  model_ = std::make_unique<minisam::Model>(mc_);
  capl_ = std::make_unique<capl::Capl>(derive_capl_config(mc_, bc_.seed));
}

std::vector<std::string> Trainer::phi_names() const {
  if (bc_.full_finetune) {
    std::vector<std::string> names;
    for (const auto& n : model_->all_param_names())
      if (n != "pe_freq") names.push_back(n);
    return names;
  }
  auto names = model_->head_param_names();
  for (const auto& n : model_->lora_param_names()) names.push_back(n);
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<std::string> Trainer::theta_names() const {
  switch (bc_.arm) {
    case Arm::fixed:
      return {};
    case Arm::task:
    case Arm::learnable:
      return {"task.b1", "task.b2", "task.w1", "task.w2"};
    default:
      return capl_->param_names();
  }
}

EvalOptions Trainer::eval_options() const {
  EvalOptions opts;
  const bool plug_a = bc_.arm == Arm::plug && !plug_phase_b_;
  opts.use_gates = bc_.arm != Arm::fixed && !plug_a;
  opts.use_calib = bc_.arm == Arm::causal || (bc_.arm == Arm::plug && plug_phase_b_);
  opts.lambda_xi = bc_.lambda_xi;
  opts.seg_kind = bc_.seg_kind;
  return opts;
}

BatchData Trainer::assemble_batch(const std::vector<const synthgen::SceneSample*>& samples,
                                  int n_t, double jitter, std::uint64_t seed) {
  if (token_cache_.empty())
    return make_batch(*model_, samples, n_t, jitter, bc_.prompt_mode, seed);
  std::vector<Tensor> cached;
  cached.reserve(samples.size());
  for (const auto* s : samples) {
    auto it = token_cache_.find(s);
    contract_require(it != token_cache_.end(), "sample missing from token cache");
    cached.push_back(it->second);
  }
  return make_batch(*model_, samples, n_t, jitter, bc_.prompt_mode, seed, &cached);
}

void Trainer::warmup() {
  if (bc_.warmup_epochs == 0) return;
  const std::string stem = bc_.warmup_cache_stem;
  if (!stem.empty() && std::filesystem::exists(stem + ".bin")) {
    model_->from_arrays(io::load_arrays(stem + ".bin"), "model.");
    return;
  }
  const auto& pool = data_->warmup.empty() ? data_->train : data_->warmup;
  Adam opt(bc_.warmup_lr, bc_.beta1, bc_.beta2, bc_.adam_eps, /*weight_decay=*/0.0);
  std::vector<std::string> names;
  for (const auto& n : model_->all_param_names())
    if (n != "pe_freq") names.push_back(n);
  std::vector<Tensor> leaves;
  for (const auto& n : names) leaves.push_back(model_->params().at(n));

  std::vector<int> order(pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const std::uint64_t warm_seed = mix64(fnv1a64(mc_.canonical()) ^ 0x77a9ull);
  for (int epoch = 0; epoch < bc_.warmup_epochs; ++epoch) {
    // two-stage schedule: full rate, then 0.3x for the last 40%
    opt.set_lr(epoch < (bc_.warmup_epochs * 3) / 5 ? bc_.warmup_lr : 0.3 * bc_.warmup_lr);
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng = Rng(warm_seed).fork("warm_shuffle", static_cast<std::uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(bc_.batch_size)) {
      std::vector<const synthgen::SceneSample*> chunk;
      for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(bc_.batch_size)); ++i)
        chunk.push_back(&pool[static_cast<size_t>(order[i])]);
      const auto seed = Rng(warm_seed)
                            .fork("warm_ann", static_cast<std::uint64_t>(epoch) * 65537ull + start)
                            .key();
      // one fresh annotation per sample per epoch, no prompt learner
      BatchData batch = make_batch(*model_, chunk, 1, bc_.warmup_jitter, bc_.prompt_mode, seed);
      EvalOptions opts;
      opts.use_gates = false;
      opts.use_calib = false;
      opts.seg_kind = bc_.seg_kind;
      BatchLosses bl = eval_batch(*model_, *capl_, ParamView(capl_->params()), batch, opts);
      Tensor loss = bl.per_distribution[0];
      if (!std::isfinite(loss.item())) throw DivergenceError("non-finite warm-up loss");
      auto grads = ad::grad(loss, leaves, false);
      opt.step(model_->params(), names, grads);
    }
  }
  if (!stem.empty()) {
    std::filesystem::create_directories(std::filesystem::path(stem).parent_path());
    const std::string tmp = stem + ".tmp" + std::to_string(static_cast<unsigned>(bc_.seed));
    io::save_arrays(tmp, model_->to_arrays("model."));
    std::filesystem::rename(tmp, stem + ".bin");
  }
}

void Trainer::prepare_for_bilevel() {
  if (prepared_) return;
  if (!bc_.full_finetune) {
    model_->freeze_trunk();
    model_->add_lora();
    rebuild_token_cache();
  }
  // weight decay regularizes the fine-tuned phi; the prompt learner stays
  // undecayed so learned gate deviations persist
  adam_theta_ = std::make_unique<Adam>(bc_.outer_lr, bc_.beta1, bc_.beta2, bc_.adam_eps, 0.0);
  adam_phi_ = std::make_unique<Adam>(bc_.outer_lr, bc_.beta1, bc_.beta2, bc_.adam_eps,
                                     bc_.weight_decay);
  prepared_ = true;
}

void Trainer::rebuild_token_cache() {
  if (bc_.full_finetune) return;
  // frozen trunk: image encodings are constants, cache them per sample
  ad::NoGradGuard ng;
  token_cache_.clear();
  for (const auto* split : {&data_->train, &data_->test_base, &data_->test_target})
    for (const auto& s : *split)
      token_cache_.emplace(&s, model_->encode_image(s.image, s.h, s.w));
}

void Trainer::train_step(const std::vector<const synthgen::SceneSample*>& batch_samples,
                         int epoch, int batch_index, objectives::LossReport* report) {
  const auto jseed =
      Rng(bc_.seed)
          .fork("jitter",
                static_cast<std::uint64_t>(epoch) * 1000003ull + static_cast<std::uint64_t>(batch_index))
          .key();
  BatchData batch = assemble_batch(batch_samples, bc_.n_t, bc_.train_jitter, jseed);
  EvalOptions opts = eval_options();

  const bool plug_b = bc_.arm == Arm::plug && plug_phase_b_;
  const bool has_inner =
      !bc_.outer_first && (bc_.arm == Arm::causal || bc_.arm == Arm::task || plug_b);
  auto tnames = theta_names();
  auto pnames = phi_names();

  std::vector<Tensor> tleaves, pleaves;
  for (const auto& n : tnames) tleaves.push_back(capl_->params().at(n));
  for (const auto& n : pnames) pleaves.push_back(model_->params().at(n));

  auto fill_report = [&](const BatchLosses& bl, double outer_value) {
    report->seg_per_group.clear();
    double task = 0.0;
    for (const auto& c : bl.per_distribution) {
      report->seg_per_group.push_back(c.item());
      task += c.item();
    }
    report->task_loss = task;
    report->entity_total = bl.entity_total.item();
    report->outer_total = outer_value;
    report->lambda_xi = bc_.lambda_xi;
    report->lambda_en = bc_.lambda_en;
    report->validate();
  };

  if (bc_.outer_first) {
    // schedule M3: phi on the seg objective first, then theta on L_CaPL
    BatchLosses bl = eval_batch(*model_, *capl_, ParamView(capl_->params()), batch, opts);
    Tensor sam = bl.per_distribution[0];
    for (size_t i = 1; i < bl.per_distribution.size(); ++i) sam = ad::add(sam, bl.per_distribution[i]);
    sam = ad::mul_scalar(sam, 1.0 / bc_.n_t);
    Tensor outer = opts.use_calib
                       ? ad::add(sam, ad::mul_scalar(bl.entity_total, bc_.lambda_en))
                       : sam;
    fill_report(bl, outer.item());
    auto pgrads = ad::grad(outer, pleaves, false);
    adam_phi_->step(model_->params(), pnames, pgrads);
    if (!tnames.empty()) {
      BatchLosses bl2 = eval_batch(*model_, *capl_, ParamView(capl_->params()), batch, opts);
      Tensor capl_loss = bl2.per_distribution[0];
      for (size_t i = 1; i < bl2.per_distribution.size(); ++i)
        capl_loss = ad::add(capl_loss, bl2.per_distribution[i]);
      if (opts.use_calib) capl_loss = ad::add(capl_loss, bl2.entity_total);
      auto tgrads = ad::grad(capl_loss, tleaves, false);
      adam_theta_->step(capl_->params(), tnames, tgrads);
    }
    return;
  }

  ThetaOverlay overlay;
  if (has_inner)
    overlay = inner_unroll(*model_, *capl_, batch, opts, bc_.inner_steps, bc_.inner_lr,
                           bc_.unrolled);
  ParamView view = overlay.empty() ? ParamView(capl_->params())
                                   : ParamView(capl_->params(), overlay);
  BatchLosses bl = eval_batch(*model_, *capl_, view, batch, opts);
  Tensor sam = bl.per_distribution[0];
  for (size_t i = 1; i < bl.per_distribution.size(); ++i) sam = ad::add(sam, bl.per_distribution[i]);
  sam = ad::mul_scalar(sam, 1.0 / bc_.n_t);
  Tensor outer =
      opts.use_calib ? ad::add(sam, ad::mul_scalar(bl.entity_total, bc_.lambda_en)) : sam;
  fill_report(bl, outer.item());

  const bool update_theta = !tnames.empty() && !(bc_.arm == Arm::plug && !plug_phase_b_);
  const bool update_phi = !plug_b;

  std::vector<Tensor> inputs;
  if (update_theta) inputs.insert(inputs.end(), tleaves.begin(), tleaves.end());
  if (update_phi) inputs.insert(inputs.end(), pleaves.begin(), pleaves.end());
  auto grads = ad::grad(outer, inputs, false);

  size_t at = 0;
  if (update_theta) {
    std::vector<Tensor> tg(grads.begin(), grads.begin() + static_cast<long>(tnames.size()));
    at = tnames.size();
    adam_theta_->step(capl_->params(), tnames, tg);
  }
  if (update_phi) {
    std::vector<Tensor> pg(grads.begin() + static_cast<long>(at), grads.end());
    adam_phi_->step(model_->params(), pnames, pg);
  }
}

TrainResult Trainer::train(const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (!out_dir.empty()) fs::create_directories(out_dir);
  TrainResult result;

  if (!prepared_) {
    warmup();
    prepare_for_bilevel();
  }

  const int snap_every =
      bc_.snapshot_every > 0 ? bc_.snapshot_every : std::max(1, bc_.epochs / 8);
  io::NamedArrays best_arrays;
  io::NamedArrays last_good = checkpoint_arrays();

  std::vector<int> order(data_->train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = epoch_done_; epoch < bc_.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (bc_.arm == Arm::plug) plug_phase_b_ = epoch >= bc_.epochs / 2;

    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng = Rng(bc_.seed).fork("shuffle", static_cast<std::uint64_t>(epoch));
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    EpochRow row;
    row.epoch = epoch;
    row.seg_per_group.assign(static_cast<size_t>(bc_.n_t), 0.0);
    int batches = 0;
    bool diverged = false;
    try {
      int batch_index = 0;
      for (size_t start = 0; start < order.size(); start += static_cast<size_t>(bc_.batch_size)) {
        std::vector<const synthgen::SceneSample*> chunk;
        for (size_t i = start;
             i < std::min(order.size(), start + static_cast<size_t>(bc_.batch_size)); ++i)
          chunk.push_back(&data_->train[static_cast<size_t>(order[i])]);
        objectives::LossReport report;
        train_step(chunk, epoch, batch_index++, &report);
        for (int i = 0; i < bc_.n_t; ++i)
          row.seg_per_group[static_cast<size_t>(i)] += report.seg_per_group[static_cast<size_t>(i)];
        row.task_loss += report.task_loss;
        row.entity_loss += report.entity_total;
        row.outer_total += report.outer_total;
        ++batches;
      }
    } catch (const DivergenceError&) {
      diverged = true;
    }
    if (diverged) {
      result.diverged = true;
      if (!out_dir.empty()) {
        io::save_arrays(out_dir + "/ckpt_final.bin", last_good);
        io::save_manifest(out_dir + "/ckpt_final.manifest.txt",
                          {{"config_hash", mc_.hash()},
                           {"step", std::to_string(epoch)},
                           {"seed", std::to_string(bc_.seed)}});
        result.final_checkpoint = out_dir + "/ckpt_final.bin";
      }
      return result;
    }
    for (auto& v : row.seg_per_group) v /= batches;
    row.task_loss /= batches;
    row.entity_loss /= batches;
    row.outer_total /= batches;

    auto base_eval = evaluate(data_->test_base, "base", 0.0, 0);
    auto target_eval = evaluate(data_->test_target, "target", 0.0, 0);
    row.base_dice = base_eval.mean_dice();
    row.target_dice = target_eval.mean_dice();
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(row);

    epoch_done_ = epoch + 1;
    last_good = checkpoint_arrays();

    if (row.target_dice > result.best_target_dice || result.best_epoch < 0) {
      result.best_target_dice = row.target_dice;
      result.best_epoch = epoch;
      best_arrays = last_good;
    }
    if (!out_dir.empty() && ((epoch + 1) % snap_every == 0 || epoch + 1 == bc_.epochs)) {
      const std::string snap = out_dir + "/snap_" + std::to_string(epoch + 1);
      save_checkpoint(snap);
      result.snapshots.push_back(snap + ".bin");
    }
  }

  if (!out_dir.empty()) {
    auto manifest = [&](int step) {
      return std::map<std::string, std::string>{{"config_hash", mc_.hash()},
                                                {"step", std::to_string(step)},
                                                {"seed", std::to_string(bc_.seed)}};
    };
    io::save_arrays(out_dir + "/ckpt_final.bin", checkpoint_arrays());
    io::save_manifest(out_dir + "/ckpt_final.manifest.txt", manifest(epoch_done_));
    result.final_checkpoint = out_dir + "/ckpt_final.bin";
    if (result.best_epoch >= 0) {
      io::save_arrays(out_dir + "/ckpt_best.bin", best_arrays);
      io::save_manifest(out_dir + "/ckpt_best.manifest.txt", manifest(result.best_epoch + 1));
      result.best_checkpoint = out_dir + "/ckpt_best.bin";
    }
  }
  return result;
}

objectives::MetricsReport Trainer::evaluate(const std::vector<synthgen::SceneSample>& samples,
                                            const std::string& split_tag, double jitter,
                                            std::uint64_t jitter_seed) {
  ad::NoGradGuard ng;
  EvalOptions opts = eval_options();
  objectives::MetricsReport report;
  Rng root(jitter_seed);
  for (size_t s = 0; s < samples.size(); ++s) {
    const auto& sample = samples[s];
    Tensor tokens;
    auto it = token_cache_.find(&sample);
    tokens = it != token_cache_.end() ? it->second
                                      : model_->encode_image(sample.image, sample.h, sample.w);
    auto ann = promptkit::annotate(sample, bc_.prompt_mode, jitter,
                                   root.fork("eval", static_cast<std::uint64_t>(s)).key());
    auto emb = model_->encode_prompts(ann);
    if (opts.use_gates) emb = capl_->reweight_prompts(emb);
    minisam::CalibrationTensor ct;
    if (opts.use_calib)
      ct = capl_->emit_calibration(emb.tokens, tokens, model_->layout(emb.tokens.dim(0)));
    auto fr = model_->forward(tokens, emb, opts.use_calib ? &ct : nullptr);
    for (int row = 0; row < fr.seg.logits.dim(0); ++row) {
      const int ent = fr.seg.entity_of[static_cast<size_t>(row)];
      auto pred = objectives::binarize_logits(fr.seg.logits, row);
      objectives::MetricsRow mr;
      mr.sample_id = static_cast<int>(s);
      mr.entity_index = ent;
      mr.split = split_tag;
      mr.dice = objectives::dice_score(pred, sample.entities[static_cast<size_t>(ent)].mask);
      mr.iou = objectives::iou_score(pred, sample.entities[static_cast<size_t>(ent)].mask);
      report.rows.push_back(mr);
    }
  }
  return report;
}

io::NamedArrays Trainer::checkpoint_arrays() const {
  io::NamedArrays out = model_->to_arrays("model.");
  auto ca = capl_->to_arrays("capl.");
  out.insert(ca.begin(), ca.end());
  if (adam_theta_) {
    auto a = adam_theta_->to_arrays("adam_t.");
    out.insert(a.begin(), a.end());
  }
  if (adam_phi_) {
    auto a = adam_phi_->to_arrays("adam_p.");
    out.insert(a.begin(), a.end());
  }
  out["state.epoch"] = {{1}, {static_cast<double>(epoch_done_)}};
  double seed_bits = 0.0;
  static_assert(sizeof(double) == sizeof(std::uint64_t));
  const std::uint64_t seed = bc_.seed;
  std::memcpy(&seed_bits, &seed, sizeof(seed_bits));
  out["state.seed"] = {{1}, {seed_bits}};
  out["state.plug_phase_b"] = {{1}, {plug_phase_b_ ? 1.0 : 0.0}};
  return out;
}

void Trainer::save_checkpoint(const std::string& path_stem) const {
  io::save_arrays(path_stem + ".bin", checkpoint_arrays());
  io::save_manifest(path_stem + ".manifest.txt", {{"config_hash", mc_.hash()},
                                                  {"step", std::to_string(epoch_done_)},
                                                  {"seed", std::to_string(bc_.seed)}});
}

void Trainer::load_checkpoint(const std::string& path_stem) {
  auto manifest = io::load_manifest(path_stem + ".manifest.txt");
  config_require(manifest.count("config_hash") && manifest.at("config_hash") == mc_.hash(),
                 "checkpoint config hash mismatch");
  if (!prepared_) prepare_for_bilevel();
  auto arrays = io::load_arrays(path_stem + ".bin");
  model_->from_arrays(arrays, "model.");
  capl_->from_arrays(arrays, "capl.");
  adam_theta_->from_arrays(arrays, "adam_t.");
  adam_phi_->from_arrays(arrays, "adam_p.");
  epoch_done_ = static_cast<int>(arrays.at("state.epoch").data[0]);
  plug_phase_b_ = arrays.count("state.plug_phase_b") && arrays.at("state.plug_phase_b").data[0] > 0.5;
  rebuild_token_cache();  // encodings depend on the loaded trunk weights
}

double Trainer::theta_grad_disagreement(std::uint64_t probe_seed, int probe_size) {
  contract_require(prepared_, "trainer not prepared");
  std::vector<const synthgen::SceneSample*> probe;
  for (int i = 0; i < probe_size && i < static_cast<int>(data_->train.size()); ++i)
    probe.push_back(&data_->train[static_cast<size_t>(i)]);
  BatchData batch = assemble_batch(probe, bc_.n_t, bc_.train_jitter, probe_seed);
  EvalOptions opts = eval_options();
  BatchLosses bl = eval_batch(*model_, *capl_, ParamView(capl_->params()), batch, opts);

  auto tnames = capl_->param_names();
  std::vector<Tensor> tleaves;
  for (const auto& n : tnames) tleaves.push_back(capl_->params().at(n));

  std::vector<std::vector<double>> flat;
  for (const auto& comp : bl.per_distribution) {
    auto grads = ad::grad(comp, tleaves, false);
    std::vector<double> g;
    for (const auto& t : grads) g.insert(g.end(), t.value().begin(), t.value().end());
    flat.push_back(std::move(g));
  }
  const size_t dim = flat[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& g : flat)
    for (size_t j = 0; j < dim; ++j) mean[j] += g[j];
  for (auto& v : mean) v /= static_cast<double>(flat.size());
  double mean_norm = 0.0;
  for (double v : mean) mean_norm += v * v;
  mean_norm = std::sqrt(mean_norm);
  double var = 0.0;
  for (const auto& g : flat) {
    double d = 0.0;
    for (size_t j = 0; j < dim; ++j) d += (g[j] - mean[j]) * (g[j] - mean[j]);
    var += d;
  }
  var /= static_cast<double>(flat.size());
  return std::sqrt(var) / (mean_norm + 1e-12);
}

std::vector<double> Trainer::per_distribution_losses(
    const std::vector<synthgen::SceneSample>& samples, double jitter, std::uint64_t seed) {
  ad::NoGradGuard ng;
  std::vector<const synthgen::SceneSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  BatchData batch = assemble_batch(ptrs, bc_.n_t, jitter, seed);
  EvalOptions opts = eval_options();
  BatchLosses bl = eval_batch(*model_, *capl_, ParamView(capl_->params()), batch, opts);
  std::vector<double> out;
  for (const auto& c : bl.per_distribution) out.push_back(c.item());
  return out;
}

Trainer::SparsityStats Trainer::sparsity_stats(const std::vector<synthgen::SceneSample>& samples) {
  ad::NoGradGuard ng;
  EvalOptions opts = eval_options();
  SparsityStats stats;
  double attn_sum = 0.0, xi_sum = 0.0, iou_sum = 0.0;
  long long attn_n = 0, xi_n = 0, iou_n = 0;
  const int grid = model_->config().grid();
  for (size_t s = 0; s < samples.size(); ++s) {
    const auto& sample = samples[s];
    Tensor tokens;
    auto it = token_cache_.find(&sample);
    tokens = it != token_cache_.end() ? it->second
                                      : model_->encode_image(sample.image, sample.h, sample.w);
    auto ann = promptkit::annotate(sample, bc_.prompt_mode, 0.0, 0);
    auto emb = model_->encode_prompts(ann);
    if (opts.use_gates) emb = capl_->reweight_prompts(emb);
    minisam::CalibrationTensor ct;
    if (opts.use_calib)
      ct = capl_->emit_calibration(emb.tokens, tokens, model_->layout(emb.tokens.dim(0)));
    auto fr = model_->forward(tokens, emb, opts.use_calib ? &ct : nullptr);

    const int tk = fr.attn.layout.n_tokens;
    for (const auto& layer : fr.attn.layer_head)
      for (const auto& blk : layer) {
        const auto& a = blk.image_to_prompt.value();
        for (int r = 0; r < blk.image_to_prompt.dim(0); ++r)
          for (int t = 0; t < tk - 1; ++t) {
            attn_sum += std::fabs(a[static_cast<size_t>(r) * tk + t]);
            ++attn_n;
          }
      }
    if (opts.use_calib)
      for (const auto& layer : ct.layer_head)
        for (const auto& blk : layer) {
          const auto& x = blk.image_to_prompt.value();
          for (int r = 0; r < blk.image_to_prompt.dim(0); ++r)
            for (int t = 0; t < tk - 1; ++t) {
              xi_sum += std::fabs(x[static_cast<size_t>(r) * tk + t]);
              ++xi_n;
            }
        }
    if (fr.seg.logits.dim(0) >= 2) {
      std::vector<std::vector<std::uint8_t>> masks;
      for (int row = 0; row < fr.seg.logits.dim(0); ++row) {
        Tensor m = capl::entity_attention_mask(fr.attn, row, grid, sample.h, sample.w);
        std::vector<std::uint8_t> bin(m.value().size());
        for (size_t i = 0; i < bin.size(); ++i) bin[i] = m.value()[i] >= 0.5 ? 1 : 0;
        masks.push_back(std::move(bin));
      }
      for (size_t i = 0; i < masks.size(); ++i)
        for (size_t j = i + 1; j < masks.size(); ++j) {
          iou_sum += objectives::iou_score(masks[i], masks[j]);
          ++iou_n;
        }
    }
  }
  stats.mean_entity_attention = attn_n ? attn_sum / attn_n : 0.0;
  stats.mean_abs_xi = xi_n ? xi_sum / xi_n : 0.0;
  stats.inter_entity_mask_iou = iou_n ? iou_sum / iou_n : 0.0;
  return stats;
}

// --- hypergradient oracle ---

HypergradReport hypergrad_check(int k_steps, std::uint64_t seed, double inner_lr, double fd_eps) {
  const auto t0 = std::chrono::steady_clock::now();

  minisam::ModelConfig mc;
  mc.image_size = 16;
  mc.patch = 8;  // 2x2 patch grid
  mc.dim = 8;
  mc.heads = 2;
  mc.depth = 1;
  mc.mlp_hidden = 8;
  mc.lora_rank = 1;
  mc.init_seed = mix64(seed ^ 0x717e57ull);
  minisam::Model model(mc);
  model.set_trainable(model.all_param_names(), false);  // theta-only check

  capl::CaplConfig cc;
  cc.dim = 8;
  cc.hidden = 4;
  cc.calib_dim = 2;
  cc.layers = 1;
  cc.heads = 2;
  cc.init_seed = mix64(seed ^ 0xca91ull);
  capl::Capl cp(cc);
  contract_require(cp.param_count() < 1000, "hypergrad check model must stay under 1k params");

  // move theta off its identity init so gradients are generic
  Rng jog(mix64(seed ^ 0x109ull));
  for (const auto& name : cp.param_names())
    for (auto& v : cp.params().at(name).mutable_value()) v += 0.05 * jog.normal();

  synthgen::ClassVocabulary vocab;
  vocab.classes.push_back(
      {0, synthgen::ShapeFamily::disk, synthgen::TextureFamily::solid, synthgen::Split::base});
  vocab.classes.push_back({1, synthgen::ShapeFamily::rectangle, synthgen::TextureFamily::stripes,
                           synthgen::Split::base});
  auto specs = synthgen::default_factor_specs();
  for (auto& f : specs)
    if (f.name == "scale") {
      f.lo = 3.0;
      f.hi = 4.0;
    }
  synthgen::GeneratorConfig geom;
  geom.h = 16;
  geom.w = 16;
  geom.max_entities = 1;
  geom.max_distractors = 0;
  std::vector<synthgen::SceneSample> scenes;
  scenes.push_back(synthgen::sample_scene(mix64(seed ^ 1), vocab, specs, {0}, geom));
  scenes.push_back(synthgen::sample_scene(mix64(seed ^ 2), vocab, specs, {1}, geom));

  std::vector<const synthgen::SceneSample*> ptrs{&scenes[0], &scenes[1]};
  BatchData batch =
      make_batch(model, ptrs, 2, 0.15, promptkit::PromptMode::box, mix64(seed ^ 3));

  EvalOptions opts;
  opts.use_gates = true;
  opts.use_calib = true;
  opts.lambda_xi = 0.4;

  const double lambda_en = 0.6;
  auto outer_from_overlay = [&](const ThetaOverlay& overlay) {
    ParamView view = overlay.empty() ? ParamView(cp.params()) : ParamView(cp.params(), overlay);
    BatchLosses bl = eval_batch(model, cp, view, batch, opts);
    Tensor sam = ad::mul_scalar(ad::add(bl.per_distribution[0], bl.per_distribution[1]), 0.5);
    return ad::add(sam, ad::mul_scalar(bl.entity_total, lambda_en));
  };

  // analytic unrolled hypergradient
  auto names = cp.param_names();
  std::vector<Tensor> tleaves;
  for (const auto& n : names) tleaves.push_back(cp.params().at(n));
  ThetaOverlay overlay = inner_unroll(model, cp, batch, opts, k_steps, inner_lr, true);
  Tensor outer = outer_from_overlay(overlay);
  auto analytic = ad::grad(outer, tleaves, false);

  // finite differences of the same pipeline; the inner pass still needs the
  // first-order graph, only the second-order one is skipped
  auto outer_value = [&]() {
    ThetaOverlay ov = inner_unroll(model, cp, batch, opts, k_steps, inner_lr, false);
    return outer_from_overlay(ov).item();
  };

  HypergradReport report;
  report.k_steps = k_steps;
  double gmax = 0.0;
  for (const auto& g : analytic)
    for (double v : g.value()) gmax = std::max(gmax, std::fabs(v));

  double sum_rel = 0.0;
  for (size_t p = 0; p < names.size(); ++p) {
    Tensor leaf = cp.params().at(names[p]);
    for (size_t j = 0; j < leaf.value().size(); ++j) {
      const double keep = leaf.value()[j];
      leaf.mutable_value()[j] = keep + fd_eps;
      const double fp = outer_value();
      leaf.mutable_value()[j] = keep - fd_eps;
      const double fm = outer_value();
      leaf.mutable_value()[j] = keep;
      const double fd = (fp - fm) / (2.0 * fd_eps);
      const double an = analytic[p].value()[j];
      const double rel = std::fabs(an - fd) / (std::fabs(fd) + 1e-12 + 1e-6 * gmax);
      report.max_rel_err = std::max(report.max_rel_err, rel);
      sum_rel += rel;
      ++report.n_coords;
    }
  }
  report.mean_rel_err = sum_rel / std::max(1, report.n_coords);
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace capseg::bilevel
