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

#include "capseg/runhub.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <sstream>

namespace capseg::runhub {

namespace fs = std::filesystem;

namespace {

double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    config_require(pos == v.size(), "bad number for " + key);
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (...) {
    throw ConfigError("bad number for " + key + ": " + v);
  }
}

int parse_int(const std::string& v, const std::string& key) {
  const double d = parse_double(v, key);
  config_require(d == static_cast<long long>(d), "expected integer for " + key);
  return static_cast<int>(d);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected bool for " + key + ": " + v);
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double slope_of(const std::vector<double>& y) {
  const int n = static_cast<int>(y.size());
  if (n < 2) return 0.0;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < n; ++i) {
    sx += i;
    sy += y[static_cast<size_t>(i)];
    sxx += static_cast<double>(i) * i;
    sxy += i * y[static_cast<size_t>(i)];
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

RunConfig RunConfig::defaults() { return RunConfig{}; }

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
      line.pop_back();
    size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    line = line.substr(start);
    const auto eq = line.find('=');
    config_require(eq != std::string::npos, "bad config line (expected key=value): " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

RunConfig RunConfig::from_kv(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "out_dir") cfg.out_dir = value;
    else if (key == "seeds") {
      cfg.seeds.clear();
      std::istringstream ss(value);
      std::string tok;
      while (std::getline(ss, tok, ','))
        cfg.seeds.push_back(static_cast<std::uint64_t>(std::stoull(tok)));
      config_require(!cfg.seeds.empty(), "seeds must be non-empty");
    } else if (key == "eval_bias_jitter") cfg.eval_bias_jitter = parse_double(value, key);
    else if (key == "audit_scenes") cfg.audit_scenes = parse_int(value, key);
    else if (key == "audit_probe") cfg.audit_probe = parse_int(value, key);
    else if (key == "warmup_cache") cfg.warmup_cache = parse_bool(value, key);
    else if (key == "dataset.vocab_size") cfg.dataset.vocab_size = parse_int(value, key);
    else if (key == "dataset.n_train") cfg.dataset.n_train = parse_int(value, key);
    else if (key == "dataset.n_test_base") cfg.dataset.n_test_base = parse_int(value, key);
    else if (key == "dataset.n_test_target") cfg.dataset.n_test_target = parse_int(value, key);
    else if (key == "dataset.n_warmup") cfg.dataset.n_warmup = parse_int(value, key);
    else if (key == "dataset.seed") cfg.dataset.seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "dataset.max_entities") cfg.dataset.geom.max_entities = parse_int(value, key);
    else if (key == "dataset.min_entities") cfg.dataset.geom.min_entities = parse_int(value, key);
    else if (key == "model.image") cfg.model.image_size = parse_int(value, key);
    else if (key == "model.patch") cfg.model.patch = parse_int(value, key);
    else if (key == "model.dim") cfg.model.dim = parse_int(value, key);
    else if (key == "model.heads") cfg.model.heads = parse_int(value, key);
    else if (key == "model.depth") cfg.model.depth = parse_int(value, key);
    else if (key == "model.mlp_hidden") cfg.model.mlp_hidden = parse_int(value, key);
    else if (key == "model.rank") cfg.model.lora_rank = parse_int(value, key);
    else if (key == "model.alpha") cfg.model.lora_alpha = parse_double(value, key);
    else if (key == "model.pe_scale") cfg.model.pe_scale = parse_double(value, key);
    else if (key == "bilevel.arm") cfg.bilevel.arm = bilevel::arm_from_name(value);
    else if (key == "bilevel.inner_steps") cfg.bilevel.inner_steps = parse_int(value, key);
    else if (key == "bilevel.inner_lr") cfg.bilevel.inner_lr = parse_double(value, key);
    else if (key == "bilevel.outer_lr") cfg.bilevel.outer_lr = parse_double(value, key);
    else if (key == "bilevel.weight_decay") cfg.bilevel.weight_decay = parse_double(value, key);
    else if (key == "bilevel.lambda_en") cfg.bilevel.lambda_en = parse_double(value, key);
    else if (key == "bilevel.lambda_xi") cfg.bilevel.lambda_xi = parse_double(value, key);
    else if (key == "bilevel.n_t") cfg.bilevel.n_t = parse_int(value, key);
    else if (key == "bilevel.unrolled") cfg.bilevel.unrolled = parse_bool(value, key);
    else if (key == "bilevel.outer_first") cfg.bilevel.outer_first = parse_bool(value, key);
    else if (key == "bilevel.epochs") cfg.bilevel.epochs = parse_int(value, key);
    else if (key == "bilevel.batch_size") cfg.bilevel.batch_size = parse_int(value, key);
    else if (key == "bilevel.train_jitter") cfg.bilevel.train_jitter = parse_double(value, key);
    else if (key == "bilevel.warmup_epochs") cfg.bilevel.warmup_epochs = parse_int(value, key);
    else if (key == "bilevel.warmup_jitter") cfg.bilevel.warmup_jitter = parse_double(value, key);
    else if (key == "bilevel.warmup_lr") cfg.bilevel.warmup_lr = parse_double(value, key);
    else if (key == "bilevel.snapshot_every") cfg.bilevel.snapshot_every = parse_int(value, key);
    else if (key == "bilevel.full_finetune") cfg.bilevel.full_finetune = parse_bool(value, key);
    else if (key == "bilevel.prompt_mode") {
      if (value == "point") cfg.bilevel.prompt_mode = promptkit::PromptMode::point;
      else if (value == "box") cfg.bilevel.prompt_mode = promptkit::PromptMode::box;
      else throw ConfigError("bilevel.prompt_mode must be point or box");
    } else if (key == "bilevel.seg_loss") {
      if (value == "bce") cfg.bilevel.seg_kind = objectives::SegLossKind::bce;
      else if (value == "dice") cfg.bilevel.seg_kind = objectives::SegLossKind::soft_dice;
      else if (value == "bce_dice") cfg.bilevel.seg_kind = objectives::SegLossKind::bce_dice;
      else throw ConfigError("bilevel.seg_loss must be bce, dice or bce_dice");
    } else {
      throw ConfigError("unknown config key: " + key);
    }
  }
  cfg.dataset.geom.h = cfg.model.image_size;
  cfg.dataset.geom.w = cfg.model.image_size;
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  return from_kv(parse_kv_text(io::read_text_file(path)));
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << "audit_probe=" << audit_probe << "\n";
  os << "audit_scenes=" << audit_scenes << "\n";
  os << "bilevel.arm=" << bilevel::arm_name(bilevel.arm) << "\n";
  os << "bilevel.batch_size=" << bilevel.batch_size << "\n";
  os << "bilevel.epochs=" << bilevel.epochs << "\n";
  os << "bilevel.full_finetune=" << (bilevel.full_finetune ? "true" : "false") << "\n";
  os << "bilevel.inner_lr=" << io::fmt_double(bilevel.inner_lr) << "\n";
  os << "bilevel.inner_steps=" << bilevel.inner_steps << "\n";
  os << "bilevel.lambda_en=" << io::fmt_double(bilevel.lambda_en) << "\n";
  os << "bilevel.lambda_xi=" << io::fmt_double(bilevel.lambda_xi) << "\n";
  os << "bilevel.n_t=" << bilevel.n_t << "\n";
  os << "bilevel.outer_first=" << (bilevel.outer_first ? "true" : "false") << "\n";
  os << "bilevel.outer_lr=" << io::fmt_double(bilevel.outer_lr) << "\n";
  os << "bilevel.prompt_mode="
     << (bilevel.prompt_mode == promptkit::PromptMode::box ? "box" : "point") << "\n";
  os << "bilevel.seg_loss="
     << (bilevel.seg_kind == objectives::SegLossKind::bce
             ? "bce"
             : (bilevel.seg_kind == objectives::SegLossKind::soft_dice ? "dice" : "bce_dice"))
     << "\n";
  os << "bilevel.snapshot_every=" << bilevel.snapshot_every << "\n";
  os << "bilevel.train_jitter=" << io::fmt_double(bilevel.train_jitter) << "\n";
  os << "bilevel.unrolled=" << (bilevel.unrolled ? "true" : "false") << "\n";
  os << "bilevel.warmup_epochs=" << bilevel.warmup_epochs << "\n";
  os << "bilevel.warmup_jitter=" << io::fmt_double(bilevel.warmup_jitter) << "\n";
  os << "bilevel.warmup_lr=" << io::fmt_double(bilevel.warmup_lr) << "\n";
  os << "bilevel.weight_decay=" << io::fmt_double(bilevel.weight_decay) << "\n";
  os << "dataset.max_entities=" << dataset.geom.max_entities << "\n";
  os << "dataset.min_entities=" << dataset.geom.min_entities << "\n";
  os << "dataset.n_test_base=" << dataset.n_test_base << "\n";
  os << "dataset.n_test_target=" << dataset.n_test_target << "\n";
  os << "dataset.n_train=" << dataset.n_train << "\n";
  os << "dataset.n_warmup=" << dataset.n_warmup << "\n";
  os << "dataset.seed=" << dataset.seed << "\n";
  os << "dataset.vocab_size=" << dataset.vocab_size << "\n";
  os << "eval_bias_jitter=" << io::fmt_double(eval_bias_jitter) << "\n";
  os << "warmup_cache=" << (warmup_cache ? "true" : "false") << "\n";
  os << "model.alpha=" << io::fmt_double(model.lora_alpha) << "\n";
  os << "model.depth=" << model.depth << "\n";
  os << "model.dim=" << model.dim << "\n";
  os << "model.heads=" << model.heads << "\n";
  os << "model.image=" << model.image_size << "\n";
  os << "model.mlp_hidden=" << model.mlp_hidden << "\n";
  os << "model.patch=" << model.patch << "\n";
  os << "model.pe_scale=" << io::fmt_double(model.pe_scale) << "\n";
  os << "model.rank=" << model.lora_rank << "\n";
  std::ostringstream seeds_os;
  for (size_t i = 0; i < seeds.size(); ++i) seeds_os << (i ? "," : "") << seeds[i];
  os << "out_dir=" << out_dir << "\n";
  os << "seeds=" << seeds_os.str() << "\n";
  return os.str();
}

io::Csv epochs_to_csv(const bilevel::TrainResult& result, int n_t) {
  io::Csv csv;
  csv.header = {"epoch"};
  for (int i = 1; i <= n_t; ++i) csv.header.push_back("l_sam_d" + std::to_string(i));
  for (const char* c : {"l_task", "l_entity", "outer_total", "base_dice", "target_dice",
                        "wall_seconds"})
    csv.header.push_back(c);
  for (const auto& row : result.log) {
    std::vector<std::string> cells{std::to_string(row.epoch)};
    for (double v : row.seg_per_group) cells.push_back(io::fmt_double(v));
    cells.push_back(io::fmt_double(row.task_loss));
    cells.push_back(io::fmt_double(row.entity_loss));
    cells.push_back(io::fmt_double(row.outer_total));
    cells.push_back(io::fmt_double(row.base_dice));
    cells.push_back(io::fmt_double(row.target_dice));
    cells.push_back(io::fmt_double(row.wall_seconds));
    csv.add_row(std::move(cells));
  }
  return csv;
}

std::string warmup_cache_stem(const RunConfig& cfg, std::uint64_t seed) {
  (void)seed;  // warm-up is seed-independent; one cache entry serves every run
  if (!cfg.warmup_cache) return "";
  std::ostringstream key;
  key << cfg.model.canonical() << "|wu=" << cfg.bilevel.warmup_epochs << ","
      << io::fmt_double(cfg.bilevel.warmup_lr) << "," << io::fmt_double(cfg.bilevel.warmup_jitter)
      << "," << cfg.bilevel.batch_size << "," << static_cast<int>(cfg.bilevel.seg_kind) << ","
      << static_cast<int>(cfg.bilevel.prompt_mode) << "|ds=" << cfg.dataset.seed << ","
      << cfg.dataset.vocab_size << "," << cfg.dataset.n_warmup << ","
      << cfg.dataset.geom.h << "," << cfg.dataset.geom.w << "," << cfg.dataset.geom.min_entities
      << "," << cfg.dataset.geom.max_entities;
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(key.str())));
  return cfg.out_dir + "/warmup_cache/wu_" + buf;
}

RunOutput train_one(const RunConfig& cfg, std::uint64_t seed, bilevel::Arm arm,
                    const std::string& dir, const synthgen::DatasetSplit* shared_data) {
  synthgen::DatasetSplit local;
  if (!shared_data) {
    local = synthgen::make_dataset(cfg.dataset);
    shared_data = &local;
  }
  bilevel::BiLevelConfig bc = cfg.bilevel;
  bc.seed = seed;
  bc.arm = arm;
  bc.warmup_cache_stem = warmup_cache_stem(cfg, seed);

  if (!dir.empty()) {
    fs::create_directories(dir);
    io::write_text_file(dir + "/config.txt", cfg.to_text() + "run.seed=" + std::to_string(seed) +
                                                 "\nrun.arm=" + bilevel::arm_name(arm) + "\n");
  }

  bilevel::Trainer trainer(*shared_data, cfg.model, bc);
  RunOutput out;
  out.dir = dir;
  out.train = trainer.train(dir);
  for (const auto& row : out.train.log) out.wall_seconds += row.wall_seconds;
  if (!out.train.log.empty()) {
    out.final_target_dice = out.train.log.back().target_dice;
    out.final_base_dice = out.train.log.back().base_dice;
  }
  if (!dir.empty()) {
    epochs_to_csv(out.train, bc.n_t).save(dir + "/epochs.csv");
    auto base_m = trainer.evaluate(shared_data->test_base, "base", 0.0, 0);
    auto target_m = trainer.evaluate(shared_data->test_target, "target", 0.0, 0);
    objectives::MetricsReport all;
    all.rows = base_m.rows;
    all.rows.insert(all.rows.end(), target_m.rows.begin(), target_m.rows.end());
    all.to_csv(seed, cfg.model.hash()).save(dir + "/metrics.csv");
  }
  return out;
}

ExperimentResult run_generalization_curve(const RunConfig& cfg) {
  config_require(cfg.dataset.n_test_target > 0, "generalization curve needs a target split");
  auto data = synthgen::make_dataset(cfg.dataset);

  ExperimentResult result;
  result.name = "generalization_curve";
  const std::string root = cfg.out_dir + "/gen_curve";
  fs::create_directories(root);

  std::vector<std::vector<double>> base_capl, target_capl, base_plain, target_plain;
  for (std::uint64_t seed : cfg.seeds) {
    auto with_capl = train_one(cfg, seed, cfg.bilevel.arm, root + "/capl_s" + std::to_string(seed),
                               &data);
    auto without = train_one(cfg, seed, bilevel::Arm::fixed,
                             root + "/nocapl_s" + std::to_string(seed), &data);
    result.files.push_back(root + "/capl_s" + std::to_string(seed) + "/epochs.csv");
    result.files.push_back(root + "/nocapl_s" + std::to_string(seed) + "/epochs.csv");
    auto series = [](const bilevel::TrainResult& t, bool target) {
      std::vector<double> v;
      for (const auto& r : t.log) v.push_back(target ? r.target_dice : r.base_dice);
      return v;
    };
    base_capl.push_back(series(with_capl.train, false));
    target_capl.push_back(series(with_capl.train, true));
    base_plain.push_back(series(without.train, false));
    target_plain.push_back(series(without.train, true));
  }

  const size_t epochs = base_capl.empty() ? 0 : base_capl[0].size();
  io::Csv curve;
  curve.header = {"epoch", "base_dice_capl", "target_dice_capl", "base_dice_nocapl",
                  "target_dice_nocapl"};
  auto col_mean = [&](const std::vector<std::vector<double>>& runs, size_t e) {
    double s = 0;
    for (const auto& r : runs) s += r[e];
    return s / static_cast<double>(runs.size());
  };
  for (size_t e = 0; e < epochs; ++e)
    curve.add_row({std::to_string(e), io::fmt_double(col_mean(base_capl, e)),
                   io::fmt_double(col_mean(target_capl, e)),
                   io::fmt_double(col_mean(base_plain, e)),
                   io::fmt_double(col_mean(target_plain, e))});
  curve.save(root + "/gen_curve.csv");
  render_plot(curve, "curve", root + "/gen_curve.svg");
  result.files.push_back(root + "/gen_curve.csv");
  result.files.push_back(root + "/gen_curve.svg");

  // summary: peak/final statistics per arm
  auto peak = [](const std::vector<double>& v) {
    return *std::max_element(v.begin(), v.end());
  };
  std::vector<double> final_capl, final_plain, peak_plain, decline_plain;
  for (size_t s = 0; s < cfg.seeds.size(); ++s) {
    final_capl.push_back(target_capl[s].back());
    final_plain.push_back(target_plain[s].back());
    peak_plain.push_back(peak(target_plain[s]));
    decline_plain.push_back(peak(target_plain[s]) - target_plain[s].back());
  }
  result.summary.header = {"metric", "mean", "std", "config_hash"};
  auto srow = [&](const std::string& name, const std::vector<double>& v) {
    result.summary.add_row(
        {name, io::fmt_double(mean_of(v)), io::fmt_double(std_of(v)), cfg.model.hash()});
  };
  srow("final_target_dice_capl", final_capl);
  srow("final_target_dice_nocapl", final_plain);
  srow("peak_target_dice_nocapl", peak_plain);
  srow("decline_nocapl", decline_plain);
  result.summary.save(root + "/summary.csv");
  result.files.push_back(root + "/summary.csv");
  return result;
}

namespace {
// mean within-sample std of per-entity dice over multi-entity samples
double entity_spread(const objectives::MetricsReport& m) {
  std::map<int, std::vector<double>> by_sample;
  for (const auto& r : m.rows) by_sample[r.sample_id].push_back(r.dice);
  std::vector<double> spreads;
  for (const auto& [sid, dices] : by_sample)
    if (dices.size() >= 2) spreads.push_back(std_of(dices));
  return spreads.empty() ? 0.0 : mean_of(spreads);
}
}  // namespace

ExperimentResult run_prompt_bias_study(const RunConfig& cfg) {
  auto data = synthgen::make_dataset(cfg.dataset);
  ExperimentResult result;
  result.name = "prompt_bias";
  const std::string root = cfg.out_dir + "/bias";
  fs::create_directories(root);

  io::Csv csv;
  csv.header = {"seed", "clean_target_dice", "biased_target_dice", "clean_entity_spread",
                "biased_entity_spread"};
  std::vector<double> clean, biased, cspread, bspread;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string dir = root + "/s" + std::to_string(seed);
    fs::create_directories(dir);
    io::write_text_file(dir + "/config.txt", cfg.to_text() + "run.seed=" + std::to_string(seed) +
                                                 "\nrun.arm=" +
                                                 bilevel::arm_name(cfg.bilevel.arm) + "\n");
    bilevel::BiLevelConfig bc = cfg.bilevel;
    bc.seed = seed;
    bc.warmup_cache_stem = warmup_cache_stem(cfg, seed);
    bilevel::Trainer trainer(data, cfg.model, bc);
    auto tres = trainer.train(dir);
    epochs_to_csv(tres, bc.n_t).save(dir + "/epochs.csv");
    auto clean_m = trainer.evaluate(data.test_target, "target", 0.0, 0);
    auto biased_m = trainer.evaluate(data.test_target, "target", cfg.eval_bias_jitter,
                                     mix64(seed ^ 0xb1a5ull));
    clean.push_back(clean_m.mean_dice());
    biased.push_back(biased_m.mean_dice());
    cspread.push_back(entity_spread(clean_m));
    bspread.push_back(entity_spread(biased_m));
    csv.add_row({std::to_string(seed), io::fmt_double(clean.back()),
                 io::fmt_double(biased.back()), io::fmt_double(cspread.back()),
                 io::fmt_double(bspread.back())});
    result.files.push_back(dir + "/epochs.csv");
  }
  csv.save(root + "/bias.csv");
  result.files.push_back(root + "/bias.csv");

  result.summary.header = {"metric", "mean", "std", "config_hash"};
  auto srow = [&](const std::string& name, const std::vector<double>& v) {
    result.summary.add_row(
        {name, io::fmt_double(mean_of(v)), io::fmt_double(std_of(v)), cfg.model.hash()});
  };
  srow("clean_target_dice", clean);
  srow("biased_target_dice", biased);
  srow("clean_entity_spread", cspread);
  srow("biased_entity_spread", bspread);
  result.summary.save(root + "/summary.csv");
  render_plot(result.summary, "bars", root + "/bias.svg");
  result.files.push_back(root + "/summary.csv");
  result.files.push_back(root + "/bias.svg");
  return result;
}

ExperimentResult run_ablations(const RunConfig& cfg, const std::string& which) {
  using Mod = std::function<void(RunConfig&, bilevel::Arm&)>;
  std::vector<std::pair<std::string, Mod>> arms;

  if (which == "prompt_types") {
    for (auto a : {bilevel::Arm::fixed, bilevel::Arm::learnable, bilevel::Arm::task,
                   bilevel::Arm::causal})
      arms.emplace_back(bilevel::arm_name(a),
                        [a](RunConfig&, bilevel::Arm& arm) { arm = a; });
  } else if (which == "lambda_en") {
    for (double v : {0.0, 0.3, 0.6, 1.0})
      arms.emplace_back("lambda_en_" + io::fmt_double(v),
                        [v](RunConfig& c, bilevel::Arm&) { c.bilevel.lambda_en = v; });
  } else if (which == "lambda_xi") {
    for (double v : {0.0, 0.2, 0.4, 0.8})
      arms.emplace_back("lambda_xi_" + io::fmt_double(v),
                        [v](RunConfig& c, bilevel::Arm&) { c.bilevel.lambda_xi = v; });
  } else if (which == "rank") {
    for (int r : {2, 4, 8})
      arms.emplace_back("rank_" + std::to_string(r),
                        [r](RunConfig& c, bilevel::Arm&) { c.model.lora_rank = r; });
  } else if (which == "nt") {
    for (int n : {2, 4})
      arms.emplace_back("nt_" + std::to_string(n),
                        [n](RunConfig& c, bilevel::Arm&) { c.bilevel.n_t = n; });
  } else if (which == "schedule") {
    arms.emplace_back("inner_first", [](RunConfig& c, bilevel::Arm&) {
      c.bilevel.outer_first = false;
    });
    arms.emplace_back("outer_first", [](RunConfig& c, bilevel::Arm&) {
      c.bilevel.outer_first = true;
    });
  } else if (which == "finetune") {
    arms.emplace_back("lora", [](RunConfig& c, bilevel::Arm&) { c.bilevel.full_finetune = false; });
    arms.emplace_back("full", [](RunConfig& c, bilevel::Arm&) { c.bilevel.full_finetune = true; });
  } else if (which == "trainsize") {
    for (int n : {16, 32})
      arms.emplace_back("train_" + std::to_string(n),
                        [n](RunConfig& c, bilevel::Arm&) { c.dataset.n_train = n; });
  } else if (which == "plug") {
    arms.emplace_back("fixed", [](RunConfig&, bilevel::Arm& a) { a = bilevel::Arm::fixed; });
    arms.emplace_back("plug", [](RunConfig&, bilevel::Arm& a) { a = bilevel::Arm::plug; });
  } else {
    throw ConfigError("unknown ablation: " + which);
  }

  ExperimentResult result;
  result.name = "ablate_" + which;
  const std::string root = cfg.out_dir + "/ablate_" + which;
  fs::create_directories(root);

  io::Csv csv;
  csv.header = {"arm", "seed", "target_dice", "base_dice", "wall_seconds"};
  std::map<std::string, std::vector<double>> dice_by_arm, wall_by_arm;
  for (const auto& [name, mod] : arms) {
    RunConfig acfg = cfg;
    bilevel::Arm arm = cfg.bilevel.arm;
    mod(acfg, arm);
    acfg.dataset.geom.h = acfg.model.image_size;
    acfg.dataset.geom.w = acfg.model.image_size;
    auto data = synthgen::make_dataset(acfg.dataset);
    for (std::uint64_t seed : cfg.seeds) {
      auto out = train_one(acfg, seed, arm, root + "/" + name + "_s" + std::to_string(seed), &data);
      csv.add_row({name, std::to_string(seed), io::fmt_double(out.final_target_dice),
                   io::fmt_double(out.final_base_dice), io::fmt_double(out.wall_seconds)});
      dice_by_arm[name].push_back(out.final_target_dice);
      wall_by_arm[name].push_back(out.wall_seconds);
      result.files.push_back(root + "/" + name + "_s" + std::to_string(seed) + "/epochs.csv");
    }
  }
  csv.save(root + "/runs.csv");
  result.files.push_back(root + "/runs.csv");

  result.summary.header = {"arm", "target_dice_mean", "target_dice_std", "wall_seconds_mean",
                           "config_hash"};
  for (const auto& [name, mod] : arms)
    result.summary.add_row({name, io::fmt_double(mean_of(dice_by_arm[name])),
                            io::fmt_double(std_of(dice_by_arm[name])),
                            io::fmt_double(mean_of(wall_by_arm[name])), cfg.model.hash()});
  result.summary.save(root + "/summary.csv");
  render_plot(result.summary, "bars", root + "/summary.svg");
  result.files.push_back(root + "/summary.csv");
  result.files.push_back(root + "/summary.svg");
  return result;
}

double irrelevance_correlation(const minisam::Model& model, const capl::Capl& cp, bool use_gates,
                               const synthgen::ClassVocabulary& vocab,
                               const synthgen::GeneratorConfig& geom, int n_scenes, double jitter,
                               std::uint64_t seed) {
  ad::NoGradGuard ng;
  const auto specs = synthgen::default_factor_specs();
  const auto pool = vocab.base_ids();
  Rng root(seed);

  std::vector<std::vector<double>> features;  // [scene][coord]
  std::vector<std::vector<double>> factors;   // [scene][factor]
  for (int i = 0; i < n_scenes; ++i) {
    auto scene = synthgen::sample_scene(root.fork("scene", static_cast<std::uint64_t>(i)).key(),
                                        vocab, specs, pool, geom);
    auto ann = promptkit::annotate(scene, promptkit::PromptMode::box, jitter,
                                   root.fork("ann", static_cast<std::uint64_t>(i)).key());
    auto emb = model.encode_prompts(ann);
    if (use_gates) emb = cp.reweight_prompts(emb);
    // mean over tokens of each embedding coordinate
    const int t = emb.tokens.dim(0), d = emb.tokens.dim(1);
    std::vector<double> feat(static_cast<size_t>(d), 0.0);
    for (int r = 0; r < t; ++r)
      for (int c = 0; c < d; ++c)
        feat[static_cast<size_t>(c)] += emb.tokens.value()[static_cast<size_t>(r) * d + c];
    for (auto& f : feat) f /= t;
    features.push_back(std::move(feat));

    auto fac = scene.record.scene.numeric();
    std::vector<double> jit(4, 0.0);
    for (const auto& el : ann.elements)
      for (size_t k = 0; k < el.jitter_applied.size() && k < 4; ++k)
        jit[k] += el.jitter_applied[k];
    for (auto& j : jit) j /= static_cast<double>(ann.elements.size());
    fac.insert(fac.end(), jit.begin(), jit.end());
    factors.push_back(std::move(fac));
  }

  const size_t d = features[0].size();
  const size_t f = factors[0].size();
  const size_t n = features.size();
  auto column = [&](const std::vector<std::vector<double>>& m, size_t j) {
    std::vector<double> col(n);
    for (size_t i = 0; i < n; ++i) col[i] = m[i][j];
    return col;
  };
  auto pearson = [&](const std::vector<double>& a, const std::vector<double>& b) {
    const double ma = mean_of(a), mb = mean_of(b);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
      sab += (a[i] - ma) * (b[i] - mb);
      saa += (a[i] - ma) * (a[i] - ma);
      sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa < 1e-18 || sbb < 1e-18) return 0.0;
    return sab / std::sqrt(saa * sbb);
  };

  double total = 0.0;
  int pairs = 0;
  for (size_t j = 0; j < d; ++j) {
    auto cj = column(features, j);
    for (size_t k = 0; k < f; ++k) {
      total += std::fabs(pearson(cj, column(factors, k)));
      ++pairs;
    }
  }
  return pairs ? total / pairs : 0.0;
}

ConsistencyAudit run_consistency_audit(const RunConfig& cfg, std::uint64_t seed,
                                       const std::string& run_dir) {
  auto data = synthgen::make_dataset(cfg.dataset);
  bilevel::BiLevelConfig bc = cfg.bilevel;
  bc.seed = seed;
  bilevel::Trainer trainer(data, cfg.model, bc);
  trainer.load_checkpoint(run_dir + "/ckpt_final");

  ConsistencyAudit audit;
  audit.per_distribution = trainer.per_distribution_losses(
      data.train, cfg.bilevel.train_jitter, mix64(seed ^ 0xa0d17ull));
  const double mean = mean_of(audit.per_distribution);
  double worst = 0.0;
  for (double l : audit.per_distribution) worst = std::max(worst, std::fabs(l - mean));
  audit.spread = mean > 0 ? worst / mean : 0.0;

  const bool gates = bc.arm != bilevel::Arm::fixed;
  capl::Capl init_capl(bilevel::Trainer::derive_capl_config(cfg.model, seed));
  audit.irrel_corr_init =
      irrelevance_correlation(trainer.model(), init_capl, gates, data.vocabulary,
                              cfg.dataset.geom, cfg.audit_scenes, cfg.eval_bias_jitter,
                              mix64(seed ^ 0xc0a7ull));
  audit.irrel_corr_trained =
      irrelevance_correlation(trainer.model(), trainer.capl_module(), gates, data.vocabulary,
                              cfg.dataset.geom, cfg.audit_scenes, cfg.eval_bias_jitter,
                              mix64(seed ^ 0xc0a7ull));

  // confounder-gradient disagreement across training snapshots
  std::vector<std::pair<int, std::string>> snaps;
  if (fs::exists(run_dir)) {
    for (const auto& e : fs::directory_iterator(run_dir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("snap_", 0) == 0 && name.size() > 9 &&
          name.compare(name.size() - 4, 4, ".bin") == 0)
        snaps.emplace_back(std::stoi(name.substr(5, name.size() - 9)),
                           e.path().string().substr(0, e.path().string().size() - 4));
    }
  }
  std::sort(snaps.begin(), snaps.end());
  for (const auto& [epoch, stem] : snaps) {
    trainer.load_checkpoint(stem);
    audit.grad_disagreement.push_back(
        trainer.theta_grad_disagreement(mix64(seed ^ 0x9aadull), cfg.audit_probe));
  }
  audit.trend_slope = slope_of(audit.grad_disagreement);
  trainer.load_checkpoint(run_dir + "/ckpt_final");
  return audit;
}

void render_plot(const io::Csv& csv, const std::string& kind, const std::string& out_path) {
  const int width = 720, height = 440;
  const int ml = 70, mr = 160, mt = 30, mb = 50;
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                           "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";

  if (kind == "curve") {
    if (csv.header.size() < 2) throw SchemaError("missing csv column: series");
    if (csv.rows.empty()) throw SchemaError("missing csv column: data rows");
    const size_t ns = csv.header.size() - 1;
    std::vector<double> xs;
    std::vector<std::vector<double>> series(ns);
    for (const auto& r : csv.rows) {
      xs.push_back(std::stod(r[0]));
      for (size_t s = 0; s < ns; ++s) series[s].push_back(std::stod(r[s + 1]));
    }
    double xmin = xs.front(), xmax = xs.back();
    if (xmax == xmin) xmax = xmin + 1;
    double ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
      for (double v : s) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
    if (ymax == ymin) ymax = ymin + 1;
    const double pad = 0.05 * (ymax - ymin);
    ymin -= pad;
    ymax += pad;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
    auto py = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };
    svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
        << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
        << height - mb << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double xv = xmin + (xmax - xmin) * t / 4.0;
      const double yv = ymin + (ymax - ymin) * t / 4.0;
      svg << "<text x=\"" << px(xv) << "\" y=\"" << height - mb + 18
          << "\" font-size=\"11\" text-anchor=\"middle\">" << io::fmt_double(xv) << "</text>\n";
      svg << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
          << "\" font-size=\"11\" text-anchor=\"end\">" << io::fmt_double(yv) << "</text>\n";
    }
    svg << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 12
        << "\" font-size=\"12\" text-anchor=\"middle\">" << csv.header[0] << "</text>\n";
    for (size_t s = 0; s < ns; ++s) {
      svg << "<polyline fill=\"none\" stroke=\"" << palette[s % 8]
          << "\" stroke-width=\"1.8\" points=\"";
      for (size_t i = 0; i < xs.size(); ++i)
        svg << io::fmt_double(px(xs[i])) << "," << io::fmt_double(py(series[s][i])) << " ";
      svg << "\"/>\n";
      svg << "<text x=\"" << width - mr + 12 << "\" y=\"" << mt + 16 + 16 * static_cast<int>(s)
          << "\" font-size=\"12\" fill=\"" << palette[s % 8] << "\">" << csv.header[s + 1]
          << "</text>\n";
    }
  } else if (kind == "bars") {
    if (csv.header.size() < 2) throw SchemaError("missing csv column: value");
    if (csv.rows.empty()) throw SchemaError("missing csv column: data rows");
    const size_t n = csv.rows.size();
    double vmax = 0.0;
    std::vector<double> vals;
    for (const auto& r : csv.rows) {
      vals.push_back(std::stod(r[1]));
      vmax = std::max(vmax, std::fabs(vals.back()));
    }
    if (vmax == 0.0) vmax = 1.0;
    const double bw = (width - ml - 40) / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
      const double bh = std::fabs(vals[i]) / vmax * (height - mt - mb);
      const double x = ml + bw * static_cast<double>(i) + bw * 0.15;
      svg << "<rect x=\"" << io::fmt_double(x) << "\" y=\"" << io::fmt_double(height - mb - bh)
          << "\" width=\"" << io::fmt_double(bw * 0.7) << "\" height=\"" << io::fmt_double(bh)
          << "\" fill=\"" << palette[i % 8] << "\"/>\n";
      svg << "<text x=\"" << io::fmt_double(x + bw * 0.35) << "\" y=\"" << height - mb + 16
          << "\" font-size=\"10\" text-anchor=\"middle\">" << csv.rows[i][0] << "</text>\n";
      svg << "<text x=\"" << io::fmt_double(x + bw * 0.35) << "\" y=\""
          << io::fmt_double(height - mb - bh - 4) << "\" font-size=\"10\" text-anchor=\"middle\">"
          << io::fmt_double(vals[i]) << "</text>\n";
    }
    svg << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - 20
        << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  } else {
    throw ConfigError("unknown plot kind: " + kind);
  }
  svg << "</svg>\n";
  io::write_text_file(out_path, svg.str());
}

std::vector<std::string> export_run(const std::string& run_dir) {
  std::vector<std::string> written;
  data_require(fs::exists(run_dir), "run dir does not exist: " + run_dir);
  std::vector<std::string> paths;
  for (const auto& e : fs::recursive_directory_iterator(run_dir))
    if (e.is_regular_file()) paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) {
    const std::string name = fs::path(p).filename().string();
    if (name == "epochs.csv") {
      auto csv = io::Csv::load(p);
      csv.require_column("epoch");
      const int bi = csv.require_column("base_dice");
      const int ti = csv.require_column("target_dice");
      io::Csv dice;
      dice.header = {"epoch", "base_dice", "target_dice"};
      for (const auto& r : csv.rows)
        dice.add_row({r[0], r[static_cast<size_t>(bi)], r[static_cast<size_t>(ti)]});
      const std::string out = p.substr(0, p.size() - 4) + "_dice.svg";
      render_plot(dice, "curve", out);
      written.push_back(out);
    } else if (name == "gen_curve.csv") {
      const std::string out = p.substr(0, p.size() - 4) + ".svg";
      render_plot(io::Csv::load(p), "curve", out);
      written.push_back(out);
    } else if (name == "summary.csv") {
      const std::string out = p.substr(0, p.size() - 4) + ".svg";
      render_plot(io::Csv::load(p), "bars", out);
      written.push_back(out);
    }
  }
  return written;
}

}  // namespace capseg::runhub
