// Copyright 2026 The SDCL Authors. All Rights Reserved.
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

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdcl/bdcl.hpp"
#include "sdcl/config.hpp"
#include "sdcl/nets.hpp"
#include "sdcl/sgem.hpp"
#include "sdcl/synth.hpp"

namespace sdcl {

// ---------------------------------------------------------------------------
// Optimizers

class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), 0.0);
      second_.emplace_back(p.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto values = params_[i].mutable_values();
      const auto grad = params_[i].grad();
      auto& m = first_[i];
      auto& v = second_[i];
      if (cfg_.kind == OptimizerKind::adam) {
        for (std::size_t j = 0; j < values.size(); ++j) {
          m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * grad[j];
          v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * grad[j] * grad[j];
          values[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        }
      } else {
        for (std::size_t j = 0; j < values.size(); ++j) {
          m[j] = cfg_.momentum * m[j] + grad[j];
          values[j] -= cfg_.lr * m[j];
        }
      }
    }
  }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> first_, second_;
  std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// One training step

struct StepOptions {
  bool sgem = true;
  bool bdcl = true;
  double alpha = 0.7;
  double lambda = 1.0;
  NoisePolicy noise;
  AugLoss aug_loss = AugLoss::causal;
  bool update_confounders = true;
};

inline StepOptions step_options(const RunConfig& cfg) {
  return {cfg.enable_sgem, cfg.enable_sgem && cfg.enable_bdcl, cfg.alpha, cfg.lambda, cfg.noise, cfg.aug_loss, true};
}

struct StepLoss {
  Tensor total;
  double task_ori = 0.0;
  double task_aug = 0.0;
  double reg = 0.0;
};

/// Two-branch objective: CE on the original branch (through the first
/// expert) + CE on the augmented branch (routed mixture, then fusion) +
/// lambda * load-balance regularizer. Updates the confounder set in place
/// before fusion when options.update_confounders is set.
inline StepLoss step_loss(Model& model, const LabeledBatch& original, const LabeledBatch& augmented,
                          const StepOptions& opt, std::uint64_t noise_seed) {
  const auto& es = model.spec.experts;
  const Tensor f_ori = model.shallow.forward(original.images);
  const Tensor f_aug = model.shallow.forward(augmented.images);
  const Tensor fe_ori = moe_forward(model.experts, f_ori, Tensor(), Branch::original, es.residual);
  Tensor fe_aug;
  Tensor reg;
  if (opt.sgem) {
    const auto gating = route(model.router, style_embedding(f_aug), es.num_experts, es.top_k, es.routing);
    fe_aug = moe_forward(model.experts, f_aug, gating.weights, Branch::augmented, es.residual);
    if (opt.update_confounders) update_confounder_set(model.confounders, fe_aug, gating.decisions);
    reg = load_balance_loss(gating.weights);
  } else {
    fe_aug = moe_forward(model.experts, f_aug, Tensor(), Branch::original, es.residual);
  }
  Tensor aug_path = fe_aug;
  if (opt.bdcl && opt.aug_loss == AugLoss::causal) {
    aug_path = causal_fuse(fe_aug, model.confounders, FusionConfig{opt.alpha}, opt.noise, noise_seed);
  }
  const Tensor logits_ori = model.head.forward(model.deep.forward(fe_ori));
  const Tensor logits_aug = model.head.forward(model.deep.forward(aug_path));
  const Tensor ce_ori = cross_entropy(logits_ori, original.labels);
  const Tensor ce_aug = cross_entropy(logits_aug, augmented.labels);
  StepLoss out;
  out.task_ori = ce_ori.item();
  out.task_aug = ce_aug.item();
  out.total = add(ce_ori, ce_aug);
  if (reg.defined()) {
    out.reg = reg.item();
    out.total = add(out.total, scale(reg, opt.lambda));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SpreadStats {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
  double width() const { return max - min; }
};

/// Quartiles by linear interpolation between order statistics.
inline SpreadStats spread_of(std::vector<double> v) {
  if (v.empty()) return {};
  std::sort(v.begin(), v.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {v.front(), q(0.25), q(0.5), q(0.75), v.back()};
}

struct DomainMetrics {
  std::string name;
  std::size_t count = 0;
  double accuracy = 0.0;
  std::vector<double> per_class;
  SpreadStats spread;
};

/// Accuracy of arbitrary predictions against labels, per class and overall.
inline DomainMetrics score_predictions(const std::string& name, std::span<const int> predictions,
                                       std::span<const int> labels, std::size_t num_classes) {
  if (labels.empty()) throw DomainError("evaluate: split '" + name + "' is empty");
  std::vector<double> hit(num_classes, 0.0), seen(num_classes, 0.0);
  double correct = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    seen.at(y) += 1.0;
    if (predictions[i] == labels[i]) {
      hit[y] += 1.0;
      correct += 1.0;
    }
  }
  DomainMetrics m;
  m.name = name;
  m.count = labels.size();
  m.accuracy = correct / static_cast<double>(labels.size());
  std::vector<double> present;
  for (std::size_t c = 0; c < num_classes; ++c) {
    m.per_class.push_back(seen[c] > 0.0 ? hit[c] / seen[c] : 0.0);
    if (seen[c] > 0.0) present.push_back(m.per_class.back());
  }
  m.spread = spread_of(present);
  return m;
}

inline std::vector<int> predict(const Model& model, const Tensor& images, std::size_t chunk = 250) {
  const std::size_t count = images.dim(0);
  const std::size_t per = images.numel() / count;
  std::vector<int> out;
  out.reserve(count);
  for (std::size_t start = 0; start < count; start += chunk) {
    const std::size_t len = std::min(chunk, count - start);
    Shape s = images.shape();
    s[0] = len;
    std::vector<double> v(images.values().begin() + static_cast<std::ptrdiff_t>(start * per),
                          images.values().begin() + static_cast<std::ptrdiff_t>((start + len) * per));
    const Tensor logits = forward_inference(model, Tensor(std::move(s), std::move(v)));
    const std::size_t k = logits.dim(1);
    for (std::size_t b = 0; b < len; ++b) {
      out.push_back(static_cast<int>(argmax_index(logits.values().subspan(b * k, k))));
    }
  }
  return out;
}

inline std::vector<DomainMetrics> evaluate(const Model& model, const std::vector<TestDomain>& domains) {
  std::vector<DomainMetrics> out;
  for (const auto& d : domains) {
    if (d.data.size() == 0) throw DomainError("evaluate: split '" + d.name + "' is empty");
    out.push_back(score_predictions(d.name, predict(model, d.data.images), d.data.labels, model.spec.num_classes));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct LossRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double task_ori = 0.0, task_aug = 0.0, reg = 0.0, total = 0.0;
};

struct TrainReport {
  nlohmann::json config;
  std::vector<LossRecord> epochs;  // per-epoch means
  std::vector<LossRecord> steps;
  std::vector<DomainMetrics> domains;
  std::vector<ConfounderSet> snapshots;  // after each epoch
  double wall_seconds = 0.0;

  /// Mean accuracy over the test domains, every one of which is
  /// style-decorrelated from class.
  double decorrelated_accuracy() const {
    double s = 0.0;
    for (const auto& d : domains) s += d.accuracy;
    return domains.empty() ? 0.0 : s / static_cast<double>(domains.size());
  }

  const DomainMetrics& domain(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return d;
    throw DomainError("no test domain named '" + name + "'");
  }
};

struct TrainResult {
  Model model;
  TrainReport report;
};

/// Training aborted by a non-finite value; what() carries the step dump.
class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

inline BenchmarkSpec resolved_benchmark(const RunConfig& cfg) {
  BenchmarkSpec b = cfg.benchmark;
  b.seed = derive_seed(cfg.seed, "data");
  return b;
}

inline TrainResult train(RunConfig cfg, const Benchmark& bench) {
  if (!cfg.enable_sgem) cfg.enable_bdcl = false;
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  TrainResult result{build_model(cfg.resolved_model(), cfg.seed), {}};
  Model& model = result.model;
  TrainReport& report = result.report;
  report.config = to_json(cfg);
  Optimizer optimizer([&] {
    std::vector<Tensor> ps;
    for (auto& p : model.parameters()) ps.push_back(p.tensor);
    return ps;
  }(), cfg.optimizer);
  const StepOptions opt = step_options(cfg);
  const std::size_t count = bench.train.size();
  std::vector<std::size_t> order(count);
  std::uint64_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng data_rng = make_rng(cfg.seed, "data/order", epoch);
    shuffle(order.begin(), order.end(), data_rng);
    LossRecord mean{epoch, 0, 0.0, 0.0, 0.0, 0.0};
    std::size_t steps = 0;
    for (std::size_t start = 0; start < count; start += cfg.batch_size, ++global_step, ++steps) {
      const std::size_t len = std::min(cfg.batch_size, count - start);
      const LabeledBatch batch = gather(bench.train, std::span(order).subspan(start, len));
      const LabeledBatch aug = style_jitter(batch, cfg.jitter_strength, derive_seed(cfg.seed, "jitter", global_step));
      LossRecord rec{epoch, global_step, 0.0, 0.0, 0.0, 0.0};
      try {
        optimizer.zero_grad();
        const StepLoss loss = step_loss(model, batch, aug, opt, derive_seed(cfg.seed, "noise", global_step));
        rec.task_ori = loss.task_ori;
        rec.task_aug = loss.task_aug;
        rec.reg = loss.reg;
        rec.total = loss.total.item();
        backward(loss.total);
        optimizer.step();
      } catch (const NumericError& e) {
        nlohmann::json dump = {{"epoch", epoch},
                               {"step", global_step},
                               {"batch_start", start},
                               {"batch_size", len},
                               {"labels", batch.labels},
                               {"last_losses",
                                report.steps.empty()
                                    ? nlohmann::json()
                                    : nlohmann::json{{"task_ori", report.steps.back().task_ori},
                                                     {"task_aug", report.steps.back().task_aug},
                                                     {"reg", report.steps.back().reg}}},
                               {"error", e.what()}};
        throw TrainingAborted("non-finite value during training: " + dump.dump());
      }
      report.steps.push_back(rec);
      mean.task_ori += rec.task_ori;
      mean.task_aug += rec.task_aug;
      mean.reg += rec.reg;
      mean.total += rec.total;
    }
    if (steps) {
      const double inv = 1.0 / static_cast<double>(steps);
      mean.step = global_step;
      mean.task_ori *= inv;
      mean.task_aug *= inv;
      mean.reg *= inv;
      mean.total *= inv;
    }
    report.epochs.push_back(mean);
    report.snapshots.push_back(model.confounders);
  }
  report.domains = evaluate(model, bench.test);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

inline TrainResult train(const RunConfig& cfg) {
  cfg.validate_benchmark();
  return train(cfg, generate_benchmark(resolved_benchmark(cfg)));
}

// ---------------------------------------------------------------------------
// Studies

struct SeedStats {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single seed
};

inline SeedStats seed_stats(std::span<const double> v) {
  SeedStats s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

/// Name of the first held-out style domain, used for the bias-spread report.
inline std::string heldout_domain_name() { return "heldout1"; }

struct StudyRow {
  std::string label;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracy;        // decorrelated accuracy per seed
  std::vector<double> heldout_spread;  // per-class max-min on heldout1 per seed
  SeedStats acc;
  SeedStats spread;
};

using ProgressFn = std::function<void(const std::string& label, std::uint64_t seed, const TrainReport&)>;

inline StudyRow run_row(const std::string& label, RunConfig cfg, std::span<const std::uint64_t> seeds,
                        const ProgressFn& progress = {}) {
  StudyRow row;
  row.label = label;
  for (auto seed : seeds) {
    cfg.seed = seed;
    const auto r = train(cfg);
    row.seeds.push_back(seed);
    row.accuracy.push_back(r.report.decorrelated_accuracy());
    row.heldout_spread.push_back(r.report.domain(heldout_domain_name()).spread.width());
    if (progress) progress(label, seed, r.report);
  }
  row.acc = seed_stats(row.accuracy);
  row.spread = seed_stats(row.heldout_spread);
  return row;
}

struct AblationTable {
  std::vector<StudyRow> rows;  // Base, Base-SG, SDCL
};

/// Base (no experts, no fusion), Base-SG (experts only), SDCL (both), each
/// over the same seeds.
inline AblationTable ablate(const RunConfig& cfg, std::span<const std::uint64_t> seeds, const ProgressFn& progress = {}) {
  if (seeds.size() < 3) throw ConfigError("seeds", "ablation needs at least 3 seeds");
  AblationTable t;
  const std::pair<const char*, std::pair<bool, bool>> variants[] = {
      {"Base", {false, false}}, {"Base-SG", {true, false}}, {"SDCL", {true, true}}};
  for (const auto& [name, flags] : variants) {
    RunConfig c = cfg;
    c.enable_sgem = flags.first;
    c.enable_bdcl = flags.second;
    t.rows.push_back(run_row(name, c, seeds, progress));
  }
  return t;
}

enum class SweepParam { n, k, alpha, expert_point };

inline SweepParam sweep_param_from_string(const std::string& s) {
  if (s == "n") return SweepParam::n;
  if (s == "k") return SweepParam::k;
  if (s == "alpha") return SweepParam::alpha;
  if (s == "expert_point") return SweepParam::expert_point;
  throw ConfigError("param", "unknown sweep parameter '" + s + "' (expected n, k, alpha or expert_point)");
}

inline const char* to_string(SweepParam p) {
  switch (p) {
    case SweepParam::n: return "n";
    case SweepParam::k: return "k";
    case SweepParam::alpha: return "alpha";
    case SweepParam::expert_point: return "expert_point";
  }
  return "?";
}

inline RunConfig with_sweep_value(RunConfig cfg, SweepParam p, double value) {
  auto as_count = [&](const char* key) {
    if (!(value >= 0.0) || value != std::floor(value)) {
      throw ConfigError(key, "sweep value " + std::to_string(value) + " is not a nonnegative integer");
    }
    return static_cast<std::size_t>(value);
  };
  switch (p) {
    case SweepParam::n: cfg.n = as_count("sgem.n"); break;
    case SweepParam::k: cfg.k = as_count("sgem.k"); break;
    case SweepParam::alpha: cfg.alpha = value; break;
    case SweepParam::expert_point: cfg.model.expert_point = as_count("model.expert_point"); break;
  }
  if ((p == SweepParam::n || p == SweepParam::k) && cfg.k > cfg.n) {
    throw ConfigError(std::string("sweep.") + to_string(p),
                      "invalid pair k=" + std::to_string(cfg.k) + ", n=" + std::to_string(cfg.n));
  }
  cfg.validate();
  return cfg;
}

struct SweepTable {
  SweepParam param;
  std::vector<double> values;
  std::vector<StudyRow> rows;
};

inline SweepTable sweep(const RunConfig& cfg, SweepParam param, std::span<const double> values,
                        std::span<const std::uint64_t> seeds, const ProgressFn& progress = {}) {
  std::vector<RunConfig> configs;
  for (double v : values) configs.push_back(with_sweep_value(cfg, param, v));
  SweepTable t{param, {values.begin(), values.end()}, {}};
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const nlohmann::json label = param == SweepParam::alpha ? nlohmann::json(values[i])
                                                            : nlohmann::json(static_cast<std::uint64_t>(values[i]));
    t.rows.push_back(run_row(std::string(to_string(param)) + "=" + label.dump(), configs[i], seeds, progress));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const DomainMetrics& m) {
  return {{"name", m.name},
          {"count", m.count},
          {"accuracy", m.accuracy},
          {"per_class", m.per_class},
          {"spread",
           {{"min", m.spread.min},
            {"q1", m.spread.q1},
            {"median", m.spread.median},
            {"q3", m.spread.q3},
            {"max", m.spread.max},
            {"width", m.spread.width()}}}};
}

inline nlohmann::json to_json(const ConfounderSet& set) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : set.entries()) {
    entries.push_back({{"initialized", e.initialized}, {"mu", e.style.mu}, {"sigma", e.style.sigma}});
  }
  return entries;
}

inline nlohmann::json to_json(const LossRecord& r) {
  return {{"epoch", r.epoch}, {"step", r.step},  {"task_ori", r.task_ori},
          {"task_aug", r.task_aug}, {"reg", r.reg}, {"total", r.total}};
}

/// Deterministic part of the report; wall time is kept out on purpose so
/// reruns compare byte for byte.
inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json j;
  j["config"] = r.config;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.epochs) j["epochs"].push_back(to_json(e));
  j["domains"] = nlohmann::json::array();
  for (const auto& d : r.domains) j["domains"].push_back(to_json(d));
  j["decorrelated_accuracy"] = r.decorrelated_accuracy();
  j["confounder_snapshots"] = nlohmann::json::array();
  for (const auto& s : r.snapshots) j["confounder_snapshots"].push_back(to_json(s));
  return j;
}

}  // namespace sdcl
