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

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdcl/config.hpp"
#include "sdcl/scm.hpp"
#include "sdcl/trainer.hpp"

// Command-line front end. Exit codes: 0 success or help, 1 runtime failure,
// 2 usage error, 3 invalid configuration.

namespace sdcl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

inline constexpr const char* kManifestFormat = "sdcl-manifest";

/// Shortest round-trip decimal form; CSV cells compare bit for bit.
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Options {
  std::string verb;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string routing, aug_loss, noise;
  std::string scm_path;
  std::string param;
  std::string values;
  std::string checkpoint;
};

struct Context {
  Options opt;
  RunConfig cfg;
  nlohmann::json command;  // verb-specific inputs echoed into the manifest
  std::filesystem::path out_dir;
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::vector<double> parse_values(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("values", "cannot parse '" + item + "' as a number");
    v.push_back(x);
  }
  if (v.empty()) throw ConfigError("values", "empty value list");
  return v;
}

/// Loads the config file (a plain config or a manifest), applies overrides
/// and flag shorthands, and fills in verb inputs stored by a manifest.
inline void resolve(Context& ctx) {
  Options& o = ctx.opt;
  nlohmann::json patch = nlohmann::json::object();
  nlohmann::json stored_command;
  if (!o.config_path.empty()) {
    patch = read_json_file(o.config_path);
    if (patch.is_object() && patch.value("format", "") == kManifestFormat) {
      stored_command = patch.value("command", nlohmann::json::object());
      patch = patch.at("config");
    }
  }
  nlohmann::json full = to_json(RunConfig{});
  detail::merge_known(full, patch, "");
  for (const auto& a : o.overrides) apply_override(full, a);
  if (o.seed) full["seed"] = *o.seed;
  if (!o.routing.empty()) full["sgem"]["routing"] = o.routing;
  if (!o.aug_loss.empty()) full["bdcl"]["aug_loss"] = o.aug_loss;
  if (!o.noise.empty()) full["bdcl"]["noise"]["mode"] = o.noise;
  if (!o.out.empty()) full["output_dir"] = o.out;
  ctx.cfg = run_config_from_json(full);
  ctx.out_dir = ctx.cfg.output_dir;

  auto fallback = [&](std::string& field, const char* key) {
    if (field.empty() && stored_command.contains(key) && stored_command[key].is_string()) {
      field = stored_command[key].get<std::string>();
    }
  };
  fallback(o.param, "param");
  fallback(o.values, "values");
  fallback(o.checkpoint, "checkpoint");
  ctx.command = {{"verb", o.verb}};
  if (!o.param.empty()) ctx.command["param"] = o.param;
  if (!o.values.empty()) ctx.command["values"] = o.values;
  if (!o.checkpoint.empty()) ctx.command["checkpoint"] = std::filesystem::absolute(o.checkpoint).string();
  if (!o.scm_path.empty()) {
    ctx.command["scm"] = read_json_file(o.scm_path);
  } else if (stored_command.contains("scm")) {
    ctx.command["scm"] = stored_command["scm"];
  }
}

inline void write_manifest(const Context& ctx) {
  write_json(ctx.out_dir / "manifest.json",
             {{"format", kManifestFormat}, {"version", 1}, {"command", ctx.command}, {"config", to_json(ctx.cfg)}});
}

/// Report JSON without the output location, so a rerun into another
/// directory produces identical bytes.
inline nlohmann::json portable_report(const TrainReport& r) {
  nlohmann::json j = to_json(r);
  j["config"].erase("output_dir");
  return j;
}

inline std::string metrics_csv(const std::vector<DomainMetrics>& domains) {
  std::string s = "domain,count,accuracy,spread_min,spread_q1,spread_median,spread_q3,spread_max";
  std::size_t classes = domains.empty() ? 0 : domains.front().per_class.size();
  for (std::size_t c = 0; c < classes; ++c) s += ",class_" + std::to_string(c);
  s += "\n";
  for (const auto& d : domains) {
    s += d.name + "," + std::to_string(d.count) + "," + num(d.accuracy) + "," + num(d.spread.min) + "," +
         num(d.spread.q1) + "," + num(d.spread.median) + "," + num(d.spread.q3) + "," + num(d.spread.max);
    for (double a : d.per_class) s += "," + num(a);
    s += "\n";
  }
  return s;
}

inline std::string losses_csv(const std::vector<LossRecord>& steps) {
  std::string s = "epoch,step,task_ori,task_aug,reg,total\n";
  for (const auto& r : steps) {
    s += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + num(r.task_ori) + "," + num(r.task_aug) +
         "," + num(r.reg) + "," + num(r.total) + "\n";
  }
  return s;
}

inline std::string study_csv(const std::string& key, const std::vector<StudyRow>& rows) {
  std::string s = key + ",seeds,mean_accuracy,std_accuracy,mean_heldout_spread,std_heldout_spread,per_seed_accuracy\n";
  for (const auto& r : rows) {
    std::string per;
    for (std::size_t i = 0; i < r.accuracy.size(); ++i) per += (i ? ";" : "") + num(r.accuracy[i]);
    s += r.label + "," + std::to_string(r.seeds.size()) + "," + num(r.acc.mean) + "," + num(r.acc.stddev) + "," +
         num(r.spread.mean) + "," + num(r.spread.stddev) + "," + per + "\n";
  }
  return s;
}

inline ProgressFn progress_to(std::ostream& err) {
  return [&err](const std::string& label, std::uint64_t seed, const TrainReport& r) {
    err << label << " seed=" << seed << " accuracy=" << r.decorrelated_accuracy() << "\n";
  };
}

// --- verbs -----------------------------------------------------------------

inline void cmd_train(Context& ctx) {
  const auto started = std::chrono::steady_clock::now();
  const auto result = train(ctx.cfg);
  write_json(ctx.out_dir / "report.json", portable_report(result.report));
  write_text(ctx.out_dir / "metrics.csv", metrics_csv(result.report.domains));
  write_text(ctx.out_dir / "losses.csv", losses_csv(result.report.steps));
  save_checkpoint(result.model, ctx.out_dir / "checkpoint.bin");
  write_json(ctx.out_dir / "timing.json",
             {{"train_seconds", result.report.wall_seconds},
              {"total_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()}});
  *ctx.out << "decorrelated_accuracy," << num(result.report.decorrelated_accuracy()) << "\n";
}

inline void cmd_eval(Context& ctx) {
  if (ctx.opt.checkpoint.empty()) throw ConfigError("checkpoint", "eval needs --checkpoint");
  const Model model = load_checkpoint(ctx.opt.checkpoint);
  RunConfig cfg = ctx.cfg;
  cfg.validate_benchmark();
  const auto bench = generate_benchmark(resolved_benchmark(cfg));
  const auto domains = evaluate(model, bench.test);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& d : domains) j.push_back(to_json(d));
  write_json(ctx.out_dir / "eval.json", {{"domains", j}});
  const std::string csv = metrics_csv(domains);
  write_text(ctx.out_dir / "metrics.csv", csv);
  *ctx.out << csv;
}

inline std::string oracle_csv(const scm::SCMSpec& m) {
  const auto obs = scm::observational_conditional(m);
  const auto itv = scm::interventional_distribution(m);
  std::string s = "quantity,x,y,value\n";
  for (std::size_t x = 0; x < m.x_vals.size(); ++x) {
    for (std::size_t y = 0; y < m.y_vals.size(); ++y) {
      s += "P(Y|X)," + m.x_vals[x] + "," + m.y_vals[y] + "," + num(obs.at(x, y)) + "\n";
    }
  }
  for (std::size_t x = 0; x < m.x_vals.size(); ++x) {
    for (std::size_t y = 0; y < m.y_vals.size(); ++y) {
      s += "P(Y|do(X))," + m.x_vals[x] + "," + m.y_vals[y] + "," + num(itv.at(x, y)) + "\n";
    }
  }
  s += "tv_gap,,," + num(scm::total_variation(obs, itv)) + "\n";
  return s;
}

inline void cmd_oracle(Context& ctx) {
  if (!ctx.command.contains("scm")) throw ConfigError("scm", "oracle needs --scm");
  const auto m = scm::scm_from_json(ctx.command["scm"]);
  const std::string csv = oracle_csv(m);
  write_text(ctx.out_dir / "oracle.csv", csv);
  *ctx.out << csv;
}

inline void cmd_ablate(Context& ctx) {
  const auto table = ablate(ctx.cfg, ctx.cfg.seeds, progress_to(*ctx.err));
  const std::string csv = study_csv("variant", table.rows);
  write_text(ctx.out_dir / "ablation.csv", csv);
  *ctx.out << csv;
}

inline void cmd_sweep(Context& ctx) {
  if (ctx.opt.param.empty()) throw ConfigError("param", "sweep needs --param");
  if (ctx.opt.values.empty()) throw ConfigError("values", "sweep needs --values");
  const auto param = sweep_param_from_string(ctx.opt.param);
  const auto values = parse_values(ctx.opt.values);
  const auto table = sweep(ctx.cfg, param, values, ctx.cfg.seeds, progress_to(*ctx.err));
  const std::string csv = study_csv(to_string(param), table.rows);
  write_text(ctx.out_dir / "sweep.csv", csv);
  *ctx.out << csv;
}

/// Style embeddings of the training split under a trained (checkpoint) or
/// freshly initialized model.
inline void cmd_dump_styles(Context& ctx) {
  ctx.cfg.validate_benchmark();
  const Model model = ctx.opt.checkpoint.empty() ? build_model(ctx.cfg.resolved_model(), ctx.cfg.seed)
                                                 : load_checkpoint(ctx.opt.checkpoint);
  const auto bench = generate_benchmark(resolved_benchmark(ctx.cfg));
  const auto& images = bench.train.images;
  const std::size_t count = images.dim(0), per = images.numel() / count, chunk = 250;
  const std::size_t n = model.spec.experts.num_experts, k = model.spec.experts.top_k;
  std::string s = "sample_id,style_id,label,argmax_expert";
  const std::size_t width = 2 * model.expert_channels();
  for (std::size_t i = 0; i < width; ++i) s += ",z_" + std::to_string(i);
  s += "\n";
  for (std::size_t start = 0; start < count; start += chunk) {
    const std::size_t len = std::min(chunk, count - start);
    Shape shape = images.shape();
    shape[0] = len;
    std::vector<double> v(images.values().begin() + static_cast<std::ptrdiff_t>(start * per),
                          images.values().begin() + static_cast<std::ptrdiff_t>((start + len) * per));
    const Tensor f = model.shallow.forward(Tensor(std::move(shape), std::move(v)));
    const auto z = style_embedding(f);
    const auto routing = route(model.router, z, n, k, model.spec.experts.routing);
    for (std::size_t b = 0; b < len; ++b) {
      const std::size_t id = start + b;
      s += std::to_string(id) + "," + std::to_string(bench.train.style_ids[id]) + "," +
           std::to_string(bench.train.labels[id]) + "," + std::to_string(routing.decisions[b].argmax_expert);
      for (std::size_t i = 0; i < width; ++i) s += "," + num(z.z.values()[b * width + i]);
      s += "\n";
    }
  }
  write_text(ctx.out_dir / "styles.csv", s);
  *ctx.out << "wrote " << count << " style rows\n";
}

inline void cmd_export_data(Context& ctx) {
  ctx.cfg.validate_benchmark();
  export_benchmark(generate_benchmark(resolved_benchmark(ctx.cfg)), ctx.out_dir / "data");
  *ctx.out << "exported benchmark\n";
}

// --- dispatch --------------------------------------------------------------

inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"Style deconfounding causal learning: training, studies and the back-door oracle", "sdcl"};
  app.require_subcommand(1, 1);
  Options opt;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config or a manifest.json from an earlier run");
    sub->add_option("--override", opt.overrides, "dotted key=value applied after the file (repeatable)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", opt.seed, "root seed");
    sub->add_option("--routing", opt.routing, "default | literal");
    sub->add_option("--aug-loss", opt.aug_loss, "cau | raw");
    sub->add_option("--noise", opt.noise, "off | bounded | literal");
  };
  struct Verb {
    const char* name;
    const char* help;
    void (*fn)(Context&);
  };
  const Verb verbs[] = {
      {"train", "train one model and evaluate it", cmd_train},
      {"eval", "evaluate a checkpoint on the test domains", cmd_eval},
      {"oracle", "exact observational vs interventional tables of a discrete SCM", cmd_oracle},
      {"ablate", "Base / Base-SG / SDCL over the configured seeds", cmd_ablate},
      {"sweep", "accuracy curve over n, k, alpha or expert_point", cmd_sweep},
      {"dump-styles", "style embeddings and routing decisions as CSV", cmd_dump_styles},
      {"export-data", "write the synthetic benchmark as raw float32 arrays", cmd_export_data},
  };
  std::vector<std::pair<CLI::App*, const Verb*>> subs;
  for (const auto& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    common(sub);
    const std::string name = v.name;
    if (name == "oracle") sub->add_option("--scm", opt.scm_path, "SCM JSON file");
    if (name == "sweep") {
      sub->add_option("--param", opt.param, "n | k | alpha | expert_point");
      sub->add_option("--values", opt.values, "comma-separated values");
    }
    if (name == "eval" || name == "dump-styles") sub->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
    subs.emplace_back(sub, &v);
  }

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto& v : verbs) known = known || std::string(v.name) == argv[1];
    if (!known) {
      err << "error: unknown verb '" << argv[1] << "'\n\n" << app.help();
      return kExitUsage;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    // A subcommand's own --help surfaces here too.
    if (e.get_exit_code() == 0) {
      for (const auto& [sub, verb] : subs) {
        if (sub->parsed()) {
          out << sub->help();
          return kExitOk;
        }
      }
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  try {
    for (const auto& [sub, verb] : subs) {
      if (!sub->parsed()) continue;
      opt.verb = verb->name;
      ctx.opt = opt;
      resolve(ctx);
      std::filesystem::create_directories(ctx.out_dir);
      verb->fn(ctx);
      write_manifest(ctx);
    }
  } catch (const ConfigError& e) {
    err << "invalid configuration: key '" << e.key() << "': " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace sdcl::cli
