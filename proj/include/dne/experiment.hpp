// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs: build the task stream, train incrementally, optionally
// train the joint reference, and emit reports.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dne/analysis.hpp"
#include "dne/checkpoint.hpp"
#include "dne/data.hpp"

namespace dne {

/// Builds the configured task stream.
inline TaskStream make_stream(const RunConfig& cfg) {
  const auto& d = cfg.data;
  if (d.source == "synthetic") {
    SynthSpec spec;
    spec.classes = d.classes;
    spec.train_per_class = d.train_per_class;
    spec.eval_per_class = d.eval_per_class;
    spec.image_size = cfg.model.image_size;
    spec.channels = cfg.model.in_channels;
    spec.noise = d.noise;
    spec.seed = cfg.seed;
    return synth_stream(spec, d.first_task_classes, d.step_size);
  }
  if (cfg.model.image_size != CifarFormat::side || cfg.model.in_channels != CifarFormat::channels)
    throw ConfigError("CIFAR-100 needs image_size 32 and in_channels 3");
  if (d.classes > CifarFormat::classes) throw ConfigError("CIFAR-100 has only 100 classes");
  const std::filesystem::path dir(d.cifar_dir);
  const auto train = take_per_class(load_cifar100_binary((dir / "train.bin").string()), d.classes,
                                    d.train_per_class);
  const auto eval = take_per_class(load_cifar100_binary((dir / "test.bin").string()), d.classes,
                                   d.eval_per_class);
  return split_tasks(train, eval, d.classes, d.first_task_classes, d.step_size);
}

/// The same data as a single task over every class.
inline TaskStream joint_stream(const TaskStream& stream) {
  Task all;
  for (const auto& t : stream.tasks()) {
    all.classes.insert(all.classes.end(), t.classes.begin(), t.classes.end());
    all.train.insert(all.train.end(), t.train.begin(), t.train.end());
    all.eval.insert(all.eval.end(), t.eval.begin(), t.eval.end());
  }
  return TaskStream({std::move(all)}, stream.step_size());
}

struct RunResult {
  MetricsRecord metrics;
  CilModel model;
  TaskStream stream;
};

/// Trains over the stream and evaluates after every task. The joint
/// reference, when enabled, trains one expert with the first-task head count
/// on all classes at once with the same schedule.
inline RunResult run_experiment(const RunConfig& cfg) {
  cfg.validate();
  RunResult res;
  res.stream = make_stream(cfg);
  IncrementalLearner learner(cfg.model, cfg.train, cfg.first_heads, cfg.heads_per_task, cfg.seed);
  res.metrics = learner.run(res.stream);
  res.model = learner.model();
  if (cfg.joint_reference) {
    IncrementalLearner joint(cfg.model, cfg.train, cfg.first_heads, cfg.heads_per_task,
                             cfg.seed + 1);
    res.metrics.joint_last = joint.run(joint_stream(res.stream)).last();
  }
  res.metrics.flops = 2.0 * static_cast<double>(model_macs(res.model));
  return res;
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One row per (task_step, metric).
inline std::string metrics_csv(const MetricsRecord& r) {
  std::ostringstream out;
  out << "task_step,metric,value\n";
  for (std::size_t i = 0; i < r.accuracies.size(); ++i) {
    out << i + 1 << ",accuracy," << format_double(r.accuracies[i]) << '\n';
    out << i + 1 << ",first_task_accuracy," << format_double(r.first_task[i]) << '\n';
    out << i + 1 << ",parameters," << r.parameters[i] << '\n';
  }
  const std::size_t M = r.accuracies.size();
  out << M << ",average_accuracy," << format_double(r.average()) << '\n';
  out << M << ",last_accuracy," << format_double(r.last()) << '\n';
  if (r.joint_last) {
    out << M << ",joint_last_accuracy," << format_double(*r.joint_last) << '\n';
    out << M << ",d_gap," << format_double(*r.d_gap()) << '\n';
  }
  out << M << ",flops," << format_double(r.flops) << '\n';
  return out.str();
}

inline Json summary_json(const RunConfig& cfg, const MetricsRecord& r) {
  Json j{{"config", to_json(cfg)},
         {"seed", cfg.seed},
         {"accuracies", r.accuracies},
         {"first_task_accuracies", r.first_task},
         {"parameters", r.parameters},
         {"average_accuracy", r.average()},
         {"last_accuracy", r.last()},
         {"flops", r.flops}};
  j["joint_last_accuracy"] = r.joint_last ? Json(*r.joint_last) : Json(nullptr);
  j["d_gap"] = r.d_gap() ? Json(*r.d_gap()) : Json(nullptr);
  return j;
}

inline Json to_json(const AttentionStats& s) {
  Json groups = Json::object();
  for (std::size_t i = 0; i < 4; ++i)
    groups[kGroupNames[i]] = Json{{"portion", s.groups[i].portion},
                                  {"mean", s.groups[i].mean},
                                  {"entries", s.groups[i].count}};
  return Json{{"groups", groups},
              {"cross_task_mass", s.cross_task_mass},
              {"total_mass", s.total_mass()},
              {"matrices", s.matrices}};
}

/// A fixed, seeded evaluation batch drawn from every task's evaluation split.
inline Tensor evaluation_batch(const TaskStream& stream, std::size_t size, std::uint64_t seed) {
  std::vector<const Sample*> all;
  for (const auto& t : stream.tasks())
    for (const auto& s : t.eval) all.push_back(&s);
  if (all.empty()) throw ConfigError("stream has no evaluation samples");
  Rng rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(size, all.size()));
  return stack_images(all);
}

inline Json attention_json(const CilModel& m, const Tensor& batch) {
  const auto lay = m.layout();
  const auto H = lay.total_heads(), P = m.num_patches();
  const auto counts = group_entry_counts(H, P);
  Json c = Json::object();
  for (std::size_t i = 0; i < 4; ++i) c[kGroupNames[i]] = counts.n[i];
  return Json{{"strategy", to_string(m.config().strategy)},
              {"heads", H},
              {"patches", P},
              {"entry_counts", c},
              {"layer_averaged", to_json(model_attention_stats(m, batch, LayerAveraging::AllLayers))},
              {"final_layer", to_json(model_attention_stats(m, batch, LayerAveraging::FinalLayer))}};
}

inline Json to_json(const FlopsReport& r) {
  return Json{{"tasks", r.tasks},
              {"heads", r.heads},
              {"patches", r.patches},
              {"dim", r.dim},
              {"flops_ia", r.ia},
              {"flops_dne", r.dne},
              {"ratio", r.ratio},
              {"asymptotic_ratio", r.asymptotic_ratio},
              {"crossover_bound", r.crossover}};
}

/// Per-image cost of the model, counted by the graph and analytically.
inline Json flops_json(const CilModel& m, const Tensor& one_image) {
  Graph g;
  ForwardOptions opt;
  opt.aux = false;
  forward(g, m, one_image, opt);
  std::vector<std::size_t> classes;
  for (const auto& e : m.experts()) classes.push_back(e.classes.size());
  const auto analytic = model_macs(m.config(), m.layout().heads_per_task, classes);
  return Json{{"instrumented_macs", g.macs()},
              {"analytic_macs", analytic.total()},
              {"flops", 2 * analytic.total()},
              {"embed_macs", analytic.embed},
              {"block_macs", analytic.blocks},
              {"head_macs", analytic.head},
              {"parameters", m.parameter_count()}};
}

/// Writes metrics.csv, summary.json, attention.json, flops.json and
/// model.ckpt under `dir`.
inline void write_artifacts(const std::filesystem::path& dir, const RunConfig& cfg,
                            const RunResult& res) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream out(dir / name);
    if (!out) throw ConfigError("cannot write " + (dir / name).string());
    out << text;
  };
  write("metrics.csv", metrics_csv(res.metrics));
  write("summary.json", summary_json(cfg, res.metrics).dump(2) + "\n");
  const Tensor batch = evaluation_batch(res.stream, 32, cfg.seed);
  write("attention.json", attention_json(res.model, batch).dump(2) + "\n");
  const Tensor one = evaluation_batch(res.stream, 1, cfg.seed);
  Json fl = flops_json(res.model, one);
  const auto T = res.model.tasks();
  fl["block_comparison"] =
      to_json(flops_report(T, cfg.first_heads, res.model.num_patches(), cfg.model.head_dim,
                           cfg.model.gamma));
  write("flops.json", fl.dump(2) + "\n");
  save_checkpoint(res.model, (dir / "model.ckpt").string());
}

}  // namespace dne
