// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: train, analyze-attention, flops, gradcheck, counts.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dne/experiment.hpp"
#include "dne/gradcheck.hpp"

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy, sta_variant, cta_layers, share_q, share_k, share_v;
  std::optional<std::size_t> k, step_size, buffer, epochs, tune_epochs;
  std::optional<bool> cta_mhsa, cta_fc1, cta_fc2, joint;
  std::string out = "run";

  void attach(CLI::App& app) {
    app.add_option("--config", config, "JSON run configuration")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Seed for data, initialization and shuffling");
    app.add_option("--strategy", strategy, "ia, sta or dne");
    app.add_option("--sta-variant", sta_variant, "spdh, dpdh or both");
    app.add_option("--k", k, "Heads added per task after the first");
    app.add_option("--step-size", step_size, "Classes per task after the first");
    app.add_option("--buffer", buffer, "Memory buffer capacity");
    app.add_option("--epochs", epochs, "Training epochs per task");
    app.add_option("--tune-epochs", tune_epochs, "Class-balanced tuning epochs per task");
    app.add_option("--out", out, "Output directory");
    app.add_option("--cta-layers", cta_layers, "Per-layer cross-task mask, e.g. 01");
    app.add_option("--cta-mhsa", cta_mhsa, "Cross-task attention feeding the heads");
    app.add_option("--cta-fc1", cta_fc1, "Task attention in the first MLP stage");
    app.add_option("--cta-fc2", cta_fc2, "Task attention in the second MLP stage");
    app.add_option("--share-q", share_q, "Query matrix sharing: s or f");
    app.add_option("--share-k", share_k, "Key matrix sharing: s or f");
    app.add_option("--share-v", share_v, "Value matrix sharing: s or f");
    app.add_option("--joint", joint, "Also train the joint reference model");
  }

  dne::RunConfig resolve() const {
    dne::RunConfig c = config.empty() ? dne::RunConfig{} : dne::load_run_config(config);
    if (seed) c.seed = *seed;
    if (strategy) c.model.strategy = dne::parse_strategy(*strategy);
    if (sta_variant) c.model.sta_variant = dne::parse_sta_variant(*sta_variant);
    if (k) c.heads_per_task = *k;
    if (step_size) c.data.step_size = *step_size;
    if (buffer) c.train.buffer = *buffer;
    if (epochs) c.train.epochs = *epochs;
    if (tune_epochs) c.train.tune_epochs = *tune_epochs;
    if (cta_layers) c.model.cta_layers = dne::parse_layer_mask(*cta_layers);
    if (cta_mhsa) c.model.cta_mhsa = *cta_mhsa;
    if (cta_fc1) c.model.cta_fc1 = *cta_fc1;
    if (cta_fc2) c.model.cta_fc2 = *cta_fc2;
    if (share_q) c.model.share_q = dne::parse_sharing(*share_q);
    if (share_k) c.model.share_k = dne::parse_sharing(*share_k);
    if (share_v) c.model.share_v = dne::parse_sharing(*share_v);
    if (joint) c.joint_reference = *joint;
    c.validate();
    return c;
  }
};

int train(const Overrides& o) {
  const auto cfg = o.resolve();
  const auto res = dne::run_experiment(cfg);
  dne::write_artifacts(o.out, cfg, res);
  for (std::size_t i = 0; i < res.metrics.accuracies.size(); ++i)
    std::printf("task %zu: A=%.2f\n", i + 1, res.metrics.accuracies[i]);
  std::printf("AA=%.2f LA=%.2f", res.metrics.average(), res.metrics.last());
  if (auto d = res.metrics.d_gap()) std::printf(" D=%.2f", *d);
  std::printf("\nartifacts written to %s\n", o.out.c_str());
  return 0;
}

int analyze(const Overrides& o, const std::string& checkpoint) {
  const auto cfg = o.resolve();
  dne::CilModel model;
  dne::TaskStream stream;
  if (checkpoint.empty()) {
    auto res = dne::run_experiment(cfg);
    model = std::move(res.model);
    stream = std::move(res.stream);
  } else {
    model = dne::load_checkpoint(checkpoint);
    stream = dne::make_stream(cfg);
  }
  const auto j = dne::attention_json(model, dne::evaluation_batch(stream, 32, cfg.seed));
  std::filesystem::create_directories(o.out);
  std::ofstream(std::filesystem::path(o.out) / "attention.json") << j.dump(2) << "\n";
  std::cout << j.dump(2) << "\n";
  return 0;
}

int flops(std::uint64_t tasks, std::uint64_t heads, std::uint64_t patches, std::uint64_t dim,
          const std::string& out) {
  const auto r = dne::flops_report(tasks, heads, patches, dim);
  std::printf("flops_ia (T=%llu, %llu heads per expert): %llu\n",
              static_cast<unsigned long long>(tasks), static_cast<unsigned long long>(heads),
              static_cast<unsigned long long>(r.ia));
  std::printf("flops_dne (T=%llu, 1 head per expert): %llu\n",
              static_cast<unsigned long long>(tasks), static_cast<unsigned long long>(r.dne));
  std::printf("ratio: %.6f (asymptotic %.6f)\n", r.ratio, r.asymptotic_ratio);
  std::printf("crossover_bound: %llu\n", static_cast<unsigned long long>(r.crossover));
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    std::ofstream(std::filesystem::path(out) / "flops.json") << dne::to_json(r).dump(2) << "\n";
  }
  return 0;
}

int gradcheck(std::uint64_t seed) {
  bool ok = true;
  for (const auto& r : dne::gradient_suite(seed)) {
    std::printf("%-24s points=%zu max_rel_err=%.3e %s\n", r.name.c_str(), r.points,
                r.max_relative_error, r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int counts(std::uint64_t heads, std::uint64_t patches) {
  const auto c = dne::group_entry_counts(heads, patches);
  for (std::size_t i = 0; i < 4; ++i)
    std::printf("%s: %llu (%.4f%%)\n", dne::kGroupNames[i], static_cast<unsigned long long>(c.n[i]),
                100.0 * static_cast<double>(c.n[i]) / static_cast<double>(c.total()));
  std::printf("total: %llu\n", static_cast<unsigned long long>(c.total()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense network expansion for class-incremental learning"};
  app.require_subcommand(1);

  Overrides train_opts;
  auto* train_cmd = app.add_subcommand("train", "Train incrementally and write reports");
  train_opts.attach(*train_cmd);

  Overrides attn_opts;
  std::string checkpoint;
  auto* attn_cmd = app.add_subcommand("analyze-attention", "Attention group statistics");
  attn_opts.attach(*attn_cmd);
  attn_cmd->add_option("--checkpoint", checkpoint, "Analyze this checkpoint instead of training")
      ->check(CLI::ExistingFile);

  std::uint64_t heads = 12, patches = 196, tasks = 6, dim = 64;
  std::string flops_out;
  auto* flops_cmd = app.add_subcommand("flops", "Per-block cost of IA and DNE experts");
  flops_cmd->add_option("--heads", heads, "Heads per IA expert")->check(CLI::PositiveNumber);
  flops_cmd->add_option("--patches", patches, "Patches per image")->check(CLI::PositiveNumber);
  flops_cmd->add_option("--tasks", tasks, "Number of experts")->check(CLI::PositiveNumber);
  flops_cmd->add_option("--dim", dim, "Head dimension")->check(CLI::PositiveNumber);
  flops_cmd->add_option("--out", flops_out, "Also write flops.json here");

  std::uint64_t grad_seed = 7;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_cmd->add_option("--seed", grad_seed, "Seed of the checked points");

  std::uint64_t count_heads = 16, count_patches = 64;
  auto* counts_cmd = app.add_subcommand("counts", "Attention entry counts per group");
  counts_cmd->add_option("--heads", count_heads)->check(CLI::PositiveNumber);
  counts_cmd->add_option("--patches", count_patches)->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train_cmd) return train(train_opts);
    if (*attn_cmd) return analyze(attn_opts, checkpoint);
    if (*flops_cmd) return flops(tasks, heads, patches, dim, flops_out);
    if (*grad_cmd) return gradcheck(grad_seed);
    if (*counts_cmd) return counts(count_heads, count_patches);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
