// SPDX-License-Identifier: Apache-2.0
//
// Attention-group decomposition and compute accounting.
//
// Spatial-task attention tokens are (head, patch) pairs, indexed h*P + p.
// A (query, key) entry falls into one of four groups depending on whether
// the two tokens share the patch and/or the head.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dne/expansion.hpp"

namespace dne {

enum class AttentionGroup { SPSH = 0, SPDH = 1, DPSH = 2, DPDH = 3 };

inline constexpr std::array<const char*, 4> kGroupNames = {"SPSH", "SPDH", "DPSH", "DPDH"};

inline AttentionGroup classify_entry(std::size_t query, std::size_t key, std::size_t P) {
  const bool same_head = query / P == key / P;
  const bool same_patch = query % P == key % P;
  if (same_patch) return same_head ? AttentionGroup::SPSH : AttentionGroup::SPDH;
  return same_head ? AttentionGroup::DPSH : AttentionGroup::DPDH;
}

struct GroupCounts {
  std::array<std::uint64_t, 4> n{};

  std::uint64_t operator[](AttentionGroup g) const { return n[static_cast<int>(g)]; }
  std::uint64_t total() const { return n[0] + n[1] + n[2] + n[3]; }
};

/// Closed-form entry counts of an (HP x HP) attention matrix.
inline GroupCounts group_entry_counts(std::uint64_t H, std::uint64_t P) {
  if (H == 0 || P == 0) throw ConfigError("group_entry_counts: H and P must be positive");
  GroupCounts c;
  c.n[0] = H * P;
  c.n[1] = H * P * (H - 1);
  c.n[2] = H * P * (P - 1);
  c.n[3] = H * P * (H * P - H - P + 1);
  return c;
}

struct GroupStat {
  double mass = 0.0;     // sum of attention weights in the group
  std::uint64_t count = 0;
  double portion = 0.0;  // mass / total mass
  double mean = 0.0;     // mass / count
};

struct AttentionStats {
  std::array<GroupStat, 4> groups;
  double cross_task_mass = 0.0;  // mass between heads of different experts
  std::uint64_t matrices = 0;

  const GroupStat& operator[](AttentionGroup g) const { return groups[static_cast<int>(g)]; }

  double total_mass() const {
    double m = 0.0;
    for (const auto& g : groups) m += g.mass;
    return m;
  }

  /// Pools masses and counts; portions and means are recomputed.
  void accumulate(const AttentionStats& other) {
    for (std::size_t i = 0; i < 4; ++i) {
      groups[i].mass += other.groups[i].mass;
      groups[i].count += other.groups[i].count;
    }
    cross_task_mass += other.cross_task_mass;
    matrices += other.matrices;
    finalize();
  }

  void finalize() {
    const double total = total_mass();
    for (auto& g : groups) {
      g.portion = total > 0.0 ? g.mass / total : 0.0;
      g.mean = g.count > 0 ? g.mass / static_cast<double>(g.count) : 0.0;
    }
  }
};

/// Classifies every entry of one [HP x HP] attention matrix.
inline AttentionStats attention_group_stats(const Tensor& attn,
                                            std::span<const std::size_t> head_to_task,
                                            std::size_t H, std::size_t P) {
  if (attn.rank() != 2 || attn.rows() != H * P || attn.cols() != H * P)
    throw ShapeError("attention_group_stats: matrix " + shape_string(attn.shape) + " for H=" +
                     std::to_string(H) + ", P=" + std::to_string(P));
  if (head_to_task.size() != H)
    throw ShapeError("attention_group_stats: head_to_task has " +
                     std::to_string(head_to_task.size()) + " entries for " + std::to_string(H) +
                     " heads");
  AttentionStats s;
  for (std::size_t q = 0; q < H * P; ++q)
    for (std::size_t k = 0; k < H * P; ++k) {
      auto& g = s.groups[static_cast<int>(classify_entry(q, k, P))];
      const double w = attn.at(q, k);
      g.mass += w;
      g.count += 1;
      if (head_to_task[q / P] != head_to_task[k / P]) s.cross_task_mass += w;
    }
  s.matrices = 1;
  s.finalize();
  return s;
}

enum class LayerAveraging { AllLayers, FinalLayer };

/// Pooled group statistics of the spatial attention of `m` on a batch.
inline AttentionStats model_attention_stats(const CilModel& m, const Tensor& images,
                                            LayerAveraging mode = LayerAveraging::AllLayers) {
  Graph g;
  ForwardTrace tr;
  tr.capture_spatial = true;
  ForwardOptions opt;
  opt.aux = false;
  opt.trace = &tr;
  forward(g, m, images, opt);
  const auto lay = m.layout();
  std::vector<std::size_t> head_to_task;
  for (std::size_t h = 0; h < lay.total_heads(); ++h) head_to_task.push_back(lay.task_of_head(h));
  AttentionStats total;
  const std::size_t first = mode == LayerAveraging::FinalLayer ? tr.spatial.size() - 1 : 0;
  for (std::size_t l = first; l < tr.spatial.size(); ++l)
    for (const auto& mat : tr.spatial[l])
      total.accumulate(attention_group_stats(mat, head_to_task, lay.total_heads(), m.num_patches()));
  return total;
}

// -- compute accounting -----------------------------------------------------
//
// Counts are multiply-accumulates per image, taken from the layer shapes the
// forward pass actually uses: dense projections, attention score and mixing
// contractions. Normalizations, activations, softmax and bias additions are
// not counted. Reported FLOPs are twice the MAC count.

namespace detail {

inline std::uint64_t task_attention_macs(std::uint64_t P, std::uint64_t Ht, std::uint64_t n,
                                         std::uint64_t din, std::uint64_t dk,
                                         std::uint64_t dout) {
  return P * (Ht * din * dk + n * din * dk + n * din * dout + Ht * n * dk + Ht * n * dout);
}

}  // namespace detail

/// MACs of block `layer` for one image, for experts with the given heads.
inline std::uint64_t block_macs(const ModelConfig& cfg, const std::vector<std::size_t>& heads,
                                std::size_t layer) {
  const std::uint64_t P = cfg.num_patches(), D = cfg.head_dim;
  const std::uint64_t Dp = intermediate_width(cfg.head_dim, cfg.gamma);
  std::uint64_t total = 0, n = 0;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::uint64_t Hi = heads[i], W = D * Hi;
    n += Hi;
    if (cfg.strategy == Strategy::STA) {
      total += Hi * 3 * P * D * D;
      total += 2 * (P * Hi) * (P * n) * D;
    } else {
      total += Hi * (3 * P * D * D + 2 * P * P * D);
      if (cfg.layer_uses_mhsa_ta(layer)) total += detail::task_attention_macs(P, Hi, n, D, D, D);
    }
    total += P * W * W;
    total += cfg.layer_uses_fc1_ta(layer) ? detail::task_attention_macs(P, Hi, n, D, D, Dp)
                                          : P * W * (Dp * Hi);
    total += cfg.layer_uses_fc2_ta(layer) ? detail::task_attention_macs(P, Hi, n, Dp, D, D)
                                          : P * (Dp * Hi) * W;
  }
  return total;
}

struct ModelMacs {
  std::uint64_t embed = 0;
  std::vector<std::uint64_t> blocks;
  std::uint64_t head = 0;

  std::uint64_t total() const {
    std::uint64_t t = embed + head;
    for (auto b : blocks) t += b;
    return t;
  }
};

/// MACs of a full forward pass for one image.
inline ModelMacs model_macs(const ModelConfig& cfg, const std::vector<std::size_t>& heads,
                            const std::vector<std::size_t>& classes, bool with_aux = false) {
  if (heads.size() != classes.size()) throw ContractError("model_macs: heads/classes mismatch");
  const std::uint64_t P = cfg.num_patches(), D = cfg.head_dim;
  const std::uint64_t F = cfg.patch_config(1).patch_features();
  ModelMacs m;
  std::uint64_t n = 0;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::uint64_t Hi = heads[i], W = D * Hi;
    n += Hi;
    m.embed += P * F * W;
    m.head += 2 * W * W + 2 * P * (D * n) * W + 2 * Hi * P * D + (D * n) * classes[i];
  }
  if (with_aux && !classes.empty()) m.head += D * n * (classes.back() + 1);
  for (std::size_t l = 0; l < cfg.layers; ++l) m.blocks.push_back(block_macs(cfg, heads, l));
  return m;
}

inline std::uint64_t model_macs(const CilModel& model, bool with_aux = false) {
  std::vector<std::size_t> classes;
  for (const auto& e : model.experts()) classes.push_back(e.classes.size());
  return model_macs(model.config(), model.layout().heads_per_task, classes, with_aux).total();
}

/// Block MACs with an explicit patch count (no image geometry needed).
inline std::uint64_t block_macs_explicit(Strategy strategy, const std::vector<std::size_t>& heads,
                                         std::uint64_t P, std::uint64_t D, double gamma = 4.0) {
  const std::uint64_t Dp = intermediate_width(D, gamma);
  std::uint64_t total = 0, n = 0;
  for (auto h : heads) {
    const std::uint64_t Hi = h, W = D * Hi;
    n += Hi;
    if (strategy == Strategy::STA) {
      total += Hi * 3 * P * D * D + 2 * (P * Hi) * (P * n) * D;
    } else {
      total += Hi * (3 * P * D * D + 2 * P * P * D);
    }
    total += P * W * W;
    if (strategy == Strategy::DNE) {
      total += detail::task_attention_macs(P, Hi, n, D, D, Dp);
      total += detail::task_attention_macs(P, Hi, n, Dp, D, D);
    } else {
      total += 2 * P * W * (Dp * Hi);
    }
  }
  return total;
}

/// FLOPs of one IA block with T experts of H heads each.
inline std::uint64_t flops_ia(std::uint64_t T, std::uint64_t H, std::uint64_t P, std::uint64_t D,
                              double gamma = 4.0) {
  if (T == 0 || H == 0 || P == 0 || D == 0) throw ConfigError("flops_ia: arguments must be positive");
  return 2 * block_macs_explicit(Strategy::IA, std::vector<std::size_t>(T, H), P, D, gamma);
}

/// FLOPs of one DNE block (task attention in both MLP stages) with T experts
/// of H heads each.
inline std::uint64_t flops_dne(std::uint64_t T, std::uint64_t H, std::uint64_t P, std::uint64_t D,
                               double gamma = 4.0) {
  if (T == 0 || H == 0 || P == 0 || D == 0) throw ConfigError("flops_dne: arguments must be positive");
  return 2 * block_macs_explicit(Strategy::DNE, std::vector<std::size_t>(T, H), P, D, gamma);
}

/// Spatial-attention part (q/k/v projections, scores, mixing) of one block,
/// identical under IA and DNE.
inline std::uint64_t flops_spatial(std::uint64_t T, std::uint64_t H, std::uint64_t P,
                                   std::uint64_t D) {
  return 2 * T * H * (3 * P * D * D + 2 * P * P * D);
}

/// Leading-order cost ratio of single-head DNE experts against H-head IA
/// experts: (P + T) / (H (P + H)).
inline double asymptotic_cost_ratio(double T, double H, double P) {
  return (P + T) / (H * (P + H));
}

/// Largest task count bound below which single-head DNE is cheaper than
/// H-head IA: T < H^2 + (H - 1) P.
inline std::uint64_t crossover_bound(std::uint64_t H, std::uint64_t P) {
  if (H == 0 || P == 0) throw ConfigError("crossover_bound: H and P must be positive");
  return H * H + (H - 1) * P;
}

struct FlopsReport {
  std::uint64_t tasks = 0, heads = 0, patches = 0, dim = 0;
  std::uint64_t ia = 0;   // H heads per expert
  std::uint64_t dne = 0;  // one head per expert
  double ratio = 0.0;
  double asymptotic_ratio = 0.0;
  std::uint64_t crossover = 0;
};

inline FlopsReport flops_report(std::uint64_t T, std::uint64_t H, std::uint64_t P, std::uint64_t D,
                                double gamma = 4.0) {
  FlopsReport r;
  r.tasks = T;
  r.heads = H;
  r.patches = P;
  r.dim = D;
  r.ia = flops_ia(T, H, P, D, gamma);
  r.dne = flops_dne(T, 1, P, D, gamma);
  r.ratio = static_cast<double>(r.dne) / static_cast<double>(r.ia);
  r.asymptotic_ratio = asymptotic_cost_ratio(static_cast<double>(T), static_cast<double>(H),
                                             static_cast<double>(P));
  r.crossover = crossover_bound(H, P);
  return r;
}

}  // namespace dne
