// SPDX-License-Identifier: Apache-2.0
//
// The growing class-incremental model. One expert is added per task; all
// earlier experts are frozen. Three wirings are supported:
//
//   IA   every expert is an independent ViT branch,
//   STA  spatial attention runs jointly over the (patch, head) tokens of the
//        current and all previous experts,
//   DNE  spatial attention stays per expert and the MLP of each block is
//        replaced by task attention across the heads of all experts, per patch.
//
// Expert i only ever reads experts 0..i, so adding an expert leaves every
// earlier output unchanged bit for bit.
#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dne/backbone.hpp"

namespace dne {

enum class Strategy { IA, STA, DNE };
enum class Sharing { Shared, Flexible };
enum class StaVariant { SPDH, DPDH, Both };

/// Which (query, key) token groups a spatial-task attention may use.
struct GroupMask {
  bool spsh = true;  // same patch, same head
  bool spdh = false;  // same patch, different head
  bool dpsh = true;  // different patch, same head
  bool dpdh = false;  // different patch, different head

  bool allows(bool same_patch, bool same_head) const {
    if (same_patch) return same_head ? spsh : spdh;
    return same_head ? dpsh : dpdh;
  }
};

inline GroupMask group_mask(StaVariant v) {
  switch (v) {
    case StaVariant::SPDH: return {true, true, true, false};
    case StaVariant::DPDH: return {true, false, true, true};
    case StaVariant::Both: return {true, true, true, true};
  }
  throw ConfigError("unknown STA variant");
}

/// Per-task head counts plus the dimensions shared by every expert.
struct ExpertLayout {
  std::vector<std::size_t> heads_per_task;
  std::size_t head_dim = 16;
  double gamma = 4.0;

  std::size_t tasks() const { return heads_per_task.size(); }
  std::size_t total_heads() const { return heads_before(tasks()); }
  std::size_t heads_before(std::size_t task) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < task; ++i) n += heads_per_task[i];
    return n;
  }
  std::size_t intermediate_dim() const { return intermediate_width(head_dim, gamma); }
  std::size_t task_of_head(std::size_t head) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < tasks(); ++i) {
      n += heads_per_task[i];
      if (head < n) return i;
    }
    throw ContractError("head " + std::to_string(head) + " out of range");
  }
};

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t head_dim = 16;
  std::size_t layers = 2;
  double gamma = 4.0;
  double input_mean = 0.5;
  double input_std = 0.25;
  Strategy strategy = Strategy::DNE;
  StaVariant sta_variant = StaVariant::Both;
  std::vector<bool> cta_layers;  // empty: every layer
  bool cta_mhsa = false;
  bool cta_fc1 = true;
  bool cta_fc2 = true;
  Sharing share_q = Sharing::Shared;
  Sharing share_k = Sharing::Shared;
  Sharing share_v = Sharing::Flexible;

  void validate() const {
    patch_config(1).validate();
    if (layers == 0) throw ConfigError("model needs at least one layer");
    if (!cta_layers.empty() && cta_layers.size() != layers)
      throw ConfigError("cta layer mask has " + std::to_string(cta_layers.size()) +
                        " entries for " + std::to_string(layers) + " layers");
    intermediate_width(head_dim, gamma);
  }

  PatchEmbedConfig patch_config(std::size_t heads) const {
    return PatchEmbedConfig{image_size, patch_size, in_channels, head_dim, heads, input_mean,
                            input_std};
  }
  std::size_t num_patches() const { return patch_config(1).num_patches(); }

  bool layer_uses_cta(std::size_t layer) const {
    return strategy == Strategy::DNE && (cta_layers.empty() || cta_layers[layer]);
  }
  bool layer_uses_fc1_ta(std::size_t layer) const { return layer_uses_cta(layer) && cta_fc1; }
  bool layer_uses_fc2_ta(std::size_t layer) const { return layer_uses_cta(layer) && cta_fc2; }
  bool layer_uses_mhsa_ta(std::size_t layer) const { return layer_uses_cta(layer) && cta_mhsa; }
};

/// Parameters of one task-attention application owned by one expert.
/// Query/key matrices are present only on their owner: every expert in
/// flexible mode, the first expert in shared mode. Value matrices cover all
/// visible heads in flexible mode and only the expert's own heads in
/// shared mode.
struct TaskAttentionParams {
  LayerNormParams ln;
  Tensor wq, wk;
  std::vector<Tensor> wv;
  Tensor lambda;  // [1 x own heads]
};

enum class TaskAttentionKind { Fc1, Fc2, Mhsa };

struct ExpertBlock {
  MhsaParams mhsa;
  std::optional<TaskAttentionParams> mhsa_ta;
  MlpParams mlp;
  std::optional<TaskAttentionParams> ta1, ta2;
};

/// Extra block turning a learned task token into the task's feature e'.
struct TaskTokenHead {
  Tensor token;  // [1 x d]
  LayerNormParams ln_token, ln_patch;
  Tensor wq;  // [d x d]
  Tensor wk, wv;  // [D*visible heads x d]
  Linear out;
  LayerNormParams ln_out;
};

struct Expert {
  std::size_t heads = 0;
  std::vector<int> classes;
  Linear patch;
  std::vector<ExpertBlock> blocks;
  TaskTokenHead head;
  Linear classifier;  // [D*visible heads x |classes|]
};

/// Resolved (possibly shared) parameters of one task-attention call.
struct TaskAttentionView {
  const LayerNormParams* ln = nullptr;
  const Tensor* wq = nullptr;
  const Tensor* wk = nullptr;
  std::vector<const Tensor*> wv;
  const Tensor* lambda = nullptr;
  std::size_t in_dim = 0, key_dim = 0, out_dim = 0;
};

class CilModel {
 public:
  CilModel() = default;
  explicit CilModel(ModelConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  const std::vector<Expert>& experts() const { return experts_; }
  std::vector<Expert>& mutable_experts() { return experts_; }
  const Tensor& positional() const { return pos_; }
  const Linear& aux() const { return aux_; }
  std::size_t tasks() const { return experts_.size(); }
  std::size_t num_patches() const { return cfg_.num_patches(); }

  ExpertLayout layout() const {
    ExpertLayout l;
    l.head_dim = cfg_.head_dim;
    l.gamma = cfg_.gamma;
    for (const auto& e : experts_) l.heads_per_task.push_back(e.heads);
    return l;
  }

  /// Class ids in logit order.
  std::vector<int> class_order() const {
    std::vector<int> out;
    for (const auto& e : experts_) out.insert(out.end(), e.classes.begin(), e.classes.end());
    return out;
  }
  std::size_t total_classes() const { return class_order().size(); }

  /// Freezes every existing parameter, then appends a trainable expert with
  /// `new_heads` heads for the given classes and a fresh auxiliary head.
  void add_expert(std::size_t new_heads, std::vector<int> classes, Rng& rng) {
    if (new_heads == 0) throw ConfigError("add_expert: an expert needs at least one head");
    if (classes.empty()) throw ConfigError("add_expert: an expert needs at least one class");
    std::set<int> seen;
    for (int c : class_order()) seen.insert(c);
    for (int c : classes)
      if (!seen.insert(c).second)
        throw StreamError("add_expert: class " + std::to_string(c) + " is already assigned");

    freeze_all();
    const std::size_t D = cfg_.head_dim, P = num_patches();
    const std::size_t task = experts_.size();
    if (task == 0) {
      pos_ = Tensor::matrix(P, D);
      fill_truncated_normal(pos_, rng, kInitStd);
    }
    const std::size_t visible = layout().total_heads() + new_heads;
    const std::size_t width = D * new_heads;

    Expert e;
    e.heads = new_heads;
    e.classes = std::move(classes);
    e.patch = init_linear(cfg_.patch_config(new_heads).patch_features(), width, rng);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      ExpertBlock b;
      b.mhsa = init_mhsa(new_heads, D, rng);
      if (cfg_.layer_uses_mhsa_ta(l))
        b.mhsa_ta = init_task_attention(TaskAttentionKind::Mhsa, task, new_heads, visible, rng);
      const bool fc1_ta = cfg_.layer_uses_fc1_ta(l), fc2_ta = cfg_.layer_uses_fc2_ta(l);
      b.mlp = init_mlp(width, cfg_.gamma, rng, !fc1_ta, !fc2_ta);
      if (fc1_ta) b.ta1 = init_task_attention(TaskAttentionKind::Fc1, task, new_heads, visible, rng);
      if (fc2_ta) b.ta2 = init_task_attention(TaskAttentionKind::Fc2, task, new_heads, visible, rng);
      e.blocks.push_back(std::move(b));
    }
    auto& h = e.head;
    h.token = Tensor::matrix(1, width);
    fill_truncated_normal(h.token, rng, kInitStd);
    h.ln_token = init_layer_norm(width);
    h.ln_patch = init_layer_norm(D * visible);
    h.wq = init_weight(width, width, rng);
    h.wk = init_weight(D * visible, width, rng);
    h.wv = init_weight(D * visible, width, rng);
    h.out = init_linear(width, width, rng);
    h.ln_out = init_layer_norm(width);
    e.classifier = init_linear(D * visible, e.classes.size(), rng);
    aux_ = init_linear(D * visible, e.classes.size() + 1, rng);
    experts_.push_back(std::move(e));
  }

  void freeze_all() {
    visit_parameters([](const std::string&, Tensor& t) {
      t.frozen = true;
      t.grad.clear();
    });
  }

  /// Visits every parameter in declaration order with a stable name.
  template <class F>
  void visit_parameters(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void visit_parameters(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit_parameters([&](const std::string&, const Tensor& t) { n += t.numel(); });
    return n;
  }

  std::vector<Tensor*> trainable_parameters() {
    std::vector<Tensor*> out;
    visit_parameters([&](const std::string&, Tensor& t) {
      if (!t.frozen) out.push_back(&t);
    });
    return out;
  }

  /// Dimensions of one task-attention application.
  void stage_dims(TaskAttentionKind kind, std::size_t& in, std::size_t& key,
                  std::size_t& out) const {
    const std::size_t D = cfg_.head_dim, Dp = intermediate_width(D, cfg_.gamma);
    key = D;
    switch (kind) {
      case TaskAttentionKind::Fc1: in = D; out = Dp; break;
      case TaskAttentionKind::Fc2: in = Dp; out = D; break;
      case TaskAttentionKind::Mhsa: in = D; out = D; break;
    }
  }

  /// Resolves the parameters expert `task` uses for a task-attention call,
  /// following the configured sharing of the query, key and value matrices.
  TaskAttentionView task_attention_view(std::size_t layer, std::size_t task,
                                        TaskAttentionKind kind) const {
    auto stage_of = [&](std::size_t i) -> const TaskAttentionParams& {
      const auto& b = experts_.at(i).blocks.at(layer);
      const auto& opt = kind == TaskAttentionKind::Fc1   ? b.ta1
                        : kind == TaskAttentionKind::Fc2 ? b.ta2
                                                         : b.mhsa_ta;
      if (!opt) throw ContractError("layer " + std::to_string(layer) + " of task " +
                                    std::to_string(i) + " has no task attention here");
      return *opt;
    };
    const auto& own = stage_of(task);
    TaskAttentionView v;
    stage_dims(kind, v.in_dim, v.key_dim, v.out_dim);
    v.ln = &own.ln;
    v.lambda = &own.lambda;
    v.wq = cfg_.share_q == Sharing::Flexible ? &own.wq : &stage_of(0).wq;
    v.wk = cfg_.share_k == Sharing::Flexible ? &own.wk : &stage_of(0).wk;
    const auto lay = layout();
    const std::size_t visible = lay.heads_before(task + 1);
    for (std::size_t j = 0; j < visible; ++j) {
      if (cfg_.share_v == Sharing::Flexible) {
        v.wv.push_back(&own.wv.at(j));
      } else {
        const std::size_t owner = lay.task_of_head(j);
        v.wv.push_back(&stage_of(owner).wv.at(j - lay.heads_before(owner)));
      }
    }
    return v;
  }

 private:
  TaskAttentionParams init_task_attention(TaskAttentionKind kind, std::size_t task,
                                          std::size_t heads, std::size_t visible, Rng& rng) {
    std::size_t in = 0, key = 0, out = 0;
    stage_dims(kind, in, key, out);
    TaskAttentionParams p;
    p.ln = init_layer_norm(in);
    if (cfg_.share_q == Sharing::Flexible || task == 0) p.wq = init_weight(in, key, rng);
    if (cfg_.share_k == Sharing::Flexible || task == 0) p.wk = init_weight(in, key, rng);
    const std::size_t count = cfg_.share_v == Sharing::Flexible ? visible : heads;
    for (std::size_t j = 0; j < count; ++j) p.wv.push_back(init_weight(in, out, rng));
    p.lambda = Tensor::matrix(1, heads, 1.0);
    return p;
  }

  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto visit = [&](const std::string& name, auto& t) {
      if (!t.empty()) f(name, t);
    };
    auto linear = [&](const std::string& name, auto& l) {
      visit(name + ".w", l.weight);
      visit(name + ".b", l.bias);
    };
    auto norm = [&](const std::string& name, auto& n) {
      visit(name + ".g", n.gain);
      visit(name + ".b", n.bias);
    };
    auto stage = [&](const std::string& name, auto& s) {
      norm(name + ".ln", s.ln);
      visit(name + ".wq", s.wq);
      visit(name + ".wk", s.wk);
      for (std::size_t j = 0; j < s.wv.size(); ++j) visit(name + ".wv" + std::to_string(j), s.wv[j]);
      visit(name + ".lambda", s.lambda);
    };
    visit("pos", self.pos_);
    for (std::size_t i = 0; i < self.experts_.size(); ++i) {
      auto& e = self.experts_[i];
      const std::string t = "task" + std::to_string(i);
      linear(t + ".patch", e.patch);
      for (std::size_t l = 0; l < e.blocks.size(); ++l) {
        auto& b = e.blocks[l];
        const std::string bn = t + ".block" + std::to_string(l);
        for (std::size_t h = 0; h < b.mhsa.heads.size(); ++h) {
          auto& hd = b.mhsa.heads[h];
          const std::string hn = bn + ".mhsa.head" + std::to_string(h);
          norm(hn + ".ln", hd.ln);
          visit(hn + ".wq", hd.wq);
          visit(hn + ".wk", hd.wk);
          visit(hn + ".wv", hd.wv);
        }
        linear(bn + ".mhsa.proj", b.mhsa.proj);
        if (b.mhsa_ta) stage(bn + ".mhsa_ta", *b.mhsa_ta);
        norm(bn + ".mlp.ln1", b.mlp.ln1);
        linear(bn + ".mlp.fc1", b.mlp.fc1);
        norm(bn + ".mlp.ln2", b.mlp.ln2);
        linear(bn + ".mlp.fc2", b.mlp.fc2);
        if (b.ta1) stage(bn + ".ta1", *b.ta1);
        if (b.ta2) stage(bn + ".ta2", *b.ta2);
      }
      auto& h = e.head;
      visit(t + ".head.token", h.token);
      norm(t + ".head.ln_token", h.ln_token);
      norm(t + ".head.ln_patch", h.ln_patch);
      visit(t + ".head.wq", h.wq);
      visit(t + ".head.wk", h.wk);
      visit(t + ".head.wv", h.wv);
      linear(t + ".head.out", h.out);
      norm(t + ".head.ln_out", h.ln_out);
      linear(t + ".classifier", e.classifier);
    }
    linear(std::string("aux"), self.aux_);
  }

  ModelConfig cfg_;
  Tensor pos_;
  std::vector<Expert> experts_;
  Linear aux_;
};

// -- task attention ---------------------------------------------------------

enum class AttentionOverride { None, AllOnes };

struct TaskAttentionOutput {
  Var output;   // [N x H_t*out_dim], lambda-scaled, before any activation
  Var weights;  // [N*H_t x H], rows of A_p for each token row
};

/// Task attention across heads, per token row. `inputs` holds the features
/// of tasks 1..t ([N x H_i*in_dim] each); queries come from the last task,
/// keys and values from every head of every task.
inline TaskAttentionOutput task_attention(std::span<const Var> inputs, const TaskAttentionView& v,
                                          AttentionOverride mode = AttentionOverride::None) {
  if (inputs.empty()) throw ContractError("task_attention: no inputs");
  Graph& g = *inputs[0].graph;
  const std::size_t N = inputs[0].rows();
  const std::size_t din = v.in_dim;
  std::size_t H = 0;
  for (const auto& x : inputs) {
    if (x.rows() != N || x.cols() % din != 0)
      throw ShapeError("task_attention: input " + shape_string(x.value().shape) +
                       " for head width " + std::to_string(din));
    H += x.cols() / din;
  }
  const std::size_t Ht = inputs.back().cols() / din;
  if (v.wv.size() != H)
    throw ContractError("task_attention: " + std::to_string(v.wv.size()) + " value matrices for " +
                        std::to_string(H) + " heads");
  if (v.lambda->numel() != Ht)
    throw ContractError("task_attention: lambda has " + std::to_string(v.lambda->numel()) +
                        " entries for " + std::to_string(Ht) + " query heads");

  Var all = inputs.size() == 1 ? inputs[0] : ops::concat_cols(inputs);
  Var normed = ops::reshape(
      ops::layer_norm(ops::reshape(all, N * H, din), g.parameter(v.ln->gain),
                      g.parameter(v.ln->bias)),
      N, H * din);
  Var q_in = ops::reshape(ops::slice_cols(normed, (H - Ht) * din, Ht * din), N * Ht, din);
  Var q = ops::matmul(q_in, g.parameter(*v.wq));
  Var k = ops::matmul(ops::reshape(normed, N * H, din), g.parameter(*v.wk));
  std::vector<Var> values;
  for (std::size_t j = 0; j < H; ++j)
    values.push_back(ops::matmul(ops::slice_cols(normed, j * din, din), g.parameter(*v.wv[j])));
  Var val = ops::reshape(H == 1 ? values[0] : ops::concat_cols(std::span<const Var>(values)),
                         N * H, v.out_dim);
  Var a;
  if (mode == AttentionOverride::AllOnes) {
    a = g.constant(Tensor::matrix(N * Ht, H, 1.0));
  } else {
    a = ops::softmax_rows(ops::grouped_scores(q, k, N),
                          std::sqrt(static_cast<double>(v.key_dim)));
  }
  Var mixed = ops::reshape(ops::grouped_mix(a, val, N), N, Ht * v.out_dim);
  return {ops::scale_col_blocks(mixed, g.parameter(*v.lambda), v.out_dim), a};
}

/// Attention weights A_p of the first task-attention stage of `task`.
inline Var tab_attention(const CilModel& m, std::size_t layer, std::size_t task,
                         std::span<const Var> s) {
  return task_attention(s, m.task_attention_view(layer, task, TaskAttentionKind::Fc1)).weights;
}

struct TabOutput {
  Var o;  // intermediate response of the current task
  Var r;  // block output of the current task
  std::optional<Var> weights;  // first-stage attention, when used
};

/// Task-attention block of expert `task` at `layer`:
///   o^t = GELU(TA(LN(s^1..s^t)))   (or GELU(FC1(LN(s^t))) when disabled)
///   r^t = s^t + TA(LN(o^1..o^t))   (or s^t + FC2(LN(o^t)) when disabled)
/// `o_old` must hold the cached intermediates of experts 1..t-1.
inline TabOutput tab_forward(const CilModel& m, std::size_t layer, std::size_t task,
                             std::span<const Var> s, std::span<const Var> o_old,
                             AttentionOverride mode = AttentionOverride::None) {
  const auto& cfg = m.config();
  if (s.size() != task + 1)
    throw ContractError("tab_forward: expected features of " + std::to_string(task + 1) +
                        " tasks, got " + std::to_string(s.size()));
  if (o_old.size() != task)
    throw ContractError("tab_forward: missing cached intermediates of previous experts (" +
                        std::to_string(o_old.size()) + " of " + std::to_string(task) + ")");
  const auto& block = m.experts().at(task).blocks.at(layer);
  TabOutput out;
  if (cfg.layer_uses_fc1_ta(layer)) {
    auto ta = task_attention(s, m.task_attention_view(layer, task, TaskAttentionKind::Fc1), mode);
    out.o = ops::gelu(ta.output);
    out.weights = ta.weights;
  } else {
    out.o = mlp_stage1(s.back(), block.mlp);
  }
  Var update;
  if (cfg.layer_uses_fc2_ta(layer)) {
    std::vector<Var> os(o_old.begin(), o_old.end());
    os.push_back(out.o);
    update = task_attention(os, m.task_attention_view(layer, task, TaskAttentionKind::Fc2), mode)
                 .output;
  } else {
    update = mlp_stage2(out.o, block.mlp);
  }
  out.r = ops::add(s.back(), update);
  return out;
}

// -- forward ----------------------------------------------------------------

/// Intermediate values recorded by forward() for inspection.
struct ForwardTrace {
  bool capture_spatial = false;
  std::vector<std::vector<Tensor>> r;  // [layer 0..L][task]; r[0] is the embedding
  std::vector<std::vector<Tensor>> s;  // [layer][task]
  std::vector<std::vector<Tensor>> o;  // [layer][task]; empty tensor for plain MLP layers
  std::vector<std::vector<Tensor>> task_attention;  // [layer][task]
  std::vector<std::vector<Tensor>> spatial;  // [layer][sample], [H*P x H*P], token h*P+p
  std::vector<Tensor> tokens;  // e' of each task
  std::vector<std::uint64_t> block_macs;  // per layer
  std::uint64_t embed_macs = 0;
  std::uint64_t head_macs = 0;
};

struct ForwardOptions {
  AttentionOverride attention = AttentionOverride::None;
  std::optional<GroupMask> sta_groups;  // overrides the configured STA variant
  bool aux = true;
  ForwardTrace* trace = nullptr;
};

struct ForwardOutput {
  std::vector<Var> features;    // r_L of each task
  std::vector<Var> embeddings;  // e' of each task
  Var embedding;                // all e' concatenated
  Var logits;                   // [B x total classes]
  std::optional<Var> aux_logits;  // [B x |Y_t|+1]
};

namespace detail {

inline Var concat_or_single(const std::vector<Var>& v) {
  return v.size() == 1 ? v[0] : ops::concat_cols(std::span<const Var>(v));
}

inline void place_head_attention(ForwardTrace& tr, std::size_t layer, const Tensor& w,
                                 std::size_t head, std::size_t P) {
  const std::size_t B = w.rows() / P;
  auto& mats = tr.spatial[layer];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t q = 0; q < P; ++q)
        mats[b].at(head * P + p, head * P + q) = w.at(b * P + p, q);
}

}  // namespace detail

/// Spatial stage of the IA/DNE wiring: per-head self-attention inside each
/// expert, optionally with cross-task attention feeding the head inputs.
inline std::vector<Var> cross_task_mhsa(const CilModel& m, std::size_t layer,
                                        std::span<const Var> r, ForwardTrace* trace = nullptr) {
  const auto& cfg = m.config();
  Graph& g = *r[0].graph;
  const std::size_t D = cfg.head_dim, P = m.num_patches();
  std::vector<Var> s;
  std::size_t head_offset = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& block = m.experts()[i].blocks.at(layer);
    const std::size_t Hi = block.mhsa.heads.size();
    std::optional<Var> mixed;
    if (cfg.layer_uses_mhsa_ta(layer))
      mixed = task_attention(r.subspan(0, i + 1),
                             m.task_attention_view(layer, i, TaskAttentionKind::Mhsa))
                  .output;
    std::vector<Var> heads;
    for (std::size_t h = 0; h < Hi; ++h) {
      const auto& hp = block.mhsa.heads[h];
      Var x = mixed ? ops::slice_cols(*mixed, h * D, D)
                    : ops::layer_norm(ops::slice_cols(r[i], h * D, D), g.parameter(hp.ln.gain),
                                      g.parameter(hp.ln.bias));
      auto res = self_attention_head(x, hp, P);
      if (trace && trace->capture_spatial)
        detail::place_head_attention(*trace, layer, res.weights.value(), head_offset + h, P);
      heads.push_back(res.output);
    }
    head_offset += Hi;
    Var u = detail::concat_or_single(heads);
    s.push_back(ops::add(
        r[i], ops::linear(u, g.parameter(block.mhsa.proj.weight), g.parameter(block.mhsa.proj.bias))));
  }
  return s;
}

/// Spatial stage of the STA wiring: each expert's heads attend over the
/// (patch, head) tokens of that expert and all earlier ones, restricted to
/// the token groups allowed by `groups`.
inline std::vector<Var> spatial_task_attention(const CilModel& m, std::size_t layer,
                                               std::span<const Var> r, const GroupMask& groups,
                                               ForwardTrace* trace = nullptr) {
  const auto& cfg = m.config();
  Graph& g = *r[0].graph;
  const std::size_t D = cfg.head_dim, P = m.num_patches();
  const std::size_t N = r[0].rows(), B = N / P;
  std::vector<Var> qs, ks, vs;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& block = m.experts()[i].blocks.at(layer);
    for (std::size_t h = 0; h < block.mhsa.heads.size(); ++h) {
      const auto& hp = block.mhsa.heads[h];
      Var x = ops::layer_norm(ops::slice_cols(r[i], h * D, D), g.parameter(hp.ln.gain),
                              g.parameter(hp.ln.bias));
      qs.push_back(ops::matmul(x, g.parameter(hp.wq)));
      ks.push_back(ops::matmul(x, g.parameter(hp.wk)));
      vs.push_back(ops::matmul(x, g.parameter(hp.wv)));
    }
  }
  std::vector<Var> s;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    const auto& block = m.experts()[i].blocks.at(layer);
    const std::size_t Hi = block.mhsa.heads.size(), n = offset + Hi;
    std::vector<Var> qi(qs.begin() + offset, qs.begin() + n);
    std::vector<Var> ki(ks.begin(), ks.begin() + n), vi(vs.begin(), vs.begin() + n);
    // Rows within a sample: queries (p, local head), keys (p', head).
    Var q = ops::reshape(detail::concat_or_single(qi), N * Hi, D);
    Var k = ops::reshape(detail::concat_or_single(ki), N * n, D);
    Var v = ops::reshape(detail::concat_or_single(vi), N * n, D);
    ops::SoftmaxMask mask{P * Hi, P * n, std::vector<char>(P * Hi * P * n)};
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t hl = 0; hl < Hi; ++hl)
        for (std::size_t pk = 0; pk < P; ++pk)
          for (std::size_t hk = 0; hk < n; ++hk)
            mask.allowed[(p * Hi + hl) * (P * n) + pk * n + hk] =
                groups.allows(p == pk, offset + hl == hk) ? 1 : 0;
    Var a = ops::softmax_rows(ops::grouped_scores(q, k, B), std::sqrt(static_cast<double>(D)),
                              mask);
    if (trace && trace->capture_spatial) {
      const Tensor& w = a.value();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p)
          for (std::size_t hl = 0; hl < Hi; ++hl)
            for (std::size_t pk = 0; pk < P; ++pk)
              for (std::size_t hk = 0; hk < n; ++hk)
                trace->spatial[layer][b].at((offset + hl) * P + p, hk * P + pk) =
                    w.at((b * P + p) * Hi + hl, pk * n + hk);
    }
    Var u = ops::reshape(ops::grouped_mix(a, v, B), N, Hi * D);
    s.push_back(ops::add(r[i], ops::linear(u, g.parameter(block.mhsa.proj.weight),
                                           g.parameter(block.mhsa.proj.bias))));
    offset = n;
  }
  return s;
}

struct TokenHeadOutput {
  std::vector<Var> embeddings;  // e' per task
  Var embedding;
  Var logits;
  std::optional<Var> aux_logits;
};

/// Task tokens attend over the final patch features: e'^i is computed from
/// e^i and r_L of experts 1..i, classifier i reads e'^1..e'^i, and the
/// auxiliary head reads every e'.
inline TokenHeadOutput task_token_head(const CilModel& m, std::span<const Var> features,
                                       bool with_aux = true) {
  if (features.size() != m.tasks())
    throw ContractError("task_token_head: " + std::to_string(features.size()) +
                        " feature sets for " + std::to_string(m.tasks()) + " task tokens");
  Graph& g = *features[0].graph;
  const std::size_t D = m.config().head_dim, P = m.num_patches();
  const std::size_t B = features[0].rows() / P;
  TokenHeadOutput out;
  std::vector<Var> logits;
  for (std::size_t i = 0; i < m.tasks(); ++i) {
    const auto& e = m.experts()[i];
    const auto& h = e.head;
    std::vector<Var> visible(features.begin(), features.begin() + i + 1);
    Var kv = ops::layer_norm(detail::concat_or_single(visible), g.parameter(h.ln_patch.gain),
                             g.parameter(h.ln_patch.bias));
    Var k = ops::matmul(kv, g.parameter(h.wk));
    Var v = ops::matmul(kv, g.parameter(h.wv));
    Var tok = ops::repeat_rows(g.parameter(h.token), B);
    Var q = ops::matmul(
        ops::layer_norm(tok, g.parameter(h.ln_token.gain), g.parameter(h.ln_token.bias)),
        g.parameter(h.wq));
    std::vector<Var> heads;
    for (std::size_t j = 0; j < e.heads; ++j) {
      Var a = ops::softmax_rows(
          ops::grouped_scores(ops::slice_cols(q, j * D, D), ops::slice_cols(k, j * D, D), B),
          std::sqrt(static_cast<double>(D)));
      heads.push_back(ops::grouped_mix(a, ops::slice_cols(v, j * D, D), B));
    }
    Var att = detail::concat_or_single(heads);
    Var upd = ops::add(tok, ops::linear(att, g.parameter(h.out.weight), g.parameter(h.out.bias)));
    out.embeddings.push_back(
        ops::layer_norm(upd, g.parameter(h.ln_out.gain), g.parameter(h.ln_out.bias)));
    std::vector<Var> seen(out.embeddings.begin(), out.embeddings.end());
    logits.push_back(ops::linear(detail::concat_or_single(seen), g.parameter(e.classifier.weight),
                                 g.parameter(e.classifier.bias)));
  }
  out.embedding = detail::concat_or_single(out.embeddings);
  out.logits = detail::concat_or_single(logits);
  if (with_aux)
    out.aux_logits =
        ops::linear(out.embedding, g.parameter(m.aux().weight), g.parameter(m.aux().bias));
  return out;
}

/// Full forward pass over a batch of images [B x C x h x w].
inline ForwardOutput forward(Graph& g, const CilModel& m, const Tensor& images,
                             const ForwardOptions& opt = {}) {
  if (m.tasks() == 0) throw ContractError("forward: model has no experts");
  const auto& cfg = m.config();
  const std::size_t P = m.num_patches(), L = cfg.layers;
  const std::size_t B = images.rank() == 4 ? images.shape[0] : 1;
  const std::size_t H = m.layout().total_heads();
  ForwardTrace* tr = opt.trace;
  auto snapshot = [](const std::vector<Var>& v) {
    std::vector<Tensor> out;
    for (const auto& x : v) out.push_back(x.value());
    return out;
  };
  if (tr) {
    const bool capture = tr->capture_spatial;
    *tr = ForwardTrace{};
    tr->capture_spatial = capture;
    if (tr->capture_spatial)
      tr->spatial.assign(L, std::vector<Tensor>(B, Tensor::matrix(H * P, H * P)));
  }

  std::uint64_t mark = g.macs();
  std::vector<Var> r;
  for (const auto& e : m.experts())
    r.push_back(patch_embed(g, images, e.patch, m.positional(), cfg.patch_config(e.heads)));
  if (tr) {
    tr->embed_macs = g.macs() - mark;
    tr->r.push_back(snapshot(r));
  }

  const GroupMask groups = opt.sta_groups.value_or(group_mask(cfg.sta_variant));
  for (std::size_t l = 0; l < L; ++l) {
    mark = g.macs();
    std::vector<Var> s = cfg.strategy == Strategy::STA
                             ? spatial_task_attention(m, l, r, groups, tr)
                             : cross_task_mhsa(m, l, r, tr);
    std::vector<Var> next, os;
    std::vector<Tensor> attn;
    for (std::size_t i = 0; i < m.tasks(); ++i) {
      const auto& block = m.experts()[i].blocks[l];
      if (cfg.layer_uses_cta(l)) {
        auto t = tab_forward(m, l, i, std::span<const Var>(s).subspan(0, i + 1), os,
                             opt.attention);
        os.push_back(t.o);
        next.push_back(t.r);
        if (tr) attn.push_back(t.weights ? t.weights->value() : Tensor{});
      } else {
        Var o = mlp_stage1(s[i], block.mlp);
        os.push_back(o);
        next.push_back(ops::add(s[i], mlp_stage2(o, block.mlp)));
      }
    }
    r = std::move(next);
    if (tr) {
      tr->block_macs.push_back(g.macs() - mark);
      tr->s.push_back(snapshot(s));
      tr->o.push_back(snapshot(os));
      tr->task_attention.push_back(std::move(attn));
      tr->r.push_back(snapshot(r));
    }
  }

  mark = g.macs();
  auto head = task_token_head(m, r, opt.aux);
  if (tr) {
    tr->head_macs = g.macs() - mark;
    tr->tokens = snapshot(head.embeddings);
  }
  return ForwardOutput{r, head.embeddings, head.embedding, head.logits, head.aux_logits};
}

/// Per-task final features of an IA model.
inline std::vector<Var> ia_forward(Graph& g, const CilModel& m, const Tensor& images) {
  if (m.config().strategy != Strategy::IA) throw ContractError("ia_forward: model is not IA");
  return forward(g, m, images).features;
}

/// Per-task final features of an STA model with the given token groups.
inline std::vector<Var> sta_forward(Graph& g, const CilModel& m, const Tensor& images,
                                    const GroupMask& groups) {
  if (m.config().strategy != Strategy::STA) throw ContractError("sta_forward: model is not STA");
  ForwardOptions opt;
  opt.sta_groups = groups;
  return forward(g, m, images, opt).features;
}

inline std::vector<Var> sta_forward(Graph& g, const CilModel& m, const Tensor& images,
                                    StaVariant variant) {
  return sta_forward(g, m, images, group_mask(variant));
}

/// Logits of a batch without gradient tracking.
inline Tensor predict_logits(const CilModel& m, const Tensor& images) {
  Graph g;
  ForwardOptions opt;
  opt.aux = false;
  return forward(g, m, images, opt).logits.value();
}

}  // namespace dne
