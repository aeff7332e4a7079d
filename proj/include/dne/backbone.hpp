// SPDX-License-Identifier: Apache-2.0
//
// Vision-transformer building blocks for a single task expert: patch
// embedding, per-head self-attention fused by a task-level projection, and
// the two-stage MLP. Token matrices are [batch*patches x width], rows ordered
// (sample, patch).
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dne/ops.hpp"

namespace dne {

struct PatchEmbedConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t in_channels = 3;
  std::size_t head_dim = 16;
  std::size_t heads = 1;
  double input_mean = 0.5;  // pixels enter as (x - mean) / std
  double input_std = 0.25;

  void validate() const {
    if (image_size == 0 || patch_size == 0 || in_channels == 0 || head_dim == 0 || heads == 0)
      throw ConfigError("patch embedding sizes must be positive");
    if (!(input_std > 0.0)) throw ConfigError("input standard deviation must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("image size " + std::to_string(image_size) +
                        " is not divisible by patch size " + std::to_string(patch_size));
  }
  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_features() const { return in_channels * patch_size * patch_size; }
  std::size_t width() const { return head_dim * heads; }
};

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]
};

struct LayerNormParams {
  Tensor gain;  // [1 x d]
  Tensor bias;  // [1 x d]
};

/// One spatial attention head: its own normalization and D x D projections.
struct HeadAttention {
  LayerNormParams ln;
  Tensor wq, wk, wv;
};

struct MhsaParams {
  std::vector<HeadAttention> heads;
  Linear proj;  // fuses the heads of one task: [D*H x D*H]
};

/// Two-stage MLP. Either stage may be absent (empty tensors) when the
/// corresponding stage is replaced by task attention.
struct MlpParams {
  LayerNormParams ln1;
  Linear fc1;  // [W x gamma*W]
  LayerNormParams ln2;
  Linear fc2;  // [gamma*W x W]

  bool has_fc1() const { return !fc1.weight.empty(); }
  bool has_fc2() const { return !fc2.weight.empty(); }
};

struct TransformerBlockParams {
  MhsaParams mhsa;
  MlpParams mlp;
};

// -- initialization ---------------------------------------------------------

constexpr double kInitStd = 0.02;

inline Tensor init_weight(std::size_t in, std::size_t out, Rng& rng) {
  Tensor w = Tensor::matrix(in, out);
  fill_truncated_normal(w, rng, kInitStd);
  return w;
}

inline Linear init_linear(std::size_t in, std::size_t out, Rng& rng) {
  return Linear{init_weight(in, out, rng), Tensor::matrix(1, out)};
}

inline LayerNormParams init_layer_norm(std::size_t d) {
  return LayerNormParams{Tensor::matrix(1, d, 1.0), Tensor::matrix(1, d, 0.0)};
}

inline HeadAttention init_head(std::size_t d, Rng& rng) {
  HeadAttention h;
  h.ln = init_layer_norm(d);
  h.wq = init_weight(d, d, rng);
  h.wk = init_weight(d, d, rng);
  h.wv = init_weight(d, d, rng);
  return h;
}

inline MhsaParams init_mhsa(std::size_t heads, std::size_t d, Rng& rng) {
  MhsaParams p;
  for (std::size_t h = 0; h < heads; ++h) p.heads.push_back(init_head(d, rng));
  p.proj = init_linear(heads * d, heads * d, rng);
  return p;
}

inline std::size_t intermediate_width(std::size_t width, double gamma) {
  const double w = gamma * static_cast<double>(width);
  const auto r = static_cast<std::size_t>(std::llround(w));
  if (gamma <= 0.0 || std::abs(w - static_cast<double>(r)) > 1e-9 || r == 0)
    throw ConfigError("expansion factor " + std::to_string(gamma) +
                      " does not give an integral width for " + std::to_string(width));
  return r;
}

inline MlpParams init_mlp(std::size_t width, double gamma, Rng& rng, bool fc1 = true,
                          bool fc2 = true) {
  const std::size_t hidden = intermediate_width(width, gamma);
  MlpParams p;
  if (fc1) {
    p.ln1 = init_layer_norm(width);
    p.fc1 = init_linear(width, hidden, rng);
  }
  if (fc2) {
    p.ln2 = init_layer_norm(hidden);
    p.fc2 = init_linear(hidden, width, rng);
  }
  return p;
}

// -- forward pieces ---------------------------------------------------------

/// Splits images [B x C x h x w] (or a single [C x h x w]) into flattened
/// patches [B*P x C*p*p]; columns ordered (channel, row, column).
inline Tensor patchify(const Tensor& images, const PatchEmbedConfig& cfg) {
  cfg.validate();
  Shape s = images.shape;
  if (s.size() == 3) s.insert(s.begin(), 1);
  if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size ||
      s[3] != cfg.image_size)
    throw ShapeError("patchify: images " + shape_string(images.shape) + " for " +
                     std::to_string(cfg.in_channels) + "x" + std::to_string(cfg.image_size) +
                     "x" + std::to_string(cfg.image_size));
  const std::size_t B = s[0], C = s[1], n = cfg.image_size, ps = cfg.patch_size;
  const std::size_t side = cfg.patches_per_side(), P = cfg.num_patches();
  const std::size_t F = cfg.patch_features();
  Tensor out = Tensor::matrix(B * P, F);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        double* row = out.data.data() + (b * P + py * side + px) * F;
        std::size_t f = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t dy = 0; dy < ps; ++dy)
            for (std::size_t dx = 0; dx < ps; ++dx)
              row[f++] = images.data[((b * C + c) * n + py * ps + dy) * n + px * ps + dx];
      }
  return out;
}

/// Learned linear projection of every patch plus a positional table. The
/// table is [P x D] and is added to each of the expert's heads.
inline Var patch_embed(Graph& g, const Tensor& images, const Linear& proj, const Tensor& pos,
                       const PatchEmbedConfig& cfg) {
  Tensor patches = patchify(images, cfg);
  for (auto& v : patches.data) v = (v - cfg.input_mean) / cfg.input_std;
  const std::size_t P = cfg.num_patches();
  const std::size_t B = patches.rows() / P;
  if (proj.weight.rows() != cfg.patch_features() || proj.weight.cols() != cfg.width())
    throw ShapeError("patch_embed: projection " + shape_string(proj.weight.shape));
  if (pos.rows() != P || pos.cols() != cfg.head_dim)
    throw ShapeError("patch_embed: positional table " + shape_string(pos.shape));
  Var x = ops::linear(g.constant(patches), g.parameter(proj.weight), g.parameter(proj.bias));
  // [P x D] -> [B*P x D*H]: same table for every head and sample.
  Var p = g.parameter(pos);
  std::vector<Var> heads(cfg.heads, p);
  Var tiled = ops::reshape(ops::concat_cols(std::span<const Var>(heads)), 1, P * cfg.width());
  Var batch = ops::reshape(ops::repeat_rows(tiled, B), B * P, cfg.width());
  return ops::add(x, batch);
}

/// Output of one head's scaled dot-product attention; weights are [B*P x P].
struct HeadAttentionOutput {
  Var output;
  Var weights;
};

/// Self-attention of one head over the P patches of each sample. `input` is
/// the already-normalized head slice [B*P x D].
inline HeadAttentionOutput self_attention_head(Var input, const HeadAttention& head,
                                               std::size_t patches) {
  Graph& g = *input.graph;
  const std::size_t d = head.wq.rows();
  const std::size_t B = input.rows() / patches;
  Var q = ops::matmul(input, g.parameter(head.wq));
  Var k = ops::matmul(input, g.parameter(head.wk));
  Var v = ops::matmul(input, g.parameter(head.wv));
  Var a = ops::softmax_rows(ops::grouped_scores(q, k, B), std::sqrt(static_cast<double>(d)));
  return {ops::grouped_mix(a, v, B), a};
}

/// s = r + FC(u^1 + ... + u^H), u^j = SA^j(LN^j(r^j)), heads split by column.
/// `attention` receives each head's weights when non-null.
inline Var mhsa_block(Var r, const MhsaParams& p, std::size_t patches,
                      std::vector<Var>* attention = nullptr) {
  Graph& g = *r.graph;
  const std::size_t H = p.heads.size();
  if (H == 0) throw ConfigError("mhsa_block: no heads");
  const std::size_t d = p.heads[0].wq.rows();
  if (r.cols() != H * d)
    throw ShapeError("mhsa_block: input width " + std::to_string(r.cols()) + " for " +
                     std::to_string(H) + " heads of " + std::to_string(d));
  if (r.rows() % patches != 0)
    throw ShapeError("mhsa_block: " + std::to_string(r.rows()) + " rows for " +
                     std::to_string(patches) + " patches");
  std::vector<Var> outs;
  for (std::size_t h = 0; h < H; ++h) {
    const auto& head = p.heads[h];
    Var x = ops::layer_norm(ops::slice_cols(r, h * d, d), g.parameter(head.ln.gain),
                            g.parameter(head.ln.bias));
    auto res = self_attention_head(x, head, patches);
    if (attention) attention->push_back(res.weights);
    outs.push_back(res.output);
  }
  Var u = H == 1 ? outs[0] : ops::concat_cols(std::span<const Var>(outs));
  return ops::add(r, ops::linear(u, g.parameter(p.proj.weight), g.parameter(p.proj.bias)));
}

/// o = GELU(FC1(LN(s))).
inline Var mlp_stage1(Var s, const MlpParams& p) {
  Graph& g = *s.graph;
  Var x = ops::layer_norm(s, g.parameter(p.ln1.gain), g.parameter(p.ln1.bias));
  return ops::gelu(ops::linear(x, g.parameter(p.fc1.weight), g.parameter(p.fc1.bias)));
}

/// FC2(LN(o)), the residual update of the second stage.
inline Var mlp_stage2(Var o, const MlpParams& p) {
  Graph& g = *o.graph;
  Var x = ops::layer_norm(o, g.parameter(p.ln2.gain), g.parameter(p.ln2.bias));
  return ops::linear(x, g.parameter(p.fc2.weight), g.parameter(p.fc2.bias));
}

/// r = s + FC2(LN(GELU(FC1(LN(s))))).
inline Var mlp_block(Var s, const MlpParams& p) {
  return ops::add(s, mlp_stage2(mlp_stage1(s, p), p));
}

}  // namespace dne
