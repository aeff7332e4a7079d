// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of reverse-mode gradients. Every tensor
// under test is bound with Graph::parameter, so its analytic gradient lands
// in Tensor::grad; the numeric estimate perturbs the tensor in place.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dne/expansion.hpp"
#include "dne/tolerances.hpp"

namespace dne {

struct GradCheckResult {
  std::string name;
  std::size_t points = 0;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// |a - n| / max(|a|, |n|, floor).
inline double gradient_relative_error(double analytic, double numeric,
                                      double floor = Tolerances::fd_floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

using LossBuilder = std::function<Var(Graph&)>;

/// Compares analytic and central-difference gradients of `loss` with respect
/// to `points` seeded entries drawn across all tensors in `wrt`.
inline GradCheckResult check_gradients(const std::string& name, const std::vector<Tensor*>& wrt,
                                       const LossBuilder& loss, Rng& rng,
                                       std::size_t points = Tolerances::fd_points,
                                       double step = Tolerances::fd_step,
                                       double tolerance = Tolerances::fd_relative) {
  if (wrt.empty()) throw ContractError("check_gradients: nothing to differentiate");
  std::size_t total = 0;
  for (Tensor* t : wrt) {
    if (t->frozen) throw ContractError("check_gradients: " + name + " lists a frozen tensor");
    t->zero_grad();
    total += t->numel();
  }
  {
    Graph g;
    g.backward(loss(g));
  }
  auto value = [&] {
    Graph g;
    return loss(g).value().data[0];
  };
  GradCheckResult r;
  r.name = name;
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (std::size_t n = 0; n < points; ++n) {
    std::size_t flat = pick(rng);
    Tensor* t = wrt.front();
    for (Tensor* c : wrt) {
      if (flat < c->numel()) {
        t = c;
        break;
      }
      flat -= c->numel();
    }
    const double analytic = t->has_grad() ? t->grad[flat] : 0.0;
    const double saved = t->data[flat];
    t->data[flat] = saved + step;
    const double up = value();
    t->data[flat] = saved - step;
    const double down = value();
    t->data[flat] = saved;
    const double numeric = (up - down) / (2.0 * step);
    r.max_relative_error = std::max(r.max_relative_error, gradient_relative_error(analytic, numeric));
    ++r.points;
  }
  for (Tensor* t : wrt) t->grad.clear();
  r.passed = r.max_relative_error < tolerance;
  return r;
}

namespace detail {

/// Scalar probe sum(x * R) with a fixed random R, so every output entry
/// contributes a distinct weight to the checked gradient.
inline Var probe(Var x, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_matrix(x.rows(), x.cols(), rng);
  return ops::sum(ops::mul(x, x.graph->constant(std::move(w))));
}

inline Tensor uniform(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return random_matrix(r, c, rng, lo, hi);
}

/// Makes every parameter of `m` trainable and returns pointers to them.
inline std::vector<Tensor*> unfreeze(CilModel& m) {
  std::vector<Tensor*> out;
  m.visit_parameters([&](const std::string&, Tensor& t) {
    t.frozen = false;
    out.push_back(&t);
  });
  return out;
}

/// Perturbs layer-norm gains and biases away from 1/0 so their gradients
/// are exercised in a generic configuration.
inline void jitter(CilModel& m, Rng& rng) {
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  m.visit_parameters([&](const std::string& name, Tensor& t) {
    if (name.find(".ln") != std::string::npos || name.find(".lambda") != std::string::npos)
      for (auto& x : t.data) x += u(rng);
    // Larger weights make attention weights far from uniform.
    if (name.find(".wq") != std::string::npos || name.find(".wk") != std::string::npos)
      for (auto& x : t.data) x *= 20.0;
  });
}

}  // namespace detail

/// Gradient checks for every differentiable op and the composite blocks.
inline std::vector<GradCheckResult> gradient_suite(std::uint64_t seed = 7) {
  using detail::probe;
  using detail::uniform;
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, std::vector<Tensor*> wrt, const LossBuilder& f) {
    out.push_back(check_gradients(name, wrt, f, rng));
  };

  Tensor a = uniform(3, 4, rng), b = uniform(4, 5, rng), c = uniform(3, 4, rng), bias = uniform(1, 4, rng);
  run("matmul", {&a, &b}, [&](Graph& g) {
    return probe(ops::matmul(g.parameter(a), g.parameter(b)), 1);
  });
  run("add", {&a, &c}, [&](Graph& g) { return probe(ops::add(g.parameter(a), g.parameter(c)), 2); });
  run("add_bias", {&a, &bias}, [&](Graph& g) {
    return probe(ops::add_bias(g.parameter(a), g.parameter(bias)), 3);
  });
  run("mul", {&a, &c}, [&](Graph& g) { return probe(ops::mul(g.parameter(a), g.parameter(c)), 4); });
  run("scale", {&a}, [&](Graph& g) { return probe(ops::scale(g.parameter(a), -1.7), 5); });
  Tensor wide = uniform(3, 6, rng, -3.0, 3.0);
  run("gelu", {&wide}, [&](Graph& g) { return probe(ops::gelu(g.parameter(wide)), 6); });
  Tensor gain = uniform(1, 6, rng, 0.5, 1.5), lnb = uniform(1, 6, rng);
  run("layer_norm", {&wide, &gain, &lnb}, [&](Graph& g) {
    return probe(ops::layer_norm(g.parameter(wide), g.parameter(gain), g.parameter(lnb)), 7);
  });
  run("softmax_rows", {&wide}, [&](Graph& g) {
    return probe(ops::softmax_rows(g.parameter(wide), 1.3), 8);
  });
  ops::SoftmaxMask mask{3, 6, {1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 0}};
  run("softmax_rows_masked", {&wide}, [&](Graph& g) {
    return probe(ops::softmax_rows(g.parameter(wide), 0.8, mask), 9);
  });
  Tensor q = uniform(6, 3, rng), k = uniform(8, 3, rng), w = uniform(6, 4, rng), v = uniform(8, 5, rng);
  run("grouped_scores", {&q, &k}, [&](Graph& g) {
    return probe(ops::grouped_scores(g.parameter(q), g.parameter(k), 2), 10);
  });
  run("grouped_mix", {&w, &v}, [&](Graph& g) {
    return probe(ops::grouped_mix(g.parameter(w), g.parameter(v), 2), 11);
  });
  run("concat_cols", {&a, &wide}, [&](Graph& g) {
    return probe(ops::concat_cols({g.parameter(a), g.parameter(wide)}), 12);
  });
  run("slice_cols", {&wide}, [&](Graph& g) { return probe(ops::slice_cols(g.parameter(wide), 2, 3), 13); });
  run("reshape", {&wide}, [&](Graph& g) { return probe(ops::reshape(g.parameter(wide), 9, 2), 14); });
  run("repeat_rows", {&bias}, [&](Graph& g) { return probe(ops::repeat_rows(g.parameter(bias), 3), 15); });
  Tensor scales = uniform(1, 3, rng);
  run("scale_col_blocks", {&wide, &scales}, [&](Graph& g) {
    return probe(ops::scale_col_blocks(g.parameter(wide), g.parameter(scales), 2), 16);
  });
  run("mean", {&wide}, [&](Graph& g) {
    Var x = g.parameter(wide);
    return ops::mean(ops::mul(x, x));
  });
  const std::vector<std::size_t> labels{2, 0, 5};
  run("cross_entropy", {&wide}, [&](Graph& g) { return ops::cross_entropy(g.parameter(wide), labels); });
  const Tensor target = uniform(3, 6, rng, -2.0, 2.0);
  run("kl_divergence_rows", {&wide}, [&](Graph& g) {
    return ops::kl_divergence_rows(g.parameter(wide), target);
  });

  // Composite blocks on a small model: P = 4 patches, D = 4.
  ModelConfig mc;
  mc.image_size = 4;
  mc.patch_size = 2;
  mc.in_channels = 1;
  mc.head_dim = 4;
  mc.layers = 1;
  mc.gamma = 2.0;
  const std::size_t P = mc.num_patches(), D = mc.head_dim, B = 2;

  Rng init(seed + 1);
  MhsaParams mh = init_mhsa(2, D, init);
  for (auto& h : mh.heads)
    for (Tensor* t : {&h.wq, &h.wk}) for (auto& x : t->data) x *= 20.0;
  Tensor tokens = uniform(B * P, 2 * D, rng);
  std::vector<Tensor*> mh_wrt{&tokens, &mh.proj.weight, &mh.proj.bias};
  for (auto& h : mh.heads)
    for (Tensor* t : {&h.ln.gain, &h.ln.bias, &h.wq, &h.wk, &h.wv}) mh_wrt.push_back(t);
  run("mhsa_block", mh_wrt, [&](Graph& g) { return probe(mhsa_block(g.parameter(tokens), mh, P), 17); });

  MlpParams mlp = init_mlp(2 * D, 2.0, init);
  run("mlp_block", {&tokens, &mlp.ln1.gain, &mlp.fc1.weight, &mlp.fc1.bias, &mlp.ln2.bias,
                    &mlp.fc2.weight, &mlp.fc2.bias},
      [&](Graph& g) { return probe(mlp_block(g.parameter(tokens), mlp), 18); });

  for (Strategy s : {Strategy::DNE, Strategy::STA, Strategy::IA}) {
    ModelConfig cfg = mc;
    cfg.strategy = s;
    CilModel m(cfg);
    m.add_expert(2, {0, 1}, init);
    m.add_expert(1, {2}, init);
    detail::jitter(m, init);
    auto params = detail::unfreeze(m);
    const Tensor images = uniform(B * cfg.in_channels, cfg.image_size * cfg.image_size, rng, 0.0, 1.0);
    Tensor img({B, cfg.in_channels, cfg.image_size, cfg.image_size}, images.data);
    const std::vector<std::size_t> y{0, 2};
    const std::string tag = s == Strategy::DNE ? "dne" : s == Strategy::STA ? "sta" : "ia";
    run("model_forward_" + tag, params, [&](Graph& g) {
      auto f = forward(g, m, img);
      return ops::add(ops::cross_entropy(f.logits, y), probe(*f.aux_logits, 19));
    });
  }

  // Task-attention block in isolation, gradients through the input features.
  {
    ModelConfig cfg = mc;
    CilModel m(cfg);
    m.add_expert(2, {0, 1}, init);
    m.add_expert(1, {2}, init);
    detail::jitter(m, init);
    auto params = detail::unfreeze(m);
    Tensor s0 = uniform(B * P, 2 * D, rng), s1 = uniform(B * P, D, rng);
    std::vector<Tensor*> wrt{&s0, &s1};
    wrt.insert(wrt.end(), params.begin(), params.end());
    run("dne_block", wrt, [&](Graph& g) {
      std::vector<Var> s{g.parameter(s0), g.parameter(s1)};
      auto first = tab_forward(m, 0, 0, std::span<const Var>(s).subspan(0, 1), {});
      std::vector<Var> o_old{first.o};
      auto second = tab_forward(m, 0, 1, s, o_old);
      return ops::add(probe(first.r, 20), probe(second.r, 21));
    });
    run("task_token_head", wrt, [&](Graph& g) {
      std::vector<Var> f{g.parameter(s0), g.parameter(s1)};
      auto h = task_token_head(m, f, true);
      return ops::add(probe(h.logits, 22), probe(*h.aux_logits, 23));
    });
  }
  return out;
}

}  // namespace dne
