// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dne/backbone.hpp"
#include "dne/tolerances.hpp"

using namespace dne;

namespace {

PatchEmbedConfig small_config(std::size_t image, std::size_t patch, std::size_t heads = 2) {
  PatchEmbedConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.in_channels = 3;
  c.head_dim = 4;
  c.heads = heads;
  return c;
}

// Straight-line per-head attention used as the oracle for mhsa_block.
Tensor naive_mhsa(const Tensor& r, const MhsaParams& p, std::size_t P) {
  const std::size_t H = p.heads.size(), d = p.heads[0].wq.rows(), N = r.rows(), B = N / P;
  Tensor u = Tensor::matrix(N, H * d);
  for (std::size_t h = 0; h < H; ++h) {
    const auto& hp = p.heads[h];
    std::vector<double> x(N * d), q(N * d), k(N * d), v(N * d);
    for (std::size_t n = 0; n < N; ++n) {
      double mean = 0, var = 0;
      for (std::size_t c = 0; c < d; ++c) mean += r.at(n, h * d + c);
      mean /= d;
      for (std::size_t c = 0; c < d; ++c) var += std::pow(r.at(n, h * d + c) - mean, 2);
      var /= d;
      for (std::size_t c = 0; c < d; ++c)
        x[n * d + c] = (r.at(n, h * d + c) - mean) / std::sqrt(var + 1e-5) * hp.ln.gain.data[c] +
                       hp.ln.bias.data[c];
      for (std::size_t c = 0; c < d; ++c) {
        double sq = 0, sk = 0, sv = 0;
        for (std::size_t e = 0; e < d; ++e) {
          sq += x[n * d + e] * hp.wq.at(e, c);
          sk += x[n * d + e] * hp.wk.at(e, c);
          sv += x[n * d + e] * hp.wv.at(e, c);
        }
        q[n * d + c] = sq;
        k[n * d + c] = sk;
        v[n * d + c] = sv;
      }
    }
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < P; ++i) {
        std::vector<double> w(P);
        double mx = -1e300, sum = 0;
        for (std::size_t j = 0; j < P; ++j) {
          double s = 0;
          for (std::size_t c = 0; c < d; ++c) s += q[(b * P + i) * d + c] * k[(b * P + j) * d + c];
          w[j] = s / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, w[j]);
        }
        for (auto& e : w) sum += (e = std::exp(e - mx));
        for (std::size_t c = 0; c < d; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j < P; ++j) acc += w[j] / sum * v[(b * P + j) * d + c];
          u.data[(b * P + i) * H * d + h * d + c] = acc;
        }
      }
  }
  Tensor s = r;
  const std::size_t W = H * d;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < W; ++c) {
      double acc = p.proj.bias.data[c];
      for (std::size_t e = 0; e < W; ++e) acc += u.data[n * W + e] * p.proj.weight.at(e, c);
      s.data[n * W + c] += acc;
    }
  return s;
}

}  // namespace

TEST(PatchEmbed, PatchCounts) {
  EXPECT_EQ(small_config(32, 4).num_patches(), 64u);
  EXPECT_EQ(small_config(4, 4).num_patches(), 1u);
  EXPECT_THROW(small_config(10, 4).validate(), ConfigError);
}

TEST(PatchEmbed, PatchifyOrdering) {
  auto cfg = small_config(4, 2);
  cfg.in_channels = 1;
  std::vector<double> px(16);
  for (std::size_t i = 0; i < 16; ++i) px[i] = static_cast<double>(i);
  const Tensor p = patchify(Tensor({1, 4, 4}, px), cfg);
  ASSERT_EQ(p.rows(), 4u);
  ASSERT_EQ(p.cols(), 4u);
  // Second patch covers columns 2..3 of rows 0..1.
  EXPECT_EQ(p.at(1, 0), 2.0);
  EXPECT_EQ(p.at(1, 1), 3.0);
  EXPECT_EQ(p.at(1, 2), 6.0);
  EXPECT_EQ(p.at(1, 3), 7.0);
  EXPECT_EQ(p.at(2, 0), 8.0);
}

TEST(PatchEmbed, StandardizedMeanImageGivesZeroTokens) {
  auto cfg = small_config(8, 4);
  Rng rng(1);
  Linear proj = init_linear(cfg.patch_features(), cfg.width(), rng);
  Graph g;
  const Tensor img({2, 3, 8, 8}, cfg.input_mean);
  Var t = patch_embed(g, img, proj, Tensor::matrix(cfg.num_patches(), cfg.head_dim), cfg);
  EXPECT_EQ(t.rows(), 2 * cfg.num_patches());
  EXPECT_EQ(t.cols(), cfg.width());
  for (double v : t.value().data) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, PositionalTableRepeatsAcrossHeadsAndSamples) {
  auto cfg = small_config(8, 4, 3);
  Rng rng(2);
  Linear proj{Tensor::matrix(cfg.patch_features(), cfg.width()), Tensor::matrix(1, cfg.width())};
  Tensor pos = random_matrix(cfg.num_patches(), cfg.head_dim, rng);
  Graph g;
  auto t = patch_embed(g, Tensor({2, 3, 8, 8}, 0.1), proj, pos, cfg).value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < cfg.num_patches(); ++p)
      for (std::size_t h = 0; h < 3; ++h)
        for (std::size_t c = 0; c < cfg.head_dim; ++c)
          EXPECT_EQ(t.at(b * cfg.num_patches() + p, h * cfg.head_dim + c), pos.at(p, c));
}

TEST(Mhsa, SinglePatchAttendsToItself) {
  Rng rng(3);
  auto p = init_mhsa(2, 4, rng);
  Graph g;
  std::vector<Var> weights;
  mhsa_block(g.constant(random_matrix(3, 8, rng)), p, 1, &weights);
  ASSERT_EQ(weights.size(), 2u);
  for (const auto& w : weights)
    for (double v : w.value().data) EXPECT_EQ(v, 1.0);
}

TEST(Mhsa, IdenticalTokensGiveUniformAttention) {
  Rng rng(4);
  auto p = init_mhsa(2, 4, rng);
  Tensor x = Tensor::matrix(5, 8);
  Tensor row = random_matrix(1, 8, rng);
  for (std::size_t r = 0; r < 5; ++r) std::copy(row.data.begin(), row.data.end(), x.data.begin() + r * 8);
  Graph g;
  std::vector<Var> weights;
  mhsa_block(g.constant(x), p, 5, &weights);
  for (const auto& w : weights)
    for (double v : w.value().data) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Mhsa, MatchesNaiveOracleAndRowsSumToOne) {
  Rng rng(5);
  auto p = init_mhsa(3, 4, rng);
  for (auto& h : p.heads)
    for (auto* t : {&h.wq, &h.wk}) for (auto& v : t->data) v *= 30.0;
  const std::size_t P = 6;
  Tensor r = random_matrix(2 * P, 12, rng);
  Graph g;
  std::vector<Var> weights;
  const Tensor s = mhsa_block(g.constant(r), p, P, &weights).value();
  const Tensor ref = naive_mhsa(r, p, P);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_NEAR(s.data[i], ref.data[i], Tolerances::block_oracle);
  for (const auto& w : weights)
    for (std::size_t row = 0; row < w.rows(); ++row) {
      double sum = 0;
      for (std::size_t c = 0; c < w.cols(); ++c) sum += w.value().at(row, c);
      EXPECT_NEAR(sum, 1.0, Tolerances::softmax_row_sum);
    }
}

TEST(Mhsa, ShapeErrors) {
  Rng rng(6);
  auto p = init_mhsa(2, 4, rng);
  Graph g;
  EXPECT_THROW(mhsa_block(g.constant(Tensor::matrix(4, 6)), p, 2), ShapeError);
  EXPECT_THROW(mhsa_block(g.constant(Tensor::matrix(5, 8)), p, 2), ShapeError);
}

TEST(Mlp, IntermediateWidth) {
  EXPECT_EQ(intermediate_width(32, 4.0), 128u);
  EXPECT_THROW(intermediate_width(3, 0.5), ConfigError);
}

TEST(Mlp, ZeroWeightsAreIdentity) {
  Rng rng(7);
  MlpParams p = init_mlp(8, 4.0, rng);
  for (auto* t : {&p.fc1.weight, &p.fc1.bias, &p.fc2.weight, &p.fc2.bias}) std::fill(t->data.begin(), t->data.end(), 0.0);
  MhsaParams m = init_mhsa(2, 4, rng);
  for (auto* t : {&m.proj.weight, &m.proj.bias}) std::fill(t->data.begin(), t->data.end(), 0.0);
  Tensor x = random_matrix(6, 8, rng);
  Graph g;
  EXPECT_EQ(mlp_block(g.constant(x), p).value().data, x.data);
  EXPECT_EQ(mhsa_block(g.constant(x), m, 3).value().data, x.data);
}

TEST(Mlp, MatchesStraightLineOracle) {
  Rng rng(8);
  MlpParams p = init_mlp(4, 2.0, rng);
  for (auto* t : {&p.fc1.weight, &p.fc2.weight}) for (auto& v : t->data) v *= 25.0;
  for (auto* t : {&p.fc1.bias, &p.ln1.bias, &p.ln2.bias}) for (auto& v : t->data) v = 0.1;
  Tensor x = random_matrix(3, 4, rng);
  Graph g;
  const Tensor y = mlp_block(g.constant(x), p).value();
  auto ln = [](std::vector<double> v, const LayerNormParams& n) {
    double mean = 0, var = 0;
    for (double e : v) mean += e;
    mean /= v.size();
    for (double e : v) var += (e - mean) * (e - mean);
    var /= v.size();
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = (v[i] - mean) / std::sqrt(var + 1e-5) * n.gain.data[i] + n.bias.data[i];
    return v;
  };
  auto fc = [](const std::vector<double>& v, const Linear& l) {
    std::vector<double> o(l.weight.cols());
    for (std::size_t c = 0; c < o.size(); ++c) {
      o[c] = l.bias.data[c];
      for (std::size_t e = 0; e < v.size(); ++e) o[c] += v[e] * l.weight.at(e, c);
    }
    return o;
  };
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> s(x.data.begin() + r * 4, x.data.begin() + r * 4 + 4);
    auto h = fc(ln(s, p.ln1), p.fc1);
    for (auto& e : h) e = e * 0.5 * std::erfc(-e / std::sqrt(2.0));
    auto o = fc(ln(h, p.ln2), p.fc2);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(r, c), s[c] + o[c], Tolerances::block_oracle);
  }
}
