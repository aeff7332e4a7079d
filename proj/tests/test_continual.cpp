// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dne/continual.hpp"
#include "dne/data.hpp"

using namespace dne;

namespace {

// Greedy herding recomputed from scratch: every candidate set mean is
// formed explicitly from the chosen indices.
std::vector<std::size_t> brute_force_herding(const std::vector<std::vector<double>>& f,
                                             std::size_t m) {
  const std::size_t n = f.size(), d = f[0].size();
  std::vector<double> mu(d, 0.0);
  for (const auto& x : f)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x[j] / static_cast<double>(n);
  std::vector<std::size_t> chosen;
  for (std::size_t k = 0; k < m; ++k) {
    std::size_t best = n;
    double best_dist = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      auto set = chosen;
      set.push_back(i);
      double dist = 0;
      for (std::size_t j = 0; j < d; ++j) {
        double mean = 0;
        for (auto s : set) mean += f[s][j];
        mean /= static_cast<double>(set.size());
        dist += (mu[j] - mean) * (mu[j] - mean);
      }
      if (best == n || dist < best_dist) {
        best = i;
        best_dist = dist;
      }
    }
    chosen.push_back(best);
  }
  return chosen;
}

ModelConfig tiny() {
  ModelConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.head_dim = 4;
  c.layers = 1;
  c.gamma = 2.0;
  return c;
}

TaskStream tiny_stream(std::uint64_t seed = 3) {
  SynthSpec s;
  s.classes = 4;
  s.train_per_class = 6;
  s.eval_per_class = 3;
  s.image_size = 8;
  s.seed = seed;
  return synth_stream(s, 2, 1);
}

Sample blank(int label) { return Sample{Tensor({3, 8, 8}, 0.5), label}; }

}  // namespace

TEST(Herding, MatchesBruteForceGreedy) {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(1000 + trial);
    const std::size_t n = 1 + rng() % 8, d = 1 + rng() % 4, m = rng() % (n + 1);
    std::vector<std::vector<double>> f(n, std::vector<double>(d));
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& x : f)
      for (auto& v : x) v = u(rng);
    EXPECT_EQ(herding_select(f, m), brute_force_herding(f, m)) << "trial " << trial;
  }
}

TEST(Herding, SelectingEverySampleIsAPermutation) {
  std::vector<std::vector<double>> f{{0}, {1}, {2}, {3}, {4}};
  auto idx = herding_select(f, 5);
  std::sort(idx.begin(), idx.end());
  EXPECT_EQ(idx, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(herding_select(f, 1), (std::vector<std::size_t>{2}));
  EXPECT_THROW(herding_select(f, 6), ContractError);
}

TEST(Buffer, QuotasSpreadTheRemainder) {
  EXPECT_EQ(class_quotas(10, 3), (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(class_quotas(40, 8), std::vector<std::size_t>(8, 5));
  EXPECT_EQ(class_quotas(2, 4), (std::vector<std::size_t>{1, 1, 0, 0}));
  EXPECT_TRUE(class_quotas(5, 0).empty());
}

TEST(Buffer, StaysWithinCapacityAndBalanced) {
  auto stream = tiny_stream();
  Rng rng(4);
  CilModel m(tiny());
  MemoryBuffer buf(7);
  for (std::size_t t = 0; t < stream.size(); ++t) {
    m.add_expert(1, stream[t].classes, rng);
    buf.update(m, stream[t]);
    EXPECT_LE(buf.size(), 7u);
    std::size_t lo = 100, hi = 0;
    for (int c : buf.classes()) {
      lo = std::min(lo, buf.count(c));
      hi = std::max(hi, buf.count(c));
    }
    EXPECT_LE(hi - lo, 1u);
  }
  EXPECT_EQ(buf.classes(), (std::vector<int>{0, 1, 2, 3}));
}

TEST(Buffer, BalancedSubsampleHistogram) {
  std::vector<Sample> current;
  for (int i = 0; i < 9; ++i) current.push_back(blank(5));
  for (int i = 0; i < 2; ++i) current.push_back(blank(6));
  MemoryBuffer empty(0);
  Rng rng(1);
  auto out = class_balanced_subsample(current, empty, 4, rng);
  std::map<int, int> hist;
  for (const auto& s : out) ++hist[s.label];
  EXPECT_EQ(hist[5], 4);
  EXPECT_EQ(hist[6], 2);
}

TEST(Losses, AuxiliaryLabels) {
  EXPECT_EQ(auxiliary_label(0, 3, 2), 0u);
  EXPECT_EQ(auxiliary_label(2, 3, 2), 0u);
  EXPECT_EQ(auxiliary_label(3, 3, 2), 1u);
  EXPECT_EQ(auxiliary_label(4, 3, 2), 2u);
  EXPECT_THROW(auxiliary_label(5, 3, 2), ContractError);
}

TEST(Losses, ZeroAuxAndDistillationWeightsLeaveCrossEntropy) {
  Rng rng(5);
  CilModel m(tiny());
  m.add_expert(1, {0, 1}, rng);
  m.add_expert(1, {2}, rng);
  Tensor x({2, 3, 8, 8}, 0.0);
  fill_uniform(x, rng, 0, 1);
  Graph g;
  auto out = forward(g, m, x);
  const std::vector<std::size_t> labels{0, 2};
  const Tensor old = random_matrix(2, 2, rng);
  auto terms = total_loss(out, labels, 2, 1, old, LossWeights{1.0, 0.0, 0.0});
  EXPECT_EQ(terms.total.value().data[0], ops::cross_entropy(out.logits, labels).value().data[0]);
  EXPECT_THROW(total_loss(out, labels, 2, 1, std::nullopt, LossWeights{}), ContractError);
}

TEST(Losses, DistillationZeroWithoutHistoryAndShiftInvariant) {
  Rng rng(6);
  Graph g;
  Var logits = g.constant(random_matrix(3, 5, rng));
  EXPECT_EQ(distillation_loss(logits, Tensor{}, 0).value().data[0], 0.0);
  Tensor old({3, 2}, 0.0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) old.data[r * 2 + c] = logits.value().at(r, c);
  EXPECT_NEAR(distillation_loss(logits, old, 2).value().data[0], 0.0, 1e-15);
  const double base = distillation_loss(logits, random_matrix(3, 2, rng), 2).value().data[0];
  Rng again(6);
  random_matrix(3, 5, again);
  Tensor shifted = random_matrix(3, 2, again);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 2; ++c) shifted.data[r * 2 + c] += 7.0 * static_cast<double>(r + 1);
  EXPECT_NEAR(distillation_loss(logits, shifted, 2).value().data[0], base, 1e-12);
  EXPECT_THROW(distillation_loss(logits, Tensor::matrix(3, 3), 2), ShapeError);
}

TEST(Optimizer, FrozenTensorsAreNotUpdated) {
  Tensor a({1, 2}, 1.0), b({1, 2}, 1.0);
  a.frozen = true;
  a.grad = {1.0, 1.0};
  b.grad = {1.0, -1.0};
  Sgd opt(0.5, 0.9);
  opt.step({&a, &b});
  EXPECT_EQ(a.data, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(b.data, (std::vector<double>{0.5, 1.5}));
  b.grad = {1.0, -1.0};
  opt.step({&b});
  EXPECT_DOUBLE_EQ(b.data[0], 0.5 - 0.5 * 1.9);
}

TEST(Metrics, AverageLastAndGap) {
  MetricsRecord r;
  r.accuracies = {80.0, 70.0, 61.92};
  EXPECT_NEAR(r.average(), 70.64, 1e-12);
  EXPECT_EQ(r.last(), 61.92);
  EXPECT_FALSE(r.d_gap());
  r.joint_last = 70.0;
  EXPECT_NEAR(*r.d_gap(), 8.08, 1e-12);
  EXPECT_THROW(MetricsRecord{}.last(), ContractError);
}

TEST(Stream, RejectsOverlapsAndForeignLabels) {
  Task a{{0, 1}, {blank(0)}, {}}, b{{1, 2}, {blank(2)}, {}};
  EXPECT_THROW(TaskStream({a, b}, 1), StreamError);
  Task c{{2}, {blank(3)}, {}};
  EXPECT_THROW(TaskStream({a, c}, 1), StreamError);
  Task d{{}, {}, {}};
  EXPECT_THROW(TaskStream({d}, 1), ConfigError);
}

TEST(Learner, OldExpertsStayFrozenAcrossTasks) {
  auto stream = tiny_stream(7);
  TrainConfig tc;
  tc.epochs = 2;
  tc.tune_epochs = 1;
  tc.buffer = 4;
  IncrementalLearner learner(tiny(), tc, 2, 1, 8);
  std::map<std::string, std::vector<double>> snapshot;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    learner.begin_task(stream[t]);
    learner.mutable_model().visit_parameters([&](const std::string& name, const Tensor& p) {
      if (snapshot.count(name) && name.rfind("aux.", 0) != 0) {
        EXPECT_TRUE(p.frozen) << name;
      }
    });
    learner.train_current(stream[t]);
    learner.model().visit_parameters([&](const std::string& name, const Tensor& p) {
      if (name.rfind("aux.", 0) == 0) return;
      auto it = snapshot.find(name);
      if (it != snapshot.end()) {
        EXPECT_EQ(it->second, p.data) << name;
      }
      snapshot[name] = p.data;
    });
    EXPECT_LE(learner.buffer().size(), 4u);
  }
  EXPECT_EQ(learner.model().tasks(), 3u);
  EXPECT_EQ(learner.model().layout().total_heads(), 4u);
}

TEST(Learner, RepeatedClassesAreRejected) {
  auto stream = tiny_stream(9);
  IncrementalLearner learner(tiny(), TrainConfig{}, 1, 1, 1);
  learner.begin_task(stream[0]);
  EXPECT_THROW(learner.begin_task(stream[0]), StreamError);
  EXPECT_THROW(IncrementalLearner(tiny(), TrainConfig{}, 0, 1, 1), ConfigError);
}
