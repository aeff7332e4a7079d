// SPDX-License-Identifier: Apache-2.0
//
// Class-incremental training: task streams, the herding exemplar buffer,
// the three-term objective, class-balanced tuning and accuracy metrics.
#pragma once

#include <algorithm>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <unordered_map>
#include <vector>

#include "dne/expansion.hpp"

namespace dne {

struct Sample {
  Tensor image;  // [C x h x w], values in [0, 1]
  int label = 0;
};

struct Task {
  std::vector<int> classes;
  std::vector<Sample> train;
  std::vector<Sample> eval;
};

/// Ordered tasks with pairwise disjoint class sets.
class TaskStream {
 public:
  TaskStream() = default;
  TaskStream(std::vector<Task> tasks, std::size_t step_size)
      : tasks_(std::move(tasks)), step_size_(step_size) {
    std::set<int> seen;
    for (std::size_t t = 0; t < tasks_.size(); ++t) {
      const auto& task = tasks_[t];
      if (task.classes.empty()) throw ConfigError("task " + std::to_string(t) + " has no classes");
      std::set<int> own(task.classes.begin(), task.classes.end());
      for (int c : task.classes)
        if (!seen.insert(c).second)
          throw StreamError("class " + std::to_string(c) + " appears in more than one task");
      for (const auto* split : {&task.train, &task.eval})
        for (const auto& s : *split)
          if (!own.count(s.label))
            throw StreamError("sample label " + std::to_string(s.label) +
                              " is not a class of task " + std::to_string(t));
    }
  }

  const std::vector<Task>& tasks() const { return tasks_; }
  std::size_t size() const { return tasks_.size(); }
  std::size_t step_size() const { return step_size_; }
  const Task& operator[](std::size_t i) const { return tasks_.at(i); }

 private:
  std::vector<Task> tasks_;
  std::size_t step_size_ = 0;
};

inline Tensor stack_images(std::span<const Sample* const> samples) {
  if (samples.empty()) throw ContractError("stack_images: empty batch");
  Shape s = samples[0]->image.shape;
  s.insert(s.begin(), samples.size());
  Tensor out(s);
  const std::size_t n = samples[0]->image.numel();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i]->image.shape != samples[0]->image.shape)
      throw ShapeError("stack_images: mixed image shapes");
    std::copy_n(samples[i]->image.data.data(), n, out.data.data() + i * n);
  }
  return out;
}

// -- losses -----------------------------------------------------------------

struct LossWeights {
  double ce = 1.0;   // joint classifier
  double te = 0.1;   // task-expertise (auxiliary) head
  double dis = 1.0;  // distillation on previous classes

  void validate() const {
    if (ce < 0 || te < 0 || dis < 0) throw ConfigError("loss weights must be nonnegative");
  }
};

/// Auxiliary label of a sample whose joint-classifier index is
/// `label_index`: every previous class collapses to 0, the c-th class of the
/// current task becomes c + 1.
inline std::size_t auxiliary_label(std::size_t label_index, std::size_t prior_classes,
                                   std::size_t task_classes) {
  if (label_index >= prior_classes + task_classes)
    throw ContractError("auxiliary_label: class index " + std::to_string(label_index) +
                        " has not been seen");
  return label_index < prior_classes ? 0 : label_index - prior_classes + 1;
}

/// KL(softmax(new[:, :prior]) || softmax(old)). Zero when there are no
/// previous classes.
inline Var distillation_loss(Var new_logits, const Tensor& old_logits, std::size_t prior) {
  Graph& g = *new_logits.graph;
  if (prior == 0) return g.constant(Tensor::matrix(1, 1, 0.0));
  if (old_logits.rank() != 2 || old_logits.cols() != prior || old_logits.rows() != new_logits.rows())
    throw ShapeError("distillation_loss: old logits " + shape_string(old_logits.shape) +
                     " for " + std::to_string(prior) + " previous classes");
  return ops::kl_divergence_rows(ops::slice_cols(new_logits, 0, prior), old_logits);
}

struct LossTerms {
  Var total;
  double ce = 0, te = 0, dis = 0;
};

/// lambda_ce * CE(g(x), y) + lambda_te * CE(aux(x), aux_y) + lambda_dis * KL.
/// `old_logits` is required exactly when there are previous classes.
inline LossTerms total_loss(const ForwardOutput& out, std::span<const std::size_t> labels,
                            std::size_t prior_classes, std::size_t task_classes,
                            const std::optional<Tensor>& old_logits, const LossWeights& w) {
  Graph& g = *out.logits.graph;
  if ((prior_classes > 0) != old_logits.has_value())
    throw ContractError("total_loss: previous-model logits are required iff t > 1");
  LossTerms terms;
  Var ce = ops::cross_entropy(out.logits, labels);
  terms.ce = ce.value().data[0];
  Var total = ops::scale(ce, w.ce);
  if (w.te > 0.0) {
    if (!out.aux_logits) throw ContractError("total_loss: auxiliary logits missing");
    std::vector<std::size_t> aux(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
      aux[i] = auxiliary_label(labels[i], prior_classes, task_classes);
    Var te = ops::cross_entropy(*out.aux_logits, aux);
    terms.te = te.value().data[0];
    total = ops::add(total, ops::scale(te, w.te));
  }
  if (prior_classes > 0 && w.dis > 0.0) {
    Var dis = distillation_loss(out.logits, *old_logits, prior_classes);
    terms.dis = dis.value().data[0];
    total = ops::add(total, ops::scale(dis, w.dis));
  }
  (void)g;
  terms.total = total;
  return terms;
}

// -- exemplar memory --------------------------------------------------------

/// Greedy herding: each step adds the sample that brings the running
/// exemplar mean closest to the class mean. Ties go to the lowest index.
inline std::vector<std::size_t> herding_select(const std::vector<std::vector<double>>& features,
                                               std::size_t m) {
  const std::size_t n = features.size();
  if (m > n)
    throw ContractError("herding_select: " + std::to_string(m) + " exemplars from " +
                        std::to_string(n) + " samples");
  if (m == 0) return {};
  const std::size_t d = features[0].size();
  std::vector<double> mu(d, 0.0), acc(d, 0.0);
  for (const auto& f : features)
    for (std::size_t j = 0; j < d; ++j) mu[j] += f[j];
  for (auto& v : mu) v /= static_cast<double>(n);
  std::vector<char> taken(n, 0);
  std::vector<std::size_t> picked;
  for (std::size_t k = 1; k <= m; ++k) {
    std::size_t best = n;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (acc[j] + features[i][j]) / static_cast<double>(k);
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = i;
      }
    }
    taken[best] = 1;
    picked.push_back(best);
    for (std::size_t j = 0; j < d; ++j) acc[j] += features[best][j];
  }
  return picked;
}

/// Per-class quota: floor(S / classes) for all, one extra for the earliest
/// classes until S is used up.
inline std::vector<std::size_t> class_quotas(std::size_t capacity, std::size_t classes) {
  if (classes == 0) return {};
  std::vector<std::size_t> q(classes, capacity / classes);
  for (std::size_t i = 0; i < capacity % classes; ++i) ++q[i];
  return q;
}

/// Embeddings e' of samples, computed in batches without gradients.
inline std::vector<std::vector<double>> embed_samples(const CilModel& m,
                                                      std::span<const Sample* const> samples,
                                                      std::size_t batch = 64) {
  std::vector<std::vector<double>> out;
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    const std::size_t n = std::min(batch, samples.size() - b);
    Graph g;
    ForwardOptions opt;
    opt.aux = false;
    auto f = forward(g, m, stack_images(samples.subspan(b, n)), opt);
    const Tensor& e = f.embedding.value();
    for (std::size_t i = 0; i < n; ++i)
      out.emplace_back(e.data.begin() + i * e.cols(), e.data.begin() + (i + 1) * e.cols());
  }
  return out;
}

/// Capacity-bounded exemplar store, filled by herding.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, v] : per_class_) n += v.size();
    return n;
  }
  bool empty() const { return size() == 0; }
  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, v] : per_class_) out.push_back(c);
    return out;
  }
  std::size_t count(int cls) const {
    for (const auto& [c, v] : per_class_)
      if (c == cls) return v.size();
    return 0;
  }
  const std::vector<Sample>& exemplars(int cls) const {
    for (const auto& [c, v] : per_class_)
      if (c == cls) return v;
    throw ContractError("buffer has no class " + std::to_string(cls));
  }

  std::vector<Sample> samples() const {
    std::vector<Sample> out;
    for (const auto& [c, v] : per_class_) out.insert(out.end(), v.begin(), v.end());
    return out;
  }

  /// Shrinks the stored classes to the new quotas (keeping herding order)
  /// and herds exemplars of the task's classes from `model` embeddings.
  void update(const CilModel& model, const Task& task) {
    const std::size_t total = per_class_.size() + task.classes.size();
    const auto quotas = class_quotas(capacity_, total);
    for (std::size_t i = 0; i < per_class_.size(); ++i)
      if (per_class_[i].second.size() > quotas[i]) per_class_[i].second.resize(quotas[i]);
    for (std::size_t c = 0; c < task.classes.size(); ++c) {
      const int cls = task.classes[c];
      std::vector<const Sample*> pool;
      for (const auto& s : task.train)
        if (s.label == cls) pool.push_back(&s);
      const std::size_t quota = quotas[per_class_.size()];
      std::vector<Sample> chosen;
      if (quota > 0 && !pool.empty()) {
        const auto feats = embed_samples(model, pool);
        for (auto idx : herding_select(feats, std::min(quota, pool.size())))
          chosen.push_back(*pool[idx]);
      }
      per_class_.emplace_back(cls, std::move(chosen));
    }
  }

 private:
  std::size_t capacity_;
  std::vector<std::pair<int, std::vector<Sample>>> per_class_;  // in arrival order
};

/// Tuning set where every class has `quota` samples: a seeded uniform
/// subsample of each current class plus the first `quota` exemplars of each
/// buffered class. Classes with fewer samples contribute all of them.
inline std::vector<Sample> class_balanced_subsample(const std::vector<Sample>& current,
                                                    const MemoryBuffer& buffer,
                                                    std::size_t quota, Rng& rng) {
  std::vector<Sample> out;
  for (int cls : buffer.classes()) {
    const auto& ex = buffer.exemplars(cls);
    out.insert(out.end(), ex.begin(), ex.begin() + std::min(quota, ex.size()));
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < current.size(); ++i) by_class[current[i].label].push_back(i);
  for (auto& [cls, idx] : by_class) {
    if (idx.size() > quota) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(quota);
      std::sort(idx.begin(), idx.end());
    }
    for (auto i : idx) out.push_back(current[i]);
  }
  return out;
}

// -- optimization -------------------------------------------------------------

/// SGD with optional momentum and L2 weight decay. Frozen tensors are
/// skipped even if they carry a gradient.
class Sgd {
 public:
  Sgd(double lr, double momentum = 0.0, double weight_decay = 0.0)
      : lr_(lr), momentum_(momentum), wd_(weight_decay) {}

  void step(const std::vector<Tensor*>& params) {
    for (Tensor* p : params) {
      if (p->frozen || !p->has_grad()) continue;
      auto& vel = velocity_[p];
      if (momentum_ != 0.0 && vel.size() != p->numel()) vel.assign(p->numel(), 0.0);
      for (std::size_t i = 0; i < p->numel(); ++i) {
        double g = p->grad[i] + wd_ * p->data[i];
        if (momentum_ != 0.0) {
          vel[i] = momentum_ * vel[i] + g;
          g = vel[i];
        }
        p->data[i] -= lr_ * g;
      }
      p->zero_grad();
    }
  }

 private:
  double lr_, momentum_, wd_;
  std::unordered_map<const Tensor*, std::vector<double>> velocity_;
};

// -- training loop ------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t tune_epochs = 10;
  std::size_t batch_size = 16;
  double lr = 0.02;
  double tune_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  LossWeights weights;
  std::size_t buffer = 40;
  bool balanced_tuning = true;
};

/// Hyperparameters of the full-scale setting.
struct PaperDefaults {
  static constexpr std::size_t epochs = 500;
  static constexpr std::size_t tune_epochs = 20;
  static constexpr double lr = 2.5e-4;
  static constexpr double weight_decay = 1e-6;
  static constexpr std::size_t batch_size = 256;
  static constexpr std::size_t buffer = 2000;
  static constexpr std::size_t first_heads = 12;
  static constexpr std::size_t head_dim = 32;
  static constexpr std::size_t layers = 6;
  static constexpr double ce = 1.0, te = 0.1, dis = 1.0;
};

struct MetricsRecord {
  std::vector<double> accuracies;       // A_i in percent, all seen classes
  std::vector<double> first_task;       // accuracy on task-1 classes after each step
  std::vector<std::size_t> parameters;  // model size after each step
  std::optional<double> joint_last;     // LA of the jointly trained reference
  double flops = 0.0;                   // per-image forward FLOPs of the final model

  double last() const {
    if (accuracies.empty()) throw ContractError("no accuracies recorded");
    return accuracies.back();
  }
  double average() const {
    if (accuracies.empty()) throw ContractError("no accuracies recorded");
    return std::accumulate(accuracies.begin(), accuracies.end(), 0.0) /
           static_cast<double>(accuracies.size());
  }
  std::optional<double> d_gap() const {
    if (!joint_last) return std::nullopt;
    return *joint_last - last();
  }
};

/// Top-1 accuracy (percent) of `m` over `samples`.
inline double accuracy(const CilModel& m, std::span<const Sample* const> samples,
                       std::size_t batch = 64) {
  if (samples.empty()) return 0.0;
  const auto order = m.class_order();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < samples.size(); b += batch) {
    const std::size_t n = std::min(batch, samples.size() - b);
    auto chunk = samples.subspan(b, n);
    const Tensor logits = predict_logits(m, stack_images(chunk));
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = logits.data.data() + i * logits.cols();
      const auto best = static_cast<std::size_t>(std::max_element(row, row + logits.cols()) - row);
      if (order[best] == chunk[i]->label) ++correct;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(samples.size());
}

/// Drives one model through a task stream.
class IncrementalLearner {
 public:
  IncrementalLearner(ModelConfig model, TrainConfig train, std::size_t first_heads,
                     std::size_t heads_per_task, std::uint64_t seed)
      : model_(std::move(model)),
        train_(std::move(train)),
        first_heads_(first_heads),
        step_heads_(heads_per_task),
        rng_(seed),
        buffer_(train_.buffer) {
    train_.weights.validate();
    if (first_heads_ == 0 || step_heads_ == 0) throw ConfigError("head counts must be positive");
    if (train_.batch_size == 0) throw ConfigError("batch size must be positive");
  }

  const CilModel& model() const { return model_; }
  CilModel& mutable_model() { return model_; }
  const MemoryBuffer& buffer() const { return buffer_; }
  const std::optional<CilModel>& previous_model() const { return old_; }

  /// Snapshots the current model as the distillation teacher and grows a
  /// new expert for the task's classes.
  void begin_task(const Task& task) {
    if (task.train.empty()) throw ConfigError("task has no training samples");
    for (int c : task.classes)
      for (int seen : model_.class_order())
        if (c == seen) throw StreamError("class " + std::to_string(c) + " was already learned");
    if (model_.tasks() > 0) {
      old_ = model_;
    } else {
      old_.reset();
    }
    model_.add_expert(model_.tasks() == 0 ? first_heads_ : step_heads_, task.classes, rng_);
  }

  /// Phase 1 on task data plus memory, phase 2 class-balanced tuning of the
  /// token head and classifier, then the buffer update.
  void train_current(const Task& task) {
    std::vector<Sample> pool = task.train;
    const auto mem = buffer_.samples();
    pool.insert(pool.end(), mem.begin(), mem.end());
    run_epochs(pool, train_.epochs, train_.lr, train_.weights);

    if (train_.balanced_tuning && train_.tune_epochs > 0 &&
        (model_.tasks() == 1 || !buffer_.empty())) {
      const auto quota = train_.buffer / model_.total_classes();
      if (quota > 0) {
        auto tuning = class_balanced_subsample(task.train, buffer_, quota, rng_);
        freeze_backbone_of_current();
        LossWeights w = train_.weights;
        w.te = 0.0;
        run_epochs(tuning, train_.tune_epochs, train_.tune_lr, w);
      }
    }
    buffer_.update(model_, task);
  }

  double evaluate(std::span<const Task> seen) const {
    std::vector<const Sample*> all;
    for (const auto& t : seen)
      for (const auto& s : t.eval) all.push_back(&s);
    return accuracy(model_, all);
  }

  MetricsRecord run(const TaskStream& stream) {
    MetricsRecord rec;
    for (std::size_t t = 0; t < stream.size(); ++t) {
      begin_task(stream[t]);
      train_current(stream[t]);
      rec.accuracies.push_back(evaluate(std::span<const Task>(stream.tasks()).subspan(0, t + 1)));
      rec.first_task.push_back(evaluate(std::span<const Task>(stream.tasks()).subspan(0, 1)));
      rec.parameters.push_back(model_.parameter_count());
    }
    return rec;
  }

 private:
  void freeze_backbone_of_current() {
    const std::string own = "task" + std::to_string(model_.tasks() - 1) + ".";
    model_.visit_parameters([&](const std::string& name, Tensor& t) {
      const bool head = name.rfind(own + "head.", 0) == 0 || name.rfind(own + "classifier.", 0) == 0;
      if (!head) t.frozen = true;
    });
  }

  void run_epochs(const std::vector<Sample>& data, std::size_t epochs, double lr,
                  const LossWeights& w) {
    if (data.empty() || epochs == 0) return;
    Sgd opt(lr, train_.momentum, train_.weight_decay);
    auto params = model_.trainable_parameters();
    const auto order = model_.class_order();
    std::unordered_map<int, std::size_t> index;
    for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = i;
    const std::size_t task_classes = model_.experts().back().classes.size();
    const std::size_t prior = order.size() - task_classes;
    // The teacher is fixed for the whole task, so its logits are computed once.
    Tensor teacher;
    if (prior > 0) {
      if (!old_) throw ContractError("previous classes exist but no teacher model is stored");
      teacher = Tensor::matrix(data.size(), prior);
      for (std::size_t b = 0; b < data.size(); b += 64) {
        std::vector<const Sample*> chunk;
        for (std::size_t i = b; i < std::min(b + 64, data.size()); ++i) chunk.push_back(&data[i]);
        const Tensor t = predict_logits(*old_, stack_images(chunk));
        std::copy(t.data.begin(), t.data.end(), teacher.data.begin() + b * prior);
      }
    }
    std::vector<std::size_t> perm(data.size());
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t e = 0; e < epochs; ++e) {
      std::shuffle(perm.begin(), perm.end(), rng_);
      for (std::size_t b = 0; b < perm.size(); b += train_.batch_size) {
        const std::size_t n = std::min(train_.batch_size, perm.size() - b);
        std::vector<const Sample*> batch;
        std::vector<std::size_t> labels;
        for (std::size_t i = 0; i < n; ++i) {
          const Sample& s = data[perm[b + i]];
          batch.push_back(&s);
          labels.push_back(index.at(s.label));
        }
        const Tensor images = stack_images(batch);
        std::optional<Tensor> old_logits;
        if (prior > 0) {
          old_logits = Tensor::matrix(n, prior);
          for (std::size_t i = 0; i < n; ++i)
            std::copy_n(teacher.data.begin() + perm[b + i] * prior, prior,
                        old_logits->data.begin() + i * prior);
        }
        Graph g;
        ForwardOptions fo;
        fo.aux = w.te > 0.0;
        auto out = forward(g, model_, images, fo);
        auto loss = total_loss(out, labels, prior, task_classes, old_logits, w);
        g.backward(loss.total);
        opt.step(params);
      }
    }
  }

  CilModel model_;
  TrainConfig train_;
  std::size_t first_heads_, step_heads_;
  Rng rng_;
  MemoryBuffer buffer_;
  std::optional<CilModel> old_;
};

}  // namespace dne
