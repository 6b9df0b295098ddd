#include "cassle/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cassle/losses.hpp"
#include "cassle/rng.hpp"
#include "cassle/scenarios.hpp"

namespace cassle {

AccuracyMatrix::AccuracyMatrix(int tasks) {
  if (tasks < 1) throw config_error("accuracy matrix needs at least one task");
  values_ = Eigen::MatrixXd::Zero(tasks, tasks);
  present_.setConstant(tasks, tasks, false);
}

bool AccuracyMatrix::present(int j, int k) const {
  if (j < 0 || k < 0 || j >= tasks() || k >= tasks()) return false;
  return present_(j, k);
}

void AccuracyMatrix::set(int j, int k, Scalar accuracy) {
  if (j < 0 || k < 0 || j >= tasks() || k >= tasks())
    throw contract_error("accuracy matrix index out of range");
  if (accuracy < 0.0 || accuracy > 1.0)
    throw contract_error("accuracy must lie in [0, 1]");
  values_(j, k) = accuracy;
  present_(j, k) = true;
}

Scalar AccuracyMatrix::at(int j, int k) const {
  if (!present(j, k))
    throw contract_error("accuracy cell (" + std::to_string(j) + "," + std::to_string(k) +
                         ") missing");
  return values_(j, k);
}

void ProbeTrainConfig::validate() const {
  if (label_fraction <= 0.0 || label_fraction > 1.0)
    throw config_error("probe.label_fraction must be in (0, 1]");
  if (epochs < 1) throw config_error("probe.epochs must be >= 1");
  if (lr <= 0.0) throw config_error("probe.lr must be positive");
  if (batch_size < 1) throw config_error("probe.batch_size must be >= 1");
}

std::vector<Index> stratified_subset(const std::vector<int>& labels, int n_classes,
                                     Scalar fraction, uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    throw config_error("label fraction must be in (0, 1]");
  std::vector<std::vector<Index>> by_class(static_cast<size_t>(n_classes));
  for (size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n_classes) throw stratification_error("label out of range");
    by_class[static_cast<size_t>(y)].push_back(static_cast<Index>(i));
  }
  std::vector<Index> subset;
  for (int c = 0; c < n_classes; ++c) {
    auto& rows = by_class[static_cast<size_t>(c)];
    if (rows.empty())
      throw stratification_error("class " + std::to_string(c) + " missing from labeled subset");
    Rng rng(Rng::mix(seed, 0x57A7, static_cast<uint64_t>(c)));
    rng.shuffle(rows);
    const size_t take = static_cast<size_t>(
        std::ceil(fraction * static_cast<Scalar>(rows.size())));
    for (size_t i = 0; i < std::max<size_t>(take, 1); ++i) subset.push_back(rows[i]);
  }
  std::sort(subset.begin(), subset.end());
  return subset;
}

ProbeState train_linear_probe(const MatrixRM& features, const std::vector<int>& labels,
                              int n_classes, const ProbeTrainConfig& cfg) {
  cfg.validate();
  if (features.rows() != static_cast<Index>(labels.size()))
    throw shape_error("probe features/labels mismatch");
  if (n_classes < 2) throw config_error("probe needs at least two classes");

  const std::vector<Index> subset =
      stratified_subset(labels, n_classes, cfg.label_fraction, cfg.seed);

  const Index d = features.cols();
  Param weight;
  weight.name = "probe.W";
  weight.shape = {d, n_classes};
  weight.value = Array::Zero(d * n_classes);
  Param bias;
  bias.name = "probe.b";
  bias.shape = {n_classes};
  bias.value = Array::Zero(n_classes);

  Rng order_rng(Rng::mix(cfg.seed, 0x9C0BE));
  std::vector<Index> order = subset;
  Array w_vel = Array::Zero(weight.value.size());
  Array b_vel = Array::Zero(bias.value.size());

  const int batches_per_epoch =
      static_cast<int>((order.size() + static_cast<size_t>(cfg.batch_size) - 1) /
                       static_cast<size_t>(cfg.batch_size));
  const int total_steps = cfg.epochs * std::max(batches_per_epoch, 1);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      const Index bn = static_cast<Index>(end - at);
      MatrixRM x(bn, d);
      std::vector<int> y(static_cast<size_t>(bn));
      for (Index i = 0; i < bn; ++i) {
        const Index row = order[at + static_cast<size_t>(i)];
        x.row(i) = features.row(row);
        y[static_cast<size_t>(i)] = labels[static_cast<size_t>(row)];
      }

      Graph g;
      Tensor xt = g.constant_matrix(x);
      Tensor w = g.bind(&weight, weight.shape, weight.value, true);
      Tensor b = g.bind(&bias, bias.shape, bias.value, true);
      Tensor logits = add(matmul(xt, w), broadcast_to(b, Shape{bn, n_classes}));
      Tensor loss = softmax_cross_entropy(g, logits, y);
      GradientMap grads = g.backward(loss);

      const Scalar lr_now = cosine_lr(cfg.lr, step, total_steps);
      const Array* gw = grads.find_key(&weight);
      const Array* gb = grads.find_key(&bias);
      if (gw) {
        w_vel = cfg.momentum * w_vel + lr_now * *gw;
        weight.value -= w_vel;
      }
      if (gb) {
        b_vel = cfg.momentum * b_vel + lr_now * *gb;
        bias.value -= b_vel;
      }
      ++step;
    }
  }

  ProbeState probe;
  probe.weight = unflatten(weight.value, d, n_classes);
  probe.bias = Eigen::VectorXd(bias.value.matrix());
  probe.n_classes = n_classes;
  return probe;
}

Scalar evaluate_probe(const ProbeState& probe, const MatrixRM& features,
                      const std::vector<int>& labels) {
  if (features.rows() != static_cast<Index>(labels.size()))
    throw shape_error("probe features/labels mismatch");
  if (features.cols() != probe.weight.rows()) throw shape_error("probe feature dim mismatch");
  if (features.rows() == 0) return 0.0;
  Index correct = 0;
  for (Index i = 0; i < features.rows(); ++i) {
    Eigen::VectorXd logits = probe.weight.transpose() * features.row(i).transpose() + probe.bias;
    Index best = 0;
    logits.maxCoeff(&best);
    if (static_cast<int>(best) == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<Scalar>(correct) / static_cast<Scalar>(features.rows());
}

Scalar knn_evaluate(const MatrixRM& train_features, const std::vector<int>& train_labels,
                    const MatrixRM& test_features, const std::vector<int>& test_labels, int k,
                    Scalar temperature) {
  if (temperature <= 0.0) throw config_error("knn temperature must be positive");
  if (k < 1 || k > train_features.rows())
    throw config_error("knn k must lie in [1, train size]");
  if (train_features.rows() != static_cast<Index>(train_labels.size()) ||
      test_features.rows() != static_cast<Index>(test_labels.size()))
    throw shape_error("knn features/labels mismatch");

  auto normalize = [](const MatrixRM& m) {
    MatrixRM out = m;
    for (Index i = 0; i < out.rows(); ++i) {
      const Scalar n = out.row(i).norm();
      if (n > 1e-12) out.row(i) /= n;
    }
    return out;
  };
  const MatrixRM train = normalize(train_features);
  const MatrixRM test = normalize(test_features);
  const int n_classes = 1 + *std::max_element(train_labels.begin(), train_labels.end());

  Index correct = 0;
  std::vector<Index> idx(static_cast<size_t>(train.rows()));
  for (Index i = 0; i < test.rows(); ++i) {
    const Eigen::VectorXd sims = train * test.row(i).transpose();
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](Index a, Index b) {
      if (sims[a] != sims[b]) return sims[a] > sims[b];
      return a < b;
    });
    std::vector<Scalar> scores(static_cast<size_t>(n_classes), 0.0);
    for (int j = 0; j < k; ++j) {
      const Index t = idx[static_cast<size_t>(j)];
      scores[static_cast<size_t>(train_labels[static_cast<size_t>(t)])] +=
          std::exp(sims[t] / temperature);
    }
    int best = 0;
    for (int c = 1; c < n_classes; ++c)
      if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(best)]) best = c;
    if (best == test_labels[static_cast<size_t>(i)]) ++correct;
  }
  return test.rows() == 0 ? 0.0 : static_cast<Scalar>(correct) / static_cast<Scalar>(test.rows());
}

Scalar average_accuracy(const AccuracyMatrix& m) {
  const int t = m.tasks();
  Scalar sum = 0.0;
  for (int i = 0; i < t; ++i) sum += m.at(t - 1, i);
  return sum / static_cast<Scalar>(t);
}

Scalar forgetting(const AccuracyMatrix& m) {
  const int t = m.tasks();
  if (t < 2) throw undefined_metric("forgetting needs T >= 2");
  Scalar sum = 0.0;
  for (int i = 0; i < t - 1; ++i) {
    Scalar best_drop = m.at(0, i) - m.at(t - 1, i);
    for (int row = 1; row < t; ++row)
      best_drop = std::max(best_drop, m.at(row, i) - m.at(t - 1, i));
    sum += best_drop;
  }
  return sum / static_cast<Scalar>(t - 1);
}

Scalar forward_transfer(const AccuracyMatrix& m, const std::vector<Scalar>& random_baseline) {
  const int t = m.tasks();
  if (t < 2) throw undefined_metric("forward transfer needs T >= 2");
  if (static_cast<int>(random_baseline.size()) != t)
    throw contract_error("forward transfer needs one random baseline per task");
  Scalar sum = 0.0;
  for (int i = 1; i < t; ++i) sum += m.at(i - 1, i) - random_baseline[static_cast<size_t>(i)];
  return sum / static_cast<Scalar>(t - 1);
}

MetricsReport compute_metrics(const AccuracyMatrix& m, const std::vector<Scalar>& random_baseline) {
  MetricsReport report;
  report.average_accuracy = average_accuracy(m);
  if (m.tasks() >= 2) {
    report.forgetting = forgetting(m);
    report.forward_transfer = forward_transfer(m, random_baseline);
  }
  return report;
}

MatrixRM extract_features(EncoderState& enc, const MatrixRM& samples, Index eval_batch) {
  MatrixRM out(samples.rows(), enc.arch.feature_dim());
  for (Index at = 0; at < samples.rows(); at += eval_batch) {
    const Index bn = std::min(eval_batch, samples.rows() - at);
    Graph g;
    Tensor x = g.constant_matrix(samples.middleRows(at, bn));
    Encoded e = encode(g, enc, x);
    out.middleRows(at, bn) = unflatten(e.features.value(), bn, enc.arch.feature_dim());
  }
  return out;
}

}  // namespace cassle
