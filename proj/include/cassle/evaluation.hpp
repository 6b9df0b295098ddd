#pragma once

#include <optional>
#include <vector>

#include "cassle/nn.hpp"
#include "cassle/tensor.hpp"

namespace cassle {

// Entry (j, k): probe accuracy on task k after finishing task j. Rows above
// the diagonal are populated too (forward transfer reads A_{i-1,i}).
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(int tasks);

  int tasks() const { return static_cast<int>(values_.rows()); }
  bool present(int j, int k) const;
  void set(int j, int k, Scalar accuracy);
  Scalar at(int j, int k) const;  // CONTRACT_ERROR when absent

  const Eigen::MatrixXd& raw() const { return values_; }

 private:
  Eigen::MatrixXd values_;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> present_;
};

struct MetricsReport {
  Scalar average_accuracy = 0.0;
  std::optional<Scalar> forgetting;         // undefined for T = 1
  std::optional<Scalar> forward_transfer;   // undefined for T = 1
};

struct ProbeTrainConfig {
  Scalar label_fraction = 1.0;
  int epochs = 100;
  Scalar lr = 0.3;  // cosine-decayed
  int batch_size = 256;
  Scalar momentum = 0.9;
  uint64_t seed = 0;

  void validate() const;
};

struct ProbeState {
  MatrixRM weight;        // [d, C]
  Eigen::VectorXd bias;   // [C]
  int n_classes = 0;
};

// Class-stratified index subset: per class, a seeded shuffle is cut at
// ceil(fraction * count), so smaller fractions are nested inside larger ones.
// Every class in [0, n_classes) must contribute at least one sample.
std::vector<Index> stratified_subset(const std::vector<int>& labels, int n_classes,
                                     Scalar fraction, uint64_t seed);

// Multinomial logistic regression by SGD on frozen features.
ProbeState train_linear_probe(const MatrixRM& features, const std::vector<int>& labels,
                              int n_classes, const ProbeTrainConfig& cfg);

Scalar evaluate_probe(const ProbeState& probe, const MatrixRM& features,
                      const std::vector<int>& labels);

// Weighted k-NN with cosine similarity and temperature scaling; class scores
// are sums of exp(sim/tau) over the k nearest neighbours, ties broken by the
// smaller class id.
Scalar knn_evaluate(const MatrixRM& train_features, const std::vector<int>& train_labels,
                    const MatrixRM& test_features, const std::vector<int>& test_labels, int k,
                    Scalar temperature);

// A = mean of the last row.
Scalar average_accuracy(const AccuracyMatrix& m);
// F = 1/(T-1) sum_i max_t (A_{t,i} - A_{T,i}), reported unclamped.
Scalar forgetting(const AccuracyMatrix& m);
// FT = 1/(T-1) sum_{i=2..T} (A_{i-1,i} - R_i), R from a random network.
Scalar forward_transfer(const AccuracyMatrix& m, const std::vector<Scalar>& random_baseline);

MetricsReport compute_metrics(const AccuracyMatrix& m, const std::vector<Scalar>& random_baseline);

// Backbone features for a whole dataset, in evaluation batches.
MatrixRM extract_features(EncoderState& enc, const MatrixRM& samples, Index eval_batch = 512);

}  // namespace cassle
