#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cassle/tensor.hpp"

namespace cassle {

// Unlabeled as far as training is concerned: labels are used only for
// splitting and evaluation. The access counter audits which datasets the
// training loop actually touches.
struct LabeledDataset {
  MatrixRM samples;              // N x dim
  std::vector<int> labels;       // N
  std::vector<int> domain_ids;   // empty, or N
  mutable uint64_t batch_reads = 0;

  Index size() const { return samples.rows(); }
  Index dim() const { return samples.cols(); }
  bool has_domains() const { return !domain_ids.empty(); }
  MatrixRM gather(const std::vector<Index>& rows) const;
  void validate() const;
};

struct SyntheticSpec {
  Index n_classes = 8;
  Index samples_per_class = 250;
  Index input_dim = 32;
  Scalar cluster_std = 1.0;
  Index n_domains = 1;
  Scalar domain_shift_strength = 0.5;
  uint64_t seed = 0;

  void validate() const;
};

// Class-conditional Gaussian clusters with seeded means on a sphere of radius
// 4 * cluster_std. When n_domains > 1, each domain applies a fixed seeded
// orthogonal transform plus a mean offset, both scaled by
// domain_shift_strength, and samples carry domain ids.
class SyntheticGenerator {
 public:
  explicit SyntheticGenerator(const SyntheticSpec& spec);

  // Draws per_class samples of every class (per domain when n_domains > 1).
  // Different draw_seeds share the same class/domain geometry.
  LabeledDataset sample(Index per_class, uint64_t draw_seed) const;

  const MatrixRM& class_means() const { return class_means_; }

 private:
  SyntheticSpec spec_;
  MatrixRM class_means_;                    // n_classes x dim
  std::vector<MatrixRM> domain_rotation_;   // per domain
  std::vector<Eigen::VectorXd> domain_offset_;
};

LabeledDataset generate_synthetic(const SyntheticSpec& spec);

// CIFAR-100 binary records: byte 0 coarse label, byte 1 fine label, then
// 3072 pixel bytes (three 1024-byte channel planes, row-major 32x32), scaled
// to [0, 1]. The fine label is the class.
LabeledDataset read_cifar100_binary(const std::string& path);

}  // namespace cassle
