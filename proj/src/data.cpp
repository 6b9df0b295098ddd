#include "cassle/data.hpp"

#include <Eigen/QR>

#include <fstream>

#include "cassle/rng.hpp"

namespace cassle {

MatrixRM LabeledDataset::gather(const std::vector<Index>& rows) const {
  MatrixRM out(static_cast<Index>(rows.size()), samples.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= samples.rows()) throw contract_error("gather index out of range");
    out.row(static_cast<Index>(i)) = samples.row(rows[i]);
  }
  ++batch_reads;
  return out;
}

void LabeledDataset::validate() const {
  if (static_cast<Index>(labels.size()) != samples.rows())
    throw shape_error("dataset labels/sample count mismatch");
  if (!domain_ids.empty() && static_cast<Index>(domain_ids.size()) != samples.rows())
    throw shape_error("dataset domain_ids/sample count mismatch");
}

void SyntheticSpec::validate() const {
  if (n_classes <= 0 || samples_per_class <= 0 || input_dim <= 0)
    throw config_error("synthetic spec sizes must be positive");
  if (cluster_std < 0.0) throw config_error("cluster_std must be non-negative");
  if (n_domains < 1) throw config_error("n_domains must be >= 1");
  if (domain_shift_strength < 0.0) throw config_error("domain_shift_strength must be >= 0");
}

namespace {

Eigen::VectorXd random_unit(Rng& rng, Index dim) {
  Eigen::VectorXd v(dim);
  for (Index i = 0; i < dim; ++i) v[i] = rng.normal();
  const Scalar n = v.norm();
  return n > 0 ? Eigen::VectorXd(v / n) : Eigen::VectorXd::Unit(dim, 0);
}

// Orthogonal matrix that is the identity at strength 0 and rotates further as
// the strength grows: QR of (I + s * skew(G)), with the QR sign fixed so the
// factorization is unique.
MatrixRM shift_rotation(Rng& rng, Index dim, Scalar strength) {
  MatrixRM g(dim, dim);
  for (Index i = 0; i < dim; ++i)
    for (Index j = 0; j < dim; ++j) g(i, j) = rng.normal();
  MatrixRM skew = 0.5 * (g - g.transpose());
  MatrixRM base = MatrixRM::Identity(dim, dim) + strength * skew;
  Eigen::HouseholderQR<MatrixRM> qr(base);
  MatrixRM q = qr.householderQ();
  MatrixRM r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index i = 0; i < dim; ++i)
    if (r(i, i) < 0) q.col(i) = -q.col(i);
  return q;
}

}  // namespace

SyntheticGenerator::SyntheticGenerator(const SyntheticSpec& spec) : spec_(spec) {
  spec.validate();
  const Scalar radius = 4.0 * spec.cluster_std;
  class_means_.resize(spec.n_classes, spec.input_dim);
  Rng means_rng(Rng::mix(spec.seed, 0xC1A55));
  for (Index c = 0; c < spec.n_classes; ++c)
    class_means_.row(c) = radius * random_unit(means_rng, spec.input_dim).transpose();

  domain_rotation_.reserve(spec.n_domains);
  domain_offset_.reserve(spec.n_domains);
  for (Index d = 0; d < spec.n_domains; ++d) {
    if (d == 0) {
      domain_rotation_.push_back(MatrixRM::Identity(spec.input_dim, spec.input_dim));
      domain_offset_.push_back(Eigen::VectorXd::Zero(spec.input_dim));
      continue;
    }
    Rng drng(Rng::mix(spec.seed, 0xD03A1, static_cast<uint64_t>(d)));
    domain_rotation_.push_back(shift_rotation(drng, spec.input_dim, spec.domain_shift_strength));
    domain_offset_.push_back(
        Eigen::VectorXd(spec.domain_shift_strength * radius * random_unit(drng, spec.input_dim)));
  }
}

LabeledDataset SyntheticGenerator::sample(Index per_class, uint64_t draw_seed) const {
  if (per_class <= 0) throw config_error("per_class must be positive");
  LabeledDataset ds;
  const Index total = spec_.n_classes * per_class * spec_.n_domains;
  ds.samples.resize(total, spec_.input_dim);
  ds.labels.reserve(total);
  if (spec_.n_domains > 1) ds.domain_ids.reserve(total);

  Index at = 0;
  for (Index d = 0; d < spec_.n_domains; ++d) {
    for (Index c = 0; c < spec_.n_classes; ++c) {
      Rng rng(Rng::mix(Rng::mix(draw_seed, static_cast<uint64_t>(d)), 0x5A3, static_cast<uint64_t>(c)));
      for (Index s = 0; s < per_class; ++s) {
        Eigen::VectorXd x = class_means_.row(c).transpose();
        for (Index i = 0; i < spec_.input_dim; ++i) x[i] += spec_.cluster_std * rng.normal();
        if (spec_.n_domains > 1)
          x = domain_rotation_[static_cast<size_t>(d)] * x + domain_offset_[static_cast<size_t>(d)];
        ds.samples.row(at++) = x.transpose();
        ds.labels.push_back(static_cast<int>(c));
        if (spec_.n_domains > 1) ds.domain_ids.push_back(static_cast<int>(d));
      }
    }
  }
  ds.validate();
  return ds;
}

LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  SyntheticGenerator gen(spec);
  return gen.sample(spec.samples_per_class, Rng::mix(spec.seed, 0xDA7A));
}

LabeledDataset read_cifar100_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::vector<uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  constexpr size_t kRecord = 3074;  // coarse + fine + 3 * 1024 pixels
  if (bytes.size() % kRecord != 0)
    throw format_error("CIFAR-100 file length " + std::to_string(bytes.size()) +
                       " is not a multiple of 3074");
  const Index n = static_cast<Index>(bytes.size() / kRecord);

  LabeledDataset ds;
  ds.samples.resize(n, 3072);
  ds.labels.reserve(static_cast<size_t>(n));
  for (Index r = 0; r < n; ++r) {
    const uint8_t* rec = bytes.data() + static_cast<size_t>(r) * kRecord;
    const uint8_t fine = rec[1];
    if (fine >= 100) throw format_error("CIFAR-100 fine label " + std::to_string(fine) + " >= 100");
    ds.labels.push_back(fine);
    for (Index i = 0; i < 3072; ++i)
      ds.samples(r, i) = static_cast<Scalar>(rec[2 + i]) / 255.0;
  }
  ds.validate();
  return ds;
}

}  // namespace cassle
