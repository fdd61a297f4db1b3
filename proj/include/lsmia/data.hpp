#pragma once

#include "lsmia/core.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <utility>
#include <vector>

namespace lsmia {

/// Dense feature matrix (one row per sample) with integer class labels.
struct LabeledDataset {
  Matrix features;
  Labels labels;
  int class_count = 0;
  nlohmann::json provenance = nlohmann::json::object();

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }

  /// Rows whose label equals `label`.
  Matrix class_rows(int label) const;
  Index class_size(int label) const;
  /// Checks label range and finiteness; throws ValidationError.
  void validate() const;
};

/// Isotropic Gaussian blobs, one per class center.
struct BlobSpec {
  std::vector<Vector> centers;
  double stddev = 0.4;
  int samples_per_class = 100;
  std::uint64_t seed = 0;

  /// Three 2D centers on a triangle at radius 2 around the origin.
  static BlobSpec triangle(double radius = 2.0, double stddev = 0.4, int samples_per_class = 100,
                           std::uint64_t seed = 0);
};

/// Additive Gaussian jitter; the vector-data stand-in for image augmentations.
struct JitterTransform {
  double stddev = 0.1;
  std::uint64_t seed = 0;
};

LabeledDataset gen_blobs(const BlobSpec& spec);

/// Stratified split; the test set receives round(test_fraction * N) samples
/// distributed over classes by largest remainder. Row order is preserved.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& dataset, double test_fraction,
                                                std::uint64_t seed);

Vector apply_jitter(const Eigen::Ref<const Vector>& x, const JitterTransform& transform, std::uint64_t draw_index);

void save_csv(const LabeledDataset& dataset, const std::filesystem::path& path);
LabeledDataset load_csv(const std::filesystem::path& path);

/// Rows of `dataset` selected by `indices`, in the given order.
LabeledDataset subset(const LabeledDataset& dataset, const std::vector<Index>& indices);

nlohmann::json to_json(const BlobSpec& spec);

}  // namespace lsmia
