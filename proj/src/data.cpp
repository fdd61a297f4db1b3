#include "lsmia/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>

namespace lsmia {

Matrix LabeledDataset::class_rows(int label) const {
  const Index n = class_size(label);
  Matrix out(n, dim());
  Index r = 0;
  for (Index i = 0; i < size(); ++i)
    if (labels(i) == label) out.row(r++) = features.row(i);
  return out;
}

Index LabeledDataset::class_size(int label) const { return (labels.array() == label).count(); }

void LabeledDataset::validate() const {
  if (labels.size() != features.rows()) throw ValidationError("label count does not match feature rows");
  if (class_count < 2) throw ValidationError("class count must be >= 2");
  if (!features.allFinite()) throw ValidationError("non-finite feature value");
  for (Index i = 0; i < labels.size(); ++i)
    if (labels(i) < 0 || labels(i) >= class_count)
      throw ValidationError("label " + std::to_string(labels(i)) + " at sample " + std::to_string(i) +
                            " outside [0, " + std::to_string(class_count) + ")");
}

BlobSpec BlobSpec::triangle(double radius, double stddev, int samples_per_class, std::uint64_t seed) {
  BlobSpec spec;
  for (int c = 0; c < 3; ++c) {
    const double angle = std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * c / 3.0;
    spec.centers.push_back(Eigen::Vector2d(radius * std::cos(angle), radius * std::sin(angle)));
  }
  spec.stddev = stddev;
  spec.samples_per_class = samples_per_class;
  spec.seed = seed;
  return spec;
}

nlohmann::json to_json(const BlobSpec& spec) {
  nlohmann::json centers = nlohmann::json::array();
  for (const auto& c : spec.centers) centers.push_back(std::vector<double>(c.data(), c.data() + c.size()));
  return {{"generator", "gaussian_blobs"},
          {"centers", centers},
          {"stddev", spec.stddev},
          {"samples_per_class", spec.samples_per_class},
          {"seed", spec.seed}};
}

LabeledDataset gen_blobs(const BlobSpec& spec) {
  require(spec.centers.size() >= 2, "gen_blobs: need at least two classes");
  require(spec.stddev > 0.0, "gen_blobs: stddev must be positive");
  require(spec.samples_per_class >= 1, "gen_blobs: samples_per_class must be >= 1");
  const Index d = spec.centers.front().size();
  require(d >= 1, "gen_blobs: empty center");
  for (const auto& c : spec.centers) require(c.size() == d, "gen_blobs: centers differ in dimension");

  const Index classes = static_cast<Index>(spec.centers.size());
  const Index n = classes * spec.samples_per_class;
  LabeledDataset ds;
  ds.features.resize(n, d);
  ds.labels.resize(n);
  ds.class_count = static_cast<int>(classes);

  Rng rng(derive_seed(spec.seed, streams::kData));
  std::normal_distribution<double> normal(0.0, 1.0);
  Index row = 0;
  for (Index c = 0; c < classes; ++c) {
    for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
      for (Index j = 0; j < d; ++j) ds.features(row, j) = spec.centers[c](j) + spec.stddev * normal(rng);
      ds.labels(row) = static_cast<int>(c);
    }
  }
  ds.provenance = to_json(spec);
  return ds;
}

LabeledDataset subset(const LabeledDataset& dataset, const std::vector<Index>& indices) {
  LabeledDataset out;
  out.class_count = dataset.class_count;
  out.provenance = dataset.provenance;
  out.features.resize(static_cast<Index>(indices.size()), dataset.dim());
  out.labels.resize(static_cast<Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = dataset.features.row(indices[i]);
    out.labels(static_cast<Index>(i)) = dataset.labels(indices[i]);
  }
  return out;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& dataset, double test_fraction,
                                                std::uint64_t seed) {
  require(test_fraction >= 0.0 && test_fraction < 1.0, "split: test_fraction must lie in [0, 1)");
  const Index n = dataset.size();
  const auto total_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(n)));

  // Largest-remainder allocation of the test budget over classes.
  const int classes = dataset.class_count;
  std::vector<Index> quota(classes);
  std::vector<double> remainder(classes);
  Index allocated = 0;
  for (int c = 0; c < classes; ++c) {
    const double exact = test_fraction * static_cast<double>(dataset.class_size(c));
    quota[c] = static_cast<Index>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(quota[c]);
    allocated += quota[c];
  }
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return remainder[a] > remainder[b]; });
  for (int k = 0; allocated < total_test && k < classes; ++k) {
    if (quota[order[k]] < dataset.class_size(order[k])) {
      ++quota[order[k]];
      ++allocated;
    }
  }

  std::vector<bool> in_test(static_cast<std::size_t>(n), false);
  Rng rng(derive_seed(seed, streams::kSplit));
  for (int c = 0; c < classes; ++c) {
    std::vector<Index> members;
    for (Index i = 0; i < n; ++i)
      if (dataset.labels(i) == c) members.push_back(i);
    std::shuffle(members.begin(), members.end(), rng);
    for (Index k = 0; k < quota[c]; ++k) in_test[static_cast<std::size_t>(members[k])] = true;
  }

  std::vector<Index> train_idx, test_idx;
  for (Index i = 0; i < n; ++i) (in_test[static_cast<std::size_t>(i)] ? test_idx : train_idx).push_back(i);
  return {subset(dataset, train_idx), subset(dataset, test_idx)};
}

Vector apply_jitter(const Eigen::Ref<const Vector>& x, const JitterTransform& transform, std::uint64_t draw_index) {
  require(transform.stddev >= 0.0, "apply_jitter: stddev must be >= 0");
  if (transform.stddev == 0.0) return x;
  Rng rng(derive_seed(transform.seed, draw_index));
  std::normal_distribution<double> normal(0.0, transform.stddev);
  Vector out = x;
  for (Index j = 0; j < out.size(); ++j) out(j) += normal(rng);
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
bool parse_number(const std::string& text, T& out) {
  const std::string t = trim(text);
  if (t.empty()) return false;
  if constexpr (std::is_floating_point_v<T>) {
    // strtod accepts the exact %.17g output, including inf/nan which validation rejects later
    char* end = nullptr;
    out = std::strtod(t.c_str(), &end);
    return end == t.c_str() + t.size();
  } else {
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    return ec == std::errc() && ptr == t.data() + t.size();
  }
}

}  // namespace

void save_csv(const LabeledDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# d=" << dataset.dim() << " C=" << dataset.class_count << "\n";
  for (Index i = 0; i < dataset.size(); ++i) {
    for (Index j = 0; j < dataset.dim(); ++j) out << format_double(dataset.features(i, j)) << ',';
    out << dataset.labels(i) << "\n";
  }
  if (!out) throw IoError("write failed for " + path.string());
}

LabeledDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "missing header");
  int d = 0, classes = 0;
  if (std::sscanf(line.c_str(), "# d=%d C=%d", &d, &classes) != 2 || d < 1 || classes < 2)
    throw ParseError(1, "header must read '# d=<int> C=<int>'");

  std::vector<double> values;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_cells(line);
    if (cells.size() != static_cast<std::size_t>(d) + 1)
      throw ParseError(line_no, "expected " + std::to_string(d + 1) + " cells, found " + std::to_string(cells.size()));
    for (int j = 0; j < d; ++j) {
      double v = 0.0;
      if (!parse_number(cells[j], v)) throw ParseError(line_no, "non-numeric feature '" + cells[j] + "'");
      values.push_back(v);
    }
    int label = 0;
    if (!parse_number(cells[d], label)) throw ParseError(line_no, "non-integer label '" + cells[d] + "'");
    labels.push_back(label);
  }
  if (labels.empty()) throw ParseError(line_no, "no samples after header");

  LabeledDataset ds;
  ds.class_count = classes;
  ds.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Index>(labels.size()), d);
  ds.labels = Eigen::Map<const Labels>(labels.data(), static_cast<Index>(labels.size()));
  ds.provenance = {{"source", path.string()}};
  ds.validate();
  return ds;
}

}  // namespace lsmia
