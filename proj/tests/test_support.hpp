// Helpers shared by the unit and acceptance tests.

#pragma once

#include "ilkd/data.hpp"
#include "ilkd/model.hpp"
#include "ilkd/tensor.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace ilkd::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Random row-stochastic K x M matrix with entries bounded away from 0.
inline Matrix random_distribution(Index rows, Index cols, std::mt19937_64& rng) {
  Matrix m = random_matrix(rows, cols, rng, 0.05, 1.0);
  for (Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

inline LabelSeq random_labels(Index length, Index num_symbols, std::mt19937_64& rng) {
  std::uniform_int_distribution<Label> pick(1, static_cast<Label>(num_symbols - 1));
  LabelSeq y(static_cast<size_t>(length));
  for (auto& l : y) l = pick(rng);
  return y;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("ilkd_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace ilkd::testing
