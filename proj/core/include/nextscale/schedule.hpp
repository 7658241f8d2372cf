#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace nextscale {

/// Square grid extents n_1 < ... < n_K of the token pyramid.
class ScaleSchedule {
 public:
  ScaleSchedule() = default;
  explicit ScaleSchedule(std::vector<std::size_t> sizes);
  ScaleSchedule(std::initializer_list<std::size_t> sizes) : ScaleSchedule(std::vector<std::size_t>(sizes)) {}

  [[nodiscard]] const std::vector<std::size_t>& sizes() const { return sizes_; }
  [[nodiscard]] std::size_t scales() const { return sizes_.size(); }
  [[nodiscard]] std::size_t size(std::size_t k) const { return sizes_.at(k); }
  [[nodiscard]] std::size_t latent() const { return sizes_.back(); }
  [[nodiscard]] std::size_t tokens(std::size_t k) const { return sizes_.at(k) * sizes_.at(k); }
  /// Sum of n_k^2.
  [[nodiscard]] std::size_t token_count() const { return offsets_.back(); }
  /// First flattened position of scale k; offset(K) == token_count().
  [[nodiscard]] std::size_t offset(std::size_t k) const { return offsets_.at(k); }
  /// Scale owning flattened position `pos`.
  [[nodiscard]] std::size_t scale_of(std::size_t pos) const;
  [[nodiscard]] std::string str() const;

  bool operator==(const ScaleSchedule& other) const { return sizes_ == other.sizes_; }

 private:
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_{0};
};

/// K integer grids, grid k row-major with n_k * n_k entries.
struct TokenPyramid {
  std::vector<std::vector<int>> grids;

  /// Throws ContractError unless the grids match `schedule` and every index is
  /// in [0, vocab).
  void validate(const ScaleSchedule& schedule, std::size_t vocab) const;
  /// Concatenation of all grids in scale order.
  [[nodiscard]] std::vector<int> flatten() const;
  bool operator==(const TokenPyramid& other) const { return grids == other.grids; }
};

}  // namespace nextscale
