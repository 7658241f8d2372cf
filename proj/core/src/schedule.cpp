#include "nextscale/schedule.hpp"

#include <algorithm>

#include "nextscale/error.hpp"

namespace nextscale {

ScaleSchedule::ScaleSchedule(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
  require(!sizes_.empty(), "schedule: at least one scale required");
  for (std::size_t k = 0; k < sizes_.size(); ++k) {
    require(sizes_[k] >= 1, "schedule: extents must be positive");
    require(k == 0 || sizes_[k] > sizes_[k - 1], "schedule: extents must be strictly increasing");
    offsets_.push_back(offsets_.back() + sizes_[k] * sizes_[k]);
  }
}

std::size_t ScaleSchedule::scale_of(std::size_t pos) const {
  require(pos < token_count(), "schedule: position out of range");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), pos);
  return static_cast<std::size_t>(it - offsets_.begin()) - 1;
}

std::string ScaleSchedule::str() const {
  std::string out = "(";
  for (std::size_t k = 0; k < sizes_.size(); ++k) {
    out += (k ? "," : "") + std::to_string(sizes_[k]);
  }
  return out + ")";
}

void TokenPyramid::validate(const ScaleSchedule& schedule, std::size_t vocab) const {
  require(grids.size() == schedule.scales(), "token pyramid: expected " + std::to_string(schedule.scales()) +
                                                 " grids, got " + std::to_string(grids.size()));
  for (std::size_t k = 0; k < grids.size(); ++k) {
    require(grids[k].size() == schedule.tokens(k),
            "token pyramid: grid " + std::to_string(k) + " has wrong extent for schedule " + schedule.str());
    for (int v : grids[k]) {
      require(v >= 0 && static_cast<std::size_t>(v) < vocab,
              "token pyramid: index " + std::to_string(v) + " outside [0, " + std::to_string(vocab) + ")");
    }
  }
}

std::vector<int> TokenPyramid::flatten() const {
  std::vector<int> out;
  for (const auto& g : grids) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace nextscale
