#include "gridfill/grid.hpp"

namespace gridfill {

std::vector<GridLayout> permute_into_grids(int n, Rng& rng) {
  if (n <= 0 || n % 4 != 0) throw ConfigError("permute_into_grids: batch size " + std::to_string(n) +
                                               " is not a positive multiple of 4");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  std::vector<GridLayout> layouts(n / 4);
  for (int g = 0; g < n / 4; ++g)
    for (int q = 0; q < 4; ++q) layouts[g].members[q] = order[4 * g + q];
  return layouts;
}

std::vector<GridLayout> reference_layouts(int n, int reference_index, Rng* rng) {
  if (n < 4 || (n - 1) % 3 != 0)
    throw ConfigError("reference_layouts: batch size " + std::to_string(n) + " is not 1 + 3k");
  if (reference_index < 0 || reference_index >= n) throw ConfigError("reference_layouts: reference out of range");
  std::vector<int> others;
  for (int i = 0; i < n; ++i)
    if (i != reference_index) others.push_back(i);
  if (rng) {
    for (int i = int(others.size()) - 1; i > 0; --i) {
      std::uniform_int_distribution<int> pick(0, i);
      std::swap(others[i], others[pick(*rng)]);
    }
  }
  std::vector<GridLayout> layouts((n - 1) / 3);
  for (std::size_t g = 0; g < layouts.size(); ++g)
    layouts[g].members = {reference_index, others[3 * g], others[3 * g + 1], others[3 * g + 2]};
  return layouts;
}

}  // namespace gridfill
