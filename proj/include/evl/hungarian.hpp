// Optimal one-to-one assignment on small score matrices, exact over column
// subsets. Sizes in this project stay single-digit; the solver guards its
// exponential table and breaks ties toward the lowest row, then lowest
// column, so results are reproducible.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

namespace evl {

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (row, col), sorted by row
  double total = 0.0;
};

inline Assignment hungarian_match(const std::vector<double>& score, int rows, int cols,
                                  bool maximize) {
  if (rows < 0 || cols < 0 ||
      static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) != score.size())
    throw std::invalid_argument("hungarian_match: bad matrix extents");
  for (double v : score)
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian_match: non-finite score");
  Assignment result;
  if (rows == 0 || cols == 0) return result;
  if (cols > 20) throw std::invalid_argument("hungarian_match: too many columns");

  const double sign = maximize ? 1.0 : -1.0;
  const int full = 1 << cols;
  const double kNeg = -std::numeric_limits<double>::infinity();
  const int want = rows < cols ? rows : cols;

  // best[i][mask]: max achievable signed score from row i on, columns in
  // `mask` already used.
  std::vector<std::vector<double>> best(static_cast<std::size_t>(rows) + 1,
                                        std::vector<double>(static_cast<std::size_t>(full), kNeg));
  auto popcount = [](int m) {
    int c = 0;
    while (m) {
      m &= m - 1;
      ++c;
    }
    return c;
  };
  for (int mask = 0; mask < full; ++mask)
    best[static_cast<std::size_t>(rows)][static_cast<std::size_t>(mask)] =
        popcount(mask) == want ? 0.0 : kNeg;
  for (int i = rows - 1; i >= 0; --i) {
    for (int mask = 0; mask < full; ++mask) {
      const int used = popcount(mask);
      if (used > want) continue;
      double b = kNeg;
      // skipping row i is allowed when the remaining rows can still fill up
      if (rows - i - 1 >= want - used) b = best[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(mask)];
      for (int c = 0; c < cols; ++c) {
        if (mask & (1 << c)) continue;
        const double cand = sign * score[static_cast<std::size_t>(i * cols + c)] +
                            best[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(mask | (1 << c))];
        if (cand > b) b = cand;
      }
      best[static_cast<std::size_t>(i)][static_cast<std::size_t>(mask)] = b;
    }
  }

  // Reconstruct; prefer assigning (over skipping) and the lowest column on
  // exact ties.
  int mask = 0;
  const double tol = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double target = best[static_cast<std::size_t>(i)][static_cast<std::size_t>(mask)];
    int chosen = -1;
    for (int c = 0; c < cols; ++c) {
      if (mask & (1 << c)) continue;
      const double cand = sign * score[static_cast<std::size_t>(i * cols + c)] +
                          best[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(mask | (1 << c))];
      if (cand >= target - tol) {
        chosen = c;
        break;
      }
    }
    if (chosen >= 0) {
      result.pairs.emplace_back(i, chosen);
      result.total += score[static_cast<std::size_t>(i * cols + chosen)];
      mask |= 1 << chosen;
    }
  }
  return result;
}

}  // namespace evl
