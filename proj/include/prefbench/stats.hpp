#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "prefbench/error.hpp"

namespace prefbench {

struct TestResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

struct Correlation {
  double rho = 0.0;
  double p_value = 1.0;
};

inline constexpr std::size_t kMannWhitneyExactMax = 12;
inline constexpr std::size_t kWilcoxonExactMax = 20;

// Average ranks (1-based) with ties sharing the mean of their positions.
inline std::vector<double> midranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

// Sum of t^3 - t over tie groups.
inline double tie_term(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    const double t = static_cast<double>(j - i);
    total += t * t * t - t;
    i = j;
  }
  return total;
}

namespace detail {

inline double normal_two_sided(double z) {
  static const boost::math::normal_distribution<double> standard;
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(standard, std::abs(z))));
}

}  // namespace detail

// U counts pairs with x above y, ties counting one half.
inline TestResult mann_whitney_u(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.empty() || y.empty()) throw Error("mann_whitney_u: empty sample");
  const std::size_t n1 = x.size(), n2 = y.size(), n = n1 + n2;
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::vector<double> ranks = midranks(pooled);

  // Doubled midranks are integers.
  std::vector<std::int64_t> r2(n);
  for (std::size_t i = 0; i < n; ++i) r2[i] = std::llround(2.0 * ranks[i]);
  std::int64_t obs2 = 0;
  for (std::size_t i = 0; i < n1; ++i) obs2 += r2[i];
  const auto n1i = static_cast<std::int64_t>(n1);
  const std::int64_t offset2 = n1i * (n1i + 1);
  const double u = static_cast<double>(obs2 - offset2) / 2.0;
  const std::int64_t mean2 = n1i * static_cast<std::int64_t>(n + 1);
  const std::int64_t dev = std::llabs(obs2 - mean2);

  TestResult result{u, 1.0};
  if (n <= kMannWhitneyExactMax) {
    std::uint64_t extreme = 0, total = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      if (static_cast<std::size_t>(__builtin_popcount(mask)) != n1) continue;
      std::int64_t s = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (mask & (1u << i)) s += r2[i];
      ++total;
      if (std::llabs(s - mean2) >= dev) ++extreme;
    }
    result.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return result;
  }
  const double nn = static_cast<double>(n);
  const double var = static_cast<double>(n1) * static_cast<double>(n2) / 12.0 *
                     ((nn + 1.0) - tie_term(pooled) / (nn * (nn - 1.0)));
  if (var <= 0.0) return result;
  const double mu = static_cast<double>(n1) * static_cast<double>(n2) / 2.0;
  const double z = std::max(0.0, std::abs(u - mu) - 0.5) / std::sqrt(var);
  result.p_value = detail::normal_two_sided(z);
  return result;
}

// W is the smaller of the positive and negative signed-rank sums.
inline TestResult wilcoxon_signed_rank(const std::vector<std::pair<double, double>>& pairs) {
  std::vector<double> diffs;
  for (const auto& [a, b] : pairs)
    if (a - b != 0.0) diffs.push_back(a - b);
  if (diffs.empty()) throw Error("wilcoxon_signed_rank: all differences are zero");
  const std::size_t n = diffs.size();
  std::vector<double> mags(n);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(diffs[i]);
  const std::vector<double> ranks = midranks(mags);

  std::vector<std::int64_t> r2(n);
  std::int64_t plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r2[i] = std::llround(2.0 * ranks[i]);
    total2 += r2[i];
    if (diffs[i] > 0) plus2 += r2[i];
  }
  const double w = static_cast<double>(std::min(plus2, total2 - plus2)) / 2.0;
  TestResult result{w, 1.0};

  if (n <= kWilcoxonExactMax) {
    // Distribution of the doubled positive-rank sum under random signs.
    std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
    counts[0] = 1.0;
    std::int64_t reach = 0;
    for (std::int64_t r : r2) {
      for (std::int64_t s = reach; s >= 0; --s)
        if (counts[s] != 0.0) counts[s + r] += counts[s];
      reach += r;
    }
    // 2 * (positive sum) - total is the centred statistic, doubled.
    const std::int64_t dev = std::llabs(2 * plus2 - total2);
    double extreme = 0.0;
    for (std::int64_t s = 0; s <= total2; ++s)
      if (std::llabs(2 * s - total2) >= dev) extreme += counts[s];
    result.p_value = extreme / std::ldexp(1.0, static_cast<int>(n));
    return result;
  }
  const double nn = static_cast<double>(n);
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term(mags) / 48.0;
  const double mu = nn * (nn + 1.0) / 4.0;
  const double z = std::max(0.0, std::abs(w - mu) - 0.5) / std::sqrt(var);
  result.p_value = detail::normal_two_sided(z);
  return result;
}

// table[r][c]; two-sided p sums every table with the same margins whose
// probability does not exceed the observed one.
inline double fisher_exact(const std::int64_t (&table)[2][2]) {
  for (const auto& row : table)
    for (std::int64_t cell : row)
      if (cell < 0) throw Error("fisher_exact: negative cell");
  const std::int64_t r1 = table[0][0] + table[0][1];
  const std::int64_t r2 = table[1][0] + table[1][1];
  const std::int64_t c1 = table[0][0] + table[1][0];
  const std::int64_t n = r1 + r2;
  if (n == 0) throw Error("fisher_exact: all margins are zero");
  const auto log_choose = [](std::int64_t a, std::int64_t b) {
    return std::lgamma(static_cast<double>(a + 1)) - std::lgamma(static_cast<double>(b + 1)) -
           std::lgamma(static_cast<double>(a - b + 1));
  };
  const auto log_prob = [&](std::int64_t a) {
    return log_choose(r1, a) + log_choose(r2, c1 - a) - log_choose(n, c1);
  };
  const double observed = log_prob(table[0][0]);
  double p = 0.0;
  for (std::int64_t a = std::max<std::int64_t>(0, c1 - r2); a <= std::min(r1, c1); ++a) {
    const double lp = log_prob(a);
    if (lp <= observed + 1e-7) p += std::exp(lp);
  }
  return std::min(1.0, p);
}

inline double fisher_exact(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
  const std::int64_t table[2][2] = {{a, b}, {c, d}};
  return fisher_exact(table);
}

inline Correlation spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("spearman: samples differ in length");
  if (x.size() < 3) throw Error("spearman: need at least 3 observations");
  const std::vector<double> rx = midranks(x), ry = midranks(y);
  const double n = static_cast<double>(x.size());
  const double mean = (n + 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error("spearman: rho is undefined for constant input");
  const double rho = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  Correlation c{rho, 0.0};
  if (std::abs(rho) < 1.0) {
    const double df = n - 2.0;
    const double t = rho * std::sqrt(df / (1.0 - rho * rho));
    const boost::math::students_t_distribution<double> dist(df);
    c.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
  }
  return c;
}

}  // namespace prefbench
