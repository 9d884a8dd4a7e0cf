#pragma once

// Small hypothesis-test helpers on top of Boost.Math.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include "wmlab/error.hpp"

namespace wmlab::stats {

// Two-sided exact binomial test of k successes in n trials against p
// (doubled smaller tail, capped at 1).
inline double binomial_two_sided_p(std::uint64_t k, std::uint64_t n, double p) {
  if (n == 0) throw Error("config", "binomial test needs n >= 1");
  const boost::math::binomial_distribution<double> dist(static_cast<double>(n), p);
  const double lower = boost::math::cdf(dist, static_cast<double>(k));
  const double upper = k == 0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, static_cast<double>(k - 1)));
  return std::min(1.0, 2.0 * std::min(lower, upper));
}

// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
// Ties are dropped by the caller.
inline double sign_test_p(std::uint64_t wins, std::uint64_t losses) {
  const std::uint64_t n = wins + losses;
  if (n == 0) return 1.0;
  if (wins == 0) return 1.0;
  const boost::math::binomial_distribution<double> dist(static_cast<double>(n), 0.5);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(wins - 1)));
}

struct ChiSquare {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 1.0;
};

inline double chi_square_sf(double statistic, std::size_t dof) {
  const boost::math::chi_squared_distribution<double> dist(static_cast<double>(dof));
  return boost::math::cdf(boost::math::complement(dist, std::max(0.0, statistic)));
}

// Pearson goodness of fit; dof = categories - 1 - fitted_parameters.
inline ChiSquare chi_square_gof(std::span<const double> observed, std::span<const double> expected,
                                std::size_t fitted_parameters = 0) {
  if (observed.size() != expected.size() || observed.size() < 2 + fitted_parameters)
    throw Error("config", "chi-square needs matching category lists");
  ChiSquare out;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (!(expected[i] > 0.0)) throw Error("config", "chi-square expected counts must be positive");
    const double d = observed[i] - expected[i];
    out.statistic += d * d / expected[i];
  }
  out.dof = observed.size() - 1 - fitted_parameters;
  out.p_value = chi_square_sf(out.statistic, out.dof);
  return out;
}

// Pearson test of homogeneity for two count vectors over the same categories.
// Categories whose pooled expected count is below `min_expected` are merged
// into one bucket.
inline ChiSquare chi_square_homogeneity(std::span<const double> a, std::span<const double> b,
                                        double min_expected = 5.0) {
  if (a.size() != b.size()) throw Error("config", "category lists differ in size");
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i];
    nb += b[i];
  }
  if (na <= 0.0 || nb <= 0.0) throw Error("config", "empty sample");
  const double share_a = na / (na + nb);
  std::vector<double> ra, rb;
  double pool_a = 0.0, pool_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double total = a[i] + b[i];
    if (std::min(total * share_a, total * (1 - share_a)) < min_expected) {
      pool_a += a[i];
      pool_b += b[i];
    } else {
      ra.push_back(a[i]);
      rb.push_back(b[i]);
    }
  }
  if (pool_a + pool_b > 0.0) {
    ra.push_back(pool_a);
    rb.push_back(pool_b);
  }
  ChiSquare out;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double total = ra[i] + rb[i];
    const double ea = total * share_a, eb = total * (1 - share_a);
    out.statistic += (ra[i] - ea) * (ra[i] - ea) / ea + (rb[i] - eb) * (rb[i] - eb) / eb;
  }
  out.dof = ra.size() > 1 ? ra.size() - 1 : 1;
  out.p_value = chi_square_sf(out.statistic, out.dof);
  return out;
}

inline double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace wmlab::stats
