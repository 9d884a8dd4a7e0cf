#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace wmlab {

// Exact probability mass function over the outcome ids 0..size()-1.
class DiscreteDistribution {
 public:
  static constexpr double kSumTolerance = 1e-9;

  DiscreteDistribution() = default;

  explicit DiscreteDistribution(std::vector<double> pmf) : pmf_(std::move(pmf)) {
    double total = 0.0;
    for (double p : pmf_) {
      if (!(p >= 0.0) || !std::isfinite(p))
        throw std::invalid_argument("distribution: negative or non-finite mass");
      total += p;
    }
    if (std::abs(total - 1.0) > kSumTolerance)
      throw std::invalid_argument("distribution: mass sums to " + std::to_string(total));
  }

  // Normalizes non-negative weights into a distribution.
  static DiscreteDistribution from_weights(std::vector<double> weights) {
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0) || !std::isfinite(w))
        throw std::invalid_argument("distribution: negative or non-finite weight");
      total += w;
    }
    if (!(total > 0.0)) throw std::invalid_argument("distribution: zero total weight");
    for (double& w : weights) w /= total;
    return DiscreteDistribution(std::move(weights));
  }

  static DiscreteDistribution uniform(std::size_t n) {
    if (n == 0) throw std::invalid_argument("distribution: empty outcome space");
    return DiscreteDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
  }

  std::size_t size() const { return pmf_.size(); }
  double operator[](std::size_t outcome) const { return pmf_.at(outcome); }
  std::span<const double> pmf() const { return pmf_; }

  std::vector<std::size_t> support() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pmf_.size(); ++i)
      if (pmf_[i] > 0.0) out.push_back(i);
    return out;
  }

  double entropy() const {
    double h = 0.0;
    for (double p : pmf_)
      if (p > 0.0) h -= p * std::log(p);
    return h;
  }

  double total() const {
    double t = 0.0;
    for (double p : pmf_) t += p;
    return t;
  }

 private:
  std::vector<double> pmf_;
};

}  // namespace wmlab
