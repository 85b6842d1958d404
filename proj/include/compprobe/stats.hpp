#pragma once

#include <span>
#include <vector>

#include "compprobe/error.hpp"

namespace compprobe::stats {

class UndefinedCorrelationError : public Error {
 public:
  using Error::Error;
};

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> fractional_ranks(std::span<const double> xs);

// Throws UndefinedCorrelationError when either input is constant, ShapeError
// on length mismatch or fewer than 2 values.
double pearson(std::span<const double> xs, std::span<const double> ys);
// Requires at least 3 values.
double spearman(std::span<const double> xs, std::span<const double> ys);

double mean(std::span<const double> xs);

// (1 + #{null >= observed}) / (1 + n)
double add_one_p(std::size_t at_least_as_extreme, std::size_t n_perm);

}  // namespace compprobe::stats
