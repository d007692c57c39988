#ifndef VOLMIL_METRICS_HPP_
#define VOLMIL_METRICS_HPP_

#include "volmil/errors.hpp"

#include <string>
#include <vector>

namespace volmil {

/// A metric is undefined for the given labels (one class absent).
class MetricUndefined : public PreconditionError {
 public:
  using PreconditionError::PreconditionError;
};

/// P(score of a random positive > score of a random negative), ties 1/2,
/// via midranks. Throws MetricUndefined unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Average precision: mean over positives of the precision at their rank,
/// ranks from a stable sort by descending score (ties keep input order).
/// Throws MetricUndefined without positives.
double prauc(const std::vector<double>& scores, const std::vector<int>& labels);

struct MeanStd {
  double mean = 0.0;
  /// Sample standard deviation (n - 1); 0 for a single value.
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);

/// "0.766±0.012".
std::string format_mean_std(const MeanStd& m, int decimals = 3);

}  // namespace volmil

#endif  // VOLMIL_METRICS_HPP_
