#include "volmil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace volmil {

namespace {

void check_inputs(const std::vector<double>& scores, const std::vector<int>& labels, const char* name) {
  if (scores.size() != labels.size())
    throw PreconditionError(std::string(name) + ": scores and labels differ in length");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw PreconditionError(std::string(name) + ": labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw PreconditionError(std::string(name) + ": non-finite score");
  }
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels, "auroc");
  const std::size_t n = scores.size();
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0 || pos == n) throw MetricUndefined("auroc: undefined unless both classes are present");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank keeps every quantity an exact integer.
  double twice_rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double twice_mid = static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) twice_rank_sum += twice_mid;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(n - pos);
  const double twice_u = twice_rank_sum - p * (p + 1.0);
  return (twice_u / 2.0) / (p * q);
}

double prauc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_inputs(scores, labels, "prauc");
  const std::size_t n = scores.size();
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0) throw MetricUndefined("prauc: undefined without positives");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < n; ++r)
    if (labels[order[r]] == 1) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  return sum / static_cast<double>(pos);
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw PreconditionError("mean_std: no values");
  MeanStd m;
  for (double v : values) m.mean += v;
  m.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return m;
}

std::string format_mean_std(const MeanStd& m, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f\xC2\xB1%.*f", decimals, m.mean, decimals, m.std);
  return buf;
}

}  // namespace volmil
