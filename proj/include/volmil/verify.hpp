#ifndef VOLMIL_VERIFY_HPP_
#define VOLMIL_VERIFY_HPP_

#include "volmil/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace volmil {

struct CheckResult {
  std::string name;
  bool passed = false;
  /// Measured statistic and the bound it was held to.
  double value = 0.0;
  double bound = 0.0;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::vector<CheckResult> checks;
  double seconds = 0.0;
  bool passed() const;
};

/// Central finite differences in 64 bit for every differentiable operation
/// (dense layers and the loss at 1e-6, everything else at 1e-5).
std::vector<CheckResult> gradient_op_checks();
/// Finite differences through every desk-scale architecture at 1e-5.
std::vector<CheckResult> gradient_model_checks();

/// Depth sums of inflated kernels and 3D-vs-2D activations on depth-constant
/// input. perturb_kernel adds 1e-3 to every entry of the inflated stem kernel
/// after the transfer, which must make the suite fail.
std::vector<CheckResult> inflation_checks(bool perturb_kernel = false);

/// auroc and prauc against brute-force oracles on random instances.
std::vector<CheckResult> metric_checks(int instances = 1000, std::uint64_t seed = 0);

/// Reruns of cohort synthesis and a short training produce identical bytes.
std::vector<CheckResult> determinism_checks(std::uint64_t seed = 0);

struct VerifyOptions {
  bool perturb_inflation = false;
  std::uint64_t seed = 0;
};
std::vector<SuiteResult> run_verify(const VerifyOptions& options);
std::string verify_text(const std::vector<SuiteResult>& suites);

}  // namespace volmil

#endif  // VOLMIL_VERIFY_HPP_
