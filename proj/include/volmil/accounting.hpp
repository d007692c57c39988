#ifndef VOLMIL_ACCOUNTING_HPP_
#define VOLMIL_ACCOUNTING_HPP_

#include "volmil/model_spec.hpp"

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace volmil {

/// One row of the analytic cost table. `macs` counts multiply-accumulates
/// for one input volume; normalization and pointwise activations are free.
struct LayerCost {
  std::string name;
  std::string kind;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::string output;
};

/// Layer-by-layer plan derived from the spec alone.
std::vector<LayerCost> layer_plan(const ModelSpec& spec);

/// Trainable scalars of the network built from `spec`.
std::int64_t count_params(const ModelSpec& spec);

/// Forward cost of one volume, one FLOP per multiply-accumulate.
std::int64_t count_flops(const ModelSpec& spec);

/// Cost attributed to the per-slice encoder (layers named encoder.*).
std::int64_t count_encoder_flops(const ModelSpec& spec);

nlohmann::json inspect_json(const ModelSpec& spec);
/// Aligned text table of the plan with totals.
std::string inspect_text(const ModelSpec& spec);

}  // namespace volmil

#endif  // VOLMIL_ACCOUNTING_HPP_
