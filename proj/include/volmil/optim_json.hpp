#ifndef VOLMIL_OPTIM_JSON_HPP_
#define VOLMIL_OPTIM_JSON_HPP_

#include "volmil/errors.hpp"
#include "volmil/json_fields.hpp"
#include "volmil/optim.hpp"

#include "json.hpp"

namespace volmil {

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd_momentum)");
}

inline void to_json(nlohmann::json& j, const OptimizerConfig& c) {
  j = {{"kind", to_string(c.kind)},   {"learning_rate", c.learning_rate}, {"momentum", c.momentum},
       {"beta1", c.beta1},            {"beta2", c.beta2},                 {"epsilon", c.epsilon},
       {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& c) {
  std::string kind = to_string(c.kind);
  FieldReader(j, "optimizer")
      .get("kind", kind)
      .get("learning_rate", c.learning_rate)
      .get("momentum", c.momentum)
      .get("beta1", c.beta1)
      .get("beta2", c.beta2)
      .get("epsilon", c.epsilon)
      .get("weight_decay", c.weight_decay)
      .finish();
  c.kind = optimizer_kind_from_string(kind);
  if (!(c.learning_rate > 0.0) || c.weight_decay < 0.0 || c.momentum < 0.0 || c.momentum >= 1.0)
    throw ConfigError("optimizer: need learning_rate > 0, weight_decay >= 0, 0 <= momentum < 1");
}

}  // namespace volmil

#endif  // VOLMIL_OPTIM_JSON_HPP_
