#ifndef VOLMIL_JSON_FIELDS_HPP_
#define VOLMIL_JSON_FIELDS_HPP_

#include "volmil/errors.hpp"

#include <set>
#include <string>

#include "json.hpp"

namespace volmil {

/// Reads optional fields of a JSON object into existing defaults and
/// rejects keys that were never asked for.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string context) : j_(j), context_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(context_ + ": expected a JSON object");
  }

  template <typename V>
  FieldReader& get(const char* key, V& out) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      out = it->template get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(context_ + "." + key + ": " + e.what());
    }
    return *this;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) throw ConfigError(context_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string context_;
  std::set<std::string> known_;
};

}  // namespace volmil

#endif  // VOLMIL_JSON_FIELDS_HPP_
