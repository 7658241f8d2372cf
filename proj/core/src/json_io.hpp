#pragma once

// Strict JSON object reading: every key must be consumed, so typos in config
// files fail loudly instead of silently falling back to defaults.

#include <set>
#include <string>

#include "json.hpp"
#include "nextscale/error.hpp"

namespace nextscale::detail {

using ojson = nlohmann::ordered_json;

class StrictObject {
 public:
  StrictObject(const ojson& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j_.is_object(), where_ + ": expected a JSON object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ContractError(where_ + "." + key + ": " + e.what());
    }
  }

  [[nodiscard]] bool has(const char* key) const { return j_.contains(key); }

  const ojson& child(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      require(seen_.count(key) == 1, where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const ojson& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace nextscale::detail
