#include "tsdp/schema.hpp"

#include <set>
#include <stdexcept>

namespace tsdp::schema {

namespace {

bool has_type(const nlohmann::json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "number") return v.is_number();
  if (t == "integer") {
    if (v.is_number_integer()) return true;
    return v.is_number_float() && v.get<double>() == static_cast<double>(static_cast<long long>(v.get<double>()));
  }
  throw std::invalid_argument("schema uses unsupported type '" + t + "'");
}

void check(const nlohmann::json& s, const nlohmann::json& v, const std::string& at, std::vector<std::string>& errs) {
  static const std::set<std::string> kSupported{"type",     "properties", "required", "additionalProperties",
                                                "items",    "enum",       "minimum",  "maximum",
                                                "exclusiveMinimum", "minItems", "uniqueItems", "description",
                                                "$schema",  "title",      "default"};
  for (const auto& [k, _] : s.items()) {
    if (!kSupported.count(k)) throw std::invalid_argument("schema keyword '" + k + "' is not supported");
  }
  const std::string where = at.empty() ? "/" : at;
  if (auto t = s.find("type"); t != s.end()) {
    bool ok = false;
    if (t->is_array()) {
      for (const auto& one : *t) ok = ok || has_type(v, one.get<std::string>());
    } else {
      ok = has_type(v, t->get<std::string>());
    }
    if (!ok) {
      errs.push_back(where + ": expected type " + t->dump());
      return;
    }
  }
  if (auto e = s.find("enum"); e != s.end()) {
    bool found = false;
    for (const auto& option : *e) found = found || option == v;
    if (!found) errs.push_back(where + ": value " + v.dump() + " not in " + e->dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (auto m = s.find("minimum"); m != s.end() && x < m->get<double>())
      errs.push_back(where + ": " + v.dump() + " is below minimum " + m->dump());
    if (auto m = s.find("maximum"); m != s.end() && x > m->get<double>())
      errs.push_back(where + ": " + v.dump() + " is above maximum " + m->dump());
    if (auto m = s.find("exclusiveMinimum"); m != s.end() && x <= m->get<double>())
      errs.push_back(where + ": " + v.dump() + " must exceed " + m->dump());
  }
  if (v.is_object()) {
    const auto props = s.value("properties", nlohmann::json::object());
    if (auto r = s.find("required"); r != s.end()) {
      for (const auto& name : *r) {
        if (!v.contains(name.get<std::string>())) errs.push_back(where + ": missing required '" + name.get<std::string>() + "'");
      }
    }
    const bool closed = s.contains("additionalProperties") && !s.at("additionalProperties").get<bool>();
    for (const auto& [k, child] : v.items()) {
      if (auto p = props.find(k); p != props.end()) {
        check(*p, child, at + "/" + k, errs);
      } else if (closed) {
        errs.push_back(where + ": unexpected property '" + k + "'");
      }
    }
  }
  if (v.is_array()) {
    if (auto m = s.find("minItems"); m != s.end() && v.size() < m->get<std::size_t>())
      errs.push_back(where + ": fewer than " + m->dump() + " items");
    if (s.value("uniqueItems", false)) {
      std::set<std::string> seen;
      for (const auto& x : v) {
        if (!seen.insert(x.dump()).second) errs.push_back(where + ": duplicate item " + x.dump());
      }
    }
    if (auto it = s.find("items"); it != s.end()) {
      for (std::size_t i = 0; i < v.size(); ++i) check(*it, v[i], at + "/" + std::to_string(i), errs);
    }
  }
}

}  // namespace

std::vector<std::string> validate(const nlohmann::json& schema, const nlohmann::json& instance) {
  std::vector<std::string> errs;
  check(schema, instance, "", errs);
  return errs;
}

}  // namespace tsdp::schema
