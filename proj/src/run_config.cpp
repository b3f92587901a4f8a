#include "oattn/run_config.hpp"

#include <fstream>

#include <json.hpp>

#include "oattn/errors.hpp"

namespace oattn {

using nlohmann::json;

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config '" + path + "': " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a flat JSON object: " + path);
    RunConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (value.is_object() || value.is_array())
            throw ConfigError("config key '" + key + "' must be scalar (flat dotted keys)");
        cfg.values_[key] = value.dump();
    }
    return cfg;
}

void RunConfig::set_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set expects key=value, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json parsed = json::parse(raw, nullptr, false);
    if (parsed.is_discarded() || parsed.is_object() || parsed.is_array())
        parsed = json(raw);  // keep as string
    values_[key] = parsed.dump();
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

namespace {
json parse_stored(const std::string& text) { return json::parse(text); }
}  // namespace

double RunConfig::get_double(const std::string& key, double fallback) {
    double v = fallback;
    if (auto it = values_.find(key); it != values_.end()) {
        const json j = parse_stored(it->second);
        if (!j.is_number()) throw ConfigError("config key '" + key + "' must be a number");
        v = j.get<double>();
        consumed_.insert(key);
    }
    resolved_[key] = json(v).dump();
    return v;
}

std::int64_t RunConfig::get_int(const std::string& key, std::int64_t fallback) {
    std::int64_t v = fallback;
    if (auto it = values_.find(key); it != values_.end()) {
        const json j = parse_stored(it->second);
        if (!j.is_number_integer()) throw ConfigError("config key '" + key + "' must be an integer");
        v = j.get<std::int64_t>();
        consumed_.insert(key);
    }
    resolved_[key] = json(v).dump();
    return v;
}

std::string RunConfig::get_string(const std::string& key, const std::string& fallback) {
    std::string v = fallback;
    if (auto it = values_.find(key); it != values_.end()) {
        const json j = parse_stored(it->second);
        v = j.is_string() ? j.get<std::string>() : it->second;
        consumed_.insert(key);
    }
    resolved_[key] = json(v).dump();
    return v;
}

bool RunConfig::get_bool(const std::string& key, bool fallback) {
    bool v = fallback;
    if (auto it = values_.find(key); it != values_.end()) {
        const json j = parse_stored(it->second);
        if (!j.is_boolean()) throw ConfigError("config key '" + key + "' must be true or false");
        v = j.get<bool>();
        consumed_.insert(key);
    }
    resolved_[key] = json(v).dump();
    return v;
}

std::string RunConfig::require_string(const std::string& key, const std::string& what) {
    if (!has(key)) throw ConfigError("missing config key '" + key + "' (" + what + ")");
    return get_string(key, "");
}

void RunConfig::check_consumed() const {
    for (const auto& [key, value] : values_) {
        (void)value;
        if (!consumed_.count(key)) throw ConfigError("unknown config key '" + key + "'");
    }
}

std::string RunConfig::resolved_json() const {
    json j = json::object();
    for (const auto& [key, value] : resolved_) j[key] = json::parse(value);
    return j.dump(2) + "\n";
}

void RunConfig::write_resolved(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write resolved config: " + path);
    f << resolved_json();
}

}  // namespace oattn
