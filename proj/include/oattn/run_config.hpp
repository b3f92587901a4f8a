#pragma once

#include <map>
#include <set>
#include <string>

namespace oattn {

// Flat dotted-key configuration (e.g. "train.lr") read from a JSON file plus
// --set overrides. Every key consumed through a getter is recorded with its
// effective value; write_resolved emits that record so a run can be
// reproduced from the file it leaves behind.
class RunConfig {
public:
    RunConfig() = default;
    static RunConfig from_file(const std::string& path);

    // "key=value"; values parse as JSON when possible, else as strings
    void set_override(const std::string& key_eq_value);

    bool has(const std::string& key) const;
    double get_double(const std::string& key, double fallback);
    std::int64_t get_int(const std::string& key, std::int64_t fallback);
    std::string get_string(const std::string& key, const std::string& fallback);
    bool get_bool(const std::string& key, bool fallback);
    std::string require_string(const std::string& key, const std::string& what);

    // rejects provided keys that were never consumed (typo guard)
    void check_consumed() const;

    std::string resolved_json() const;
    void write_resolved(const std::string& path) const;

private:
    std::map<std::string, std::string> values_;    // provided, as JSON text
    std::set<std::string> consumed_;
    std::map<std::string, std::string> resolved_;  // effective values, as JSON text
};

}  // namespace oattn
