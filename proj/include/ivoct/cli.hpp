#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ivoct/pipeline.hpp"

namespace ivoct::cli {

// Flat key/value run configuration. Precedence, lowest first: preset
// defaults, --config file, --set KEY=VALUE, dedicated flags (--seed,
// --frames, ...). Keys outside the preset are rejected.
class RunConfig {
public:
    // "desk" (default) or "full" (496 A-lines, 300-sample ROI).
    explicit RunConfig(const std::string& preset = "desk");

    static std::vector<std::string> presets();

    // Overlays a flat JSON object; `source` names it in error messages.
    void merge(const nlohmann::json& flat, const std::string& source);
    // KEY=VALUE with VALUE parsed as JSON, or taken as a string when it is not JSON.
    void set(const std::string& assignment);
    void set(const std::string& key, const nlohmann::json& value, const std::string& source);

    const nlohmann::json& values() const noexcept { return values_; }
    std::uint64_t seed() const;
    // Converts and validates every block; ConfigError on bad values.
    PipelineConfig pipeline() const;

private:
    nlohmann::json values_;
};

// Entry point of the command-line tool; argv[0] is the program name.
// Exit codes: 0 success, 1 usage or configuration error, 2 data or contract
// error, 3 training failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace ivoct::cli
