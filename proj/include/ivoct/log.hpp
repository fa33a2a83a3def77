#pragma once

#include <string>

#include <json.hpp>

namespace ivoct {

// Event logger on stderr: one JSON object per line, or "event key=value ..."
// for people. A quiet logger drops everything.
class Logger {
public:
    enum class Mode { Quiet, Text, Json };

    explicit Logger(Mode mode = Mode::Text) : mode_(mode) {}

    void event(const std::string& name, const nlohmann::json& fields = nlohmann::json::object()) const;
    Mode mode() const noexcept { return mode_; }

private:
    Mode mode_;
};

}  // namespace ivoct
