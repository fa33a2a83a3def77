#include "ivoct/log.hpp"

#include <cstdio>

namespace ivoct {

void Logger::event(const std::string& name, const nlohmann::json& fields) const {
    if (mode_ == Mode::Quiet) return;
    std::string line;
    if (mode_ == Mode::Json) {
        nlohmann::json j = fields;
        j["event"] = name;
        line = j.dump();
    } else {
        line = name;
        for (const auto& [k, v] : fields.items()) line += " " + k + "=" + (v.is_string() ? v.get<std::string>() : v.dump());
    }
    std::fprintf(stderr, "%s\n", line.c_str());
    std::fflush(stderr);
}

}  // namespace ivoct
