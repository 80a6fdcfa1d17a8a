#pragma once

#include <stdexcept>
#include <string>

namespace ctxaudit {

// Exit codes used by the CLI. Library code throws the matching exception
// type; the CLI maps it to the code.
enum class ExitCode : int {
    ok = 0,
    usage = 1,
    config = 2,
    collection = 3,
    analysis = 4,
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct SchemaError : std::runtime_error {
    explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

struct CollectionError : std::runtime_error {
    explicit CollectionError(const std::string& what, int attempts_made = 0)
        : std::runtime_error(what), attempts(attempts_made) {}
    int attempts;
};

struct AnalysisError : std::runtime_error {
    explicit AnalysisError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace ctxaudit
