#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sfuse {

// Error taxonomy. Every failure surfaces as one of these so the CLI can map
// them onto the `error:` line protocol uniformly.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::uint64_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset;
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainAbortError : std::runtime_error {
    explicit TrainAbortError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sfuse
