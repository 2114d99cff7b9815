#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace fslm::cli {

inline constexpr const char* kToolVersion = "1.0.0";
/// Version of the flag / config-file schema.
inline constexpr int kConfigSchemaVersion = 1;

/// Exit codes: 0 success, 1 runtime failure (or failed acceptance check),
/// 2 usage or configuration error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs the tool with `args` (without the program name). Results go to `out`;
/// errors are written to `err` as one JSON object.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

} // namespace fslm::cli
