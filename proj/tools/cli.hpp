#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "stmgt/error.hpp"

namespace stmgt::cli {

/// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitIngestion = 3;
inline constexpr int kExitNumeric = 4;

int exit_code(ErrorKind kind);

/// Runs one command line (args[0] is the program name). Errors are reported
/// as a single `error code=<kind> exit=<n>: <detail>` line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::string& path);

/// Output directory used when --out is absent: $STMGT_OUTPUT_DIR, else
/// `stmgt_out`.
std::string default_output_dir();

inline constexpr const char* kManifestFile = "run_manifest.json";

}  // namespace stmgt::cli
