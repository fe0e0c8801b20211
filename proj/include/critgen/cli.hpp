#pragma once

// Command pipelines behind the `critgen` executable.
//
//   critgen <train-prior|generate|evaluate|sample|gmm-demo> --config <path>
//           [--seed <int>] [--workers <int>] [--out <dir>]
//
// Exit codes: 0 success, 2 config error, 3 artifact mismatch, 4 numeric
// divergence, 1 anything else.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

namespace critgen {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitArtifact = 3;
inline constexpr int kExitDivergence = 4;

struct CliOptions {
  std::string command;
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::optional<std::string> out;
};

// Runs one command; errors are reported on stderr and mapped to exit codes.
int run_command(const CliOptions& options);

int cli_main(int argc, char** argv);

}  // namespace critgen
