#pragma once

#include <string>

#include "run_config.hpp"

namespace oattn {

// Subcommand bodies. Errors propagate as typed exceptions; the CLI maps
// ConfigError -> 1, DataError -> 2, anything else -> 3.
void cmd_train(RunConfig& cfg);
void cmd_infer(RunConfig& cfg);
void cmd_eval(RunConfig& cfg);
void cmd_bench_dsa(RunConfig& cfg);

// Maps the in-flight exception to the stable exit-code contract and prints
// the message to stderr.
int exit_code_for_current_exception();

}  // namespace oattn
