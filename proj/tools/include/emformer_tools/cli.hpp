#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace emformer::tools {

// Exit codes of execute_command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // invalid config or a failed check
inline constexpr int kExitUsage = 2;        // bad flags, unreadable files, bad input

// Runs one subcommand. args excludes the program name. Results go to out,
// diagnostics to err.
//   validate --config cfg.json
//   latency  --config cfg.json
//   flops    --config cfg.json
//   verify   --config cfg.json --seed N [--checks a,b] [--frames T] [--probes P]
//   bench    --config cfg.json --frames T --repeats K --mode m [--seed N]
//   run      --config cfg.json --seed N --input in.emf --mode parallel|stream
//            --output out.emf [--stack S]
//   diff     --a x.emf --b y.emf [--tol X]
int execute_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace emformer::tools
