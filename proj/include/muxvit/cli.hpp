#pragma once

namespace muxvit {

// Entry point behind the muxvit binary; exposed so tests can drive the CLI
// in-process. Returns the process exit status.
int cli_main(int argc, const char* const* argv);

}  // namespace muxvit
