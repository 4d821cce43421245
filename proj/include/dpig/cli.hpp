#pragma once

namespace dpig {

// Parses argv and runs one subcommand (synth, train-stage1, train-stage2,
// sample, manipulate, interpolate, invert, gen-virtual, evaluate).
// Returns 0 on success, 1 on usage errors, 2 on runtime failures. Every
// successful run writes provenance.json into the output directory.
int run_cli(int argc, const char* const* argv);

}  // namespace dpig
