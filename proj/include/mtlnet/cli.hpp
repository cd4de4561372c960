#pragma once

// Command-line entry point:
//   mtlnet {generate|train|eval|infer|rectify|bench|gradcheck|study} [options]
// Exit status: 0 success, 1 usage error, 2 runtime failure.
//
// Every command writes <out>/manifest.json before it starts (status
// "running") and rewrites it when it ends, with the argv, resolved config,
// seed, tool version, timestamps, input and output git blob SHA-1s.

namespace mtlnet {

inline constexpr const char* kToolVersion = "0.1.0";

int dispatch(int argc, const char* const* argv);

}  // namespace mtlnet
