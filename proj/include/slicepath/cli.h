#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "slicepath/error.h"

namespace slicepath::cli {

enum ExitCode : int {
    kOk = 0,
    kUnexpected = 1,
    kInputError = 2,
    kTrainingError = 3,
    kConditioningError = 4,
    kValidationError = 5,
};

int exit_code_for(ErrorKind kind);

inline constexpr const char* kRunManifest = "run_manifest.json";

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace slicepath::cli
