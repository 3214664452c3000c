#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "protoreg/losses.hpp"

namespace protoreg::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kInvalidArgs = 2, kIoFailure = 3, kNumerical = 4 };

/// Entry point shared by the executable and the tests. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Re-hash every input and output listed in a run manifest. Returns one message per mismatch
/// or missing file; empty when everything verifies.
std::vector<std::string> verify_manifest(const std::filesystem::path& manifest);

/// Random cube instance for gradient checks: smooth images, three-class masks, a small
/// random field and contour sets sampled without subsampling.
struct GradientInstance {
    ObjectiveInputs inputs;
    DisplacementField field;
};
GradientInstance random_gradient_instance(int size, std::uint64_t seed);

}  // namespace protoreg::cli
