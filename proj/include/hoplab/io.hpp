// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace hoplab {

// Whole-file helpers; both throw IoError. write_file creates missing parent
// directories and writes through a temporary file that is renamed into place,
// so readers never observe a half-written artifact.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

// printf("%.6g") with "-0" folded into "0".
std::string format_sig6(double v);

}  // namespace hoplab
