#pragma once

#include <string>

#include "keysem/patching.hpp"

namespace keysem {

/// Reads an ASCII PGM (P2, 1 channel) or PPM (P3, 3 channels) file. Values
/// are mapped linearly from [0, maxval] to [0, 1]. Malformed input raises
/// std::runtime_error naming the offending line.
FeatureMap read_pnm(const std::string& path);
FeatureMap parse_pnm(const std::string& text, const std::string& name = "<string>");

/// Writes P2 (1 channel) or P3 (3 channels) with maxval 255; values are
/// clamped to [0, 1] and rounded. Round-trips exactly at 8-bit resolution.
void write_pnm(const std::string& path, const FeatureMap& img);
std::string format_pnm(const FeatureMap& img);

}  // namespace keysem
