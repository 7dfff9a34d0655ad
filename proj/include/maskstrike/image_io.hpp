#pragma once

#include <filesystem>

#include "maskstrike/geometry.hpp"

namespace maskstrike {

/// Loads an 8-bit PNG as RGB. Gray and alpha inputs are expanded/stripped.
Image load_png(const std::filesystem::path& path);

/// Rounds to nearest and clamps to [0,255] before writing 8-bit RGB.
void save_png(const Image& img, const std::filesystem::path& path);

/// 1-bit grayscale PNG, white where the mask is set.
void save_mask_png(const BinaryMask& mask, const std::filesystem::path& path);

}  // namespace maskstrike
