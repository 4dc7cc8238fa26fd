#pragma once

#include <filesystem>

#include "vitdf/tensor.hpp"

namespace vitdf {

/// Decodes a PNG or JPEG file (detected by signature) into a [3 x H x W]
/// tensor with values in [0, 255]. Grayscale is replicated across channels
/// and alpha is dropped. Throws DataError on unreadable or corrupt input.
Tensor read_image(const std::filesystem::path& path);

/// Writes a [3 x H x W] (or [1 x H x W]) tensor as 8-bit PNG, clamping to [0, 255].
void write_png(const std::filesystem::path& path, const Tensor& image);

}  // namespace vitdf
