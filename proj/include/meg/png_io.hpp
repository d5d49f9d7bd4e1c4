#pragma once

#include <string>

#include "meg/image.hpp"

namespace meg {

// 8-bit PNG I/O. Reading accepts gray / gray+alpha / palette / RGB / RGBA and
// 16-bit inputs, normalizing to 8-bit with 1 (gray) or 3 (RGB) channels.
ImageU8 read_png(const std::string& path);

// Writes 1-channel gray or 3-channel RGB.
void write_png(const ImageU8& im, const std::string& path);

} // namespace meg
