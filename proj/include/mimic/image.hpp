#pragma once

#include <string>
#include <string_view>

#include "mimic/render.hpp"

namespace mimic::image {

/// Lossless 8-bit grayscale PNG.
std::string encode_png(const render::Frame& frame);
render::Frame decode_png(std::string_view png);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace mimic::image
