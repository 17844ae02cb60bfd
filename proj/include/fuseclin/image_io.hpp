#pragma once

#include "fuseclin/imaging.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace fuseclin::imaging {

/// Decodes 8-bit PNG or baseline JPEG (detected by signature); colour input is reduced to
/// luma. Values are k/255.
ImageTensor decode_image(std::string_view bytes);
ImageTensor read_image(const std::filesystem::path& path);

/// 8-bit grayscale PNG; values are rounded to the nearest level k/255.
std::string encode_png(const ImageTensor& img);
void write_png(const std::filesystem::path& path, const ImageTensor& img);

}  // namespace fuseclin::imaging
