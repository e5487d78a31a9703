#pragma once

#include "rsp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace rsp {

// 8-bit RGB, row-major, 3 bytes per pixel.
std::vector<std::uint8_t> encode_png_rgb(std::size_t width, std::size_t height, std::span<const std::uint8_t> rgb);
std::vector<std::uint8_t> encode_png_gray(std::size_t width, std::size_t height, std::span<const std::uint8_t> gray);

// Decodes any PNG into a [C,H,W] tensor in [0,1], C = 1 (gray) or 3 (RGB).
// Alpha is dropped, 16-bit samples are reduced to 8 bits.
Tensor decode_png(std::span<const std::uint8_t> bytes);

// Loads an image for a model expecting `channels` channels: gray is replicated,
// RGB is averaged down to one channel when needed.
Tensor load_image(const std::filesystem::path& path, std::size_t channels);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes through a temporary sibling and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

} // namespace rsp
