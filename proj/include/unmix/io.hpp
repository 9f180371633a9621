#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace unmix::io {

// Raw little-endian float32 blobs. The on-disk formats in this project assume
// a little-endian host with IEEE-754 floats.
void write_f32(const std::string& path, const float* data, std::size_t count);
void append_f32(const std::string& path, const float* data, std::size_t count);
std::vector<float> read_f32(const std::string& path);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

// Minimal 8-bit grayscale PNG writer (stored deflate blocks, no external
// zlib). `pixels` is row-major, size width*height.
void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<unsigned char>& pixels);

}  // namespace unmix::io
