#include "unmix/io.hpp"

#include "unmix/errors.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace unmix::io {

namespace {

void write_bytes(const std::string& path, const char* data, std::size_t count, bool append) {
    std::ofstream f(path, std::ios::binary | (append ? std::ios::app : std::ios::trunc));
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(data, static_cast<std::streamsize>(count));
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::uint32_t crc32_update(std::uint32_t crc, const unsigned char* buf, std::size_t len) {
    static std::uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (std::uint32_t n = 0; n < 256; ++n) {
            std::uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[n] = c;
        }
        init = true;
    }
    crc ^= 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ buf[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void put_u32_be(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

void put_chunk(std::vector<unsigned char>& out, const char type[4],
               const std::vector<unsigned char>& payload) {
    put_u32_be(out, static_cast<std::uint32_t>(payload.size()));
    std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    std::uint32_t crc = crc32_update(0, out.data() + start, out.size() - start);
    put_u32_be(out, crc);
}

}  // namespace

void write_f32(const std::string& path, const float* data, std::size_t count) {
    write_bytes(path, reinterpret_cast<const char*>(data), count * sizeof(float), false);
}

void append_f32(const std::string& path, const float* data, std::size_t count) {
    write_bytes(path, reinterpret_cast<const char*>(data), count * sizeof(float), true);
}

std::vector<float> read_f32(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("cannot open for reading: " + path);
    std::streamsize bytes = f.tellg();
    if (bytes % sizeof(float) != 0)
        throw DataError("file size is not a multiple of 4: " + path);
    f.seekg(0);
    std::vector<float> out(static_cast<std::size_t>(bytes) / sizeof(float));
    f.read(reinterpret_cast<char*>(out.data()), bytes);
    if (!f) throw DataError("read failed: " + path);
    return out;
}

void write_text(const std::string& path, const std::string& text) {
    write_bytes(path, text.data(), text.size(), false);
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw DataError("cannot open for reading: " + path);
    std::streamsize bytes = f.tellg();
    f.seekg(0);
    std::string out(static_cast<std::size_t>(bytes), '\0');
    f.read(out.data(), bytes);
    if (!f) throw DataError("read failed: " + path);
    return out;
}

void write_png_gray8(const std::string& path, int width, int height,
                     const std::vector<unsigned char>& pixels) {
    if (pixels.size() != static_cast<std::size_t>(width) * height)
        throw std::invalid_argument("write_png_gray8: pixel count mismatch");

    // Raw scanlines with filter byte 0.
    std::vector<unsigned char> raw;
    raw.reserve(static_cast<std::size_t>(height) * (width + 1));
    for (int r = 0; r < height; ++r) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels.begin() + static_cast<std::size_t>(r) * width,
                   pixels.begin() + static_cast<std::size_t>(r + 1) * width);
    }

    // zlib stream using stored (uncompressed) deflate blocks.
    std::vector<unsigned char> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t pos = 0;
    while (pos < raw.size() || raw.empty()) {
        std::size_t n = std::min<std::size_t>(raw.size() - pos, 65535);
        bool last = pos + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(static_cast<unsigned char>(n & 0xff));
        z.push_back(static_cast<unsigned char>(n >> 8));
        z.push_back(static_cast<unsigned char>(~n & 0xff));
        z.push_back(static_cast<unsigned char>((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + pos, raw.begin() + pos + n);
        pos += n;
        if (raw.empty()) break;
    }
    std::uint32_t a = 1, b = 0;
    for (unsigned char c : raw) {
        a = (a + c) % 65521;
        b = (b + a) % 65521;
    }
    put_u32_be(z, (b << 16) | a);

    std::vector<unsigned char> ihdr;
    put_u32_be(ihdr, static_cast<std::uint32_t>(width));
    put_u32_be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);

    std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", z);
    put_chunk(png, "IEND", {});

    write_bytes(path, reinterpret_cast<const char*>(png.data()), png.size(), false);
}

}  // namespace unmix::io
