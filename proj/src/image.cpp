#include "mimic/image.hpp"

#include <png.h>

#include <stdexcept>

namespace mimic::image {
namespace {

constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string encode_png(const render::Frame& frame) {
    if (frame.width <= 0 || frame.height <= 0 ||
        frame.pixels.size() != static_cast<std::size_t>(frame.width) * static_cast<std::size_t>(frame.height)) {
        throw std::invalid_argument("png: frame size does not match its pixel buffer");
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(frame.width);
    img.height = static_cast<png_uint_32>(frame.height);
    img.format = PNG_FORMAT_GRAY;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&img, nullptr, &size, 0, frame.pixels.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png: ") + img.message);
    }
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&img, out.data(), &size, 0, frame.pixels.data(), 0, nullptr)) {
        throw std::runtime_error(std::string("png: ") + img.message);
    }
    out.resize(size);
    return out;
}

render::Frame decode_png(std::string_view png) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&img, png.data(), png.size())) {
        throw FormatError(std::string("png: ") + img.message);
    }
    img.format = PNG_FORMAT_GRAY;
    render::Frame f;
    f.width = static_cast<int>(img.width);
    f.height = static_cast<int>(img.height);
    f.pixels.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, f.pixels.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError(std::string("png: ") + img.message);
    }
    return f;
}

std::string base64_encode(std::string_view bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t n = (std::uint32_t(std::uint8_t(bytes[i])) << 16) |
                                (std::uint32_t(std::uint8_t(bytes[i + 1])) << 8) | std::uint8_t(bytes[i + 2]);
        out.push_back(kAlphabet[(n >> 18) & 63]);
        out.push_back(kAlphabet[(n >> 12) & 63]);
        out.push_back(kAlphabet[(n >> 6) & 63]);
        out.push_back(kAlphabet[n & 63]);
    }
    if (i < bytes.size()) {
        std::uint32_t n = std::uint32_t(std::uint8_t(bytes[i])) << 16;
        if (i + 1 < bytes.size()) {
            n |= std::uint32_t(std::uint8_t(bytes[i + 1])) << 8;
        }
        out.push_back(kAlphabet[(n >> 18) & 63]);
        out.push_back(kAlphabet[(n >> 12) & 63]);
        out.push_back(i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=');
        out.push_back('=');
    }
    return out;
}

std::string base64_decode(std::string_view text) {
    std::array<int, 256> lut{};
    lut.fill(-1);
    for (std::size_t k = 0; k < kAlphabet.size(); ++k) {
        lut[static_cast<unsigned char>(kAlphabet[k])] = static_cast<int>(k);
    }
    std::string out;
    std::uint32_t acc = 0;
    int bits = 0;
    for (char ch : text) {
        if (ch == '=') {
            break;
        }
        const int v = lut[static_cast<unsigned char>(ch)];
        if (v < 0) {
            throw FormatError("base64: invalid character");
        }
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<char>((acc >> bits) & 0xff));
        }
    }
    return out;
}

}  // namespace mimic::image
