#include "rsp/png_io.hpp"

#include "rsp/errors.hpp"
#include "rsp/weights_io.hpp"

#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <thread>

#include <png.h>

namespace rsp {

namespace {

struct WriteSink {
    std::vector<std::uint8_t>* out;
};

void png_write_cb(png_structp png, png_bytep data, png_size_t length) {
    auto* sink = static_cast<WriteSink*>(png_get_io_ptr(png));
    sink->out->insert(sink->out->end(), data, data + length);
}

void png_flush_cb(png_structp) {}

struct ReadSource {
    std::span<const std::uint8_t> bytes;
    std::size_t pos = 0;
};

void png_read_cb(png_structp png, png_bytep data, png_size_t length) {
    auto* src = static_cast<ReadSource*>(png_get_io_ptr(png));
    if (src->pos + length > src->bytes.size()) png_error(png, "truncated PNG stream");
    std::memcpy(data, src->bytes.data() + src->pos, length);
    src->pos += length;
}

[[noreturn]] void png_error_cb(png_structp, png_const_charp msg) { throw InputError(std::string("PNG: ") + msg); }

void png_warning_cb(png_structp, png_const_charp) {}

std::vector<std::uint8_t> encode(std::size_t width, std::size_t height, std::span<const std::uint8_t> px,
                                 int color_type, std::size_t channels) {
    if (width == 0 || height == 0) throw InputError("PNG: empty image");
    if (px.size() != width * height * channels) throw InputError("PNG: pixel buffer size mismatch");
    std::vector<std::uint8_t> out;
    WriteSink sink{&out};
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
    if (!png) throw Error("PNG: cannot create write struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("PNG: cannot create info struct");
    }
    try {
        png_set_write_fn(png, &sink, png_write_cb, png_flush_cb);
        png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (std::size_t y = 0; y < height; ++y)
            png_write_row(png, const_cast<png_bytep>(px.data() + y * width * channels));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

} // namespace

std::vector<std::uint8_t> encode_png_rgb(std::size_t width, std::size_t height, std::span<const std::uint8_t> rgb) {
    return encode(width, height, rgb, PNG_COLOR_TYPE_RGB, 3);
}

std::vector<std::uint8_t> encode_png_gray(std::size_t width, std::size_t height, std::span<const std::uint8_t> gray) {
    return encode(width, height, gray, PNG_COLOR_TYPE_GRAY, 1);
}

Tensor decode_png(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw InputError("not a PNG file");
    ReadSource src{bytes, 0};
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
    if (!png) throw Error("PNG: cannot create read struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("PNG: cannot create info struct");
    }
    Tensor out;
    try {
        png_set_read_fn(png, &src, png_read_cb);
        png_read_info(png, info);
        const int color = png_get_color_type(png, info);
        const int depth = png_get_bit_depth(png, info);
        if (depth == 16) png_set_strip_16(png);
        if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);

        const std::size_t width = png_get_image_width(png, info);
        const std::size_t height = png_get_image_height(png, info);
        const std::size_t channels = png_get_channels(png, info);
        std::vector<std::uint8_t> row(png_get_rowbytes(png, info));
        out = Tensor({channels, height, width});
        for (std::size_t y = 0; y < height; ++y) {
            png_read_row(png, row.data(), nullptr);
            for (std::size_t x = 0; x < width; ++x)
                for (std::size_t c = 0; c < channels; ++c)
                    out[(c * height + y) * width + x] = static_cast<float>(row[x * channels + c]) / 255.0f;
        }
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw InputError("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw InputError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Tensor load_image(const std::filesystem::path& path, std::size_t channels) {
    Tensor img;
    if (path.extension() == ".rspw") {
        // Exact float input: an archive holding a single [C,H,W] tensor named "image".
        const WeightArchive archive = load_archive(path);
        img = archive.at("image");
        if (img.rank() == 4 && img.dim(0) == 1) img = img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
        if (img.rank() != 3) throw InputError(path.string() + ": image tensor must be [C,H,W]");
    } else {
        img = decode_png(read_file(path));
    }
    const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    if (C == channels) return img;
    if (C == 1) {
        Tensor out({channels, H, W});
        for (std::size_t c = 0; c < channels; ++c)
            std::copy(img.data(), img.data() + H * W, out.data() + c * H * W);
        return out;
    }
    if (channels == 1) {
        Tensor out({1, H, W});
        for (std::size_t p = 0; p < H * W; ++p) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) acc += img[c * H * W + p];
            out[p] = static_cast<float>(acc / static_cast<double>(C));
        }
        return out;
    }
    throw InputError(path.string() + ": image has " + std::to_string(C) + " channels, model expects " +
                     std::to_string(channels));
}

} // namespace rsp
