#pragma once

// 8-bit PNG and JPEG readers/writers for the Image type. Grayscale files map
// to 1 channel, color to 3 (alpha stripped, palettes expanded).

#include <algorithm>
#include <cctype>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "egd/image.hpp"

namespace egd::img {

namespace detail {

inline Image planar_from_interleaved(const std::vector<unsigned char>& buf, int w, int h, int c) {
    Image img(w, h, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                img.at(ch, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + ch] / 255.0;
    return img;
}

inline std::vector<unsigned char> interleaved_from_planar(const Image& img) {
    std::vector<unsigned char> buf(static_cast<std::size_t>(img.width) * img.height * img.channels);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int ch = 0; ch < img.channels; ++ch) {
                const double v = std::clamp(img.at(ch, y, x), 0.0, 1.0);
                buf[(static_cast<std::size_t>(y) * img.width + x) * img.channels + ch] =
                    static_cast<unsigned char>(v * 255.0 + 0.5);
            }
    return buf;
}

struct JpegErrorTrap {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_trap_exit(j_common_ptr cinfo) {
    auto* trap = reinterpret_cast<JpegErrorTrap*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, trap->message);
    std::longjmp(trap->jump, 1);
}

}  // namespace detail

inline Image read_png(const std::filesystem::path& path) {
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
        throw IoError(format_msg(path.string(), ": ", pi.message));
    const bool gray = PNG_IMAGE_PIXEL_CHANNELS(pi.format) == 1;
    pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    const int channels = gray ? 1 : 3;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
        std::string msg = pi.message;
        png_image_free(&pi);
        throw FormatError(format_msg(path.string(), ": ", msg));
    }
    return detail::planar_from_interleaved(buf, static_cast<int>(pi.width), static_cast<int>(pi.height),
                                           channels);
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
    const std::vector<unsigned char> buf = detail::interleaved_from_planar(img);
    png_image pi{};
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.string().c_str(), 0, buf.data(), 0, nullptr))
        throw IoError(format_msg(path.string(), ": ", pi.message));
}

inline Image read_jpeg(const std::filesystem::path& path) {
    std::FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError(format_msg(path.string(), ": cannot open"));

    jpeg_decompress_struct cinfo{};
    detail::JpegErrorTrap trap{};
    cinfo.err = jpeg_std_error(&trap.pub);
    trap.pub.error_exit = detail::jpeg_error_trap_exit;
    std::vector<unsigned char> buf;
    if (setjmp(trap.jump)) {
        jpeg_destroy_decompress(&cinfo);
        std::fclose(fp);
        throw FormatError(format_msg(path.string(), ": ", trap.message));
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int w = static_cast<int>(cinfo.output_width);
    const int h = static_cast<int>(cinfo.output_height);
    const int c = cinfo.output_components;
    buf.resize(static_cast<std::size_t>(w) * h * c);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * c;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    std::fclose(fp);
    return detail::planar_from_interleaved(buf, w, h, c);
}

inline void write_jpeg(const Image& img, const std::filesystem::path& path, int quality = 95) {
    const std::vector<unsigned char> buf = detail::interleaved_from_planar(img);
    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError(format_msg(path.string(), ": cannot open for writing"));

    jpeg_compress_struct cinfo{};
    detail::JpegErrorTrap trap{};
    cinfo.err = jpeg_std_error(&trap.pub);
    trap.pub.error_exit = detail::jpeg_error_trap_exit;
    if (setjmp(trap.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::fclose(fp);
        throw IoError(format_msg(path.string(), ": ", trap.message));
    }
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, fp);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = img.channels;
    cinfo.in_color_space = img.channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        const unsigned char* row = buf.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.width *
                                                    img.channels;
        jpeg_write_scanlines(&cinfo, const_cast<unsigned char**>(&row), 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::fclose(fp);
}

inline Image read_image(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == ".png") return read_png(path);
    if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
    throw FormatError(format_msg(path.string(), ": unsupported image extension '", ext, "'"));
}

inline void write_image(const Image& img, const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    for (char& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == ".png") return write_png(img, path);
    if (ext == ".jpg" || ext == ".jpeg") return write_jpeg(img, path);
    throw FormatError(format_msg(path.string(), ": unsupported image extension '", ext, "'"));
}

}  // namespace egd::img
