#include "flowmc/image_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>

#include "flowmc/common.hpp"

namespace flowmc {

namespace {

struct FileCloser {
    void operator()(std::FILE* fp) const {
        if (fp) std::fclose(fp);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr fp(std::fopen(path.c_str(), mode));
    if (!fp) throw Error(strfmt("cannot open '%s'", path.c_str()));
    return fp;
}

// Next whitespace-delimited token, skipping '#' comments to end of line.
std::string next_token(std::FILE* fp, const std::string& path) {
    std::string tok;
    int c;
    while ((c = std::fgetc(fp)) != EOF) {
        if (c == '#') {
            while ((c = std::fgetc(fp)) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw ParamError(strfmt("'%s': truncated header", path.c_str()));
    return tok;
}

long parse_int(const std::string& tok, const std::string& path, const char* what) {
    char* end = nullptr;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end == tok.c_str() || *end != '\0')
        throw ParamError(strfmt("'%s': bad %s '%s'", path.c_str(), what, tok.c_str()));
    return v;
}

void require_dims(long w, long h, const std::string& path) {
    if (w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20)
        throw ParamError(strfmt("'%s': unreasonable dimensions %ldx%ld", path.c_str(), w, h));
}

float swap_float(float v) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    bits = ((bits & 0x000000FFu) << 24) | ((bits & 0x0000FF00u) << 8) |
           ((bits & 0x00FF0000u) >> 8) | ((bits & 0xFF000000u) >> 24);
    return std::bit_cast<float>(bits);
}

constexpr bool kLittleEndianHost = std::endian::native == std::endian::little;

}  // namespace

Image read_pgm(const std::string& path) {
    FilePtr fp = open_file(path, "rb");
    const std::string magic = next_token(fp.get(), path);
    if (magic != "P2" && magic != "P5")
        throw ParamError(strfmt("'%s': not a PGM file (magic '%s')", path.c_str(), magic.c_str()));
    const long w = parse_int(next_token(fp.get(), path), path, "width");
    const long h = parse_int(next_token(fp.get(), path), path, "height");
    const long maxval = parse_int(next_token(fp.get(), path), path, "maxval");
    require_dims(w, h, path);
    if (maxval <= 0 || maxval > 65535)
        throw ParamError(strfmt("'%s': maxval %ld out of range", path.c_str(), maxval));

    Image img(static_cast<int>(w), static_cast<int>(h));
    const double scale = 1.0 / static_cast<double>(maxval);
    const std::size_t count = img.pix.size();
    if (magic == "P2") {
        for (std::size_t i = 0; i < count; ++i) {
            const long v = parse_int(next_token(fp.get(), path), path, "sample");
            if (v < 0 || v > maxval)
                throw ParamError(strfmt("'%s': sample %ld exceeds maxval", path.c_str(), v));
            img.pix[i] = v * scale;
        }
        return img;
    }
    // P5: header ends with exactly one whitespace byte, already consumed by
    // the tokenizer. Samples are 1 byte, or 2 bytes MSB-first when
    // maxval > 255.
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(count * bytes);
    if (std::fread(raw.data(), 1, raw.size(), fp.get()) != raw.size())
        throw ParamError(strfmt("'%s': truncated pixel data", path.c_str()));
    for (std::size_t i = 0; i < count; ++i) {
        const long v = bytes == 1 ? raw[i] : (long(raw[2 * i]) << 8) | raw[2 * i + 1];
        img.pix[i] = v * scale;
    }
    return img;
}

void write_pgm(const Image& img, const std::string& path, int maxval) {
    if (img.width <= 0 || img.height <= 0) throw ParamError("write_pgm: empty image");
    if (maxval <= 0 || maxval > 65535) throw ParamError("write_pgm: maxval out of range");
    FilePtr fp = open_file(path, "wb");
    std::fprintf(fp.get(), "P5\n%d %d\n%d\n", img.width, img.height, maxval);
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(img.pix.size() * bytes);
    for (std::size_t i = 0; i < img.pix.size(); ++i) {
        const double c = std::clamp(img.pix[i], 0.0, 1.0);
        const long v = std::lround(c * maxval);
        if (bytes == 1) {
            raw[i] = static_cast<unsigned char>(v);
        } else {
            raw[2 * i] = static_cast<unsigned char>(v >> 8);
            raw[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
        }
    }
    if (std::fwrite(raw.data(), 1, raw.size(), fp.get()) != raw.size())
        throw Error(strfmt("short write to '%s'", path.c_str()));
}

Image read_pfm(const std::string& path) {
    FilePtr fp = open_file(path, "rb");
    const std::string magic = next_token(fp.get(), path);
    if (magic == "PF")
        throw ParamError(strfmt("'%s': color PFM is not supported, expected grayscale 'Pf'",
                                path.c_str()));
    if (magic != "Pf")
        throw ParamError(strfmt("'%s': not a PFM file (magic '%s')", path.c_str(), magic.c_str()));
    const long w = parse_int(next_token(fp.get(), path), path, "width");
    const long h = parse_int(next_token(fp.get(), path), path, "height");
    require_dims(w, h, path);
    const std::string scale_tok = next_token(fp.get(), path);
    char* end = nullptr;
    const double scale = std::strtod(scale_tok.c_str(), &end);
    if (end == scale_tok.c_str() || *end != '\0' || scale == 0.0)
        throw ParamError(strfmt("'%s': bad scale '%s'", path.c_str(), scale_tok.c_str()));
    const bool file_little = scale < 0.0;
    const double mag = std::fabs(scale);

    Image img(static_cast<int>(w), static_cast<int>(h));
    std::vector<float> row(static_cast<std::size_t>(w));
    for (long y = h - 1; y >= 0; --y) {  // stored bottom-to-top
        if (std::fread(row.data(), sizeof(float), row.size(), fp.get()) != row.size())
            throw ParamError(strfmt("'%s': truncated pixel data", path.c_str()));
        for (long x = 0; x < w; ++x) {
            float v = row[static_cast<std::size_t>(x)];
            if (file_little != kLittleEndianHost) v = swap_float(v);
            img.at(static_cast<int>(x), static_cast<int>(y)) = v * mag;
        }
    }
    return img;
}

void write_pfm(const Image& img, const std::string& path) {
    if (img.width <= 0 || img.height <= 0) throw ParamError("write_pfm: empty image");
    FilePtr fp = open_file(path, "wb");
    std::fprintf(fp.get(), "Pf\n%d %d\n-1.0\n", img.width, img.height);
    std::vector<float> row(static_cast<std::size_t>(img.width));
    for (int y = img.height - 1; y >= 0; --y) {
        for (int x = 0; x < img.width; ++x) {
            float v = static_cast<float>(img.at(x, y));
            if (!kLittleEndianHost) v = swap_float(v);
            row[static_cast<std::size_t>(x)] = v;
        }
        if (std::fwrite(row.data(), sizeof(float), row.size(), fp.get()) != row.size())
            throw Error(strfmt("short write to '%s'", path.c_str()));
    }
}

}  // namespace flowmc
