#pragma once

#include <string>
#include <vector>

namespace flowmc {

// Grayscale raster, row-major, row 0 at the top.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int w, int h) : width(w), height(h), pix(static_cast<std::size_t>(w) * h, 0.0) {}

    double& at(int x, int y) { return pix[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return pix[static_cast<std::size_t>(y) * width + x]; }
};

// PGM (P2 ASCII or P5 binary, 8- or 16-bit). Sample values are scaled by
// the file's maxval into [0, 1].
Image read_pgm(const std::string& path);

// Binary P5. Values are clamped to [0, 1] and quantized to maxval steps;
// maxval above 255 selects 16-bit big-endian samples.
void write_pgm(const Image& img, const std::string& path, int maxval = 65535);

// Grayscale PFM ("Pf"); the sign of the scale line picks the byte order
// and rows are stored bottom-to-top.
Image read_pfm(const std::string& path);

// Grayscale PFM, little-endian (scale -1.0).
void write_pfm(const Image& img, const std::string& path);

}  // namespace flowmc
