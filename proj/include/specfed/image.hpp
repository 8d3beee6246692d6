#pragma once

#include <cstddef>
#include <fstream>
#include <string>
#include <vector>

#include "specfed/error.hpp"

namespace specfed {

// Dense image, channel-major planes, row-major pixels within a plane.
struct Image {
    int height = 0;
    int width = 0;
    int channels = 1;
    std::vector<double> data;  // size == height * width * channels

    Image() = default;
    Image(int h, int w, int c = 1) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0.0) {}

    double& at(int y, int x, int c = 0) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    double at(int y, int x, int c = 0) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    std::size_t size() const { return data.size(); }
};

// 8-bit portable graymap from plane 0, values linearly mapped [lo, hi] -> [0, 255].
inline void write_pgm(const std::string& path, const Image& img, double lo = 0.0, double hi = 1.0) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    const double span = hi > lo ? hi - lo : 1.0;
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            double v = (img.at(y, x, 0) - lo) / span;
            v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            out.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
        }
    }
}

}  // namespace specfed
