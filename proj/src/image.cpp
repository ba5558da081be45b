#include "fvlm/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "fvlm/errors.hpp"

namespace fvlm {

namespace {

void require_valid(const Image& img, const char* op) {
    if (!img.valid())
        throw DimensionError(std::string(op) + ": pixel buffer holds " +
                             std::to_string(img.pixels.size()) + " values for " +
                             std::to_string(img.width) + "x" +
                             std::to_string(img.height) + "x3");
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

Image enhance_contrast(const Image& img, double factor) {
    require_valid(img, "enhance_contrast");
    if (factor < 0.0)
        throw ContractError("enhance_contrast: factor " + std::to_string(factor) +
                            " is negative");
    if (factor == 1.0) return img;
    const std::size_t n = img.width * img.height;
    double g = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        g += 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] +
             0.114 * img.pixels[i * 3 + 2];
    }
    g /= static_cast<double>(n);
    Image out = img;
    for (double& v : out.pixels) v = clamp01(g + factor * (v - g));
    return out;
}

Image rgb_to_hsv(const Image& img) {
    require_valid(img, "rgb_to_hsv");
    Image out = img;
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        const double r = img.pixels[i], g = img.pixels[i + 1], b = img.pixels[i + 2];
        const double mx = std::max({r, g, b});
        const double mn = std::min({r, g, b});
        const double d = mx - mn;
        double h = 0.0;
        if (d > 0.0) {
            if (mx == r)
                h = std::fmod((g - b) / d, 6.0);
            else if (mx == g)
                h = (b - r) / d + 2.0;
            else
                h = (r - g) / d + 4.0;
            h /= 6.0;
            if (h < 0.0) h += 1.0;
        }
        out.pixels[i] = h;
        out.pixels[i + 1] = mx > 0.0 ? d / mx : 0.0;
        out.pixels[i + 2] = mx;
    }
    return out;
}

Image hsv_to_rgb(const Image& img) {
    require_valid(img, "hsv_to_rgb");
    Image out = img;
    for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
        const double h = img.pixels[i] * 6.0;
        const double s = img.pixels[i + 1], v = img.pixels[i + 2];
        const int sector = static_cast<int>(std::floor(h)) % 6;
        const double f = h - std::floor(h);
        const double p = v * (1.0 - s);
        const double q = v * (1.0 - s * f);
        const double t = v * (1.0 - s * (1.0 - f));
        double r, g, b;
        switch (sector < 0 ? sector + 6 : sector) {
            case 0: r = v; g = t; b = p; break;
            case 1: r = q; g = v; b = p; break;
            case 2: r = p; g = v; b = t; break;
            case 3: r = p; g = q; b = v; break;
            case 4: r = t; g = p; b = v; break;
            default: r = v; g = p; b = q; break;
        }
        out.pixels[i] = r;
        out.pixels[i + 1] = g;
        out.pixels[i + 2] = b;
    }
    return out;
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CorruptionError("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6")
        throw CorruptionError("read_ppm: " + path + " is not binary PPM (got '" +
                              magic + "')");
    auto next_token = [&in, &path]() -> long {
        // Skips whitespace and '#' comments, per the PPM grammar.
        while (true) {
            int c = in.peek();
            if (c == EOF) throw CorruptionError("read_ppm: truncated header in " + path);
            if (std::isspace(c)) {
                in.get();
                continue;
            }
            if (c == '#') {
                std::string junk;
                std::getline(in, junk);
                continue;
            }
            long v;
            if (!(in >> v))
                throw CorruptionError("read_ppm: malformed header in " + path);
            return v;
        }
    };
    const long w = next_token();
    const long h = next_token();
    const long maxval = next_token();
    if (w <= 0 || h <= 0 || maxval != 255)
        throw CorruptionError("read_ppm: unsupported header " + std::to_string(w) +
                              "x" + std::to_string(h) + " maxval " +
                              std::to_string(maxval) + " in " + path);
    in.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw CorruptionError("read_ppm: truncated pixel data in " + path);
    Image img;
    img.width = static_cast<std::size_t>(w);
    img.height = static_cast<std::size_t>(h);
    img.pixels.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        img.pixels[i] = static_cast<double>(raw[i]) / 255.0;
    return img;
}

void write_ppm(const Image& img, const std::string& path) {
    require_valid(img, "write_ppm");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("write_ppm: cannot open " + path + " for writing");
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.pixels.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        raw[i] = static_cast<unsigned char>(
            std::lround(clamp01(img.pixels[i]) * 255.0));
    out.write(reinterpret_cast<const char*>(raw.data()),
              static_cast<std::streamsize>(raw.size()));
    if (!out) throw ContractError("write_ppm: short write to " + path);
}

Image synthetic_image(std::size_t side, std::uint64_t seed) {
    if (side == 0) throw ContractError("synthetic_image: zero side");
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull);
    Image img;
    img.width = img.height = side;
    img.pixels.assign(side * side * 3, 0.0);
    // Fundus-ish disc on a dark background plus seed-keyed blobs, so images from
    // different seeds are far apart for the encoder.
    const double cx = 0.5 + 0.1 * (static_cast<double>(rng() % 256) / 255.0 - 0.5);
    const double cy = 0.5 + 0.1 * (static_cast<double>(rng() % 256) / 255.0 - 0.5);
    const double base_r = 0.55 + 0.3 * (static_cast<double>(rng() % 256) / 255.0);
    const double base_g = 0.15 + 0.3 * (static_cast<double>(rng() % 256) / 255.0);
    struct Blob { double x, y, rad, r, g, b; };
    std::vector<Blob> blobs;
    const std::size_t nblobs = 2 + rng() % 4;
    for (std::size_t i = 0; i < nblobs; ++i) {
        blobs.push_back({static_cast<double>(rng() % 1000) / 1000.0,
                         static_cast<double>(rng() % 1000) / 1000.0,
                         0.05 + 0.15 * static_cast<double>(rng() % 1000) / 1000.0,
                         static_cast<double>(rng() % 1000) / 1000.0,
                         static_cast<double>(rng() % 1000) / 1000.0,
                         static_cast<double>(rng() % 1000) / 1000.0});
    }
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(side);
            const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(side);
            const double dist = std::hypot(fx - cx, fy - cy);
            double r = 0.02, g = 0.02, b = 0.02;
            if (dist < 0.45) {
                const double fall = 1.0 - dist / 0.45;
                r = base_r * (0.4 + 0.6 * fall);
                g = base_g * (0.4 + 0.6 * fall);
                b = 0.08 * fall;
            }
            for (const Blob& bl : blobs) {
                const double d = std::hypot(fx - bl.x, fy - bl.y);
                if (d < bl.rad) {
                    const double w = 1.0 - d / bl.rad;
                    r += w * 0.5 * (bl.r - r);
                    g += w * 0.5 * (bl.g - g);
                    b += w * 0.5 * (bl.b - b);
                }
            }
            double* px = &img.pixels[(y * side + x) * 3];
            px[0] = clamp01(r);
            px[1] = clamp01(g);
            px[2] = clamp01(b);
        }
    }
    return img;
}

}  // namespace fvlm
