#include "fyseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fyseg/errors.hpp"

namespace fyseg {

namespace {

// Skips whitespace and '#' comment lines between header tokens.
int next_header_token(std::istream& in) {
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (std::isspace(c)) {
            c = in.get();
        } else {
            break;
        }
    }
    return c;
}

std::size_t read_header_value(std::istream& in, const std::string& path, const char* what) {
    int c = next_header_token(in);
    if (c == EOF || !std::isdigit(c))
        throw DataError(path + ": malformed header, expected " + std::string(what));
    std::size_t value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + static_cast<std::size_t>(c - '0');
        c = in.get();
    }
    if (c != EOF) in.unget();
    return value;
}

}  // namespace

ImageU8 read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError(path + ": cannot open");
    char magic[2] = {0, 0};
    in.read(magic, 2);
    std::size_t channels;
    if (magic[0] == 'P' && magic[1] == '5')
        channels = 1;
    else if (magic[0] == 'P' && magic[1] == '6')
        channels = 3;
    else
        throw DataError(path + ": not a binary PGM/PPM (P5/P6) file");

    ImageU8 img;
    img.channels = channels;
    img.width = read_header_value(in, path, "width");
    img.height = read_header_value(in, path, "height");
    const std::size_t maxval = read_header_value(in, path, "maxval");
    if (maxval != 255) throw DataError(path + ": unsupported maxval " + std::to_string(maxval));
    const int sep = in.get();
    if (sep == EOF || !std::isspace(sep)) throw DataError(path + ": malformed header separator");
    if (img.width == 0 || img.height == 0) throw DataError(path + ": zero extent");

    img.pixels.resize(img.width * img.height * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (static_cast<std::size_t>(in.gcount()) != img.pixels.size())
        throw DataError(path + ": truncated pixel data");
    return img;
}

void write_pnm(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw std::invalid_argument("write_pnm: unsupported channel count " +
                                    std::to_string(image.channels));
    if (image.pixels.size() != image.width * image.height * image.channels)
        throw std::invalid_argument("write_pnm: pixel buffer does not match extents");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(path + ": cannot open for writing");
    out << (image.channels == 1 ? "P5" : "P6") << "\n"
        << image.width << " " << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()),
              static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw DataError(path + ": write failed");
}

PixelMask read_mask(const std::string& path) {
    const ImageU8 img = read_pnm(path);
    PixelMask mask(img.width, img.height);
    for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        // For color masks, use the first channel.
        mask.labels[i] = img.pixels[i * img.channels] >= 128 ? 1 : 0;
    }
    return mask;
}

void write_mask(const std::string& path, const PixelMask& mask) {
    ImageU8 img(mask.width, mask.height, 1);
    for (std::size_t i = 0; i < mask.labels.size(); ++i)
        img.pixels[i] = mask.labels[i] ? 255 : 0;
    write_pnm(path, img);
}

void write_probability_map(const std::string& path, const ProbabilityMask& probs) {
    ImageU8 img(probs.width, probs.height, 1);
    for (std::size_t i = 0; i < probs.probs.size(); ++i) {
        const double v = std::clamp(probs.probs[i], 0.0, 1.0);
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    write_pnm(path, img);
}

Tensor image_to_tensor(const ImageU8& image) {
    Tensor t({image.channels, image.height, image.width});
    for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x)
                t.data[(c * image.height + y) * image.width + x] =
                    static_cast<double>(image.at(x, y, c)) / 255.0;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.rank() != 3)
        throw std::invalid_argument("tensor_to_image: expected [C,H,W], got " +
                                    Tensor::shape_string(t.shape));
    ImageU8 img(t.shape[2], t.shape[1], t.shape[0]);
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) {
                const double v = std::clamp(t.data[(c * img.height + y) * img.width + x], 0.0, 1.0);
                img.at(x, y, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
    return img;
}

}  // namespace fyseg
