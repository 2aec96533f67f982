#include "inkdiff/image.hpp"

#include "inkdiff/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace inkdiff {

void ImageBuffer::validate() const {
    if (height <= 0 || width <= 0 || pixels.size() != static_cast<std::size_t>(height) * width)
        throw Error(ErrorCode::ShapeMismatch, "image buffer size does not match its shape");
    for (float v : pixels)
        if (!(v >= 0.0f && v <= 1.0f)) throw Error(ErrorCode::InvalidRange, "pixel outside [0,1]");
}

unsigned char to_byte(float v) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

void write_pgm(const std::filesystem::path& path, const ImageBuffer& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::FormatError, "cannot open " + path.string() + " for writing");
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    std::string bytes(img.pixels.size(), '\0');
    for (std::size_t i = 0; i < img.pixels.size(); ++i) bytes[i] = static_cast<char>(to_byte(img.pixels[i]));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

}  // namespace

ImageBuffer read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::FormatError, "cannot open " + path.string());
    if (next_token(in) != "P5") throw Error(ErrorCode::FormatError, path.string() + " is not a binary PGM");
    const int w = std::stoi(next_token(in));
    const int h = std::stoi(next_token(in));
    const int maxval = std::stoi(next_token(in));
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw Error(ErrorCode::FormatError, path.string() + ": unsupported PGM header");
    std::string bytes(static_cast<std::size_t>(w) * h, '\0');
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw Error(ErrorCode::FormatError, path.string() + ": truncated pixel data");
    ImageBuffer img(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / static_cast<float>(maxval);
    return img;
}

}  // namespace inkdiff
