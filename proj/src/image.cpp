#include "duv/image.hpp"

#include "duv/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace duv {

std::string to_string(Provenance p) {
    switch (p) {
    case Provenance::raw: return "raw";
    case Provenance::dark_subtracted: return "dark-subtracted";
    case Provenance::processed: return "processed";
    case Provenance::simulated: return "simulated";
    }
    return "unknown";
}

Image::Image(std::size_t width, std::size_t height, double pitch, double fill)
    : pixel_pitch{pitch}, width_{width}, height_{height}, data_(width * height, fill) {}

double Image::sum() const {
    double total = 0.0;
    for (std::size_t r = 0; r < height_; ++r) {
        double s = 0.0;
        const double* p = row(r);
        for (std::size_t c = 0; c < width_; ++c) s += p[c];
        total += s;
    }
    return total;
}

double Image::max() const {
    if (data_.empty()) return 0.0;
    return *std::max_element(data_.begin(), data_.end());
}

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(), [](auto k) { return k != 0; }));
}

namespace {

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct PgmHeader {
    std::size_t width = 0, height = 0;
    unsigned maxval = 0;
    double scale = 0.0;
    bool has_scale = false;
};

// Reads one whitespace-delimited token, collecting '# scale' comments.
std::string next_token(std::istream& in, PgmHeader& hdr) {
    std::string tok;
    while (true) {
        int ch = in.peek();
        if (ch == EOF) break;
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            in.get();
            continue;
        }
        if (ch == '#' && tok.empty()) {
            std::string comment;
            std::getline(in, comment);
            std::istringstream cs{comment.substr(1)};
            std::string key;
            double s = 0.0;
            if (cs >> key >> s && key == "scale") {
                hdr.scale = s;
                hdr.has_scale = true;
            }
            continue;
        }
        tok.push_back(static_cast<char>(in.get()));
    }
    return tok;
}

} // namespace

void write_pgm16(const std::string& path, const Image& img) {
    std::ofstream out{path, std::ios::binary};
    if (!out) throw DataError{"cannot write '" + path + "'"};
    const double peak = std::max(img.max(), 0.0);
    const double scale = peak > 0.0 ? peak / 65535.0 : 1.0;
    out << "P5\n# scale " << fmt17(scale) << "\n# pixel_pitch " << fmt17(img.pixel_pitch) << "\n"
        << img.width() << " " << img.height() << "\n65535\n";
    std::vector<unsigned char> buf(img.size() * 2);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(std::round(img.data()[i] / scale), 0.0, 65535.0);
        const auto u = static_cast<unsigned>(v);
        buf[2 * i] = static_cast<unsigned char>(u >> 8);
        buf[2 * i + 1] = static_cast<unsigned char>(u & 0xff);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError{"failed writing '" + path + "'"};
}

Image read_pgm(const std::string& path) {
    std::ifstream in{path, std::ios::binary};
    if (!in) throw DataError{"cannot open '" + path + "'"};
    PgmHeader hdr;
    if (next_token(in, hdr) != "P5") throw DataError{"'" + path + "' is not a binary graymap (P5)"};
    try {
        hdr.width = std::stoul(next_token(in, hdr));
        hdr.height = std::stoul(next_token(in, hdr));
        hdr.maxval = static_cast<unsigned>(std::stoul(next_token(in, hdr)));
    } catch (const std::exception&) {
        throw DataError{"malformed graymap header in '" + path + "'"};
    }
    if (hdr.width == 0 || hdr.height == 0 || hdr.maxval == 0 || hdr.maxval > 65535)
        throw DataError{"invalid graymap dimensions in '" + path + "'"};
    in.get();  // single whitespace after maxval
    const std::size_t bytes = hdr.maxval > 255 ? 2 : 1;
    std::vector<unsigned char> buf(hdr.width * hdr.height * bytes);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size()) throw DataError{"truncated graymap '" + path + "'"};
    Image img{hdr.width, hdr.height};
    const double scale = hdr.has_scale ? hdr.scale : 1.0;
    for (std::size_t i = 0; i < img.size(); ++i) {
        const unsigned v = bytes == 2 ? (unsigned{buf[2 * i]} << 8) | buf[2 * i + 1] : buf[i];
        img.data()[i] = v * scale;
    }
    return img;
}

std::string to_csv(const Image& img) {
    std::string out;
    out.reserve(img.size() * 24);
    for (std::size_t r = 0; r < img.height(); ++r) {
        for (std::size_t c = 0; c < img.width(); ++c) {
            if (c) out += ',';
            out += fmt17(img(c, r));
        }
        out += '\n';
    }
    return out;
}

void write_csv(const std::string& path, const Image& img) {
    std::ofstream out{path, std::ios::binary};
    if (!out) throw DataError{"cannot write '" + path + "'"};
    out << to_csv(img);
    if (!out) throw DataError{"failed writing '" + path + "'"};
}

Image read_csv(const std::string& path) {
    std::ifstream in{path};
    if (!in) throw DataError{"cannot open '" + path + "'"};
    std::vector<double> values;
    std::size_t width = 0, height = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t count = 0;
        const char* p = line.data();
        const char* end = p + line.size();
        while (p < end) {
            while (p < end && (*p == ' ' || *p == '\t')) ++p;
            double v = 0.0;
            const auto [next, ec] = std::from_chars(p, end, v);
            if (ec != std::errc{}) throw DataError{"bad number in '" + path + "' row " + std::to_string(height + 1)};
            values.push_back(v);
            ++count;
            p = next;
            while (p < end && (*p == ' ' || *p == '\t')) ++p;
            if (p < end) {
                if (*p != ',') throw DataError{"expected ',' in '" + path + "' row " + std::to_string(height + 1)};
                ++p;
            }
        }
        if (height == 0) width = count;
        else if (count != width) throw DataError{"ragged CSV image '" + path + "'"};
        ++height;
    }
    if (width == 0 || height == 0) throw DataError{"empty CSV image '" + path + "'"};
    Image img{width, height};
    img.data() = std::move(values);
    return img;
}

Image read_image(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
    if (ext == "csv") return read_csv(path);
    if (ext == "pgm" || ext == "pnm") return read_pgm(path);
    throw DataError{"unsupported image format '" + path + "' (expected .pgm or .csv)"};
}

Mask read_mask(const std::string& path) {
    const Image img = read_pgm(path);
    Mask m{img.width(), img.height(), std::vector<std::uint8_t>(img.size())};
    for (std::size_t i = 0; i < img.size(); ++i) m.keep[i] = img.data()[i] != 0.0 ? 1 : 0;
    return m;
}

} // namespace duv
