#include "pvseg/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <string>

#include "pvseg/errors.hpp"

namespace pvseg {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& header,
                const std::vector<std::uint8_t>& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::uint8_t quantize(double p) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0, 1.0) * 255.0));
}

// Header fields of a binary PGM; returns the offset of the raster.
struct PgmHeader {
  long width = 0, height = 0, maxval = 0;
  std::size_t raster = 0;
};

PgmHeader parse_pgm_header(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto next_number = [&]() -> long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
      throw IoError(name + ": malformed PGM header");
    }
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1L << 24)) throw IoError(name + ": PGM header value too large");
    }
    return v;
  };
  PgmHeader h;
  h.width = next_number();
  h.height = next_number();
  h.maxval = next_number();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw IoError(name + ": malformed PGM header");
  h.raster = pos + 1;
  if (h.width < 1 || h.height < 1) throw IoError(name + ": PGM has zero size");
  if (h.maxval < 1) throw IoError(name + ": PGM maxval must be positive");
  if (h.maxval > 255) throw IoError(name + ": 16-bit PGM is not supported");
  if (bytes.size() - h.raster < static_cast<std::size_t>(h.width * h.height)) {
    throw IoError(name + ": truncated PGM raster");
  }
  return h;
}

ImageGray decode_pgm(const std::vector<unsigned char>& bytes, const std::string& name) {
  const PgmHeader h = parse_pgm_header(bytes, name);
  ImageGray img;
  img.pixels.resize(h.height, h.width);
  const double maxval = static_cast<double>(h.maxval);
  for (long i = 0; i < h.width * h.height; ++i) {
    const unsigned v = bytes[h.raster + static_cast<std::size_t>(i)];
    if (v > static_cast<unsigned>(h.maxval)) throw IoError(name + ": PGM sample exceeds maxval");
    img.pixels.data()[i] = v / maxval;
  }
  return img;
}

ImageGray decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw IoError(name + ": " + png.message);
  }
  if (png.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&png);
    throw IoError(name + ": 16-bit PNG is not supported");
  }
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw IoError(name + ": " + msg);
  }
  ImageGray img;
  img.pixels.resize(png.height, png.width);
  const Index n = img.pixels.size();
  for (Index i = 0; i < n; ++i) {
    if (color) {
      const auto* p = &buf[static_cast<std::size_t>(3 * i)];
      const double lum = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      img.pixels.data()[i] = std::clamp(lum / 255.0, 0.0, 1.0);
    } else {
      img.pixels.data()[i] = buf[static_cast<std::size_t>(i)] / 255.0;
    }
  }
  return img;
}

void write_png(const std::filesystem::path& path, Index width, Index height, bool rgb,
               const std::vector<std::uint8_t>& data) {
  if (width < 1 || height < 1) throw IoError("refusing to write zero-size image " + path.string());
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, data.data(), 0, nullptr)) {
    throw IoError(path.string() + ": " + png.message);
  }
}

std::vector<std::uint8_t> quantized(const ImageGray& image) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(image.pixels.size()));
  for (Index i = 0; i < image.pixels.size(); ++i) out[i] = quantize(image.pixels.data()[i]);
  return out;
}

std::string pgm_header(Index width, Index height) {
  return "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
}

}  // namespace

ImageGray load_grayscale(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const std::string name = path.string();
  static constexpr unsigned char png_magic[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(png_magic, png_magic + 8, bytes.begin())) {
    return decode_png(bytes, name);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') return decode_pgm(bytes, name);
  throw IoError(name + ": unsupported image format (expected 8-bit PGM P5 or PNG)");
}

void save_pgm(const ImageGray& image, const std::filesystem::path& path) {
  if (image.width() < 1 || image.height() < 1) {
    throw IoError("refusing to write zero-size image " + path.string());
  }
  write_file(path, pgm_header(image.width(), image.height()), quantized(image));
}

void save_png(const ImageGray& image, const std::filesystem::path& path) {
  write_png(path, image.width(), image.height(), false, quantized(image));
}

void save_png(const ImageRGB& image, const std::filesystem::path& path) {
  write_png(path, image.width, image.height, true, image.pixels);
}

void save_label_pgm(const LabelMap& labels, const std::filesystem::path& path) {
  if (labels.size() == 0) throw IoError("refusing to write zero-size label map " + path.string());
  std::vector<std::uint8_t> body(static_cast<std::size_t>(labels.size()));
  for (Index i = 0; i < labels.size(); ++i) {
    const int id = labels.data()[i];
    if (id < 0 || id > 255) throw IoError(path.string() + ": label id out of 8-bit range");
    body[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(id);
  }
  write_file(path, pgm_header(labels.cols(), labels.rows()), body);
}

LabelMap load_label_pgm(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw IoError(path.string() + ": not a P5 PGM");
  }
  const PgmHeader h = parse_pgm_header(bytes, path.string());
  LabelMap labels(h.height, h.width);
  for (long i = 0; i < h.width * h.height; ++i) {
    labels.data()[i] = bytes[h.raster + static_cast<std::size_t>(i)];
  }
  return labels;
}

std::array<std::size_t, 256> histogram(const ImageGray& image) {
  std::array<std::size_t, 256> counts{};
  for (Index i = 0; i < image.pixels.size(); ++i) ++counts[quantize(image.pixels.data()[i])];
  return counts;
}

std::array<std::uint8_t, 3> palette_color(int label, int q_max) {
  if (q_max < 1 || label < 0 || label >= q_max) {
    throw std::out_of_range("palette_color: label " + std::to_string(label) + " outside [0, " +
                            std::to_string(q_max) + ")");
  }
  const double h = 6.0 * label / q_max;
  const int sector = static_cast<int>(h);
  const double f = h - sector;
  const auto up = static_cast<std::uint8_t>(std::lround(255.0 * f));
  const auto down = static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - f)));
  switch (sector) {
    case 0: return {255, up, 0};
    case 1: return {down, 255, 0};
    case 2: return {0, 255, up};
    case 3: return {0, down, 255};
    case 4: return {up, 0, 255};
    default: return {255, 0, down};
  }
}

ImageRGB colorize(const LabelMap& labels, int q_max) {
  ImageRGB out;
  out.width = labels.cols();
  out.height = labels.rows();
  out.pixels.resize(static_cast<std::size_t>(3 * labels.size()));
  std::vector<std::array<std::uint8_t, 3>> table(static_cast<std::size_t>(std::max(q_max, 0)));
  for (int l = 0; l < q_max; ++l) table[static_cast<std::size_t>(l)] = palette_color(l, q_max);
  for (Index i = 0; i < labels.size(); ++i) {
    const int id = labels.data()[i];
    if (id < 0 || id >= q_max) {
      throw std::out_of_range("colorize: label " + std::to_string(id) + " outside palette");
    }
    std::copy_n(table[static_cast<std::size_t>(id)].begin(), 3, &out.pixels[static_cast<std::size_t>(3 * i)]);
  }
  return out;
}

ImageGray labels_to_gray(const LabelMap& labels, const ImageGray& source, bool invert) {
  if (labels.rows() != source.height() || labels.cols() != source.width()) {
    throw ShapeError("labels_to_gray: label map and source image differ in size");
  }
  std::map<int, std::pair<double, std::size_t>> acc;
  for (Index i = 0; i < labels.size(); ++i) {
    auto& a = acc[labels.data()[i]];
    a.first += source.pixels.data()[i];
    ++a.second;
  }
  std::map<int, double> level;
  for (const auto& [id, a] : acc) {
    const double mean = std::clamp(a.first / static_cast<double>(a.second), 0.0, 1.0);
    level[id] = invert ? 1.0 - mean : mean;
  }
  ImageGray out;
  out.pixels.resize(source.height(), source.width());
  for (Index i = 0; i < labels.size(); ++i) out.pixels.data()[i] = level[labels.data()[i]];
  return out;
}

Tensor<double> to_tensor(const ImageGray& image) {
  Tensor<double> t(1, image.height(), image.width());
  t.channel(0) = image.pixels;
  return t;
}

}  // namespace pvseg
