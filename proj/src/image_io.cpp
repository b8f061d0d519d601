#include "rebalance/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "rebalance/error.hpp"

namespace rebalance {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Reads the next whitespace-delimited PNM header token, skipping comments.
std::string pnm_token(std::istream& in) {
  std::string token;
  int c = in.get();
  for (;;) {
    while (c != EOF && std::isspace(c)) c = in.get();
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
      continue;
    }
    break;
  }
  while (c != EOF && !std::isspace(c)) {
    token.push_back(static_cast<char>(c));
    c = in.get();
  }
  return token;
}

RawImage decode_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open image " + path.string());
  const std::string magic = pnm_token(in);
  if (magic != "P5" && magic != "P2") throw IngestError("not a PGM file: " + path.string());

  RawImage img;
  try {
    img.width = std::stoi(pnm_token(in));
    img.height = std::stoi(pnm_token(in));
    img.maxval = static_cast<unsigned>(std::stoul(pnm_token(in)));
  } catch (const std::exception&) {
    throw IngestError("malformed PGM header in " + path.string());
  }
  if (img.width <= 0 || img.height <= 0) {
    throw IngestError("zero-dimension image " + path.string());
  }
  if (img.maxval == 0 || img.maxval > 255) {
    throw IngestError("unsupported PGM maxval (8-bit only) in " + path.string());
  }
  const auto count = static_cast<std::size_t>(img.width) * img.height;
  img.samples.resize(count);
  if (magic == "P5") {
    std::vector<unsigned char> bytes(count);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
      throw IngestError("truncated PGM data in " + path.string());
    }
    std::copy(bytes.begin(), bytes.end(), img.samples.begin());
  } else {
    for (auto& s : img.samples) {
      const std::string tok = pnm_token(in);
      if (tok.empty()) throw IngestError("truncated PGM data in " + path.string());
      s = static_cast<std::uint16_t>(std::stoul(tok));
    }
  }
  for (auto s : img.samples) {
    if (s > img.maxval) throw IngestError("PGM sample exceeds maxval in " + path.string());
  }
  return img;
}

// libpng reports errors by longjmp, so the setjmp frames below hold only
// trivially destructible locals; containers live in the callers.
bool read_png(std::FILE* file, RawImage* img, std::vector<unsigned char>* buffer,
              std::vector<png_bytep>* rows) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    return false;
  }
  png_init_io(png, file);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img->width = static_cast<int>(png_get_image_width(png, info));
  img->height = static_cast<int>(png_get_image_height(png, info));
  img->channels = png_get_channels(png, info);
  img->maxval = 255;
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer->resize(stride * static_cast<std::size_t>(img->height));
  rows->resize(static_cast<std::size_t>(img->height));
  for (int r = 0; r < img->height; ++r) (*rows)[r] = buffer->data() + stride * r;
  png_read_image(png, rows->data());
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

RawImage decode_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IngestError("cannot open image " + path.string());
  RawImage img;
  std::vector<unsigned char> buffer;
  std::vector<png_bytep> rows;
  if (!read_png(file.get(), &img, &buffer, &rows)) throw IngestError("undecodable PNG " + path.string());
  if (img.width <= 0 || img.height <= 0) throw IngestError("zero-dimension image " + path.string());
  if (img.channels != 1 && img.channels != 3) {
    throw IngestError("unsupported PNG channel layout in " + path.string());
  }
  const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
  img.samples.resize(stride * img.height);
  for (int r = 0; r < img.height; ++r) {
    std::copy(rows[r], rows[r] + stride, img.samples.begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return img;
}

bool write_png_rows(std::FILE* file, const RawImage* image, const unsigned char* bytes) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) return false;
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    return false;
  }
  png_init_io(png, file);
  png_set_IHDR(png, info, image->width, image->height, 8,
               image->channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(image->width) * image->channels;
  for (int r = 0; r < image->height; ++r) png_write_row(png, bytes + stride * r);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

}  // namespace

RawImage decode_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IngestError("missing image file " + path.string());
  if (has_png_signature(path)) return decode_png(path);
  return decode_pgm(path);
}

ImagePatch to_grayscale(const RawImage& image) {
  if (image.width <= 0 || image.height <= 0) throw IngestError("zero-dimension image");
  ImagePatch out(image.height, image.width);
  const double scale = 1.0 / image.maxval;
  // Integer luma weights keep e.g. full white at exactly 1.0.
  const double luma_scale = 1.0 / (1000.0 * image.maxval);
  const std::size_t n = out.pixels.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (image.channels == 1) {
      out.pixels[i] = image.samples[i] * scale;
    } else {
      const auto* px = &image.samples[i * image.channels];
      out.pixels[i] = (299.0 * px[0] + 587.0 * px[1] + 114.0 * px[2]) * luma_scale;
    }
  }
  return out;
}

ImagePatch resize_bilinear(const ImagePatch& image, PatchSize size) {
  if (size.height <= 0 || size.width <= 0 || image.height <= 0 || image.width <= 0) {
    throw IngestError("zero-dimension resize");
  }
  if (size.height == image.height && size.width == image.width) return image;

  auto source_coord = [](int dst, int in_len, int out_len) {
    const double scale = static_cast<double>(in_len) / out_len;
    const double s = (dst + 0.5) * scale - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in_len - 1));
  };

  ImagePatch out(size.height, size.width);
  for (int r = 0; r < size.height; ++r) {
    const double sy = source_coord(r, image.height, size.height);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - y0;
    for (int c = 0; c < size.width; ++c) {
      const double sx = source_coord(c, image.width, size.width);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - x0;
      const double top = image.at(y0, x0) * (1.0 - fx) + image.at(y0, x1) * fx;
      const double bottom = image.at(y1, x0) * (1.0 - fx) + image.at(y1, x1) * fx;
      out.at(r, c) = std::clamp(top * (1.0 - fy) + bottom * fy, 0.0, 1.0);
    }
  }
  return out;
}

ImagePatch flip_horizontal(const ImagePatch& image) {
  ImagePatch out(image.height, image.width);
  for (int r = 0; r < image.height; ++r) {
    for (int c = 0; c < image.width; ++c) out.at(r, c) = image.at(r, image.width - 1 - c);
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const ImagePatch& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IngestError("write failed for " + path.string());
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) throw IngestError("PNG writer: 1 or 3 channels");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IngestError("cannot write " + path.string());
  std::vector<unsigned char> bytes(image.samples.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<unsigned char>(image.samples[i]);
  if (!write_png_rows(file.get(), &image, bytes.data())) throw IngestError("PNG encode failed for " + path.string());
}

}  // namespace rebalance
