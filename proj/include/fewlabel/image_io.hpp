#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "fewlabel/common.hpp"
#include "fewlabel/tensor.hpp"

namespace fewlabel {

// 8-bit interleaved RGB image, row-major, top row first.
struct ImageRGB8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
};

// ----- PPM (P6, binary) -----

inline void write_ppm(const std::string& path, const ImageRGB8& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

inline ImageRGB8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error(path + ": not a P6 ppm");
  auto next_int = [&in, &path]() {
    int c = in.get();
    while (std::isspace(c) || c == '#') {
      if (c == '#') {
        while (c != '\n' && c != EOF) c = in.get();
      }
      c = in.get();
    }
    int v = 0;
    while (std::isdigit(c)) {
      v = v * 10 + (c - '0');
      c = in.get();
    }
    if (v <= 0) throw std::runtime_error(path + ": bad ppm header");
    return v;
  };
  ImageRGB8 img;
  img.width = next_int();
  img.height = next_int();
  next_int();  // maxval, single whitespace already consumed by the loop above
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error(path + ": truncated ppm");
  return img;
}

// ----- BMP (24-bit uncompressed) -----

inline void write_bmp(const std::string& path, const ImageRGB8& img) {
  const int W = img.width, H = img.height;
  const int row_bytes = (3 * W + 3) / 4 * 4;
  const std::uint32_t data_size = static_cast<std::uint32_t>(row_bytes) * H;
  const std::uint32_t file_size = 54 + data_size;
  std::vector<std::uint8_t> header(54, 0);
  auto put32 = [&](int off, std::uint32_t v) {
    header[off] = v & 0xff;
    header[off + 1] = (v >> 8) & 0xff;
    header[off + 2] = (v >> 16) & 0xff;
    header[off + 3] = (v >> 24) & 0xff;
  };
  header[0] = 'B';
  header[1] = 'M';
  put32(2, file_size);
  put32(10, 54);
  put32(14, 40);
  put32(18, static_cast<std::uint32_t>(W));
  put32(22, static_cast<std::uint32_t>(H));
  header[26] = 1;
  header[28] = 24;
  put32(34, data_size);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(header.data()), 54);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(row_bytes), 0);
  for (int y = H - 1; y >= 0; --y) {  // BMP stores bottom row first
    for (int x = 0; x < W; ++x) {
      row[static_cast<std::size_t>(x) * 3 + 0] = img.at(y, x, 2);
      row[static_cast<std::size_t>(x) * 3 + 1] = img.at(y, x, 1);
      row[static_cast<std::size_t>(x) * 3 + 2] = img.at(y, x, 0);
    }
    out.write(reinterpret_cast<const char*>(row.data()), row_bytes);
  }
}

inline ImageRGB8 read_bmp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<std::uint8_t> header(54);
  in.read(reinterpret_cast<char*>(header.data()), 54);
  if (!in || header[0] != 'B' || header[1] != 'M') throw std::runtime_error(path + ": not a bmp");
  auto get32 = [&](int off) {
    return static_cast<std::uint32_t>(header[off]) | (header[off + 1] << 8) |
           (header[off + 2] << 16) | (static_cast<std::uint32_t>(header[off + 3]) << 24);
  };
  const std::uint32_t data_off = get32(10);
  const int W = static_cast<int>(get32(18));
  const int H = static_cast<int>(get32(22));
  const int bpp = header[28];
  if (bpp != 24 || get32(30) != 0) throw std::runtime_error(path + ": only uncompressed 24-bit bmp supported");
  in.seekg(data_off);
  const int row_bytes = (3 * W + 3) / 4 * 4;
  ImageRGB8 img;
  img.width = W;
  img.height = H;
  img.pixels.resize(static_cast<std::size_t>(W) * H * 3);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(row_bytes));
  for (int y = H - 1; y >= 0; --y) {
    in.read(reinterpret_cast<char*>(row.data()), row_bytes);
    if (!in) throw std::runtime_error(path + ": truncated bmp");
    for (int x = 0; x < W; ++x) {
      img.at(y, x, 0) = row[static_cast<std::size_t>(x) * 3 + 2];
      img.at(y, x, 1) = row[static_cast<std::size_t>(x) * 3 + 1];
      img.at(y, x, 2) = row[static_cast<std::size_t>(x) * 3 + 0];
    }
  }
  return img;
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline ImageRGB8 read_image(const std::string& path) {
  if (ends_with(path, ".ppm")) return read_ppm(path);
  if (ends_with(path, ".bmp")) return read_bmp(path);
  throw std::runtime_error(path + ": unsupported image format (use .ppm or .bmp)");
}

inline void write_image(const std::string& path, const ImageRGB8& img) {
  if (ends_with(path, ".ppm")) return write_ppm(path, img);
  if (ends_with(path, ".bmp")) return write_bmp(path, img);
  throw std::runtime_error(path + ": unsupported image format (use .ppm or .bmp)");
}

// Conversions between byte images and [-1,1] float tensors [H,W,3].
inline Tensor<float> image_to_tensor(const ImageRGB8& img) {
  Tensor<float> t(Shape{img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    t.data[i] = static_cast<float>(img.pixels[i]) / 127.5f - 1.0f;
  }
  return t;
}

inline ImageRGB8 tensor_to_image(const Tensor<float>& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw ArgumentError("tensor_to_image: expected [H,W,3]");
  ImageRGB8 img;
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.pixels.resize(t.data.size());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    float v = (t.data[i] + 1.0f) * 127.5f;
    v = std::min(255.0f, std::max(0.0f, v));
    img.pixels[i] = static_cast<std::uint8_t>(v + 0.5f);
  }
  return img;
}

}  // namespace fewlabel
