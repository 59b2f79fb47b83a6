#include "abnet/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace abnet {

Image Image::filled(int w, int h, double r, double g, double b) {
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize((std::size_t)3 * w * h);
  const double v[3] = {r, g, b};
  for (int c = 0; c < 3; ++c)
    std::fill(img.rgb.begin() + (std::size_t)c * w * h, img.rgb.begin() + (std::size_t)(c + 1) * w * h,
              v[c]);
  return img;
}

Tensor Image::to_tensor() const { return Tensor::from({3, height, width}, rgb); }

std::vector<double> to_grayscale(const Image& img) {
  const std::size_t n = (std::size_t)img.width * img.height;
  std::vector<double> gray(n);
  for (std::size_t i = 0; i < n; ++i)
    gray[i] = 0.299 * img.rgb[i] + 0.587 * img.rgb[n + i] + 0.114 * img.rgb[2 * n + i];
  return gray;
}

Image bilinear_resize(const Image& img, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw std::invalid_argument("bilinear_resize: non-positive size");
  Image out;
  out.width = out_w;
  out.height = out_h;
  out.rgb.resize((std::size_t)3 * out_w * out_h);
  const double sx = (double)img.width / out_w;
  const double sy = (double)img.height / out_h;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min((int)fy, img.height - 1);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min((int)fx, img.width - 1);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
        const double bot = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
        out.at(c, y, x) = (1 - wy) * top + wy * bot;
      }
    }
  }
  return out;
}

Image crop(const Image& img, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > img.width || y + h > img.height)
    throw std::invalid_argument("crop: box (" + std::to_string(x) + "," + std::to_string(y) + "," +
                                std::to_string(w) + "," + std::to_string(h) + ") outside " +
                                std::to_string(img.width) + "x" + std::to_string(img.height));
  Image out;
  out.width = w;
  out.height = h;
  out.rgb.resize((std::size_t)3 * w * h);
  for (int c = 0; c < 3; ++c)
    for (int yy = 0; yy < h; ++yy)
      for (int xx = 0; xx < w; ++xx) out.at(c, yy, xx) = img.at(c, y + yy, x + xx);
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

Image rotate90(const Image& img) {
  if (img.width != img.height) throw std::invalid_argument("rotate90: square image required");
  Image out = img;
  const int n = img.width;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) out.at(c, y, x) = img.at(c, n - 1 - x, y);
  return out;
}

Image rotate180(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        out.at(c, y, x) = img.at(c, img.height - 1 - y, img.width - 1 - x);
  return out;
}

Image rotate270(const Image& img) {
  if (img.width != img.height) throw std::invalid_argument("rotate270: square image required");
  Image out = img;
  const int n = img.width;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) out.at(c, y, x) = img.at(c, x, n - 1 - y);
  return out;
}

void write_ppm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> row((std::size_t)img.width * 3);
  const std::size_t n = (std::size_t)img.width * img.height;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = img.rgb[(std::size_t)c * n + (std::size_t)y * img.width + x];
        row[(std::size_t)x * 3 + c] =
            (unsigned char)std::clamp((int)std::lround(v * 255.0), 0, 255);
      }
    }
    f.write((const char*)row.data(), (std::streamsize)row.size());
  }
  if (!f) throw std::runtime_error("write_ppm: short write to " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not a P6 PPM");
  auto next_int = [&]() {
    int v;
    f >> std::ws;
    while (f.peek() == '#') f.ignore(1 << 16, '\n'), f >> std::ws;
    if (!(f >> v)) throw std::runtime_error("read_ppm: malformed header in " + path);
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (maxval != 255) throw std::runtime_error("read_ppm: " + path + " maxval must be 255");
  f.ignore(1);  // single whitespace after header
  std::vector<unsigned char> raw((std::size_t)w * h * 3);
  f.read((char*)raw.data(), (std::streamsize)raw.size());
  if (f.gcount() != (std::streamsize)raw.size())
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize((std::size_t)3 * w * h);
  const std::size_t n = (std::size_t)w * h;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) img.rgb[(std::size_t)c * n + i] = raw[i * 3 + c] / 255.0;
  return img;
}

}  // namespace abnet
