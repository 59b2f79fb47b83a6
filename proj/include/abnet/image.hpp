#pragma once

#include <string>
#include <vector>

#include "abnet/tensor.hpp"

namespace abnet {

// Planar RGB raster, values in [0,1], channel-major like the network input.
struct Image {
  int width = 0, height = 0;
  std::vector<double> rgb;  // [3][height][width]

  static Image filled(int w, int h, double r, double g, double b);
  double& at(int c, int y, int x) { return rgb[((std::size_t)c * height + y) * width + x]; }
  double at(int c, int y, int x) const { return rgb[((std::size_t)c * height + y) * width + x]; }

  Tensor to_tensor() const;  // [3,H,W]
};

// luma weights 0.299/0.587/0.114, result in [0,1]
std::vector<double> to_grayscale(const Image& img);

Image bilinear_resize(const Image& img, int out_w, int out_h);
Image crop(const Image& img, int x, int y, int w, int h);

// exact pixel remaps for square images
Image flip_horizontal(const Image& img);
Image rotate90(const Image& img);
Image rotate180(const Image& img);
Image rotate270(const Image& img);

// binary PPM (P6, maxval 255)
void write_ppm(const Image& img, const std::string& path);
Image read_ppm(const std::string& path);

}  // namespace abnet
