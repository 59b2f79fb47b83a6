#include "abnet/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace abnet {

namespace {

Tensor kaiming_conv(int out_ch, int in_ch, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / (in_ch * 9.0));
  std::normal_distribution<double> d(0.0, stddev);
  Tensor k = Tensor::zeros({out_ch, in_ch, 3, 3});
  for (std::int64_t i = 0; i < k.size(); ++i) k.data()[i] = d(rng);
  k.set_requires_grad(true);
  return k;
}

}  // namespace

void ConvBlock::init(int in_channels, int out_channels, int padding_, std::mt19937_64& rng) {
  padding = padding_;
  kernels = kaiming_conv(out_channels, in_channels, rng);
  bias = Tensor::zeros({out_channels});
  gamma = Tensor::full({out_channels}, 1.0);
  beta = Tensor::zeros({out_channels});
  bias.set_requires_grad(true);
  gamma.set_requires_grad(true);
  beta.set_requires_grad(true);
  bn.init(out_channels);
}

Tensor ConvBlock::forward(const Tensor& input, bool train, Tape* tape) {
  Tensor c = conv2d(input, kernels, bias, padding, tape);
  Tensor n = batchnorm(c, gamma, beta, bn, train, tape);
  return relu(n, tape);
}

std::vector<std::pair<std::string, Tensor>> ConvBlock::named_params(const std::string& prefix) {
  return {{prefix + ".kernels", kernels},
          {prefix + ".bias", bias},
          {prefix + ".gamma", gamma},
          {prefix + ".beta", beta}};
}

void Backbone::init(std::mt19937_64& rng) {
  block1.init(3, kChannels, 0, rng);
  block2.init(kChannels, kChannels, 0, rng);
  block3.init(kChannels, kChannels, 1, rng);
  block4.init(kChannels, kChannels, 1, rng);
}

int Backbone::feature_dim(int input_size) {
  if (input_size < 12)
    throw std::invalid_argument("backbone: input size " + std::to_string(input_size) +
                                " below the minimum 12 for the conv/pool chain");
  const int after1 = (input_size - 2) / 2;  // conv pad0, pool
  const int after2 = (after1 - 2) / 2;      // conv pad0, pool
  return after2;                            // blocks 3 and 4 keep the size (pad1)
}

Tensor Backbone::embed(const Tensor& image_chw, bool train, Tape* tape) {
  if (image_chw.rank() != 3 || image_chw.dim(0) != 3)
    throw std::invalid_argument("embed: input must be [3,H,W]");
  if (image_chw.dim(1) != image_chw.dim(2))
    throw std::invalid_argument("embed: square input required, got " +
                                std::to_string(image_chw.dim(1)) + "x" +
                                std::to_string(image_chw.dim(2)));
  feature_dim(image_chw.dim(1));  // validates the minimum size
  Tensor h = maxpool2d(block1.forward(image_chw, train, tape), tape);
  h = maxpool2d(block2.forward(h, train, tape), tape);
  h = block3.forward(h, train, tape);
  return block4.forward(h, train, tape);
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& [name, t] : block1.named_params("backbone.block1")) out.emplace_back(name, t);
  for (auto& [name, t] : block2.named_params("backbone.block2")) out.emplace_back(name, t);
  for (auto& [name, t] : block3.named_params("backbone.block3")) out.emplace_back(name, t);
  for (auto& [name, t] : block4.named_params("backbone.block4")) out.emplace_back(name, t);
  return out;
}

FeatureSet embed_set(Backbone& backbone, const Image& image, const PatchSet& patches,
                     int input_size, bool train, Tape* tape) {
  FeatureSet fs;
  const Image global = (image.width == input_size && image.height == input_size)
                           ? image
                           : bilinear_resize(image, input_size, input_size);
  fs.global.map = backbone.embed(global.to_tensor(), train, tape);
  fs.global.source = -1;
  int idx = 0;
  for (const ScoredBox& e : patches.entries) {
    const Image patch = bilinear_resize(crop(image, e.box.x, e.box.y, e.box.w, e.box.h),
                                        input_size, input_size);
    FeatureMap fm;
    fm.map = backbone.embed(patch.to_tensor(), train, tape);
    fm.source = idx++;
    fs.patches.push_back(std::move(fm));
  }
  return fs;
}

}  // namespace abnet
