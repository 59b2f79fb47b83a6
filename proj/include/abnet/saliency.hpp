#pragma once

#include <map>
#include <string>
#include <vector>

#include "abnet/image.hpp"

namespace abnet {

struct BoundingBox {
  int x = 0, y = 0, w = 0, h = 0;
  bool operator==(const BoundingBox&) const = default;
  long long area() const { return (long long)w * h; }
};

double iou(const BoundingBox& a, const BoundingBox& b);

struct SaliencyMap {
  int width = 0, height = 0;
  std::vector<double> value;  // in [0,1], border seeds are 0
  int iterations = 0;
  bool converged = true;
  double at(int y, int x) const { return value[(std::size_t)y * width + x]; }
};

struct PatchConfig {
  double area_min_frac = 0.01;
  double area_max_frac = 0.50;
  double aspect_min = 1.0 / 3.0;
  double aspect_max = 3.0;
  double nms_threshold = 0.5;
  int n_patches = 5;
};

struct ScoredBox {
  BoundingBox box;
  double importance = 0.0;
};

struct PatchSet {
  std::vector<ScoredBox> entries;  // exactly n_patches, descending importance prefix
};

// Connected components of near-equal color plus greedy merges of adjacent
// segments by mean-color distance, collecting boxes at every scale.
std::vector<BoundingBox> propose_regions(const Image& img, double color_threshold = 0.08);

bool geometry_filter(const BoundingBox& box, int image_w, int image_h, const PatchConfig& cfg);

// Minimum barrier distance to the image border over the grayscale intensity,
// approximated by alternating raster scans iterated to a fixed point.
SaliencyMap mbd_saliency(const Image& img, int max_iterations = 8);

// scan core exposed for the monotone-convergence property tests; runs exactly
// `passes` alternating sweeps on one orientation
std::vector<double> mbd_scan(const std::vector<double>& gray, int width, int height, int passes);

double patch_importance(const BoundingBox& box, const SaliencyMap& sal, const PatchConfig& cfg);

// Greedy pass over boxes sorted by ascending area: a box is kept iff its IoU
// with every kept box stays at or below the threshold, so smaller boxes win
// overlaps.  Area ties prefer higher importance, then input order.
std::vector<ScoredBox> nms_keep_smaller(const std::vector<ScoredBox>& boxes, double threshold);

PatchSet extract_patch_set(const Image& img, const PatchConfig& cfg);

// line-delimited cache: image id line, then n_patches lines "x y w h importance"
void write_patch_cache(const std::map<std::string, PatchSet>& cache, const std::string& path);
std::map<std::string, PatchSet> read_patch_cache(const std::string& path);

}  // namespace abnet
