#include "abnet/saliency.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace abnet {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const int ix0 = std::max(a.x, b.x), iy0 = std::max(a.y, b.y);
  const int ix1 = std::min(a.x + a.w, b.x + b.w), iy1 = std::min(a.y + a.h, b.y + b.h);
  const long long iw = std::max(0, ix1 - ix0), ih = std::max(0, iy1 - iy0);
  const long long inter = iw * ih;
  const long long uni = a.area() + b.area() - inter;
  return uni > 0 ? (double)inter / (double)uni : 0.0;
}

// ---- region proposals -------------------------------------------------------

namespace {

struct DisjointSet {
  std::vector<int> parent, rank_;
  explicit DisjointSet(int n) : parent(n), rank_(n, 0) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent[b] = a;
    rank_[a] += (int)(rank_[a] == rank_[b]);
  }
};

struct Segment {
  long long size = 0;
  double sum[3] = {0, 0, 0};
  int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
  bool alive = false;

  void absorb_pixel(int x, int y, double r, double g, double b) {
    ++size;
    sum[0] += r;
    sum[1] += g;
    sum[2] += b;
    x0 = std::min(x0, x);
    y0 = std::min(y0, y);
    x1 = std::max(x1, x);
    y1 = std::max(y1, y);
  }
  BoundingBox box() const { return {x0, y0, x1 - x0 + 1, y1 - y0 + 1}; }
  double mean(int c) const { return sum[c] / (double)size; }
};

double color_dist(const Segment& a, const Segment& b) {
  double d2 = 0.0;
  for (int c = 0; c < 3; ++c) {
    const double d = a.mean(c) - b.mean(c);
    d2 += d * d;
  }
  return std::sqrt(d2);
}

}  // namespace

std::vector<BoundingBox> propose_regions(const Image& img, double color_threshold) {
  if (img.width < 16 || img.height < 16)
    throw std::invalid_argument("propose_regions: image " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + " below 16x16");
  const int W = img.width, H = img.height;
  const std::size_t n = (std::size_t)W * H;

  auto pix_dist = [&](std::size_t a, std::size_t b) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double d = img.rgb[c * n + a] - img.rgb[c * n + b];
      d2 += d * d;
    }
    return std::sqrt(d2);
  };

  DisjointSet ds((int)n);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = (std::size_t)y * W + x;
      if (x + 1 < W && pix_dist(p, p + 1) <= color_threshold) ds.unite((int)p, (int)(p + 1));
      if (y + 1 < H && pix_dist(p, p + W) <= color_threshold) ds.unite((int)p, (int)(p + W));
    }

  // compact segment ids in first-pixel order (deterministic)
  std::vector<int> seg_of(n);
  std::vector<int> root_to_seg(n, -1);
  std::vector<Segment> segs;
  for (std::size_t p = 0; p < n; ++p) {
    const int root = ds.find((int)p);
    if (root_to_seg[root] < 0) {
      root_to_seg[root] = (int)segs.size();
      segs.emplace_back();
      segs.back().alive = true;
    }
    const int s = root_to_seg[root];
    seg_of[p] = s;
    segs[s].absorb_pixel((int)(p % W), (int)(p / W),
                         img.rgb[p], img.rgb[n + p], img.rgb[2 * n + p]);
  }

  std::vector<BoundingBox> boxes;
  for (const Segment& s : segs) boxes.push_back(s.box());

  std::set<std::pair<int, int>> adjacency;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t p = (std::size_t)y * W + x;
      if (x + 1 < W && seg_of[p] != seg_of[p + 1])
        adjacency.insert({std::min(seg_of[p], seg_of[p + 1]), std::max(seg_of[p], seg_of[p + 1])});
      if (y + 1 < H && seg_of[p] != seg_of[p + W])
        adjacency.insert({std::min(seg_of[p], seg_of[p + W]), std::max(seg_of[p], seg_of[p + W])});
    }

  // greedy bottom-up merging by mean-color similarity, across all scales
  while (!adjacency.empty()) {
    auto best = adjacency.end();
    double best_dist = std::numeric_limits<double>::infinity();
    for (auto it = adjacency.begin(); it != adjacency.end(); ++it) {
      const double d = color_dist(segs[it->first], segs[it->second]);
      if (d < best_dist) {
        best_dist = d;
        best = it;
      }
    }
    const auto [keep, gone] = *best;
    Segment& a = segs[keep];
    Segment& b = segs[gone];
    a.size += b.size;
    for (int c = 0; c < 3; ++c) a.sum[c] += b.sum[c];
    a.x0 = std::min(a.x0, b.x0);
    a.y0 = std::min(a.y0, b.y0);
    a.x1 = std::max(a.x1, b.x1);
    a.y1 = std::max(a.y1, b.y1);
    b.alive = false;
    boxes.push_back(a.box());

    std::vector<std::pair<int, int>> to_add;
    for (auto it = adjacency.begin(); it != adjacency.end();) {
      if (it->first == gone || it->second == gone) {
        const int other = it->first == gone ? it->second : it->first;
        if (other != keep) to_add.push_back({std::min(other, keep), std::max(other, keep)});
        it = adjacency.erase(it);
      } else {
        ++it;
      }
    }
    adjacency.insert(to_add.begin(), to_add.end());
  }

  std::sort(boxes.begin(), boxes.end(), [](const BoundingBox& a, const BoundingBox& b) {
    return std::tie(a.x, a.y, a.w, a.h) < std::tie(b.x, b.y, b.w, b.h);
  });
  boxes.erase(std::unique(boxes.begin(), boxes.end()), boxes.end());
  return boxes;
}

// ---- geometry filter ---------------------------------------------------------

bool geometry_filter(const BoundingBox& box, int image_w, int image_h, const PatchConfig& cfg) {
  const double frac = (double)box.area() / ((double)image_w * image_h);
  if (frac < cfg.area_min_frac || frac > cfg.area_max_frac) return false;
  const double aspect = (double)box.w / (double)box.h;
  return aspect >= cfg.aspect_min && aspect <= cfg.aspect_max;
}

// ---- minimum barrier distance --------------------------------------------------

namespace {

// One alternating sweep over the distance map.  Even passes run row-major and
// relax from the left/up neighbors, odd passes run in reverse with right/down.
// Returns the number of cells whose distance shrank.
int mbd_sweep(const std::vector<double>& gray, int W, int H, std::vector<double>& dist,
              std::vector<double>& hi, std::vector<double>& lo, bool reverse) {
  int changed = 0;
  auto relax = [&](std::size_t p, std::size_t q) {
    const double nh = std::max(hi[q], gray[p]);
    const double nl = std::min(lo[q], gray[p]);
    if (nh - nl < dist[p]) {
      dist[p] = nh - nl;
      hi[p] = nh;
      lo[p] = nl;
      ++changed;
    }
  };
  if (!reverse) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const std::size_t p = (std::size_t)y * W + x;
        if (x > 0) relax(p, p - 1);
        if (y > 0) relax(p, p - W);
      }
  } else {
    for (int y = H - 1; y >= 0; --y)
      for (int x = W - 1; x >= 0; --x) {
        const std::size_t p = (std::size_t)y * W + x;
        if (x + 1 < W) relax(p, p + 1);
        if (y + 1 < H) relax(p, p + W);
      }
  }
  return changed;
}

struct ScanResult {
  std::vector<double> dist;
  int iterations = 0;
  bool converged = false;
};

ScanResult mbd_run(const std::vector<double>& gray, int W, int H, int max_iterations) {
  const std::size_t n = (std::size_t)W * H;
  ScanResult r;
  r.dist.assign(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi = gray, lo = gray;
  for (int x = 0; x < W; ++x) {
    r.dist[x] = 0.0;
    r.dist[(std::size_t)(H - 1) * W + x] = 0.0;
  }
  for (int y = 0; y < H; ++y) {
    r.dist[(std::size_t)y * W] = 0.0;
    r.dist[(std::size_t)y * W + W - 1] = 0.0;
  }
  for (int it = 0; it < max_iterations; ++it) {
    int changed = mbd_sweep(gray, W, H, r.dist, hi, lo, false);
    changed += mbd_sweep(gray, W, H, r.dist, hi, lo, true);
    r.iterations = it + 1;
    if (changed == 0) {
      r.converged = true;
      break;
    }
  }
  return r;
}

std::vector<double> transpose_grid(const std::vector<double>& v, int W, int H) {
  std::vector<double> t((std::size_t)W * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) t[(std::size_t)x * H + y] = v[(std::size_t)y * W + x];
  return t;
}

}  // namespace

std::vector<double> mbd_scan(const std::vector<double>& gray, int width, int height, int passes) {
  const std::size_t n = (std::size_t)width * height;
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<double> hi = gray, lo = gray;
  for (int x = 0; x < width; ++x) {
    dist[x] = 0.0;
    dist[(std::size_t)(height - 1) * width + x] = 0.0;
  }
  for (int y = 0; y < height; ++y) {
    dist[(std::size_t)y * width] = 0.0;
    dist[(std::size_t)y * width + width - 1] = 0.0;
  }
  for (int p = 0; p < passes; ++p) mbd_sweep(gray, width, height, dist, hi, lo, p % 2 == 1);
  return dist;
}

SaliencyMap mbd_saliency(const Image& img, int max_iterations) {
  const int W = img.width, H = img.height;
  const std::vector<double> gray = to_grayscale(img);

  // the raster scan is orientation-dependent; running it on the transpose as
  // well and keeping the elementwise minimum makes the output transpose exactly
  // with the image (both scans upper-bound the true barrier distance)
  ScanResult a = mbd_run(gray, W, H, max_iterations);
  ScanResult b = mbd_run(transpose_grid(gray, W, H), H, W, max_iterations);
  const std::vector<double> bt = transpose_grid(b.dist, H, W);

  SaliencyMap map;
  map.width = W;
  map.height = H;
  map.value.resize((std::size_t)W * H);
  for (std::size_t i = 0; i < map.value.size(); ++i) map.value[i] = std::min(a.dist[i], bt[i]);
  map.iterations = std::max(a.iterations, b.iterations);
  map.converged = a.converged && b.converged;
  return map;
}

// ---- importance and suppression -------------------------------------------------

double patch_importance(const BoundingBox& box, const SaliencyMap& sal, const PatchConfig& cfg) {
  if (box.x < 0 || box.y < 0 || box.x + box.w > sal.width || box.y + box.h > sal.height)
    throw std::invalid_argument("patch_importance: box outside saliency map");
  if (!geometry_filter(box, sal.width, sal.height, cfg)) return 0.0;
  double s = 0.0;
  for (int y = box.y; y < box.y + box.h; ++y)
    for (int x = box.x; x < box.x + box.w; ++x) s += sal.at(y, x);
  return s / (double)box.area();
}

std::vector<ScoredBox> nms_keep_smaller(const std::vector<ScoredBox>& boxes, double threshold) {
  if (threshold <= 0.0 || threshold >= 1.0)
    throw std::invalid_argument("nms_keep_smaller: threshold must be in (0,1)");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (boxes[a].box.area() != boxes[b].box.area()) return boxes[a].box.area() < boxes[b].box.area();
    return boxes[a].importance > boxes[b].importance;
  });
  std::vector<ScoredBox> kept;
  for (int idx : order) {
    bool ok = true;
    for (const ScoredBox& k : kept)
      if (iou(boxes[idx].box, k.box) > threshold) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(boxes[idx]);
  }
  return kept;
}

PatchSet extract_patch_set(const Image& img, const PatchConfig& cfg) {
  const SaliencyMap sal = mbd_saliency(img);
  std::vector<ScoredBox> candidates;
  for (const BoundingBox& box : propose_regions(img)) {
    if (!geometry_filter(box, img.width, img.height, cfg)) continue;
    candidates.push_back({box, patch_importance(box, sal, cfg)});
  }
  std::vector<ScoredBox> kept = nms_keep_smaller(candidates, cfg.nms_threshold);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.importance > b.importance; });
  if ((int)kept.size() > cfg.n_patches) kept.resize(cfg.n_patches);

  PatchSet set;
  if (kept.empty()) {
    const ScoredBox whole{{0, 0, img.width, img.height}, 0.0};
    set.entries.assign(cfg.n_patches, whole);
    return set;
  }
  set.entries = kept;
  // fewer survivors than requested: duplicate cyclically from the top
  for (std::size_t i = 0; (int)set.entries.size() < cfg.n_patches; ++i)
    set.entries.push_back(kept[i % kept.size()]);
  return set;
}

// ---- cache ------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

}  // namespace

void write_patch_cache(const std::map<std::string, PatchSet>& cache, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_patch_cache: cannot open " + path);
  for (const auto& [id, set] : cache) {
    f << id << "\n";
    for (const ScoredBox& e : set.entries)
      f << e.box.x << " " << e.box.y << " " << e.box.w << " " << e.box.h << " "
        << format_double(e.importance) << "\n";
  }
  if (!f) throw std::runtime_error("write_patch_cache: short write to " + path);
}

std::map<std::string, PatchSet> read_patch_cache(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_patch_cache: cannot open " + path);
  std::map<std::string, PatchSet> cache;
  std::string line;
  std::string current_id;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ScoredBox e;
    std::istringstream ss(line);
    if (ss >> e.box.x >> e.box.y >> e.box.w >> e.box.h >> e.importance && !current_id.empty()) {
      cache[current_id].entries.push_back(e);
    } else {
      current_id = line;
      if (cache.count(current_id))
        throw std::runtime_error("read_patch_cache: duplicate image id " + current_id);
      cache[current_id];  // create entry
    }
  }
  std::size_t count = 0;
  for (const auto& [id, set] : cache) {
    if (set.entries.empty())
      throw std::runtime_error("read_patch_cache: image " + id + " has no patches");
    if (count == 0) count = set.entries.size();
    if (set.entries.size() != count)
      throw std::runtime_error("read_patch_cache: inconsistent patch counts in " + path);
  }
  return cache;
}

}  // namespace abnet
