// Brute-force reference implementations used only by tests.  These stay
// independent of the library's kernels: plain nested loops, no shared code.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace oracle {

struct Chw {
  int c, h, w;
  std::vector<double> v;
  double at(int ci, int y, int x) const { return v[((std::size_t)ci * h + y) * w + x]; }
};

inline Chw conv2d_ref(const Chw& in, const std::vector<double>& k, int co,
                      const std::vector<double>& bias, int pad) {
  const int oh = in.h + 2 * pad - 2, ow = in.w + 2 * pad - 2;
  Chw out{co, oh, ow, std::vector<double>((std::size_t)co * oh * ow, 0.0)};
  for (int o = 0; o < co; ++o)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double s = bias[o];
        for (int ci = 0; ci < in.c; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy + ky - pad, ix = ox + kx - pad;
              if (iy < 0 || iy >= in.h || ix < 0 || ix >= in.w) continue;
              s += in.at(ci, iy, ix) * k[(((std::size_t)o * in.c + ci) * 3 + ky) * 3 + kx];
            }
        out.v[((std::size_t)o * oh + oy) * ow + ox] = s;
      }
  return out;
}

inline Chw maxpool_ref(const Chw& in) {
  const int oh = in.h / 2, ow = in.w / 2;
  Chw out{in.c, oh, ow, std::vector<double>((std::size_t)in.c * oh * ow)};
  for (int c = 0; c < in.c; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double m = in.at(c, oy * 2, ox * 2);
        m = std::max(m, in.at(c, oy * 2, ox * 2 + 1));
        m = std::max(m, in.at(c, oy * 2 + 1, ox * 2));
        m = std::max(m, in.at(c, oy * 2 + 1, ox * 2 + 1));
        out.v[((std::size_t)c * oh + oy) * ow + ox] = m;
      }
  return out;
}

inline std::vector<double> dense_ref(const std::vector<double>& x, const std::vector<double>& w,
                                     int dout, const std::vector<double>& b) {
  const int din = (int)x.size();
  std::vector<double> y(dout);
  for (int o = 0; o < dout; ++o) {
    double s = b[o];
    for (int i = 0; i < din; ++i) s += w[(std::size_t)o * din + i] * x[i];
    y[o] = s;
  }
  return y;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

inline std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                      double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

}  // namespace oracle
