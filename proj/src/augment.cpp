#include "abnet/augment.hpp"

#include <cmath>
#include <stdexcept>

namespace abnet {

std::vector<std::pair<std::string, Tensor>> AffineBank::named_params() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < matrices.size(); ++i)
    out.emplace_back("bank.A" + std::to_string(i + 1), matrices[i]);
  return out;
}

AffineBank init_bank(int k, std::uint64_t seed, bool spatial_only) {
  if (k < 1) throw std::invalid_argument("init_bank: k must be >= 1, got " + std::to_string(k));
  AffineBank bank;
  bank.spatial_only = spatial_only;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-0.05, 0.05);
  const double identity[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
  for (int i = 0; i < k; ++i) {
    Tensor m = Tensor::zeros({12});
    for (int j = 0; j < 12; ++j) m.data()[j] = identity[j] + noise(rng);
    m.set_requires_grad(true);
    bank.matrices.push_back(m);
  }
  return bank;
}

namespace {

inline double norm_coord(int i, int n) { return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0; }

// grid points must map to grid points exactly under the identity and under
// whole-cell translations; snap coordinates that are within rounding noise
// of a lattice point
inline double snap(double f) {
  const double r = std::round(f);
  return std::abs(f - r) <= 1e-9 ? r : f;
}

}  // namespace

Tensor apply_affine(const Tensor& feature, const Tensor& matrix, bool spatial_only, Tape* tape) {
  if (feature.rank() != 3) throw std::invalid_argument("apply_affine: feature must be [C,H,W]");
  if (matrix.size() != 12) throw std::invalid_argument("apply_affine: matrix must have 12 entries");
  const int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);

  Tensor out = Tensor::zeros({C, H, W});
  if (tape && (feature.requires_grad() || matrix.requires_grad())) out.set_requires_grad(true);

  const double* A = matrix.data();
  const double* src = feature.data();
  const double half_w = (W - 1) / 2.0, half_h = (H - 1) / 2.0, half_c = (C - 1) / 2.0;

  // forward pass; cell geometry is recomputed in backward rather than cached
  auto sample_all = [=](const double* a, const double* in, double* dst) {
    for (int c = 0; c < C; ++c) {
      const double uz = norm_coord(c, C);
      for (int y = 0; y < H; ++y) {
        const double uy = norm_coord(y, H);
        for (int x = 0; x < W; ++x) {
          const double ux = norm_coord(x, W);
          double xs, ys, zs;
          if (spatial_only) {
            xs = a[0] * ux + a[1] * uy + a[3];
            ys = a[4] * ux + a[5] * uy + a[7];
            zs = uz;
          } else {
            xs = a[0] * ux + a[1] * uy + a[2] * uz + a[3];
            ys = a[4] * ux + a[5] * uy + a[6] * uz + a[7];
            zs = a[8] * ux + a[9] * uy + a[10] * uz + a[11];
          }
          const double fx = snap((xs + 1.0) * half_w);
          const double fy = snap((ys + 1.0) * half_h);
          const double fz = snap((zs + 1.0) * half_c);
          const int x0 = (int)std::floor(fx), y0 = (int)std::floor(fy), z0 = (int)std::floor(fz);
          const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
          double acc = 0.0;
          for (int dz = 0; dz < 2; ++dz) {
            const int zc = z0 + dz;
            if (zc < 0 || zc >= C) continue;
            const double wz = dz ? tz : 1.0 - tz;
            for (int dy = 0; dy < 2; ++dy) {
              const int yc = y0 + dy;
              if (yc < 0 || yc >= H) continue;
              const double wy = dy ? ty : 1.0 - ty;
              for (int dx = 0; dx < 2; ++dx) {
                const int xc = x0 + dx;
                if (xc < 0 || xc >= W) continue;
                const double wx = dx ? tx : 1.0 - tx;
                acc += wz * wy * wx * in[((std::size_t)zc * H + yc) * W + xc];
              }
            }
          }
          dst[((std::size_t)c * H + y) * W + x] = acc;
        }
      }
    }
  };
  sample_all(A, src, out.data());

  if (tape && out.requires_grad()) {
    Tensor feat = feature, mat = matrix, o = out;
    tape->record("apply_affine", {feature, matrix}, out, [=]() mutable {
      const double fs = gradient_fault_scale("apply_affine");
      const double* a = mat.data();
      const double* in = feat.data();
      const double* dout = o.grad();
      double* dfeat = feat.requires_grad() ? feat.grad() : nullptr;
      double* dmat = mat.requires_grad() ? mat.grad() : nullptr;
      for (int c = 0; c < C; ++c) {
        const double uz = norm_coord(c, C);
        for (int y = 0; y < H; ++y) {
          const double uy = norm_coord(y, H);
          for (int x = 0; x < W; ++x) {
            const double g = fs * dout[((std::size_t)c * H + y) * W + x];
            if (g == 0.0) continue;
            const double ux = norm_coord(x, W);
            double xs, ys, zs;
            if (spatial_only) {
              xs = a[0] * ux + a[1] * uy + a[3];
              ys = a[4] * ux + a[5] * uy + a[7];
              zs = uz;
            } else {
              xs = a[0] * ux + a[1] * uy + a[2] * uz + a[3];
              ys = a[4] * ux + a[5] * uy + a[6] * uz + a[7];
              zs = a[8] * ux + a[9] * uy + a[10] * uz + a[11];
            }
            const double fx = snap((xs + 1.0) * half_w);
            const double fy = snap((ys + 1.0) * half_h);
            const double fz = snap((zs + 1.0) * half_c);
            const int x0 = (int)std::floor(fx), y0 = (int)std::floor(fy), z0 = (int)std::floor(fz);
            const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
            double ds_dfx = 0.0, ds_dfy = 0.0, ds_dfz = 0.0;
            for (int dz = 0; dz < 2; ++dz) {
              const int zc = z0 + dz;
              if (zc < 0 || zc >= C) continue;
              const double wz = dz ? tz : 1.0 - tz;
              const double dwz = dz ? 1.0 : -1.0;
              for (int dy = 0; dy < 2; ++dy) {
                const int yc = y0 + dy;
                if (yc < 0 || yc >= H) continue;
                const double wy = dy ? ty : 1.0 - ty;
                const double dwy = dy ? 1.0 : -1.0;
                for (int dx = 0; dx < 2; ++dx) {
                  const int xc = x0 + dx;
                  if (xc < 0 || xc >= W) continue;
                  const double wx = dx ? tx : 1.0 - tx;
                  const double dwx = dx ? 1.0 : -1.0;
                  const std::size_t idx = ((std::size_t)zc * H + yc) * W + xc;
                  const double v = in[idx];
                  if (dfeat) dfeat[idx] += g * wz * wy * wx;
                  ds_dfx += dwx * wy * wz * v;
                  ds_dfy += wx * dwy * wz * v;
                  ds_dfz += wx * wy * dwz * v;
                }
              }
            }
            if (dmat) {
              const double gx = g * ds_dfx * half_w;
              const double gy = g * ds_dfy * half_h;
              const double gz = g * ds_dfz * half_c;
              if (spatial_only) {
                dmat[0] += gx * ux; dmat[1] += gx * uy; dmat[3] += gx;
                dmat[4] += gy * ux; dmat[5] += gy * uy; dmat[7] += gy;
              } else {
                dmat[0] += gx * ux; dmat[1] += gx * uy; dmat[2] += gx * uz; dmat[3] += gx;
                dmat[4] += gy * ux; dmat[5] += gy * uy; dmat[6] += gy * uz; dmat[7] += gy;
                dmat[8] += gz * ux; dmat[9] += gz * uy; dmat[10] += gz * uz; dmat[11] += gz;
              }
            }
          }
        }
      }
    });
  }
  return out;
}

AugmentedFamily augment_family(const Tensor& feature, const AffineBank& bank, Tape* tape) {
  AugmentedFamily fam;
  fam.members.push_back(feature);  // A_0 is the identity: the source itself, bitwise
  fam.learned_begin = 1;
  for (const Tensor& m : bank.matrices)
    fam.members.push_back(apply_affine(feature, m, bank.spatial_only, tape));
  return fam;
}

}  // namespace abnet
