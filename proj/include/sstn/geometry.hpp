#pragma once

// Affine transformation algebra in normalized coordinates, the sampling-grid
// generator, and the bilinear sampler with its analytic gradients.
//
// Conventions:
//   - Normalized coordinates span [-1, 1] across the pixel centers of the
//     first and last pixel of each axis, so the identity map reproduces the
//     input bit for bit.
//   - A map takes normalized *output* (target) coordinates to normalized
//     *input* (source) coordinates: backward mapping. A scale factor below 1
//     therefore zooms in.
//   - Out-of-range source locations contribute zero (zero padding).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sstn/errors.hpp"
#include "sstn/tensor.hpp"

namespace sstn {

struct AffineMap {
  double a11 = 1, a12 = 0, tx = 0;
  double a21 = 0, a22 = 1, ty = 0;

  static AffineMap identity() { return {}; }

  bool operator==(const AffineMap&) const = default;
};

// Function composition: apply `inner` to the coordinates first.
inline AffineMap compose(const AffineMap& o, const AffineMap& i) {
  AffineMap r;
  r.a11 = o.a11 * i.a11 + o.a12 * i.a21;
  r.a12 = o.a11 * i.a12 + o.a12 * i.a22;
  r.tx = o.a11 * i.tx + o.a12 * i.ty + o.tx;
  r.a21 = o.a21 * i.a11 + o.a22 * i.a21;
  r.a22 = o.a21 * i.a12 + o.a22 * i.a22;
  r.ty = o.a21 * i.tx + o.a22 * i.ty + o.ty;
  return r;
}

// ---------------------------------------------------------------------------
// Discrete actions

enum class ActionKind {
  TranslateXPos,  // matrix tx = +2*4/W
  TranslateXNeg,
  TranslateYPos,
  TranslateYNeg,
  ScaleX,   // 0.8 along x
  ScaleY,
  ScaleXY,
  RotatePos,  // +10 degrees
  RotateNeg,
  Identity,
};

inline constexpr int kNumActions = 10;
inline constexpr double kTranslatePixels = 4.0;
inline constexpr double kScaleFactor = 0.8;
inline constexpr double kRotateDegrees = 10.0;

struct Action {
  int index = 9;
  ActionKind kind = ActionKind::Identity;

  static Action from_index(int i) {
    if (i < 0 || i >= kNumActions)
      throw IndexError("action index " + std::to_string(i) + " out of range");
    return Action{i, static_cast<ActionKind>(i)};
  }
};

inline const char* action_name(ActionKind k) {
  switch (k) {
    case ActionKind::TranslateXPos: return "translate-x+4";
    case ActionKind::TranslateXNeg: return "translate-x-4";
    case ActionKind::TranslateYPos: return "translate-y+4";
    case ActionKind::TranslateYNeg: return "translate-y-4";
    case ActionKind::ScaleX: return "scale-x-0.8";
    case ActionKind::ScaleY: return "scale-y-0.8";
    case ActionKind::ScaleXY: return "scale-xy-0.8";
    case ActionKind::RotatePos: return "rotate+10";
    case ActionKind::RotateNeg: return "rotate-10";
    case ActionKind::Identity: return "identity";
  }
  return "?";
}

template <typename S>
void write_one_hot(std::span<S> row, int index) {
  std::fill(row.begin(), row.end(), S(0));
  row[index] = S(1);
}

inline AffineMap action_to_affine(Action a, long h, long w) {
  if (h <= 0 || w <= 0) throw DimensionError("action_to_affine: empty image");
  AffineMap m;
  const double rad = kRotateDegrees * M_PI / 180.0;
  switch (a.kind) {
    case ActionKind::TranslateXPos: m.tx = 2 * kTranslatePixels / w; break;
    case ActionKind::TranslateXNeg: m.tx = -2 * kTranslatePixels / w; break;
    case ActionKind::TranslateYPos: m.ty = 2 * kTranslatePixels / h; break;
    case ActionKind::TranslateYNeg: m.ty = -2 * kTranslatePixels / h; break;
    case ActionKind::ScaleX: m.a11 = kScaleFactor; break;
    case ActionKind::ScaleY: m.a22 = kScaleFactor; break;
    case ActionKind::ScaleXY: m.a11 = m.a22 = kScaleFactor; break;
    case ActionKind::RotatePos:
      m.a11 = m.a22 = std::cos(rad);
      m.a12 = -std::sin(rad);
      m.a21 = std::sin(rad);
      break;
    case ActionKind::RotateNeg:
      m.a11 = m.a22 = std::cos(rad);
      m.a12 = std::sin(rad);
      m.a21 = -std::sin(rad);
      break;
    case ActionKind::Identity: break;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Sampling grid

struct SampleGrid {
  long h = 0, w = 0;
  std::vector<double> coords;  // h*w*2, (x, y) normalized per output pixel

  double x(long r, long c) const { return coords[(r * w + c) * 2]; }
  double y(long r, long c) const { return coords[(r * w + c) * 2 + 1]; }
};

inline double norm_coord(long i, long size) {
  return size > 1 ? -1.0 + 2.0 * i / (size - 1) : 0.0;
}

inline SampleGrid grid_generate(const AffineMap& theta, long h, long w) {
  if (h <= 0 || w <= 0) throw DimensionError("grid_generate: empty output size");
  SampleGrid g;
  g.h = h;
  g.w = w;
  g.coords.resize(h * w * 2);
  for (long r = 0; r < h; ++r) {
    double yt = norm_coord(r, h);
    for (long c = 0; c < w; ++c) {
      double xt = norm_coord(c, w);
      g.coords[(r * w + c) * 2] = theta.a11 * xt + theta.a12 * yt + theta.tx;
      g.coords[(r * w + c) * 2 + 1] = theta.a21 * xt + theta.a22 * yt + theta.ty;
    }
  }
  return g;
}

namespace detail {

struct PixelCoord {
  long i0;      // floor cell
  double frac;  // in [0,1); exactly 0 when the coordinate is (near) integral
};

// Normalized -> pixel units. Coordinates within 1e-9 px of an integer are
// snapped so that integral alignments (in particular the identity grid)
// reproduce input pixels exactly.
inline PixelCoord to_pixel(double norm, long size) {
  double p = (norm + 1.0) * 0.5 * (size - 1);
  double r = std::round(p);
  if (std::abs(p - r) < 1e-9) p = r;
  double f = std::floor(p);
  return {static_cast<long>(f), p - f};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bilinear sampler

namespace detail {

template <typename S>
void sample_one(const S* img, long h, long w, const SampleGrid& grid, S* out) {
  for (long r = 0; r < grid.h; ++r)
    for (long c = 0; c < grid.w; ++c) {
      auto px = to_pixel(grid.x(r, c), w);
      auto py = to_pixel(grid.y(r, c), h);
      double v = 0;
      const double wy[2] = {1.0 - py.frac, py.frac};
      const double wx[2] = {1.0 - px.frac, px.frac};
      for (int dy = 0; dy < 2; ++dy) {
        if (wy[dy] == 0.0) continue;
        long yy = py.i0 + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = 0; dx < 2; ++dx) {
          if (wx[dx] == 0.0) continue;
          long xx = px.i0 + dx;
          if (xx < 0 || xx >= w) continue;
          v += wy[dy] * wx[dx] * static_cast<double>(img[yy * w + xx]);
        }
      }
      out[r * grid.w + c] = static_cast<S>(v);
    }
}

}  // namespace detail

// Warp a batch with one shared grid. Pure function, not taped.
template <typename S>
TensorT<S> bilinear_sample(const TensorT<S>& input, const SampleGrid& grid) {
  if (input.rank() != 4)
    throw DimensionError("bilinear_sample: want [B,C,H,W], got " +
                         shape_str(input.shape()));
  long b = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (grid.h != h || grid.w != w)
    throw DimensionError("bilinear_sample: grid " + std::to_string(grid.h) + "x" +
                         std::to_string(grid.w) + " vs image " + shape_str(input.shape()));
  auto out = detail::make_out<S>(input.shape());
  for (long i = 0; i < b * ch; ++i)
    detail::sample_one(input.data() + i * h * w, h, w, grid,
                       out.data() + i * h * w);
  return out;
}

template <typename S>
struct SampleGradients {
  TensorT<S> input_grad;          // same shape as input
  std::vector<double> grid_grad;  // h*w*2, normalized units, summed over batch
};

// Gradients of bilinear_sample. The input gradient uses the transposed kernel
// weights; the grid gradient uses the piecewise kernel slope with the
// at-integer tie resolved toward the `m >= x` branch.
template <typename S>
SampleGradients<S> bilinear_sample_backward(const TensorT<S>& input,
                                            const SampleGrid& grid,
                                            const TensorT<S>& out_grad) {
  if (out_grad.shape() != input.shape())
    throw DimensionError("bilinear_sample_backward: out_grad " +
                         shape_str(out_grad.shape()) + " vs input " +
                         shape_str(input.shape()));
  long b = input.dim(0), ch = input.dim(1), h = input.dim(2), w = input.dim(3);
  SampleGradients<S> res;
  res.input_grad = TensorT<S>::zeros(input.shape());
  res.grid_grad.assign(h * w * 2, 0.0);
  const double sx_scale = 0.5 * (w - 1);  // d(pixel x)/d(normalized x)
  const double sy_scale = 0.5 * (h - 1);

  for (long img = 0; img < b * ch; ++img) {
    const S* u = input.data() + img * h * w;
    const S* go = out_grad.data() + img * h * w;
    S* gi = res.input_grad.data() + img * h * w;
    for (long r = 0; r < h; ++r)
      for (long c = 0; c < w; ++c) {
        double g = go[r * w + c];
        if (g == 0.0) continue;
        auto px = detail::to_pixel(grid.x(r, c), w);
        auto py = detail::to_pixel(grid.y(r, c), h);
        const double wy[2] = {1.0 - py.frac, py.frac};
        const double wx[2] = {1.0 - px.frac, px.frac};
        auto at = [&](long yy, long xx) -> double {
          return (yy < 0 || yy >= h || xx < 0 || xx >= w)
                     ? 0.0
                     : static_cast<double>(u[yy * w + xx]);
        };
        // transposed kernel weights into the input
        for (int dy = 0; dy < 2; ++dy) {
          if (wy[dy] == 0.0) continue;
          long yy = py.i0 + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = 0; dx < 2; ++dx) {
            if (wx[dx] == 0.0) continue;
            long xx = px.i0 + dx;
            if (xx < 0 || xx >= w) continue;
            gi[yy * w + xx] += static_cast<S>(g * wy[dy] * wx[dx]);
          }
        }
        // kernel slope for the grid coordinates
        double slope_x = 0, slope_y = 0;
        for (int dy = 0; dy < 2; ++dy) {
          if (wy[dy] == 0.0) continue;
          long yy = py.i0 + dy;
          if (px.frac == 0.0)
            slope_x += wy[dy] * at(yy, px.i0);  // tie: the m >= x branch
          else
            slope_x += wy[dy] * (at(yy, px.i0 + 1) - at(yy, px.i0));
        }
        for (int dx = 0; dx < 2; ++dx) {
          if (wx[dx] == 0.0) continue;
          long xx = px.i0 + dx;
          if (py.frac == 0.0)
            slope_y += wx[dx] * at(py.i0, xx);
          else
            slope_y += wx[dx] * (at(py.i0 + 1, xx) - at(py.i0, xx));
        }
        res.grid_grad[(r * w + c) * 2] += g * slope_x * sx_scale;
        res.grid_grad[(r * w + c) * 2 + 1] += g * slope_y * sy_scale;
      }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Per-action grids and batched warping

class ActionGrids {
 public:
  ActionGrids(long h, long w) : h_(h), w_(w) {
    for (int i = 0; i < kNumActions; ++i) {
      maps_[i] = action_to_affine(Action::from_index(i), h, w);
      grids_[i] = grid_generate(maps_[i], h, w);
    }
  }
  const SampleGrid& grid(int action) const { return grids_[action]; }
  const AffineMap& map(int action) const { return maps_[action]; }
  long h() const { return h_; }
  long w() const { return w_; }

 private:
  long h_, w_;
  std::array<SampleGrid, kNumActions> grids_;
  std::array<AffineMap, kNumActions> maps_;
};

// Warp each batch element with its own action. Pure function, not taped.
template <typename S>
TensorT<S> warp_actions(const TensorT<S>& images, std::span<const int> actions,
                        const ActionGrids& grids) {
  long b = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (static_cast<long>(actions.size()) != b)
    throw DimensionError("warp_actions: batch " + std::to_string(b) + " vs " +
                         std::to_string(actions.size()) + " actions");
  auto out = detail::make_out<S>(images.shape());
  for (long i = 0; i < b; ++i) {
    const SampleGrid& g = grids.grid(actions[i]);
    for (long c = 0; c < ch; ++c)
      detail::sample_one(images.data() + (i * ch + c) * h * w, h, w, g,
                         out.data() + (i * ch + c) * h * w);
  }
  return out;
}

}  // namespace sstn
