#include "tsal/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "tsal/common.hpp"

namespace tsal {
namespace {

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

Vec3 sub(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }

double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

Vec3 scaled(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }

// Angle between unit vectors, stable near 0 and pi.
double angle_between(const Vec3& a, const Vec3& b) {
  return std::atan2(norm(cross(a, b)), dot(a, b));
}

// Orthonormal frame of the tangent plane at center: east, north, forward.
struct TangentFrame {
  Vec3 east;
  Vec3 north;
  Vec3 forward;
};

TangentFrame frame_at(SphPoint c) {
  const double sl = std::sin(c.lat), cl = std::cos(c.lat);
  const double so = std::sin(c.lon), co = std::cos(c.lon);
  return {{-so, co, 0.0}, {-sl * co, -sl * so, cl}, {cl * co, cl * so, sl}};
}

std::string describe(SphPoint p) {
  std::ostringstream os;
  os << "(lat " << rad2deg(p.lat) << " deg, lon " << rad2deg(p.lon) << " deg)";
  return os.str();
}

std::vector<SphPoint> ring_layout() {
  // Three rings of six. Polar rings sit at +-55 deg and are offset by 30 deg
  // so their gaps line up with the equatorial centers.
  std::vector<SphPoint> centers;
  const double lats[3] = {deg2rad(-55.0), 0.0, deg2rad(55.0)};
  for (int r = 0; r < 3; ++r) {
    const double offset = r == 1 ? 0.0 : deg2rad(30.0);
    for (int k = 0; k < 6; ++k) {
      centers.push_back(normalized({lats[r], -kPi + offset + k * deg2rad(60.0)}));
    }
  }
  return centers;
}

std::vector<SphPoint> fibonacci_layout(int count) {
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  std::vector<SphPoint> centers;
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - (2.0 * i + 1.0) / count;
    centers.push_back(normalized({std::asin(z), i * golden}));
  }
  return centers;
}

struct ErpSampler {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  double ax = 0.0, ay = 0.0;
};

ErpSampler erp_sampler(const ErpGrid& grid, SphPoint p) {
  const SphPoint q = normalized(p);
  const double fx = (q.lon + kPi) / (2.0 * kPi) * grid.width - 0.5;
  const double fy = (kPi / 2.0 - q.lat) / kPi * grid.height - 0.5;
  ErpSampler s;
  const double flx = std::floor(fx);
  s.ax = fx - flx;
  const int ix = static_cast<int>(flx);
  s.x0 = ((ix % grid.width) + grid.width) % grid.width;
  s.x1 = (s.x0 + 1) % grid.width;
  if (fy <= 0.0) {
    s.y0 = s.y1 = 0;
  } else if (fy >= grid.height - 1) {
    s.y0 = s.y1 = grid.height - 1;
  } else {
    s.y0 = static_cast<int>(std::floor(fy));
    s.y1 = s.y0 + 1;
    s.ay = fy - s.y0;
  }
  return s;
}

double apply_sampler(std::span<const float> plane, int width, const ErpSampler& s) {
  const auto v = [&](int y, int x) {
    return static_cast<double>(plane[static_cast<std::size_t>(y) * width + x]);
  };
  const double top = v(s.y0, s.x0) + s.ax * (v(s.y0, s.x1) - v(s.y0, s.x0));
  const double bot = v(s.y1, s.x0) + s.ax * (v(s.y1, s.x1) - v(s.y1, s.x0));
  return top + s.ay * (bot - top);
}

// Bilinear tap positions inside a P x P patch for continuous coords (u, v),
// clamped at the border.
struct PatchTaps {
  int x0 = 0, x1 = 0, y0 = 0, y1 = 0;
  double ax = 0.0, ay = 0.0;
};

PatchTaps patch_taps(double u, double v, int patch) {
  const auto axis = [patch](double c, int& lo, int& hi, double& a) {
    const double f = std::clamp(c - 0.5, 0.0, static_cast<double>(patch - 1));
    lo = std::min(static_cast<int>(std::floor(f)), patch - 1);
    hi = std::min(lo + 1, patch - 1);
    a = f - lo;
  };
  PatchTaps t;
  axis(u, t.x0, t.x1, t.ax);
  axis(v, t.y0, t.y1, t.ay);
  return t;
}

bool in_patch(const PlanePoint& q, int patch) {
  return q.u >= 0.0 && q.u <= patch && q.v >= 0.0 && q.v <= patch;
}

// Visits every viewport whose patch contains ERP pixel (y, x) with its cosine weight.
template <typename Fn>
void for_each_cover(const ViewportLayout& layout, int patch, SphPoint p, Fn&& fn) {
  const Vec3 pv = to_unit(p);
  for (std::size_t t = 0; t < layout.count(); ++t) {
    const double cosd = dot(pv, to_unit(layout.centers[t]));
    if (cosd <= 0.0) continue;
    const auto q = gnomonic_forward(layout.centers[t], p, layout.fov, patch);
    if (!q || !in_patch(*q, patch)) continue;
    fn(t, cosd, patch_taps(q->u, q->v, patch));
  }
}

}  // namespace

SphPoint normalized(SphPoint p) {
  double lon = std::fmod(p.lon + kPi, 2.0 * kPi);
  if (lon < 0.0) lon += 2.0 * kPi;
  lon -= kPi;
  if (lon >= kPi) lon -= 2.0 * kPi;
  return {std::clamp(p.lat, -kPi / 2.0, kPi / 2.0), lon};
}

Vec3 to_unit(SphPoint p) {
  const double cl = std::cos(p.lat);
  return {cl * std::cos(p.lon), cl * std::sin(p.lon), std::sin(p.lat)};
}

SphPoint from_unit(const Vec3& v) {
  const double n = norm(v);
  return normalized({std::asin(std::clamp(v.z / n, -1.0, 1.0)), std::atan2(v.y, v.x)});
}

double haversine(SphPoint a, SphPoint b) {
  const double sdlat = std::sin((b.lat - a.lat) / 2.0);
  const double sdlon = std::sin((b.lon - a.lon) / 2.0);
  const double h = sdlat * sdlat + std::cos(a.lat) * std::cos(b.lat) * sdlon * sdlon;
  return 2.0 * std::asin(std::sqrt(std::clamp(h, 0.0, 1.0)));
}

void ErpGrid::validate() const {
  if (height <= 0 || width != 2 * height) {
    std::ostringstream os;
    os << "ERP grid must satisfy W = 2H > 0, got " << height << "x" << width;
    throw GeometryError(os.str());
  }
}

SphPoint erp_pixel_center(const ErpGrid& grid, int y, int x) {
  return {kPi / 2.0 - (y + 0.5) / grid.height * kPi, (x + 0.5) / grid.width * 2.0 * kPi - kPi};
}

double sample_erp(std::span<const float> plane, const ErpGrid& grid, SphPoint p) {
  return apply_sampler(plane, grid.width, erp_sampler(grid, p));
}

CoverageGap covering_radius(std::span<const SphPoint> centers) {
  const std::size_t n = centers.size();
  if (n == 0) return {kPi, {}};
  std::vector<Vec3> c;
  c.reserve(n);
  for (const auto& p : centers) c.push_back(to_unit(p));
  if (n == 1) return {kPi, from_unit(scaled(c[0], -1.0))};
  if (n == 2) {
    // Farthest points lie on the bisecting great circle, opposite the pair.
    Vec3 mid = {c[0].x + c[1].x, c[0].y + c[1].y, c[0].z + c[1].z};
    const double theta = angle_between(c[0], c[1]);
    if (norm(mid) < 1e-12) return {kPi / 2.0, from_unit(cross(c[0], {0.0, 0.0, 1.0}))};
    return {kPi - theta / 2.0, from_unit(scaled(mid, -1.0))};
  }
  // The farthest point from a finite set is a spherical Voronoi vertex: the
  // center of an empty circle through three sites.
  CoverageGap best{0.0, {}};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t k = j + 1; k < n; ++k) {
        Vec3 normal = cross(sub(c[j], c[i]), sub(c[k], c[i]));
        const double len = norm(normal);
        if (len < 1e-14) continue;
        normal = scaled(normal, 1.0 / len);
        for (double sign : {1.0, -1.0}) {
          const Vec3 p = scaled(normal, sign);
          const double r = angle_between(p, c[i]);
          bool empty = true;
          for (std::size_t m = 0; m < n && empty; ++m) {
            if (angle_between(p, c[m]) < r - 1e-12) empty = false;
          }
          if (empty && r > best.radius) best = {r, from_unit(p)};
        }
      }
    }
  }
  return best;
}

ViewportLayout make_layout(std::vector<SphPoint> centers, double fov, int patch) {
  if (centers.empty()) throw GeometryError("layout needs at least one viewport");
  if (!(fov > 0.0 && fov < kPi)) throw GeometryError("fov must lie in (0, pi)");
  if (patch <= 0) throw GeometryError("patch resolution must be positive");
  for (auto& c : centers) {
    if (!std::isfinite(c.lat) || !std::isfinite(c.lon))
      throw GeometryError("viewport center is not finite");
    c = normalized(c);
  }
  for (std::size_t i = 0; i < centers.size(); ++i)
    for (std::size_t j = i + 1; j < centers.size(); ++j)
      if (haversine(centers[i], centers[j]) < 1e-12)
        throw GeometryError("viewport centers must be pairwise distinct");
  if (centers.size() > 1) {
    const CoverageGap gap = covering_radius(centers);
    if (gap.radius > fov / 2.0 + 1e-12) {
      std::ostringstream os;
      os << "layout of " << centers.size() << " viewports with fov " << rad2deg(fov)
         << " deg leaves the cap of radius " << rad2deg(gap.radius - fov / 2.0)
         << " deg around " << describe(gap.where) << " uncovered";
      throw GeometryError(os.str());
    }
  }
  return {std::move(centers), fov, patch};
}

ViewportLayout build_layout(int count, double fov, int patch) {
  if (count < 1) throw GeometryError("viewport count must be >= 1");
  if (count == 1) {
    if (!(fov > 0.0 && fov < kPi)) throw GeometryError("fov must lie in (0, pi)");
    return {{SphPoint{0.0, 0.0}}, fov, patch};
  }
  return make_layout(count == 18 ? ring_layout() : fibonacci_layout(count), fov, patch);
}

std::optional<PlanePoint> gnomonic_forward(SphPoint center, SphPoint p, double fov, int patch) {
  const TangentFrame fr = frame_at(center);
  const Vec3 pv = to_unit(p);
  const double cosd = dot(pv, fr.forward);
  if (!(cosd > 1e-12)) return std::nullopt;
  const double half = static_cast<double>(patch) / 2.0;
  const double scale = half / std::tan(fov / 2.0);
  const double x = dot(pv, fr.east) / cosd;
  const double y = dot(pv, fr.north) / cosd;
  return PlanePoint{half + x * scale, half - y * scale};
}

SphPoint gnomonic_inverse(SphPoint center, double u, double v, double fov, int patch) {
  const TangentFrame fr = frame_at(center);
  const double half = static_cast<double>(patch) / 2.0;
  const double t = std::tan(fov / 2.0);
  const double x = (u - half) / half * t;
  const double y = (half - v) / half * t;
  return from_unit({fr.forward.x + x * fr.east.x + y * fr.north.x,
                    fr.forward.y + x * fr.east.y + y * fr.north.y,
                    fr.forward.z + x * fr.east.z + y * fr.north.z});
}

ErpGrid ErpFrameSequence::grid() const {
  if (frames.empty()) return {};
  return {frames.front().height, frames.front().width};
}

int ErpFrameSequence::channels() const { return frames.empty() ? 0 : frames.front().channels; }

TangentStack project_to_tangents(const ErpFrameSequence& seq, const ViewportLayout& layout) {
  if (seq.frames.empty()) throw GeometryError("no frames to project");
  const ErpGrid grid = seq.grid();
  grid.validate();
  for (const auto& f : seq.frames) {
    if (f.height != grid.height || f.width != grid.width || f.channels != seq.channels())
      throw GeometryError("all frames in a sequence must share one grid and channel count");
  }
  TangentStack out;
  out.frames = static_cast<int>(seq.frames.size());
  out.views = static_cast<int>(layout.count());
  out.channels = seq.channels();
  out.patch = layout.patch;
  out.layout = layout;
  out.data.assign(static_cast<std::size_t>(out.frames) * out.views * out.channels * out.patch *
                      out.patch,
                  0.0f);
  const int P = layout.patch;
  // Sampling positions depend only on the viewport, not the frame.
  std::vector<std::vector<ErpSampler>> samplers(layout.count());
  parallel_for(layout.count(), [&](std::size_t t) {
    auto& s = samplers[t];
    s.resize(static_cast<std::size_t>(P) * P);
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        s[static_cast<std::size_t>(y) * P + x] =
            erp_sampler(grid, gnomonic_inverse(layout.centers[t], x + 0.5, y + 0.5, layout.fov, P));
  });
  const std::size_t plane = static_cast<std::size_t>(grid.height) * grid.width;
  parallel_for(static_cast<std::size_t>(out.frames) * out.views, [&](std::size_t ft) {
    const int f = static_cast<int>(ft / out.views);
    const int t = static_cast<int>(ft % out.views);
    const Image& img = seq.frames[f];
    for (int c = 0; c < out.channels; ++c) {
      std::span<const float> src(img.data.data() + plane * c, plane);
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x)
          out.data[out.offset(f, t, c, y, x)] = static_cast<float>(
              apply_sampler(src, grid.width, samplers[t][static_cast<std::size_t>(y) * P + x]));
    }
  });
  return out;
}

SaliencyMap blend_inverse_raw(const SaliencyMapSet& maps, const ViewportLayout& layout,
                              const ErpGrid& out) {
  if (maps.views != static_cast<int>(layout.count()))
    throw GeometryError("saliency map set and layout disagree on the viewport count");
  if (maps.values.size() != static_cast<std::size_t>(maps.views) * maps.patch * maps.patch)
    throw GeometryError("saliency map set has the wrong number of values");
  if (out.height <= 0 || out.width <= 0) throw GeometryError("output grid must be non-empty");
  SaliencyMap result(out.height, out.width);
  const int P = maps.patch;
  std::vector<int> uncovered(out.height, -1);
  parallel_for(static_cast<std::size_t>(out.height), [&](std::size_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < out.width; ++x) {
      double num = 0.0, den = 0.0;
      for_each_cover(layout, P, erp_pixel_center(out, y, x),
                     [&](std::size_t t, double w, const PatchTaps& k) {
                       const auto v = [&](int ty, int tx) {
                         return static_cast<double>(maps.at(static_cast<int>(t), ty, tx));
                       };
                       const double top = v(k.y0, k.x0) + k.ax * (v(k.y0, k.x1) - v(k.y0, k.x0));
                       const double bot = v(k.y1, k.x0) + k.ax * (v(k.y1, k.x1) - v(k.y1, k.x0));
                       num += w * (top + k.ay * (bot - top));
                       den += w;
                     });
      if (den <= 0.0) {
        uncovered[y] = x;
        continue;
      }
      result.at(y, x) = static_cast<float>(num / den);
    }
  });
  for (int y = 0; y < out.height; ++y) {
    if (uncovered[y] >= 0) {
      throw GeometryError("ERP pixel " + describe(erp_pixel_center(out, y, uncovered[y])) +
                          " is covered by no viewport");
    }
  }
  return result;
}

SaliencyMap blend_inverse(const SaliencyMapSet& maps, const ViewportLayout& layout,
                          const ErpGrid& out) {
  SaliencyMap m = blend_inverse_raw(maps, layout, out);
  max_normalize(m);
  return m;
}

ResamplePlan build_blend_plan(const ViewportLayout& layout, int patch_out, const ErpGrid& out) {
  ResamplePlan plan;
  plan.rows = static_cast<std::size_t>(out.height) * out.width;
  plan.cols = layout.count() * static_cast<std::size_t>(patch_out) * patch_out;
  plan.offsets.reserve(plan.rows + 1);
  plan.offsets.push_back(0);
  const std::size_t pp = static_cast<std::size_t>(patch_out) * patch_out;
  std::vector<std::pair<std::size_t, double>> taps;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      taps.clear();
      double den = 0.0;
      for_each_cover(layout, patch_out, erp_pixel_center(out, y, x),
                     [&](std::size_t t, double w, const PatchTaps& k) {
                       const auto add = [&](int ty, int tx, double c) {
                         if (c != 0.0)
                           taps.emplace_back(t * pp + static_cast<std::size_t>(ty) * patch_out + tx,
                                             w * c);
                       };
                       add(k.y0, k.x0, (1.0 - k.ax) * (1.0 - k.ay));
                       add(k.y0, k.x1, k.ax * (1.0 - k.ay));
                       add(k.y1, k.x0, (1.0 - k.ax) * k.ay);
                       add(k.y1, k.x1, k.ax * k.ay);
                       den += w;
                     });
      if (den <= 0.0) {
        throw GeometryError("ERP pixel " + describe(erp_pixel_center(out, y, x)) +
                            " is covered by no viewport");
      }
      std::sort(taps.begin(), taps.end());
      for (std::size_t i = 0; i < taps.size(); ++i) {
        if (!plan.indices.empty() && plan.indices.size() > plan.offsets.back() &&
            plan.indices.back() == taps[i].first) {
          plan.weights.back() += taps[i].second / den;
        } else {
          plan.indices.push_back(taps[i].first);
          plan.weights.push_back(taps[i].second / den);
        }
      }
      plan.offsets.push_back(plan.indices.size());
    }
  }
  return plan;
}

SaliencyMap spherical_gaussian_smooth(std::span<const Fixation> fixations, const ErpGrid& grid,
                                      double sigma_deg) {
  if (grid.height <= 0 || grid.width <= 0) throw GeometryError("smoothing grid must be non-empty");
  if (!(sigma_deg > 0.0)) throw GeometryError("sigma must be positive");
  SaliencyMap out(grid.height, grid.width);
  if (fixations.empty()) return out;
  const double inv_two_sigma2 = 1.0 / (2.0 * sigma_deg * sigma_deg);
  parallel_for(static_cast<std::size_t>(grid.height), [&](std::size_t yy) {
    const int y = static_cast<int>(yy);
    for (int x = 0; x < grid.width; ++x) {
      const SphPoint p = erp_pixel_center(grid, y, x);
      double acc = 0.0;
      for (const auto& fx : fixations) {
        const double d = rad2deg(haversine(p, fx.point));
        acc += fx.weight * std::exp(-d * d * inv_two_sigma2);
      }
      out.at(y, x) = static_cast<float>(acc);
    }
  });
  max_normalize(out);
  return out;
}

std::vector<Fixation> fixations_from_map(const SaliencyMap& counts) {
  std::vector<Fixation> out;
  const ErpGrid grid{counts.height, counts.width};
  for (int y = 0; y < counts.height; ++y)
    for (int x = 0; x < counts.width; ++x) {
      const float v = counts.at(y, x);
      if (v < 0.0f) throw GeometryError("fixation counts must be nonnegative");
      if (v > 0.0f) out.push_back({erp_pixel_center(grid, y, x), v});
    }
  return out;
}

}  // namespace tsal
