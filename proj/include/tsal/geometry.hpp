#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "tsal/image.hpp"

namespace tsal {

inline constexpr double kPi = 3.14159265358979323846;

inline constexpr double deg2rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad2deg(double rad) { return rad * 180.0 / kPi; }

/// A direction on the unit sphere. lat in [-pi/2, pi/2], lon in [-pi, pi).
struct SphPoint {
  double lat = 0.0;
  double lon = 0.0;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

/// Wraps lon into [-pi, pi) and clamps lat into [-pi/2, pi/2].
SphPoint normalized(SphPoint p);
Vec3 to_unit(SphPoint p);
SphPoint from_unit(const Vec3& v);

/// Great-circle angle between two points, in radians.
double haversine(SphPoint a, SphPoint b);

struct ErpGrid {
  int height = 0;
  int width = 0;

  /// Throws GeometryError unless height > 0 and width == 2 * height.
  void validate() const;
};

/// Direction through the center of ERP pixel (y, x).
SphPoint erp_pixel_center(const ErpGrid& grid, int y, int x);

/// Bilinear sample of one channel plane (H x W, row-major) at direction p,
/// wrapping in longitude and clamping in latitude.
double sample_erp(std::span<const float> plane, const ErpGrid& grid, SphPoint p);

struct ViewportLayout {
  std::vector<SphPoint> centers;
  double fov = 0.0;  // full field of view, radians
  int patch = 0;     // tangent image resolution P_in

  std::size_t count() const { return centers.size(); }
};

/// Deterministic layout: T = 1 gives one center at (0,0); T = 18 gives three
/// latitude rings of six; every other T uses a Fibonacci spiral. Throws
/// GeometryError if the FOV cannot cover the sphere with that many views.
ViewportLayout build_layout(int count, double fov, int patch);

/// Wraps caller-chosen centers, enforcing distinctness and full coverage.
ViewportLayout make_layout(std::vector<SphPoint> centers, double fov, int patch);

/// Largest distance from any sphere point to its nearest center, and where it occurs.
struct CoverageGap {
  double radius = 0.0;
  SphPoint where;
};
CoverageGap covering_radius(std::span<const SphPoint> centers);

/// Continuous tangent-plane pixel coordinates. Pixel i spans [i, i+1).
struct PlanePoint {
  double u = 0.0;
  double v = 0.0;
};

/// Gnomonic projection of p onto the plane tangent at center. Returns nullopt
/// when p is on or behind the tangent plane (angular distance >= pi/2).
std::optional<PlanePoint> gnomonic_forward(SphPoint center, SphPoint p, double fov, int patch);

/// Inverse of gnomonic_forward.
SphPoint gnomonic_inverse(SphPoint center, double u, double v, double fov, int patch);

/// F equirectangular frames on one grid.
struct ErpFrameSequence {
  std::vector<Image> frames;

  ErpGrid grid() const;
  int channels() const;
};

/// F x T x C x P x P tangent images plus the layout that produced them.
struct TangentStack {
  int frames = 0;
  int views = 0;
  int channels = 0;
  int patch = 0;
  std::vector<float> data;
  ViewportLayout layout;

  std::size_t offset(int f, int t, int c, int y, int x) const {
    return ((((static_cast<std::size_t>(f) * views + t) * channels + c) * patch + y) * patch) + x;
  }
  float at(int f, int t, int c, int y, int x) const { return data[offset(f, t, c, y, x)]; }
};

TangentStack project_to_tangents(const ErpFrameSequence& frames, const ViewportLayout& layout);

/// Per-tangent saliency maps, stored [t][y][x].
struct SaliencyMapSet {
  int views = 0;
  int patch = 0;
  std::vector<float> values;

  float at(int t, int y, int x) const {
    return values[(static_cast<std::size_t>(t) * patch + y) * patch + x];
  }
};

/// Cosine-weighted average of every tangent map covering each ERP pixel,
/// without the final max normalization.
SaliencyMap blend_inverse_raw(const SaliencyMapSet& maps, const ViewportLayout& layout,
                              const ErpGrid& out);

/// blend_inverse_raw followed by max normalization.
SaliencyMap blend_inverse(const SaliencyMapSet& maps, const ViewportLayout& layout,
                          const ErpGrid& out);

/// Sparse linear map in CSR form: out[r] = sum_k weights[k] * in[indices[k]]
/// for k in [offsets[r], offsets[r+1]).
struct ResamplePlan {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> indices;
  std::vector<double> weights;
};

/// The blend of blend_inverse_raw expressed as a ResamplePlan over the
/// flattened [t][y][x] input, so it can run inside the autodiff graph.
ResamplePlan build_blend_plan(const ViewportLayout& layout, int patch_out, const ErpGrid& out);

struct Fixation {
  SphPoint point;
  double weight = 1.0;
};

/// Sum of spherical Gaussians (great-circle distance in degrees) over the
/// fixations, max-normalized. No fixations gives an all-zero map.
SaliencyMap spherical_gaussian_smooth(std::span<const Fixation> fixations, const ErpGrid& grid,
                                      double sigma_deg);

/// Turns a dense fixation-count map into weighted fixation points.
std::vector<Fixation> fixations_from_map(const SaliencyMap& counts);

}  // namespace tsal
