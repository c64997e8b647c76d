#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "icetrack/errors.hpp"

namespace icetrack {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kPi = 3.14159265358979323846;

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

// Wrap to (-180, 180].
inline double wrap_deg(double a) {
  a = std::fmod(a, 360.0);
  if (a <= -180.0) a += 360.0;
  if (a > 180.0) a -= 360.0;
  return a;
}

// Circular distance in degrees, in [0, 180].
inline double angular_error_deg(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

// Frame conventions, used everywhere below:
//   ICE frame: x = fan centerline (depth direction), y = fan-plane normal,
//   z = lateral in-plane axis. The imaging plane is y = 0.
//   Tip frame: the catheter heading is the tip z-axis.
//   Image: u (columns) along lateral z with the apex at u = width/2,
//   v (rows) along depth x, v = 0 at the apex.

// Rigid body pose: rotation + translation in millimetres.
struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation_mm = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_axis_angle(const Vec3& axis, double angle_deg,
                                        const Vec3& translation_mm = Vec3::Zero()) {
    RigidTransform t;
    t.rotation = Eigen::AngleAxisd(deg_to_rad(angle_deg), axis.normalized()).toRotationMatrix();
    t.translation_mm = translation_mm;
    return t;
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation_mm; }

  // Tip heading in the parent frame.
  Vec3 heading() const { return rotation.col(2); }

  double orthonormality_drift() const {
    return std::max((rotation.transpose() * rotation - Mat3::Identity()).norm(),
                    std::abs(rotation.determinant() - 1.0));
  }

  bool is_valid(double tol = 1e-9) const {
    return translation_mm.allFinite() && rotation.allFinite() && orthonormality_drift() < tol;
  }
};

// Nearest proper rotation (polar decomposition via SVD).
inline Mat3 orthonormalized(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 flip = Mat3::Identity();
    flip(2, 2) = -1.0;
    r = svd.matrixU() * flip * svd.matrixV().transpose();
  }
  return r;
}

// Applies b, then a.
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation_mm = a.rotation * b.translation_mm + a.translation_mm;
  if (out.orthonormality_drift() > 1e-12) out.rotation = orthonormalized(out.rotation);
  return out;
}

inline RigidTransform invert(const RigidTransform& t) {
  RigidTransform out;
  out.rotation = t.rotation.transpose();
  out.translation_mm = -(out.rotation * t.translation_mm);
  return out;
}

// E_ice^tip from the world poses of both frames.
inline RigidTransform relative_pose(const RigidTransform& e_world_ice,
                                    const RigidTransform& e_world_tip) {
  return compose(invert(e_world_ice), e_world_tip);
}

// The 2D ultrasound fan: apex at the ICE origin, opening symmetrically
// about the centerline inside the imaging plane.
struct FanGeometry {
  Vec3 apex = Vec3::Zero();
  Vec3 centerline = Vec3::UnitX();
  Vec3 plane_normal = Vec3::UnitY();
  double angular_span_deg = 90.0;
  double max_depth_mm = 100.0;
  int image_width = 224;
  int image_height = 224;
  double mm_per_px = 0.0;  // 0 = derive so the whole fan fits the image

  Vec3 lateral() const { return centerline.cross(plane_normal); }

  static double fit_mm_per_px(double span_deg, double depth_mm, int width, int height) {
    const double lateral_extent = 2.0 * depth_mm * std::sin(deg_to_rad(span_deg) / 2.0);
    return std::max(depth_mm / height, lateral_extent / width);
  }

  FanGeometry resolved() const {
    FanGeometry f = *this;
    if (f.mm_per_px <= 0.0)
      f.mm_per_px = fit_mm_per_px(angular_span_deg, max_depth_mm, image_width, image_height);
    return f;
  }

  void validate() const {
    if (std::abs(centerline.dot(plane_normal)) >= 1e-12)
      throw ConfigError("fan centerline must be perpendicular to the plane normal");
    if (std::abs(centerline.norm() - 1.0) > 1e-9 || std::abs(plane_normal.norm() - 1.0) > 1e-9)
      throw ConfigError("fan axes must be unit vectors");
    if (!(angular_span_deg > 0.0 && angular_span_deg < 180.0))
      throw ConfigError("fan angular span must lie in (0, 180) degrees");
    if (!(max_depth_mm > 0.0)) throw ConfigError("fan max depth must be positive");
    if (image_width <= 0 || image_height <= 0) throw ConfigError("fan image size must be positive");
    if (mm_per_px < 0.0) throw ConfigError("mm_per_px must be positive (or 0 to derive)");
  }
};

// Passing-point bounding box, normalized image coordinates in [0, 1].
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return x_min < x_max && y_min < y_max && x_min >= 0.0 && y_min >= 0.0 && x_max <= 1.0 &&
           y_max <= 1.0 && std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max);
  }

  // Clamp to [0,1] and order the corners; model outputs pass through this
  // before they are scored.
  BoundingBox sanitized() const {
    BoundingBox b;
    b.x_min = std::clamp(std::min(x_min, x_max), 0.0, 1.0);
    b.x_max = std::clamp(std::max(x_min, x_max), 0.0, 1.0);
    b.y_min = std::clamp(std::min(y_min, y_max), 0.0, 1.0);
    b.y_max = std::clamp(std::max(y_min, y_max), 0.0, 1.0);
    return b;
  }
};

// Incident angle pair: entry into the plane (signed) and in-plane rotation
// relative to the fan centerline.
struct IncidentAngle {
  double entry_deg = 0.0;  // [-90, 90]
  double rot_deg = 0.0;    // (-180, 180]
};

// Real-valued pixel position; apex maps to (width/2, 0).
struct PixelPoint {
  double u = 0.0;
  double v = 0.0;
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double iy = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

// Entry angle of the tip heading relative to the imaging plane, degrees.
// 0 = heading in-plane, +/-90 = heading along the plane normal.
inline double entry_angle_deg(const RigidTransform& e_ice_tip) {
  const double hy = std::clamp(e_ice_tip.heading().y(), -1.0, 1.0);
  return rad_to_deg(std::asin(hy));
}

// In-plane rotation of the heading, measured from the fan centerline.
// Throws DegenerateProjection when the heading is parallel to the normal.
inline double rotation_angle_from_heading_deg(const RigidTransform& e_ice_tip) {
  const Vec3 h = e_ice_tip.heading();
  const double in_plane = std::hypot(h.x(), h.z());
  if (in_plane <= 1e-9)
    throw DegenerateProjection("heading parallel to the plane normal; rotation undefined");
  return wrap_deg(rad_to_deg(std::atan2(h.z(), h.x())));
}

// Rotation angle recovered from a bounding-box diagonal, the annotation
// replication path. heading_hint = in-plane heading components (x, z),
// used only to pick which of the two diagonals (and which direction).
// deflate_mm shrinks each box side by a known body radius before taking
// the diagonal; 0 reproduces the plain box diagonal.
inline double rotation_angle_from_diagonal_deg(const FanGeometry& fan_in, const BoundingBox& box,
                                               const Vec2& heading_hint, double deflate_mm = 0.0) {
  const FanGeometry fan = fan_in.resolved();
  if (heading_hint.norm() <= 0.0) throw DegenerateBox("heading hint must be nonzero");
  const double w_norm = box.width();
  const double h_norm = box.height();
  const bool w_degenerate = w_norm < 1e-6;
  const bool h_degenerate = h_norm < 1e-6;
  if (w_degenerate && h_degenerate) throw DegenerateBox("box degenerates to a point");

  // Box extents in millimetres: u spans lateral z, v spans depth x.
  double dz = w_norm * fan.image_width * fan.mm_per_px;
  double dx = h_norm * fan.image_height * fan.mm_per_px;
  if (deflate_mm > 0.0) {
    dz = std::max(dz - 2.0 * deflate_mm, 0.0);
    dx = std::max(dx - 2.0 * deflate_mm, 0.0);
    if (dz <= 1e-12 && dx <= 1e-12)
      throw DegenerateBox("box no larger than the deflation radius (near-disc)");
  }
  if (w_degenerate) dz = 0.0;  // axis-aligned along depth
  if (h_degenerate) dx = 0.0;  // axis-aligned along lateral

  // Candidate directed diagonals in (x, z); pick the one along the hint.
  const Vec2 d1(dx, dz);
  const Vec2 d2(dx, -dz);
  Vec2 best = d1;
  double best_dot = heading_hint.dot(d1);
  for (const Vec2& cand : {Vec2(-d1), d2, Vec2(-d2)}) {
    const double dot = heading_hint.dot(cand);
    if (dot > best_dot) {
      best_dot = dot;
      best = cand;
    }
  }
  return wrap_deg(rad_to_deg(std::atan2(best.y(), best.x())));
}

// Intersection of the heading line through the tip with the plane y = 0.
// Near-parallel headings fall back to projecting an already in-plane tip.
inline Vec3 passing_point_mm(const Vec3& tip_position_mm, const Vec3& heading) {
  const double hy = heading.y();
  if (std::abs(hy) <= 1e-6) {
    if (std::abs(tip_position_mm.y()) < 0.5)
      return {tip_position_mm.x(), 0.0, tip_position_mm.z()};
    throw NoIntersection("heading parallel to the imaging plane and tip far from it");
  }
  const double t = -tip_position_mm.y() / hy;
  Vec3 p = tip_position_mm + t * heading;
  p.y() = 0.0;
  return p;
}

// In-plane point (mm, ICE frame) to pixel coordinates.
inline PixelPoint world_to_pixel(const FanGeometry& fan_in, const Vec3& p_mm) {
  const FanGeometry fan = fan_in.resolved();
  const Vec3 rel = p_mm - fan.apex;
  if (std::abs(rel.dot(fan.plane_normal)) >= 1e-6)
    throw OutOfPlane("point does not lie in the imaging plane");
  const double x = rel.dot(fan.centerline);
  const double z = rel.dot(fan.lateral());
  return {fan.image_width / 2.0 + z / fan.mm_per_px, x / fan.mm_per_px};
}

inline Vec3 pixel_to_plane_mm(const FanGeometry& fan_in, const PixelPoint& px) {
  const FanGeometry fan = fan_in.resolved();
  const double z = (px.u - fan.image_width / 2.0) * fan.mm_per_px;
  const double x = px.v * fan.mm_per_px;
  return fan.apex + x * fan.centerline + z * fan.lateral();
}

inline bool in_fan(const FanGeometry& fan_in, const PixelPoint& px) {
  const FanGeometry fan = fan_in.resolved();
  if (!(std::isfinite(px.u) && std::isfinite(px.v))) return false;
  if (px.u < 0.0 || px.u > fan.image_width || px.v < 0.0 || px.v > fan.image_height) return false;
  const double z = (px.u - fan.image_width / 2.0) * fan.mm_per_px;
  const double x = px.v * fan.mm_per_px;
  const double depth = std::hypot(x, z);
  if (depth > fan.max_depth_mm) return false;
  if (depth == 0.0) return true;  // apex
  const double polar_deg = rad_to_deg(std::atan2(std::abs(z), x));
  return polar_deg <= fan.angular_span_deg / 2.0;
}

}  // namespace icetrack
