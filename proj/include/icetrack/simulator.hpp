#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "icetrack/config.hpp"
#include "icetrack/geometry.hpp"
#include "icetrack/image.hpp"
#include "icetrack/png_io.hpp"
#include "icetrack/rng.hpp"

namespace icetrack {

enum class MotionKind { insertion, withdrawal, mixed };

inline const char* to_string(MotionKind k) {
  switch (k) {
    case MotionKind::insertion: return "insertion";
    case MotionKind::withdrawal: return "withdrawal";
    default: return "mixed";
  }
}

// One scripted tip motion: constant speed along the heading with optional
// slow heading drift.
struct MotionProfile {
  MotionKind kind = MotionKind::insertion;
  double speed_mm_s = 15.0;
  double frame_rate_hz = 25.0;
  int n_frames = 12;
  double heading_drift_deg_s = 0.0;
  std::uint64_t seed = 0;

  double step_mm() const { return speed_mm_s / frame_rate_hz; }

  void validate(bool allow_speed_outside_band = false) const {
    if (!allow_speed_outside_band && (speed_mm_s < 10.0 || speed_mm_s > 20.0))
      throw ConfigError("speed outside the tested 10-20 mm/s band (set the override to allow)");
    if (frame_rate_hz <= 0.0) throw ConfigError("frame rate must be positive");
    if (n_frames < 6) throw ConfigError("need at least 6 frames per sequence");
    if (heading_drift_deg_s < 0.0) throw ConfigError("heading drift must be >= 0");
  }
};

// Rendered tip appearance: a bright capsule, foreshortened by the entry angle.
struct TipAppearanceModel {
  double length_mm = 10.0;
  double diameter_mm = 3.0;  // 9-Fr device
  double peak_intensity = 0.95;
  double intensity_jitter_std = 0.04;
  double blur_sigma_px = 0.8;

  void validate() const {
    if (!(length_mm > diameter_mm && diameter_mm > 0.0))
      throw ConfigError("tip requires length_mm > diameter_mm > 0");
    if (!(peak_intensity > 0.0 && peak_intensity <= 1.0))
      throw ConfigError("peak intensity must lie in (0, 1]");
    if (intensity_jitter_std < 0.0 || blur_sigma_px < 0.0)
      throw ConfigError("jitter and blur must be >= 0");
  }
};

enum class BackgroundMode { procedural_speckle, image_pool };

struct BackgroundModel {
  BackgroundMode mode = BackgroundMode::procedural_speckle;
  std::string pool_id;                  // identifier used for split disjointness
  std::vector<std::string> pool_paths;  // image_pool mode
  double grain_scale_px = 6.0;
  double mean_intensity = 0.22;
  double contrast = 0.55;

  void validate() const {
    if (mode == BackgroundMode::image_pool && pool_paths.empty())
      throw ConfigError("image_pool background requires a nonempty pool");
    if (grain_scale_px <= 0.0) throw ConfigError("grain scale must be positive");
    if (mean_intensity < 0.0 || mean_intensity > 1.0 || contrast < 0.0)
      throw ConfigError("background intensity parameters out of range");
  }
};

// Per-frame ground truth.
struct AnnotationRecord {
  int frame_index = 0;
  bool visible = false;
  BoundingBox box{};
  IncidentAngle angle{};
  bool clipped = false;    // capsule reached an image or fan boundary
  bool near_disc = false;  // projected length below the body diameter
  RigidTransform tip_pose;  // E_ice^tip, for audit
};

struct Trajectory {
  RigidTransform e_world_ice;
  std::vector<RigidTransform> e_world_tip;  // one per frame
};

namespace detail {

// Rotation with the z column equal to `z`, rolled about it.
inline Mat3 frame_with_z(const Vec3& z_axis, double roll_deg) {
  const Vec3 z = z_axis.normalized();
  const Vec3 ref = std::abs(z.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  const Vec3 x = (ref - ref.dot(z) * z).normalized();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return (Eigen::AngleAxisd(deg_to_rad(roll_deg), z).toRotationMatrix() * r).eval();
}

}  // namespace detail

// Scene sampling ranges; |entry| defaults to a band where foreshortening
// keeps the entry angle observable in the image.
struct SceneSampling {
  double entry_min_deg = 12.0;
  double entry_max_deg = 55.0;
};

// Samples a scene for the profile and scripts the tip motion in world
// coordinates. Consecutive positions differ by exactly step_mm along the
// current heading; the heading turns heading_drift/frame_rate per frame.
inline Trajectory generate_trajectory(const MotionProfile& profile, const FanGeometry& fan_in,
                                      std::uint64_t scene_seed,
                                      const SceneSampling& sampling = {}) {
  const FanGeometry fan = fan_in.resolved();
  Rng rng(mix_seed(profile.seed, mix_seed(0x747261'6aull, scene_seed)));

  Trajectory out;
  {
    const Vec3 axis(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    out.e_world_ice = RigidTransform::from_axis_angle(
        axis.norm() > 1e-6 ? axis : Vec3::UnitZ(), rng.uniform(0.0, 360.0),
        Vec3(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)));
  }

  // Passing point well inside the fan.
  const double polar_deg = rng.uniform(-0.35, 0.35) * fan.angular_span_deg / 2.0;
  const double depth = rng.uniform(0.40, 0.75) * fan.max_depth_mm;
  const Vec3 pass_point(depth * std::cos(deg_to_rad(polar_deg)), 0.0,
                        depth * std::sin(deg_to_rad(polar_deg)));

  const double entry_deg =
      (rng.coin() ? 1.0 : -1.0) * rng.uniform(sampling.entry_min_deg, sampling.entry_max_deg);
  const double rot_deg = rng.uniform(-180.0, 180.0);
  const double e = deg_to_rad(entry_deg), r = deg_to_rad(rot_deg);
  const Vec3 heading0(std::cos(e) * std::cos(r), std::sin(e), std::cos(e) * std::sin(r));
  Mat3 tip_rot = detail::frame_with_z(heading0, rng.uniform(0.0, 360.0));

  const double step = profile.step_mm();
  // Keep the tip near the plane: the passing point swings by roughly
  // (tip distance) x (accumulated drift), so the along-heading offset is
  // capped and the direction reverses at the cap (the tip shuttles through
  // the plane on long sequences). Short sequences stay purely one-way.
  const double shuttle_bound = rng.uniform(12.0, 20.0);
  double start_offset;  // distance of the tip behind the passing point, along the heading
  switch (profile.kind) {
    case MotionKind::insertion: start_offset = rng.uniform(5.0, 11.0); break;
    case MotionKind::withdrawal: start_offset = rng.uniform(-5.0, 1.0); break;
    default: start_offset = rng.uniform(0.0, 7.0); break;
  }
  const int flip_frame = profile.kind == MotionKind::mixed
                             ? profile.n_frames / 4 + int(rng.below(std::max(1, profile.n_frames / 2)))
                             : -1;

  // Constant-direction drift axis, orthogonal to the initial heading.
  Vec3 drift_axis = Vec3(rng.normal(), rng.normal(), rng.normal());
  drift_axis -= drift_axis.dot(heading0) * heading0;
  if (drift_axis.norm() < 1e-9) drift_axis = heading0.unitOrthogonal();
  drift_axis.normalize();
  const double drift_per_frame_deg = profile.heading_drift_deg_s / profile.frame_rate_hz;
  const Mat3 drift_rot =
      Eigen::AngleAxisd(deg_to_rad(drift_per_frame_deg), drift_axis).toRotationMatrix();

  Vec3 position = pass_point - start_offset * heading0;
  double sign = profile.kind == MotionKind::withdrawal ? -1.0 : 1.0;

  out.e_world_tip.reserve(profile.n_frames);
  for (int k = 0; k < profile.n_frames; ++k) {
    if (k == flip_frame) sign = -sign;
    RigidTransform e_ice_tip;
    e_ice_tip.rotation = tip_rot;
    e_ice_tip.translation_mm = position;
    out.e_world_tip.push_back(compose(out.e_world_ice, e_ice_tip));
    const Vec3 heading = tip_rot.col(2);
    const Vec3 next = position + sign * step * heading;
    // signed along-heading offset past the plane
    const double hy = heading.y();
    if (std::abs(hy) > 1e-6) {
      const double offset = next.y() / hy;
      if ((sign > 0.0 && offset > shuttle_bound) || (sign < 0.0 && offset < -shuttle_bound))
        sign = -sign;
    }
    position += sign * step * heading;
    if (drift_per_frame_deg > 0.0) tip_rot = orthonormalized(drift_rot * tip_rot);
  }
  return out;
}

// Analytic ground-truth annotation of one frame.
inline AnnotationRecord annotate(const FanGeometry& fan_in, const TipAppearanceModel& tip,
                                 const RigidTransform& e_ice_tip, int frame_index) {
  const FanGeometry fan = fan_in.resolved();
  AnnotationRecord rec;
  rec.frame_index = frame_index;
  rec.tip_pose = e_ice_tip;
  rec.angle.entry_deg = entry_angle_deg(e_ice_tip);

  Vec3 pp;
  try {
    pp = passing_point_mm(e_ice_tip.translation_mm, e_ice_tip.heading());
  } catch (const NoIntersection&) {
    return rec;  // invisible
  }
  const PixelPoint center = world_to_pixel(fan, pp);
  if (!in_fan(fan, center)) return rec;

  bool rot_defined = true;
  try {
    rec.angle.rot_deg = rotation_angle_from_heading_deg(e_ice_tip);
  } catch (const DegenerateProjection&) {
    rec.angle.rot_deg = 0.0;
    rot_defined = false;
  }

  const double half_len_mm = 0.5 * tip.length_mm * std::cos(deg_to_rad(rec.angle.entry_deg));
  rec.near_disc = !rot_defined || 2.0 * half_len_mm < tip.diameter_mm;

  const double half_len_px = half_len_mm / fan.mm_per_px;
  const double r_px = 0.5 * tip.diameter_mm / fan.mm_per_px;
  const double rot = deg_to_rad(rec.angle.rot_deg);
  const double du = std::sin(rot), dv = std::cos(rot);  // lateral z -> u, depth x -> v

  const double u0 = center.u - half_len_px * du, u1 = center.u + half_len_px * du;
  const double v0 = center.v - half_len_px * dv, v1 = center.v + half_len_px * dv;
  const double raw_umin = std::min(u0, u1) - r_px, raw_umax = std::max(u0, u1) + r_px;
  const double raw_vmin = std::min(v0, v1) - r_px, raw_vmax = std::max(v0, v1) + r_px;

  BoundingBox box;
  box.x_min = std::clamp(raw_umin / fan.image_width, 0.0, 1.0);
  box.x_max = std::clamp(raw_umax / fan.image_width, 0.0, 1.0);
  box.y_min = std::clamp(raw_vmin / fan.image_height, 0.0, 1.0);
  box.y_max = std::clamp(raw_vmax / fan.image_height, 0.0, 1.0);
  if (!box.valid()) return rec;  // fully clipped away

  rec.clipped = raw_umin < 0.0 || raw_vmin < 0.0 || raw_umax > fan.image_width ||
                raw_vmax > fan.image_height;
  for (const auto& [eu, ev] : {std::pair{u0, v0}, std::pair{u1, v1}}) {
    for (const auto& [ou, ov] :
         {std::pair{r_px, 0.0}, std::pair{-r_px, 0.0}, std::pair{0.0, r_px}, std::pair{0.0, -r_px}}) {
      if (!in_fan(fan, {eu + ou, ev + ov})) rec.clipped = true;
    }
  }

  rec.box = box;
  rec.visible = true;
  return rec;
}

// Boolean fan mask sampled at pixel centers; cached across frames.
struct FanMask {
  int width = 0, height = 0;
  std::vector<std::uint8_t> inside;

  explicit FanMask(const FanGeometry& fan_in) {
    const FanGeometry fan = fan_in.resolved();
    width = fan.image_width;
    height = fan.image_height;
    inside.resize(std::size_t(width) * height);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        inside[std::size_t(y) * width + x] = in_fan(fan, {x + 0.5, y + 0.5}) ? 1 : 0;
  }

  bool at(int x, int y) const { return inside[std::size_t(y) * width + x] != 0; }
};

// Procedural speckle: bilinear value noise at the grain scale with a fine
// multiplicative component.
inline ImageF render_background(const FanGeometry& fan_in, const BackgroundModel& bg, Rng rng) {
  const FanGeometry fan = fan_in.resolved();
  ImageF img(fan.image_width, fan.image_height);

  if (bg.mode == BackgroundMode::image_pool) {
    const auto idx = rng.below(bg.pool_paths.size());
    ImageF pooled = read_png_gray8(bg.pool_paths[idx]);
    return resize_area(pooled, fan.image_width, fan.image_height);
  }

  const double grain = bg.grain_scale_px;
  const int gw = int(std::ceil(fan.image_width / grain)) + 2;
  const int gh = int(std::ceil(fan.image_height / grain)) + 2;
  std::vector<double> grid(std::size_t(gw) * gh);
  for (auto& g : grid) g = rng.uniform();
  Rng fine = rng.fork(0x66696e65);

  for (int y = 0; y < fan.image_height; ++y) {
    const double gy = y / grain;
    const int iy = int(gy);
    const double fy = gy - iy;
    for (int x = 0; x < fan.image_width; ++x) {
      const double gx = x / grain;
      const int ix = int(gx);
      const double fx = gx - ix;
      const double g00 = grid[std::size_t(iy) * gw + ix];
      const double g10 = grid[std::size_t(iy) * gw + ix + 1];
      const double g01 = grid[std::size_t(iy + 1) * gw + ix];
      const double g11 = grid[std::size_t(iy + 1) * gw + ix + 1];
      const double coarse = (1 - fy) * ((1 - fx) * g00 + fx * g10) + fy * ((1 - fx) * g01 + fx * g11);
      const double speckle = 0.85 + 0.3 * fine.uniform();
      const double v = bg.mean_intensity * (1.0 + bg.contrast * (2.0 * coarse - 1.0)) * speckle;
      img.at(x, y) = float(std::clamp(v, 0.0, 1.0));
    }
  }
  return img;
}

// Renders one frame and its analytic annotation. The rng stream is owned by
// the frame: pass a per-frame fork so frames are independent.
inline std::pair<ImageF, AnnotationRecord> render_frame_masked(
    const FanGeometry& fan_in, const BackgroundModel& bg, const TipAppearanceModel& tip,
    const RigidTransform& e_world_ice, const RigidTransform& e_world_tip, Rng rng,
    const FanMask& mask, int frame_index = 0) {
  const FanGeometry fan = fan_in.resolved();
  const RigidTransform e_ice_tip = relative_pose(e_world_ice, e_world_tip);
  AnnotationRecord rec = annotate(fan, tip, e_ice_tip, frame_index);

  ImageF img = render_background(fan, bg, rng.fork(0xb6));

  if (rec.visible) {
    const Vec3 pp = passing_point_mm(e_ice_tip.translation_mm, e_ice_tip.heading());
    const PixelPoint center = world_to_pixel(fan, pp);
    const double half_len_px =
        0.5 * tip.length_mm * std::cos(deg_to_rad(rec.angle.entry_deg)) / fan.mm_per_px;
    const double r_px = 0.5 * tip.diameter_mm / fan.mm_per_px;
    const double rot = deg_to_rad(rec.angle.rot_deg);
    const double du = std::sin(rot), dv = std::cos(rot);
    const double au = center.u - half_len_px * du, av = center.v - half_len_px * dv;
    const double bu = center.u + half_len_px * du, bv = center.v + half_len_px * dv;

    const int margin = int(std::ceil(r_px + 1.0 + 3.0 * tip.blur_sigma_px)) + 1;
    const int x0 = std::max(0, int(std::floor(std::min(au, bu))) - margin);
    const int x1 = std::min(fan.image_width - 1, int(std::ceil(std::max(au, bu))) + margin);
    const int y0 = std::max(0, int(std::floor(std::min(av, bv))) - margin);
    const int y1 = std::min(fan.image_height - 1, int(std::ceil(std::max(av, bv))) + margin);

    if (x1 >= x0 && y1 >= y0) {
      const int rw = x1 - x0 + 1, rh = y1 - y0 + 1;
      ImageF alpha(rw, rh, 0.0f);
      const double seg_len2 = (bu - au) * (bu - au) + (bv - av) * (bv - av);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          double t = 0.0;
          if (seg_len2 > 0.0)
            t = std::clamp(((px - au) * (bu - au) + (py - av) * (bv - av)) / seg_len2, 0.0, 1.0);
          const double cx = au + t * (bu - au), cy = av + t * (bv - av);
          const double dist = std::hypot(px - cx, py - cy);
          alpha.at(x - x0, y - y0) = float(std::clamp(r_px + 0.5 - dist, 0.0, 1.0));
        }
      }
      gaussian_blur(alpha, tip.blur_sigma_px);
      Rng jitter = rng.fork(0x6a);
      const double intensity =
          std::clamp(tip.peak_intensity + jitter.normal() * tip.intensity_jitter_std, 0.05, 1.0);
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const float a = alpha.at(x - x0, y - y0);
          if (a > 0.0f) img.at(x, y) = img.at(x, y) * (1.0f - a) + float(intensity) * a;
        }
      }
    }
  }

  for (int y = 0; y < fan.image_height; ++y)
    for (int x = 0; x < fan.image_width; ++x)
      if (!mask.at(x, y)) img.at(x, y) = 0.0f;

  return {std::move(img), rec};
}

inline std::pair<ImageF, AnnotationRecord> render_frame(const FanGeometry& fan,
                                                        const BackgroundModel& bg,
                                                        const TipAppearanceModel& tip,
                                                        const RigidTransform& e_world_ice,
                                                        const RigidTransform& e_world_tip, Rng rng,
                                                        int frame_index = 0) {
  const FanMask mask(fan);
  return render_frame_masked(fan, bg, tip, e_world_ice, e_world_tip, rng, mask, frame_index);
}

// ---------------------------------------------------------------------------
// Dataset generation

struct SimSplitConfig {
  std::string name;
  int sequences = 0;
  int frames_per_sequence = 12;
  std::uint64_t seed_base = 0;
  std::uint64_t background_seed_base = 0;
  std::string background_pool;   // directory for image_pool mode
  double drift_min_deg_s = -1.0;  // < 0: use the global range
  double drift_max_deg_s = -1.0;
};

struct SimConfig {
  FanGeometry fan;
  TipAppearanceModel tip;
  BackgroundModel background;
  SceneSampling sampling;
  double frame_rate_hz = 25.0;
  double speed_min_mm_s = 10.0;
  double speed_max_mm_s = 20.0;
  double drift_min_deg_s = 0.0;
  double drift_max_deg_s = 6.0;
  bool allow_speed_outside_band = false;
  std::vector<SimSplitConfig> splits;

  static SimConfig from_config(const Config& cfg) {
    SimConfig sc;
    sc.fan.angular_span_deg = cfg.get_f64("fan.angular_span_deg", 90.0);
    sc.fan.max_depth_mm = cfg.get_f64("fan.max_depth_mm", 100.0);
    sc.fan.image_width = int(cfg.get_i64("fan.image_width", 224));
    sc.fan.image_height = int(cfg.get_i64("fan.image_height", 224));
    sc.fan.mm_per_px = cfg.get_f64("fan.mm_per_px", 0.0);
    sc.fan = sc.fan.resolved();
    sc.fan.validate();

    sc.tip.length_mm = cfg.get_f64("tip.length_mm", 10.0);
    sc.tip.diameter_mm = cfg.get_f64("tip.diameter_mm", 3.0);
    sc.tip.peak_intensity = cfg.get_f64("tip.peak_intensity", 0.95);
    sc.tip.intensity_jitter_std = cfg.get_f64("tip.intensity_jitter_std", 0.04);
    sc.tip.blur_sigma_px = cfg.get_f64("tip.blur_sigma_px", 0.8);
    sc.tip.validate();

    const std::string mode = cfg.get_str("background.mode", "procedural_speckle");
    if (mode == "procedural_speckle") {
      sc.background.mode = BackgroundMode::procedural_speckle;
    } else if (mode == "image_pool") {
      sc.background.mode = BackgroundMode::image_pool;
    } else {
      throw ConfigError("unknown background.mode '" + mode + "'");
    }
    sc.background.grain_scale_px = cfg.get_f64("background.grain_scale_px", 6.0);
    sc.background.mean_intensity = cfg.get_f64("background.mean_intensity", 0.22);
    sc.background.contrast = cfg.get_f64("background.contrast", 0.55);

    sc.sampling.entry_min_deg = cfg.get_f64("sim.entry_min_deg", 12.0);
    sc.sampling.entry_max_deg = cfg.get_f64("sim.entry_max_deg", 55.0);
    if (!(sc.sampling.entry_min_deg >= 0.0 &&
          sc.sampling.entry_max_deg > sc.sampling.entry_min_deg &&
          sc.sampling.entry_max_deg <= 85.0))
      throw ConfigError("entry angle sampling range must satisfy 0 <= min < max <= 85");

    sc.frame_rate_hz = cfg.get_f64("sim.frame_rate_hz", 25.0);
    sc.speed_min_mm_s = cfg.get_f64("sim.speed_min_mm_s", 10.0);
    sc.speed_max_mm_s = cfg.get_f64("sim.speed_max_mm_s", 20.0);
    sc.drift_min_deg_s = cfg.get_f64("sim.drift_min_deg_s", 0.0);
    sc.drift_max_deg_s = cfg.get_f64("sim.drift_max_deg_s", 6.0);
    sc.allow_speed_outside_band = cfg.get_bool("sim.allow_speed_outside_band", false);

    const std::uint64_t seed_bases[3] = {1'000'000, 2'000'000, 3'000'000};
    const std::uint64_t bg_bases[3] = {11'000'000, 12'000'000, 13'000'000};
    const char* names[3] = {"train", "val", "test"};
    for (int i = 0; i < 3; ++i) {
      SimSplitConfig split;
      split.name = names[i];
      const std::string p = std::string("sim.") + names[i] + ".";
      split.sequences = int(cfg.get_i64(p + "sequences"));
      split.frames_per_sequence = int(cfg.get_i64(p + "frames", 12));
      split.seed_base = cfg.get_u64(p + "seed_base", seed_bases[i]);
      split.background_seed_base = cfg.get_u64(p + "background_seed_base", bg_bases[i]);
      split.background_pool = cfg.get_str(p + "background_pool", "");
      split.drift_min_deg_s = cfg.get_f64(p + "drift_min_deg_s", -1.0);
      split.drift_max_deg_s = cfg.get_f64(p + "drift_max_deg_s", -1.0);
      if (split.sequences < 1) throw ConfigError(p + "sequences must be >= 1");
      if (split.frames_per_sequence < 6) throw ConfigError(p + "frames must be >= 6");
      sc.splits.push_back(split);
    }
    return sc;
  }

  const SimSplitConfig& split(const std::string& name) const {
    for (const auto& s : splits)
      if (s.name == name) return s;
    throw ConfigError("unknown split '" + name + "'");
  }
};

// Train and test must not share trajectory seeds or background sources.
inline void check_split_disjointness(const SimConfig& sc) {
  const SimSplitConfig& train = sc.split("train");
  const SimSplitConfig& test = sc.split("test");
  const auto overlap = [](std::uint64_t a0, std::uint64_t an, std::uint64_t b0, std::uint64_t bn) {
    return a0 < b0 + bn && b0 < a0 + an;
  };
  if (overlap(train.seed_base, train.sequences, test.seed_base, test.sequences))
    throw SplitOverlap("train/test trajectory seed ranges intersect: train base " +
                       std::to_string(train.seed_base) + " count " +
                       std::to_string(train.sequences) + " vs test base " +
                       std::to_string(test.seed_base) + " count " + std::to_string(test.sequences));
  if (sc.background.mode == BackgroundMode::procedural_speckle) {
    if (overlap(train.background_seed_base, train.sequences, test.background_seed_base,
                test.sequences))
      throw SplitOverlap("train/test background seed ranges intersect: train base " +
                         std::to_string(train.background_seed_base) + " vs test base " +
                         std::to_string(test.background_seed_base));
  } else if (!train.background_pool.empty() && train.background_pool == test.background_pool) {
    throw SplitOverlap("train and test share background pool '" + train.background_pool + "'");
  }
}

namespace detail {

inline std::string sequence_id(const std::string& split, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%04d", split.c_str(), index);
  return buf;
}

inline nlohmann::json annotation_to_json(const AnnotationRecord& rec) {
  nlohmann::json j;
  j["frame_index"] = rec.frame_index;
  j["visible"] = rec.visible;
  if (rec.visible) {
    j["box"] = {rec.box.x_min, rec.box.y_min, rec.box.x_max, rec.box.y_max};
    j["entry_deg"] = rec.angle.entry_deg;
    j["rot_deg"] = rec.angle.rot_deg;
    j["clipped"] = rec.clipped;
    j["near_disc"] = rec.near_disc;
  }
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) r[i * 3 + c] = rec.tip_pose.rotation(i, c);
  j["tip_rotation"] = r;
  j["tip_translation_mm"] = {rec.tip_pose.translation_mm.x(), rec.tip_pose.translation_mm.y(),
                             rec.tip_pose.translation_mm.z()};
  return j;
}

inline AnnotationRecord annotation_from_json(const nlohmann::json& j) {
  AnnotationRecord rec;
  rec.frame_index = j.at("frame_index").get<int>();
  rec.visible = j.at("visible").get<bool>();
  if (rec.visible) {
    const auto& b = j.at("box");
    rec.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
               b.at(3).get<double>()};
    rec.angle.entry_deg = j.at("entry_deg").get<double>();
    rec.angle.rot_deg = j.at("rot_deg").get<double>();
    rec.clipped = j.value("clipped", false);
    rec.near_disc = j.value("near_disc", false);
  }
  if (j.contains("tip_rotation")) {
    const auto& r = j.at("tip_rotation");
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 3; ++c) rec.tip_pose.rotation(i, c) = r.at(i * 3 + c).get<double>();
    const auto& t = j.at("tip_translation_mm");
    rec.tip_pose.translation_mm =
        Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
  }
  return rec;
}

}  // namespace detail

struct GeneratedDataset {
  std::filesystem::path root;
  std::filesystem::path manifest_path;
  std::string manifest_hash;  // sha256 of the manifest file
};

// Writes <root>/<split>/<id>/frame_<k>.png + annotations.jsonl per sequence
// and <root>/manifest. Identical (config, seed) re-runs are byte-identical.
inline GeneratedDataset generate_dataset(const SimConfig& sc, const Config& raw_config,
                                         const std::filesystem::path& root, std::uint64_t seed,
                                         int jobs = 1) {
  namespace fs = std::filesystem;
  check_split_disjointness(sc);
  MotionProfile band_probe;
  band_probe.speed_mm_s = sc.speed_min_mm_s;
  band_probe.frame_rate_hz = sc.frame_rate_hz;
  band_probe.n_frames = 6;
  band_probe.validate(sc.allow_speed_outside_band);
  band_probe.speed_mm_s = sc.speed_max_mm_s;
  band_probe.validate(sc.allow_speed_outside_band);

  const FanGeometry fan = sc.fan.resolved();
  const FanMask mask(fan);
  fs::create_directories(root);

  struct Task {
    const SimSplitConfig* split;
    int index;
  };
  std::vector<Task> tasks;
  for (const auto& split : sc.splits) {
    fs::create_directories(root / split.name);
    for (int i = 0; i < split.sequences; ++i) tasks.push_back({&split, i});
  }

  const auto run_one = [&](const Task& task) {
    const SimSplitConfig& split = *task.split;
    const int i = task.index;
    const std::uint64_t scene_seed = split.seed_base + std::uint64_t(i);
    Rng scene_rng(mix_seed(seed, mix_seed(0x7363656eull, scene_seed)));

    MotionProfile profile;
    profile.kind = static_cast<MotionKind>(i % 3);
    profile.speed_mm_s = scene_rng.uniform(sc.speed_min_mm_s, sc.speed_max_mm_s);
    profile.frame_rate_hz = sc.frame_rate_hz;
    profile.n_frames = split.frames_per_sequence;
    const double dmin = split.drift_min_deg_s >= 0.0 ? split.drift_min_deg_s : sc.drift_min_deg_s;
    const double dmax = split.drift_max_deg_s >= 0.0 ? split.drift_max_deg_s : sc.drift_max_deg_s;
    profile.heading_drift_deg_s = scene_rng.uniform(dmin, dmax);
    profile.seed = seed;
    profile.validate(sc.allow_speed_outside_band);

    const Trajectory traj = generate_trajectory(profile, fan, scene_seed, sc.sampling);

    BackgroundModel bg = sc.background;
    if (bg.mode == BackgroundMode::image_pool) {
      bg.pool_id = split.background_pool;
      bg.pool_paths.clear();
      for (const auto& entry : fs::directory_iterator(split.background_pool))
        if (entry.path().extension() == ".png") bg.pool_paths.push_back(entry.path().string());
      std::sort(bg.pool_paths.begin(), bg.pool_paths.end());
      bg.validate();
    }

    const std::string id = detail::sequence_id(split.name, i);
    const fs::path seq_dir = root / split.name / id;
    fs::create_directories(seq_dir);
    std::ofstream ann(seq_dir / "annotations.jsonl");
    if (!ann) throw IOFailure("cannot write " + (seq_dir / "annotations.jsonl").string());

    const std::uint64_t bg_seed = mix_seed(seed, split.background_seed_base + std::uint64_t(i));
    for (int k = 0; k < profile.n_frames; ++k) {
      Rng frame_rng(mix_seed(bg_seed, std::uint64_t(k)));
      auto [img, rec] = render_frame_masked(fan, bg, sc.tip, traj.e_world_ice, traj.e_world_tip[k],
                                            frame_rng, mask, k);
      write_png_gray8((seq_dir / ("frame_" + std::to_string(k) + ".png")).string(), img);
      ann << detail::annotation_to_json(rec).dump() << '\n';
    }
  };

  if (jobs <= 1) {
    for (const auto& t : tasks) run_one(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t t; (t = next.fetch_add(1)) < tasks.size();) run_one(tasks[t]);
        } catch (...) {
          errors[std::size_t(w)] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["seed"] = seed;
  manifest["config_hash"] = raw_config.hash();
  manifest["image"] = {{"width", fan.image_width}, {"height", fan.image_height}};
  manifest["fan"] = {{"angular_span_deg", fan.angular_span_deg},
                     {"max_depth_mm", fan.max_depth_mm},
                     {"mm_per_px", fan.mm_per_px}};
  manifest["splits"] = nlohmann::json::array();
  for (const auto& split : sc.splits) {
    nlohmann::json js;
    js["name"] = split.name;
    js["count"] = split.sequences;
    js["frames_per_sequence"] = split.frames_per_sequence;
    js["seed_base"] = split.seed_base;
    js["background_seed_base"] = split.background_seed_base;
    js["background_pool"] = split.background_pool;
    auto ids = nlohmann::json::array();
    for (int i = 0; i < split.sequences; ++i) ids.push_back(detail::sequence_id(split.name, i));
    js["sequence_ids"] = ids;
    manifest["splits"].push_back(js);
  }

  GeneratedDataset out;
  out.root = root;
  out.manifest_path = root / "manifest";
  {
    std::ofstream mf(out.manifest_path);
    if (!mf) throw IOFailure("cannot write " + out.manifest_path.string());
    mf << manifest.dump(2) << '\n';
  }
  out.manifest_hash = sha256_file_hex(out.manifest_path.string());
  return out;
}

}  // namespace icetrack
