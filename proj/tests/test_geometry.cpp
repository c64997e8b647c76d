#include <doctest.h>

#include "icetrack/geometry.hpp"
#include "support/oracles.hpp"

using namespace icetrack;

namespace {
double identity_deviation(const RigidTransform& t) {
  return std::max((t.rotation - Mat3::Identity()).norm(), t.translation_mm.norm());
}
}  // namespace

TEST_CASE("compose: identity and inverse") {
  Rng rng(42);
  const RigidTransform t = oracles::random_rigid(rng);
  CHECK(identity_deviation(compose(RigidTransform::identity(), t)) ==
        doctest::Approx(identity_deviation(t)).epsilon(1e-12));
  const RigidTransform round = compose(t, invert(t));
  CHECK(identity_deviation(round) < 1e-9);
}

TEST_CASE("compose equals pointwise application of b then a") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const RigidTransform a = oracles::random_rigid(rng);
    const RigidTransform b = oracles::random_rigid(rng);
    const RigidTransform ab = compose(a, b);
    for (int i = 0; i < 100; ++i) {
      const Vec3 p(rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100));
      CHECK((ab.apply(p) - a.apply(b.apply(p))).norm() < 1e-9);
    }
  }
}

TEST_CASE("invert: fixtures and homogeneous-matrix oracle") {
  CHECK(identity_deviation(invert(RigidTransform::identity())) < 1e-15);

  RigidTransform shift;
  shift.translation_mm = Vec3(1, 2, 3);
  const RigidTransform inv_shift = invert(shift);
  CHECK((inv_shift.translation_mm - Vec3(-1, -2, -3)).norm() < 1e-15);

  Rng rng(11);
  for (int i = 0; i < 200; ++i) {
    const RigidTransform t = oracles::random_rigid(rng);
    const RigidTransform inv = invert(t);
    const RigidTransform ref = oracles::homogeneous_inverse(t);
    CHECK((inv.rotation - ref.rotation).norm() < 1e-9);
    CHECK((inv.translation_mm - ref.translation_mm).norm() < 1e-9);
  }
}

TEST_CASE("invert is an involution") {
  Rng rng(13);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t = oracles::random_rigid(rng);
    const RigidTransform back = invert(invert(t));
    CHECK((back.rotation - t.rotation).norm() < 1e-9);
    CHECK((back.translation_mm - t.translation_mm).norm() < 1e-9);
  }
}

TEST_CASE("relative_pose fixtures") {
  Rng rng(3);
  const RigidTransform t = oracles::random_rigid(rng);
  CHECK(identity_deviation(relative_pose(t, t)) < 1e-9);
  const RigidTransform rel = relative_pose(RigidTransform::identity(), t);
  CHECK((rel.rotation - t.rotation).norm() < 1e-12);
  CHECK((rel.translation_mm - t.translation_mm).norm() < 1e-12);
}

TEST_CASE("relative_pose satisfies compose(E_world_ice, E_ice_tip) == E_world_tip") {
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const RigidTransform ice = oracles::random_rigid(rng);
    const RigidTransform tip = oracles::random_rigid(rng);
    const RigidTransform rel = relative_pose(ice, tip);
    const RigidTransform back = compose(ice, rel);
    CHECK((back.rotation - tip.rotation).norm() < 1e-9);
    CHECK((back.translation_mm - tip.translation_mm).norm() < 1e-9);
  }
}

TEST_CASE("entry angle fixtures") {
  auto with_heading = [](const Vec3& h) {
    RigidTransform t;
    t.rotation = icetrack::detail::frame_with_z(h, 0.0);
    return t;
  };
  CHECK(entry_angle_deg(with_heading(Vec3::UnitX())) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(entry_angle_deg(with_heading(Vec3::UnitY())) == doctest::Approx(90.0).epsilon(1e-12));
  CHECK(entry_angle_deg(with_heading(Vec3(1, 1, 0).normalized())) ==
        doctest::Approx(45.0).epsilon(1e-9));
}

TEST_CASE("entry angle invariant to roll about the heading") {
  Rng rng(23);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 h = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    RigidTransform a, b;
    a.rotation = icetrack::detail::frame_with_z(h, rng.uniform(0, 360));
    b.rotation = icetrack::detail::frame_with_z(h, rng.uniform(0, 360));
    CHECK(std::abs(entry_angle_deg(a) - entry_angle_deg(b)) < 1e-9);
  }
}

TEST_CASE("rotation angle from heading") {
  auto with_heading = [](const Vec3& h) {
    RigidTransform t;
    t.rotation = icetrack::detail::frame_with_z(h.normalized(), 0.0);
    return t;
  };
  CHECK(rotation_angle_from_heading_deg(with_heading(Vec3::UnitX())) ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rotation_angle_from_heading_deg(with_heading(Vec3::UnitZ())) ==
        doctest::Approx(90.0).epsilon(1e-12));
  CHECK(rotation_angle_from_heading_deg(with_heading(Vec3(1, 0.5, 1))) ==
        doctest::Approx(45.0).epsilon(1e-9));
  CHECK_THROWS_AS(rotation_angle_from_heading_deg(with_heading(Vec3::UnitY())),
                  DegenerateProjection);
}

TEST_CASE("rotation angle invariant to the heading y component") {
  Rng rng(29);
  for (int i = 0; i < 1000; ++i) {
    Vec3 h = Vec3(rng.normal(), 0.0, rng.normal());
    if (h.norm() < 1e-3) continue;
    h.normalize();
    RigidTransform flat;
    flat.rotation = icetrack::detail::frame_with_z(h, 0.0);
    Vec3 lifted = h + Vec3(0, rng.uniform(-2, 2), 0);
    RigidTransform tilted;
    tilted.rotation = icetrack::detail::frame_with_z(lifted.normalized(), 0.0);
    CHECK(angular_error_deg(rotation_angle_from_heading_deg(flat),
                            rotation_angle_from_heading_deg(tilted)) < 1e-9);
  }
}

TEST_CASE("rotation angle from diagonal: fixtures") {
  FanGeometry fan;
  fan.image_width = fan.image_height = 224;
  fan.mm_per_px = 0.5;  // isotropic
  BoundingBox square{0.2, 0.2, 0.4, 0.4};

  const double along = rotation_angle_from_diagonal_deg(fan, square, Vec2(1, 1));
  CHECK(along == doctest::Approx(45.0).epsilon(1e-12));
  const double reversed = rotation_angle_from_diagonal_deg(fan, square, Vec2(-1, -1));
  CHECK(angular_error_deg(reversed, along - 180.0) < 1e-12);

  // one degenerate dimension: axis-aligned result along the other
  BoundingBox flat{0.2, 0.3, 0.4, 0.3 + 1e-9};
  const double lateral = rotation_angle_from_diagonal_deg(fan, flat, Vec2(0.1, 1));
  CHECK(std::abs(lateral - 90.0) < 1e-9);

  BoundingBox point{0.2, 0.3, 0.2 + 1e-9, 0.3 + 1e-9};
  CHECK_THROWS_AS(rotation_angle_from_diagonal_deg(fan, point, Vec2(1, 0)), DegenerateBox);
}

TEST_CASE("rotation angle from diagonal: rasterization round trip") {
  FanGeometry fan;
  fan.angular_span_deg = 75;
  fan.max_depth_mm = 55;
  fan.image_width = fan.image_height = 160;
  fan = fan.resolved();
  TipAppearanceModel tip;

  Rng rng(31);
  int checked = 0;
  for (std::uint64_t i = 0; checked < 40; ++i) {
    AnnotationRecord rec;
    const RigidTransform pose = oracles::sample_visible_pose(fan, tip, mix_seed(100, i), &rec);
    if (rec.near_disc) continue;
    const double aspect = std::max(rec.box.width() / rec.box.height(),
                                   rec.box.height() / rec.box.width());
    if (aspect < 2.0) continue;

    const auto mask = oracles::measure_rendered_mask(fan, tip, pose, 4);
    REQUIRE(mask.any);
    const Vec3 h = pose.heading();
    const double recovered =
        rotation_angle_from_diagonal_deg(fan, mask.box, Vec2(h.x(), h.z()), 0.5 * tip.diameter_mm);
    CHECK(angular_error_deg(recovered, rec.angle.rot_deg) < 5.0);
    ++checked;
  }
}

TEST_CASE("passing point fixtures") {
  CHECK((passing_point_mm(Vec3(10, 5, 0), -Vec3::UnitY()) - Vec3(10, 0, 0)).norm() < 1e-12);
  CHECK((passing_point_mm(Vec3(10, 0, 5), Vec3(1, 1e-9, 0).normalized()) - Vec3(10, 0, 5)).norm() <
        1e-6);
  CHECK((passing_point_mm(Vec3(20, 4, 0), Vec3(0, -1, 1).normalized()) - Vec3(20, 0, 4)).norm() <
        1e-9);
  CHECK_THROWS_AS(passing_point_mm(Vec3(10, 30, 0), Vec3::UnitX()), NoIntersection);
}

TEST_CASE("world_to_pixel and in_fan") {
  FanGeometry fan;  // 90 deg, 100 mm, 224x224, derived mm/px
  fan = fan.resolved();

  const PixelPoint apex = world_to_pixel(fan, Vec3::Zero());
  CHECK(apex.u == doctest::Approx(112.0));
  CHECK(apex.v == doctest::Approx(0.0));
  CHECK(in_fan(fan, apex));

  CHECK_FALSE(in_fan(fan, world_to_pixel(fan, Vec3(fan.max_depth_mm + 1.0, 0, 0))));

  // just past the angular span
  const double phi = deg_to_rad(fan.angular_span_deg / 2.0 + 1.0);
  const Vec3 outside(40.0 * std::cos(phi), 0.0, 40.0 * std::sin(phi));
  CHECK_FALSE(in_fan(fan, world_to_pixel(fan, outside)));
  const double phi_in = deg_to_rad(fan.angular_span_deg / 2.0 - 1.0);
  const Vec3 inside(40.0 * std::cos(phi_in), 0.0, 40.0 * std::sin(phi_in));
  CHECK(in_fan(fan, world_to_pixel(fan, inside)));

  CHECK_THROWS_AS(world_to_pixel(fan, Vec3(10, 1.0, 0)), OutOfPlane);
}

TEST_CASE("iou fixtures") {
  const BoundingBox a{0.1, 0.1, 0.3, 0.3};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  const BoundingBox b{0.5, 0.5, 0.7, 0.7};
  CHECK(iou(a, b) == doctest::Approx(0.0));
  const BoundingBox c{0.0, 0.0, 0.4, 0.4};
  const BoundingBox d{0.2, 0.0, 0.6, 0.4};
  CHECK(iou(c, d) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou properties and pixel-count oracle") {
  Rng rng(37);
  for (int i = 0; i < 100; ++i) {
    // grid-aligned so the raster oracle has no edge quantization
    auto rand_box = [&] {
      BoundingBox b;
      b.x_min = double(rng.below(800)) / 1000.0;
      b.y_min = double(rng.below(800)) / 1000.0;
      b.x_max = b.x_min + double(50 + rng.below(1000 - 50 - std::uint64_t(b.x_min * 1000))) / 1000.0;
      b.y_max = b.y_min + double(50 + rng.below(1000 - 50 - std::uint64_t(b.y_min * 1000))) / 1000.0;
      return b;
    };
    const BoundingBox a = rand_box(), b = rand_box();
    const double ab = iou(a, b);
    CHECK(ab == doctest::Approx(iou(b, a)).epsilon(1e-15));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    const bool identical =
        a.x_min == b.x_min && a.y_min == b.y_min && a.x_max == b.x_max && a.y_max == b.y_max;
    CHECK((ab == 1.0) == identical);
    CHECK(std::abs(ab - oracles::pixel_count_iou(a, b)) < 2e-3);
  }
}

TEST_CASE("angular error fixtures and pseudometric properties") {
  CHECK(angular_error_deg(10, 10) == doctest::Approx(0.0));
  CHECK(angular_error_deg(-170, 175) == doctest::Approx(15.0));
  CHECK(angular_error_deg(350, 10) == doctest::Approx(20.0));

  Rng rng(41);
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.uniform(-720, 720);
    const double b = rng.uniform(-720, 720);
    const double c = rng.uniform(-720, 720);
    CHECK(angular_error_deg(a, b) == doctest::Approx(angular_error_deg(b, a)).epsilon(1e-12));
    CHECK(angular_error_deg(a, b) >= 0.0);
    CHECK(angular_error_deg(a, b) <= 180.0);
    CHECK(angular_error_deg(a, c) <=
          angular_error_deg(a, b) + angular_error_deg(b, c) + 1e-9);
  }
}

TEST_CASE("rigid transform invariants") {
  Rng rng(43);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform t = oracles::random_rigid(rng);
    CHECK(t.is_valid(1e-9));
  }
  RigidTransform skew;
  skew.rotation(0, 1) = 0.5;
  CHECK_FALSE(skew.is_valid(1e-9));
}

TEST_CASE("fan geometry invariants") {
  FanGeometry bad;
  bad.plane_normal = Vec3(0.1, 1, 0).normalized();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  FanGeometry span;
  span.angular_span_deg = 185;
  CHECK_THROWS_AS(span.validate(), ConfigError);
  FanGeometry ok;
  CHECK_NOTHROW(ok.validate());
}
