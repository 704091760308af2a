#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "starry/errors.hpp"

namespace starry {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const;
  Vec3 normalized() const;
};

// Pinhole camera: intrinsics in pixels, extrinsic is the 4x4 rigid
// world-to-camera transform (row-major, orthonormal rotation, det +1).
struct CameraModel {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
  std::size_t width = 0, height = 0;
  std::array<double, 16> extrinsic{};

  void validate() const;

  Vec3 world_to_camera(const Vec3& p) const;
  Vec3 camera_to_world(const Vec3& p) const;
  Vec3 center() const;  // camera position in world coordinates
};

CameraModel load_camera(const std::string& path);
void save_camera(const std::string& path, const CameraModel& cam);

// Builds a camera at `position` looking toward `target`, image-up aligned
// with world +z (CV convention: +x right, +y down, +z forward).
CameraModel look_at_camera(const Vec3& position, const Vec3& target, double fx,
                           double fy, std::size_t width, std::size_t height);

struct PixelPoint {
  double u = 0.0, v = 0.0;
  double depth = 0.0;  // camera-frame Z in meters
};

// u = fx*X/Z + cx, v = fy*Y/Z + cy in the camera frame. Returns
// coordinates even outside the image; throws BehindCameraError when the
// camera-frame depth is <= 1e-6.
PixelPoint project_point(const CameraModel& cam, const Vec3& point_world);

// World-space rays scaled so that point = center + ray * depth, one per
// pixel (row-major, f32, pixel (i, j) sampled at continuous (u=j, v=i)).
// Shared by the target-weight pipeline and its tensor-graph twin so both
// produce identical arithmetic.
std::vector<float> pixel_rays(const CameraModel& cam);
std::array<float, 3> camera_center_f32(const CameraModel& cam);

// Depth map (H*W meters, 0/invalid entries masked) to world points
// (H*W*3, f32). Invalid pixels produce zeros; consult the mask.
std::vector<float> unproject_depth(const CameraModel& cam,
                                   const std::vector<float>& depth,
                                   const std::vector<std::uint8_t>& valid);

// Euclidean distance from each valid point to the nearest end-effector;
// invalid pixels carry +inf.
std::vector<float> ee_distance_field(const std::vector<float>& points,
                                     const std::vector<std::uint8_t>& valid,
                                     const std::vector<Vec3>& ee_positions);

inline constexpr float kWeightFloor = 1e-6f;

// w = clamp(exp(-d^2 / (2 sigma^2)), kWeightFloor, 1)
std::vector<float> distance_to_weight(const std::vector<float>& dist, double sigma);

// Mean-pools pixel weights onto the token grid; edge patches average their
// partial coverage. Token grid is ceil(H/patch) x ceil(W/patch).
std::vector<float> aggregate_to_tokens(const std::vector<float>& pixel_weights,
                                       std::size_t height, std::size_t width,
                                       std::size_t patch);

// Geometry weights over a future horizon, one map per (step, view).
// token extents: ceil(img_h / patch) x ceil(img_w / patch).
struct WeightField {
  std::size_t steps = 0, views = 0;
  std::size_t img_h = 0, img_w = 0, patch = 1;
  std::vector<float> pixel_weights;  // (steps, views, img_h, img_w)
  std::vector<float> token_weights;  // (steps, views, tok_h, tok_w)
  std::vector<std::uint8_t> valid;   // (steps, views, img_h, img_w)

  std::size_t tok_h() const { return (img_h + patch - 1) / patch; }
  std::size_t tok_w() const { return (img_w + patch - 1) / patch; }
};

struct TargetWeightResult {
  std::vector<float> pixel_weights;  // (H, W)
  std::vector<float> token_weights;  // (tok_h, tok_w)
};

// Ground-truth geometry weights for one view at one step: unproject the
// depth map, take distances to the end-effector(s), apply the Gaussian
// kernel and mean-pool to tokens. Arithmetic mirrors the tensor-graph
// predicted path exactly (f32 muls, double-accumulated means) so the two
// agree elementwise on identical inputs. Requires patch | extents.
TargetWeightResult compute_target_weights(const CameraModel& cam,
                                          const std::vector<float>& gt_depth,
                                          const std::vector<std::uint8_t>& valid,
                                          const std::vector<Vec3>& gt_ee,
                                          double sigma, std::size_t patch);

}  // namespace starry
