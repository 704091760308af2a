#include "starry/camera.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace starry {

using nlohmann::json;

double Vec3::norm() const { return std::sqrt(x * x + y * y + z * z); }

Vec3 Vec3::normalized() const {
  const double n = norm();
  if (n == 0.0) throw Error("cannot normalize a zero vector");
  return {x / n, y / n, z / n};
}

void CameraModel::validate() const {
  if (fx <= 0.0 || fy <= 0.0) throw Error("camera: focal lengths must be positive");
  if (width == 0 || height == 0) throw Error("camera: empty image extents");
  if (cx < 0.0 || cx >= static_cast<double>(width) || cy < 0.0 ||
      cy >= static_cast<double>(height)) {
    throw Error("camera: principal point outside image");
  }
  // ||R^T R - I||_inf < 1e-5 and det +1
  const auto& e = extrinsic;
  double max_dev = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += e[k * 4 + i] * e[k * 4 + j];
      max_dev = std::max(max_dev, std::abs(dot - (i == j ? 1.0 : 0.0)));
    }
  }
  if (max_dev >= 1e-5) throw Error("camera: rotation block is not orthonormal");
  const double det =
      e[0] * (e[5] * e[10] - e[6] * e[9]) - e[1] * (e[4] * e[10] - e[6] * e[8]) +
      e[2] * (e[4] * e[9] - e[5] * e[8]);
  if (det <= 0.0) throw Error("camera: rotation must be proper (det +1)");
}

Vec3 CameraModel::world_to_camera(const Vec3& p) const {
  const auto& e = extrinsic;
  return {e[0] * p.x + e[1] * p.y + e[2] * p.z + e[3],
          e[4] * p.x + e[5] * p.y + e[6] * p.z + e[7],
          e[8] * p.x + e[9] * p.y + e[10] * p.z + e[11]};
}

Vec3 CameraModel::camera_to_world(const Vec3& p) const {
  const auto& e = extrinsic;
  const double qx = p.x - e[3], qy = p.y - e[7], qz = p.z - e[11];
  return {e[0] * qx + e[4] * qy + e[8] * qz, e[1] * qx + e[5] * qy + e[9] * qz,
          e[2] * qx + e[6] * qy + e[10] * qz};
}

Vec3 CameraModel::center() const { return camera_to_world({0.0, 0.0, 0.0}); }

CameraModel load_camera(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open camera file " + path);
  json j;
  in >> j;
  CameraModel cam;
  cam.fx = j.at("fx").get<double>();
  cam.fy = j.at("fy").get<double>();
  cam.cx = j.at("cx").get<double>();
  cam.cy = j.at("cy").get<double>();
  cam.width = j.at("width").get<std::size_t>();
  cam.height = j.at("height").get<std::size_t>();
  const auto ext = j.at("extrinsic").get<std::vector<double>>();
  if (ext.size() != 16) throw Error("camera extrinsic must have 16 entries");
  std::copy(ext.begin(), ext.end(), cam.extrinsic.begin());
  cam.validate();
  return cam;
}

void save_camera(const std::string& path, const CameraModel& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  j["extrinsic"] = std::vector<double>(cam.extrinsic.begin(), cam.extrinsic.end());
  std::ofstream out(path);
  if (!out) throw Error("cannot write camera file " + path);
  out << j.dump(2) << "\n";
}

CameraModel look_at_camera(const Vec3& position, const Vec3& target, double fx,
                           double fy, std::size_t width, std::size_t height) {
  const Vec3 forward = (target - position).normalized();
  const Vec3 world_up{0.0, 0.0, 1.0};
  const Vec3 right = forward.cross(world_up).normalized();
  const Vec3 down = forward.cross(right);  // unit, image +v direction

  CameraModel cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = static_cast<double>(width) * 0.5;
  cam.cy = static_cast<double>(height) * 0.5;
  cam.width = width;
  cam.height = height;
  // rows of R are the camera axes; t = -R * position
  const Vec3 axes[3] = {right, down, forward};
  for (int r = 0; r < 3; ++r) {
    cam.extrinsic[r * 4 + 0] = axes[r].x;
    cam.extrinsic[r * 4 + 1] = axes[r].y;
    cam.extrinsic[r * 4 + 2] = axes[r].z;
    cam.extrinsic[r * 4 + 3] = -axes[r].dot(position);
  }
  cam.extrinsic[12] = cam.extrinsic[13] = cam.extrinsic[14] = 0.0;
  cam.extrinsic[15] = 1.0;
  cam.validate();
  return cam;
}

PixelPoint project_point(const CameraModel& cam, const Vec3& point_world) {
  const Vec3 pc = cam.world_to_camera(point_world);
  if (pc.z <= 1e-6) {
    throw BehindCameraError("point at camera-frame depth " + std::to_string(pc.z));
  }
  return {cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy, pc.z};
}

std::vector<float> pixel_rays(const CameraModel& cam) {
  std::vector<float> rays(cam.height * cam.width * 3);
  const auto& e = cam.extrinsic;
  for (std::size_t i = 0; i < cam.height; ++i) {
    for (std::size_t j = 0; j < cam.width; ++j) {
      const double dx = (static_cast<double>(j) - cam.cx) / cam.fx;
      const double dy = (static_cast<double>(i) - cam.cy) / cam.fy;
      // R^T * (dx, dy, 1)
      const double wx = e[0] * dx + e[4] * dy + e[8];
      const double wy = e[1] * dx + e[5] * dy + e[9];
      const double wz = e[2] * dx + e[6] * dy + e[10];
      float* out = rays.data() + (i * cam.width + j) * 3;
      out[0] = static_cast<float>(wx);
      out[1] = static_cast<float>(wy);
      out[2] = static_cast<float>(wz);
    }
  }
  return rays;
}

std::array<float, 3> camera_center_f32(const CameraModel& cam) {
  const Vec3 c = cam.center();
  return {static_cast<float>(c.x), static_cast<float>(c.y),
          static_cast<float>(c.z)};
}

std::vector<float> unproject_depth(const CameraModel& cam,
                                   const std::vector<float>& depth,
                                   const std::vector<std::uint8_t>& valid) {
  const std::size_t n = cam.height * cam.width;
  if (depth.size() != n || valid.size() != n) {
    throw ShapeMismatchError("unproject_depth: mask/depth extents do not match camera");
  }
  std::vector<float> points(n * 3, 0.0f);
  const auto& e = cam.extrinsic;
  const Vec3 cam_center = cam.center();
  for (std::size_t i = 0; i < cam.height; ++i) {
    for (std::size_t j = 0; j < cam.width; ++j) {
      const std::size_t idx = i * cam.width + j;
      if (!valid[idx]) continue;
      const double z = depth[idx];
      const double dx = (static_cast<double>(j) - cam.cx) / cam.fx * z;
      const double dy = (static_cast<double>(i) - cam.cy) / cam.fy * z;
      const double wx = e[0] * dx + e[4] * dy + e[8] * z + cam_center.x;
      const double wy = e[1] * dx + e[5] * dy + e[9] * z + cam_center.y;
      const double wz = e[2] * dx + e[6] * dy + e[10] * z + cam_center.z;
      points[idx * 3 + 0] = static_cast<float>(wx);
      points[idx * 3 + 1] = static_cast<float>(wy);
      points[idx * 3 + 2] = static_cast<float>(wz);
    }
  }
  return points;
}

std::vector<float> ee_distance_field(const std::vector<float>& points,
                                     const std::vector<std::uint8_t>& valid,
                                     const std::vector<Vec3>& ee_positions) {
  if (points.size() != valid.size() * 3) {
    throw ShapeMismatchError("ee_distance_field: points/mask extents differ");
  }
  if (ee_positions.empty()) {
    throw ShapeMismatchError("ee_distance_field: need at least one end-effector");
  }
  const std::size_t n = valid.size();
  std::vector<float> dist(n, std::numeric_limits<float>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid[i]) continue;
    const double px = points[i * 3 + 0];
    const double py = points[i * 3 + 1];
    const double pz = points[i * 3 + 2];
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& ee : ee_positions) {
      const double dx = ee.x - px, dy = ee.y - py, dz = ee.z - pz;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    dist[i] = static_cast<float>(std::sqrt(best));
  }
  return dist;
}

std::vector<float> distance_to_weight(const std::vector<float>& dist, double sigma) {
  if (sigma <= 0.0) {
    throw InvalidSigmaError("sigma must be positive, got " + std::to_string(sigma));
  }
  const float inv2s2 = static_cast<float>(1.0 / (2.0 * sigma * sigma));
  std::vector<float> w(dist.size());
  for (std::size_t i = 0; i < dist.size(); ++i) {
    const float d = dist[i];
    const float raw = std::exp(-(d * d) * inv2s2);  // +inf -> 0
    w[i] = std::min(1.0f, std::max(raw, kWeightFloor));
  }
  return w;
}

std::vector<float> aggregate_to_tokens(const std::vector<float>& pixel_weights,
                                       std::size_t height, std::size_t width,
                                       std::size_t patch) {
  if (patch == 0) throw ShapeMismatchError("aggregate_to_tokens: patch must be >= 1");
  if (pixel_weights.size() != height * width) {
    throw ShapeMismatchError("aggregate_to_tokens: weight extents mismatch");
  }
  const std::size_t th = (height + patch - 1) / patch;
  const std::size_t tw = (width + patch - 1) / patch;
  std::vector<float> tokens(th * tw);
  for (std::size_t tr = 0; tr < th; ++tr) {
    for (std::size_t tc = 0; tc < tw; ++tc) {
      const std::size_t r0 = tr * patch, r1 = std::min(height, r0 + patch);
      const std::size_t c0 = tc * patch, c1 = std::min(width, c0 + patch);
      double acc = 0.0;
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) acc += pixel_weights[r * width + c];
      }
      tokens[tr * tw + tc] =
          static_cast<float>(acc / static_cast<double>((r1 - r0) * (c1 - c0)));
    }
  }
  return tokens;
}

TargetWeightResult compute_target_weights(const CameraModel& cam,
                                          const std::vector<float>& gt_depth,
                                          const std::vector<std::uint8_t>& valid,
                                          const std::vector<Vec3>& gt_ee,
                                          double sigma, std::size_t patch) {
  if (sigma <= 0.0) {
    throw InvalidSigmaError("sigma must be positive, got " + std::to_string(sigma));
  }
  const std::size_t h = cam.height, w = cam.width;
  if (gt_depth.size() != h * w || valid.size() != h * w) {
    throw ShapeMismatchError("compute_target_weights: depth extents mismatch");
  }
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeMismatchError("compute_target_weights: patch must divide extents");
  }
  if (gt_ee.empty()) {
    throw ShapeMismatchError("compute_target_weights: need an end-effector");
  }

  const std::vector<float> rays = pixel_rays(cam);
  const std::array<float, 3> center = camera_center_f32(cam);
  const float inv2s2 = static_cast<float>(1.0 / (2.0 * sigma * sigma));

  TargetWeightResult out;
  out.pixel_weights.assign(h * w, kWeightFloor);
  for (std::size_t idx = 0; idx < h * w; ++idx) {
    if (!valid[idx]) continue;  // invalid pixels keep the floor weight
    const float z = gt_depth[idx];
    // mirrors the tensor path: point = ray * z + center, one f32 rounding
    // per op, squared distance double-accumulated then rounded once
    float best = std::numeric_limits<float>::infinity();
    for (const Vec3& ee : gt_ee) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) {
        const float scaled = rays[idx * 3 + k] * z;
        const float coord = scaled + center[k];
        const float eek = static_cast<float>(k == 0 ? ee.x : (k == 1 ? ee.y : ee.z));
        const float diff = coord - eek;
        acc += static_cast<double>(diff) * diff;
      }
      best = std::min(best, static_cast<float>(acc));
    }
    const float raw = std::exp(-inv2s2 * best);
    out.pixel_weights[idx] = std::min(1.0f, std::max(raw, kWeightFloor));
  }

  // mean over patch columns then patch rows, matching the tensor path's
  // two-stage axis means
  const std::size_t th = h / patch, tw = w / patch;
  std::vector<float> stage1(th * patch * tw);  // (tr, r_in_patch, tc)
  for (std::size_t tr = 0; tr < th; ++tr) {
    for (std::size_t ri = 0; ri < patch; ++ri) {
      for (std::size_t tc = 0; tc < tw; ++tc) {
        double acc = 0.0;
        const std::size_t row = tr * patch + ri;
        for (std::size_t cj = 0; cj < patch; ++cj) {
          acc += out.pixel_weights[row * w + tc * patch + cj];
        }
        stage1[(tr * patch + ri) * tw + tc] =
            static_cast<float>(acc / static_cast<double>(patch));
      }
    }
  }
  out.token_weights.assign(th * tw, 0.0f);
  for (std::size_t tr = 0; tr < th; ++tr) {
    for (std::size_t tc = 0; tc < tw; ++tc) {
      double acc = 0.0;
      for (std::size_t ri = 0; ri < patch; ++ri) {
        acc += stage1[(tr * patch + ri) * tw + tc];
      }
      out.token_weights[tr * tw + tc] =
          static_cast<float>(acc / static_cast<double>(patch));
    }
  }
  return out;
}

}  // namespace starry
