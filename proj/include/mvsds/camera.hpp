#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "mvsds/core/rng.hpp"
#include "mvsds/core/tensor.hpp"

namespace mvsds::cam {

constexpr double kDegToRad = M_PI / 180.0;

// Camera model used throughout: camera-to-world extrinsic, right-handed
// world with +y up, camera looking along its local -z with +x right and
// +y up, square pixels, vertical field of view. All scene cameras target
// the world origin.
struct CameraPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // camera-to-world
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();   // camera position
  double fov_deg = 40.0;
};

struct CameraRig {
  std::vector<CameraPose> poses;
  std::vector<double> azimuth_deg;
  double elevation_deg = 0.0;
  double distance = 1.0;
  double fov_deg = 40.0;
};

inline CameraPose look_at(const Eigen::Vector3d& eye,
                          const Eigen::Vector3d& target,
                          const Eigen::Vector3d& up) {
  Eigen::Vector3d forward = target - eye;
  MVSDS_REQUIRE(forward.norm() > 1e-12, "look_at: eye coincides with target");
  forward.normalize();
  Eigen::Vector3d right = forward.cross(up);
  MVSDS_REQUIRE(right.norm() > 1e-9, "look_at: up is parallel to the view direction");
  right.normalize();
  Eigen::Vector3d cam_up = right.cross(forward);
  CameraPose pose;
  pose.rotation.col(0) = right;
  pose.rotation.col(1) = cam_up;
  pose.rotation.col(2) = -forward;
  pose.translation = eye;
  return pose;
}

// Eye position on the origin-centered sphere; azimuth 0 lies on +z and
// increases toward +x, elevation raises the camera toward +y.
inline Eigen::Vector3d spherical_eye(double azimuth_deg, double elevation_deg,
                                     double distance) {
  double az = azimuth_deg * kDegToRad;
  double el = elevation_deg * kDegToRad;
  return distance * Eigen::Vector3d(std::sin(az) * std::cos(el), std::sin(el),
                                    std::cos(az) * std::cos(el));
}

inline CameraPose pose_from_spherical(double azimuth_deg, double elevation_deg,
                                      double distance, double fov_deg) {
  CameraPose pose = look_at(spherical_eye(azimuth_deg, elevation_deg, distance),
                            Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitY());
  pose.fov_deg = fov_deg;
  return pose;
}

// Dimensionless focal on a unit image plane.
inline double ndc_focal(double fov_deg) {
  return 1.0 / std::tan(0.5 * fov_deg * kDegToRad);
}

// One shared fov/elevation/distance, azimuths spread uniformly from 0. The
// distance couples to fov so the object keeps a constant apparent size:
// 0.5 * ndc_focal(fov) * U(0.9, 1.1).
inline CameraRig sample_dataset_rig(Rng& rng, int n_azimuths = 32) {
  MVSDS_REQUIRE(n_azimuths >= 1, "sample_dataset_rig: need at least one azimuth");
  CameraRig rig;
  rig.fov_deg = rng.uniform(15.0, 60.0);
  rig.elevation_deg = rng.uniform(0.0, 30.0);
  rig.distance = 0.5 * ndc_focal(rig.fov_deg) * rng.uniform(0.9, 1.1);
  rig.poses.reserve(n_azimuths);
  for (int k = 0; k < n_azimuths; ++k) {
    double az = 360.0 * k / n_azimuths;
    rig.azimuth_deg.push_back(az);
    rig.poses.push_back(
        pose_from_spherical(az, rig.elevation_deg, rig.distance, rig.fov_deg));
  }
  return rig;
}

// Random start index, then every (size/F)-th view: for F=4 out of 32 the
// azimuth gaps are exactly 90 degrees.
inline std::vector<int> select_orthogonal_views(Rng& rng, const CameraRig& rig,
                                                int n_views = 4) {
  const int size = static_cast<int>(rig.poses.size());
  MVSDS_REQUIRE(n_views >= 1 && size % n_views == 0,
                "select_orthogonal_views: rig size ", size,
                " not divisible by ", n_views);
  int start = static_cast<int>(rng.uniform_int(0, size - 1));
  int gap = size / n_views;
  std::vector<int> out(n_views);
  for (int k = 0; k < n_views; ++k) out[k] = (start + k * gap) % size;
  return out;
}

// 4x4 camera-to-world extrinsic with the translation rescaled to unit norm,
// flattened row-major. Distance from the origin does not affect the result.
inline std::array<double, 16> normalize_extrinsic(const CameraPose& pose) {
  double norm = pose.translation.norm();
  if (norm < 1e-12)
    throw std::domain_error("normalize_extrinsic: camera at the origin");
  Eigen::Vector3d t = pose.translation / norm;
  std::array<double, 16> out{};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) out[r * 4 + c] = pose.rotation(r, c);
    out[r * 4 + 3] = t(r);
  }
  out[15] = 1.0;
  return out;
}

inline Tensor<float> camera16_tensor(const std::vector<CameraPose>& poses) {
  Tensor<float> out({static_cast<int64_t>(poses.size()), 16});
  for (size_t i = 0; i < poses.size(); ++i) {
    auto v = normalize_extrinsic(poses[i]);
    for (int j = 0; j < 16; ++j) out[static_cast<int64_t>(i) * 16 + j] =
        static_cast<float>(v[j]);
  }
  return out;
}

// Primary rays through pixel centers; origins all equal the camera position.
struct RayBatch {
  std::vector<Eigen::Vector3d> origins;
  std::vector<Eigen::Vector3d> directions;  // unit length, row-major pixels
  int width = 0, height = 0;
};

inline RayBatch camera_rays(const CameraPose& pose, int width, int height) {
  MVSDS_REQUIRE(width > 0 && height > 0, "camera_rays: empty image");
  RayBatch rays;
  rays.width = width;
  rays.height = height;
  rays.origins.reserve(static_cast<size_t>(width) * height);
  rays.directions.reserve(static_cast<size_t>(width) * height);
  const double tan_half = std::tan(0.5 * pose.fov_deg * kDegToRad);
  const double aspect = static_cast<double>(width) / height;
  for (int iy = 0; iy < height; ++iy)
    for (int ix = 0; ix < width; ++ix) {
      double ndc_x = (2.0 * (ix + 0.5) / width - 1.0) * tan_half * aspect;
      double ndc_y = (1.0 - 2.0 * (iy + 0.5) / height) * tan_half;
      Eigen::Vector3d dir_cam(ndc_x, ndc_y, -1.0);
      rays.origins.push_back(pose.translation);
      rays.directions.push_back((pose.rotation * dir_cam).normalized());
    }
  return rays;
}

// Projects a world point to continuous pixel coordinates; returns false for
// points at or behind the camera plane.
inline bool project_point(const CameraPose& pose, const Eigen::Vector3d& point,
                          int width, int height, double* px, double* py) {
  Eigen::Vector3d cam = pose.rotation.transpose() * (point - pose.translation);
  if (cam.z() >= -1e-12) return false;
  const double tan_half = std::tan(0.5 * pose.fov_deg * kDegToRad);
  const double aspect = static_cast<double>(width) / height;
  double ndc_x = (cam.x() / -cam.z()) / (tan_half * aspect);
  double ndc_y = (cam.y() / -cam.z()) / tan_half;
  *px = (ndc_x + 1.0) * 0.5 * width;
  *py = (1.0 - ndc_y) * 0.5 * height;
  return true;
}

}  // namespace mvsds::cam
