#pragma once

#include "mvsds/camera.hpp"
#include "mvsds/core/parallel.hpp"
#include "mvsds/core/png_io.hpp"
#include "mvsds/scene.hpp"

namespace mvsds::scenegen {

// Sphere-traced rendering of a primitive scene: diffuse shading under one
// fixed directional light plus an ambient term, alpha = hit mask, background
// pixels fully transparent. Deterministic for a given scene and pose.
inline ImageRGBA render_view(const Scene& scene, const cam::CameraPose& pose,
                             int res) {
  MVSDS_REQUIRE(res == 32 || res == 64, "render_view: resolution must be 32 or 64");
  ImageRGBA img(res, res);
  if (scene.primitives.empty()) return img;

  const Eigen::Vector3d light = Eigen::Vector3d(0.5, 0.8, 0.3).normalized();
  const double bound_radius = 0.5;
  const double eps = 1e-3;
  const int max_steps = 64;
  cam::RayBatch rays = cam::camera_rays(pose, res, res);

  parallel_for(static_cast<int64_t>(res) * res, [&](int64_t pix) {
    const Eigen::Vector3d& o = rays.origins[pix];
    const Eigen::Vector3d& d = rays.directions[pix];

    // Enter at the scene bounding sphere; rays that miss it are background.
    double b = o.dot(d);
    double c = o.squaredNorm() - bound_radius * bound_radius;
    double disc = b * b - c;
    if (disc < 0.0) return;
    double t = std::max(0.0, -b - std::sqrt(disc));
    double t_far = -b + std::sqrt(disc);

    bool hit = false;
    Eigen::Vector3d p;
    for (int step = 0; step < max_steps && t <= t_far; ++step) {
      p = o + t * d;
      double dist = scene_sdf(scene, p);
      if (dist < eps) {
        hit = true;
        break;
      }
      t += dist;
    }
    if (!hit) return;

    int nearest = 0;
    scene_sdf(scene, p, &nearest);
    const double h = 5e-4;
    Eigen::Vector3d n(
        scene_sdf(scene, p + Eigen::Vector3d(h, 0, 0)) -
            scene_sdf(scene, p - Eigen::Vector3d(h, 0, 0)),
        scene_sdf(scene, p + Eigen::Vector3d(0, h, 0)) -
            scene_sdf(scene, p - Eigen::Vector3d(0, h, 0)),
        scene_sdf(scene, p + Eigen::Vector3d(0, 0, h)) -
            scene_sdf(scene, p - Eigen::Vector3d(0, 0, h)));
    if (n.norm() > 1e-12) n.normalize();

    auto base = vocab::color_rgb(scene.primitives[static_cast<size_t>(nearest)].color);
    double shade = 0.35 + 0.65 * std::max(0.0, n.dot(light));
    uint8_t* px = img.pixels.data() + pix * 4;
    for (int k = 0; k < 3; ++k) {
      double v = std::clamp(static_cast<double>(base[static_cast<size_t>(k)]) * shade, 0.0, 1.0);
      px[k] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    px[3] = 255;
  });
  return img;
}

}  // namespace mvsds::scenegen
