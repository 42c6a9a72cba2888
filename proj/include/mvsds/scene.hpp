#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <vector>

#include "mvsds/core/rng.hpp"
#include "mvsds/core/tensor.hpp"
#include "mvsds/vocab.hpp"

namespace mvsds::scenegen {

enum class ShapeKind { sphere = 0, box, cylinder, cone, torus };

// Uniformly scaled, axis-aligned primitive. Every canonical shape is bounded
// by the unit sphere, so a primitive stays inside radius |center| + scale.
struct Primitive {
  ShapeKind shape = ShapeKind::sphere;
  int color = 0;  // palette index
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double scale = 0.25;
};

struct Scene {
  std::vector<Primitive> primitives;
  std::vector<int> caption;
};

// Signed distances for canonical shapes at unit scale.
inline double canonical_sdf(ShapeKind kind, const Eigen::Vector3d& p) {
  switch (kind) {
    case ShapeKind::sphere:
      return p.norm() - 1.0;
    case ShapeKind::box: {
      const double b = 0.55;
      Eigen::Vector3d q = p.cwiseAbs() - Eigen::Vector3d(b, b, b);
      double outside = q.cwiseMax(0.0).norm();
      double inside = std::min(q.maxCoeff(), 0.0);
      return outside + inside;
    }
    case ShapeKind::cylinder: {
      const double r = 0.55, hh = 0.80;
      double dx = std::hypot(p.x(), p.z()) - r;
      double dy = std::abs(p.y()) - hh;
      double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
      return std::min(std::max(dx, dy), 0.0) + std::hypot(ox, oy);
    }
    case ShapeKind::cone: {
      // Capped cone along y: radius r1 at y=-h, r2 at y=+h.
      const double h = 0.78, r1 = 0.60, r2 = 0.08;
      Eigen::Vector2d q(std::hypot(p.x(), p.z()), p.y());
      Eigen::Vector2d k1(r2, h);
      Eigen::Vector2d k2(r2 - r1, 2.0 * h);
      Eigen::Vector2d ca(q.x() - std::min(q.x(), q.y() < 0.0 ? r1 : r2),
                         std::abs(q.y()) - h);
      double t = std::clamp((k1 - q).dot(k2) / k2.squaredNorm(), 0.0, 1.0);
      Eigen::Vector2d cb = q - k1 + k2 * t;
      double s = (cb.x() < 0.0 && ca.y() < 0.0) ? -1.0 : 1.0;
      return s * std::sqrt(std::min(ca.squaredNorm(), cb.squaredNorm()));
    }
    case ShapeKind::torus: {
      const double R = 0.60, r = 0.25;
      double qx = std::hypot(p.x(), p.z()) - R;
      return std::hypot(qx, p.y()) - r;
    }
  }
  return 1e9;
}

inline double primitive_sdf(const Primitive& prim, const Eigen::Vector3d& p) {
  // Exact under rigid translation and uniform scale.
  return prim.scale * canonical_sdf(prim.shape, (p - prim.center) / prim.scale);
}

inline double scene_sdf(const Scene& scene, const Eigen::Vector3d& p,
                        int* nearest = nullptr) {
  double best = 1e9;
  int best_idx = -1;
  for (size_t i = 0; i < scene.primitives.size(); ++i) {
    double d = primitive_sdf(scene.primitives[i], p);
    if (d < best) {
      best = d;
      best_idx = static_cast<int>(i);
    }
  }
  if (nearest) *nearest = best_idx;
  return best;
}

inline bool scene_occupied(const Scene& scene, const Eigen::Vector3d& p) {
  return !scene.primitives.empty() && scene_sdf(scene, p) <= 0.0;
}

// Analytic occupancy on a grid of G^3 voxel centers over [-0.5, 0.5]^3.
inline Tensor<float> occupancy_grid(const Scene& scene, int grid) {
  Tensor<float> out({grid, grid, grid});
  int64_t idx = 0;
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        Eigen::Vector3d p((x + 0.5) / grid - 0.5, (y + 0.5) / grid - 0.5,
                          (z + 0.5) / grid - 0.5);
        out[idx++] = scene_occupied(scene, p) ? 1.0f : 0.0f;
      }
  return out;
}

// Caption: primitives grouped by (shape, color) in canonical order, each
// group contributing (count, color, shape) tokens.
inline std::vector<int> caption_tokens(const std::vector<Primitive>& prims) {
  std::vector<std::pair<int, int>> groups;  // (shape, color) -> implicit count
  std::vector<int> counts;
  for (const auto& prim : prims) {
    std::pair<int, int> key{static_cast<int>(prim.shape), prim.color};
    auto it = std::find(groups.begin(), groups.end(), key);
    if (it == groups.end()) {
      groups.push_back(key);
      counts.push_back(1);
    } else {
      counts[static_cast<size_t>(it - groups.begin())]++;
    }
  }
  std::vector<size_t> order(groups.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return groups[a] < groups[b];
  });
  std::vector<int> tokens;
  for (size_t i : order) {
    MVSDS_CHECK(counts[i] >= 1 && counts[i] <= 3, "caption count out of range");
    tokens.push_back(vocab::kCountBase + counts[i] - 1);
    tokens.push_back(vocab::kColorBase + groups[i].second);
    tokens.push_back(vocab::kShapeBase + groups[i].first);
  }
  MVSDS_CHECK(static_cast<int>(tokens.size()) <= vocab::kMaxCaptionLen - 1,
              "caption too long");
  return tokens;
}

// Scenes hold 1-3 primitives of one shared shape/color identity, placed on a
// count-specific layout with small jitter. Captions therefore pin the
// geometry tightly, which the distillation oracles rely on.
inline Scene sample_scene(Rng& rng) {
  Scene scene;
  int count = static_cast<int>(rng.uniform_int(1, 3));
  auto shape = static_cast<ShapeKind>(rng.uniform_int(0, vocab::kNumShapes - 1));
  int color = static_cast<int>(rng.uniform_int(0, vocab::kNumColors - 1));

  for (int attempt = 0; attempt < 8; ++attempt) {
    std::vector<Primitive> prims;
    double jitter = 0.02 / (1 + attempt);
    auto jit = [&] { return rng.uniform(-jitter, jitter); };
    if (count == 1) {
      Primitive prim{shape, color, {jit(), jit(), jit()}, rng.uniform(0.22, 0.30)};
      prims.push_back(prim);
    } else if (count == 2) {
      double d = rng.uniform(0.18, 0.22);
      double s = rng.uniform(0.13, 0.17);
      prims.push_back({shape, color, {-d + jit(), jit(), jit()}, s});
      prims.push_back({shape, color, {d + jit(), jit(), jit()}, s});
    } else {
      double d = rng.uniform(0.20, 0.24);
      double s = rng.uniform(0.11, 0.14);
      for (int k = 0; k < 3; ++k) {
        double ang = 2.0 * M_PI * k / 3.0;
        prims.push_back({shape, color,
                         {d * std::cos(ang) + jit(), jit(), d * std::sin(ang) + jit()},
                         s});
      }
    }
    bool ok = true;
    for (const auto& prim : prims)
      if (prim.center.norm() + prim.scale > 0.45) ok = false;
    for (size_t a = 0; a < prims.size() && ok; ++a)
      for (size_t b = a + 1; b < prims.size(); ++b)
        if ((prims[a].center - prims[b].center).norm() <
            0.8 * (prims[a].scale + prims[b].scale))
          ok = false;
    if (!ok) continue;
    scene.primitives = std::move(prims);
    scene.caption = caption_tokens(scene.primitives);
    return scene;
  }
  MVSDS_CHECK(false, "scene placement failed after bounded retries");
  return scene;
}

}  // namespace mvsds::scenegen
