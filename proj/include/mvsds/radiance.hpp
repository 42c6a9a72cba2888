#pragma once

#include <Eigen/Dense>

#include "mvsds/camera.hpp"
#include "mvsds/core/checkpoint.hpp"
#include "mvsds/core/nn_modules.hpp"

namespace mvsds::rad {

struct FieldConfig {
  int levels = 8;
  int table_size_log2 = 14;
  int features_per_level = 2;
  double res_min = 16.0;
  double res_max = 128.0;
  int hidden = 32;
  // Shifted-softplus density activation; the negative shift makes a fresh
  // field start near-empty.
  double density_bias = -3.0;

  int64_t table_size() const { return int64_t{1} << table_size_log2; }
  int feature_dim() const { return levels * features_per_level; }
  // Exactly geometric resolution ladder from res_min to res_max.
  double level_resolution(int level) const {
    if (levels == 1) return res_min;
    double ratio = std::pow(res_max / res_min, 1.0 / (levels - 1));
    return res_min * std::pow(ratio, level);
  }

  void validate() const {
    MVSDS_REQUIRE(levels >= 1 && table_size_log2 >= 4 && features_per_level >= 1,
                  "bad hash-grid configuration");
    MVSDS_REQUIRE(res_min >= 2.0 && res_max >= res_min, "bad resolution range");
    MVSDS_REQUIRE(hidden >= 4, "decode network too small");
  }

  Json to_json() const {
    Json j;
    j["levels"] = levels;
    j["table_size_log2"] = table_size_log2;
    j["features_per_level"] = features_per_level;
    j["res_min"] = res_min;
    j["res_max"] = res_max;
    j["hidden"] = hidden;
    j["density_bias"] = density_bias;
    return j;
  }

  static FieldConfig from_json(const Json& j) {
    FieldConfig c;
    c.levels = j.at("levels").get<int>();
    c.table_size_log2 = j.at("table_size_log2").get<int>();
    c.features_per_level = j.at("features_per_level").get<int>();
    c.res_min = j.at("res_min").get<double>();
    c.res_max = j.at("res_max").get<double>();
    c.hidden = j.at("hidden").get<int>();
    c.density_bias = j.at("density_bias").get<double>();
    return c;
  }
};

// Multi-resolution hash-grid field over the box [-0.5, 0.5]^3 with a small
// decode network producing (density >= 0, rgb in [0,1]).
template <typename T>
struct RadianceField {
  FieldConfig cfg;
  ParamTree<T> params;
  std::vector<Var<T>> tables;
  LinearLayer<T> fc1, fc2, density_head, rgb_head;
};

template <typename T>
RadianceField<T> wire_field(const FieldConfig& cfg, ParamTree<T> tree, Rng& rng) {
  cfg.validate();
  RadianceField<T> f;
  f.cfg = cfg;
  f.params = std::move(tree);
  ParamTree<T>& P = f.params;
  for (int l = 0; l < cfg.levels; ++l)
    f.tables.push_back(P.param(
        "grid.level" + std::to_string(l), {cfg.table_size(), cfg.features_per_level},
        init_uniform<T>({cfg.table_size(), cfg.features_per_level}, T(-1e-4), T(1e-4),
                        rng)));
  f.fc1 = LinearLayer<T>::create(P, "decode.fc1", cfg.feature_dim(), cfg.hidden, rng);
  f.fc2 = LinearLayer<T>::create(P, "decode.fc2", cfg.hidden, cfg.hidden, rng);
  f.density_head = LinearLayer<T>::create(P, "decode.density", cfg.hidden, 1, rng);
  f.rgb_head = LinearLayer<T>::create(P, "decode.rgb", cfg.hidden, 3, rng);
  return f;
}

template <typename T>
RadianceField<T> init_field(const FieldConfig& cfg, Rng& rng) {
  return wire_field(cfg, ParamTree<T>{}, rng);
}

template <typename T>
void save_field(const std::filesystem::path& dir, const RadianceField<T>& f,
                Json extra = Json::object()) {
  extra["field_config"] = f.cfg.to_json();
  save_param_tree(dir, f.params, extra);
}

template <typename T>
RadianceField<T> load_field(const std::filesystem::path& dir, Json* meta_out = nullptr) {
  ParamTree<T> tree;
  Json meta = load_param_tree(dir, tree);
  FieldConfig cfg = FieldConfig::from_json(meta.at("field_config"));
  Rng unused(0);
  if (meta_out) *meta_out = meta;
  return wire_field(cfg, std::move(tree), unused);
}

// ---------------------------------------------------------------------------
// Field queries
// ---------------------------------------------------------------------------

namespace detail {

// Spatial-prime XOR hash over integer lattice coordinates (collisions are
// accepted untracked).
inline uint32_t lattice_hash(uint32_t x, uint32_t y, uint32_t z, uint32_t mask) {
  return (x * 1u ^ y * 2654435761u ^ z * 805459861u) & mask;
}

template <typename T>
struct CornerSet {
  int64_t idx[8];
  T w[8];
};

template <typename T>
CornerSet<T> corners_at(const double* p, double res, uint32_t mask) {
  CornerSet<T> out;
  double fr[3];
  uint32_t c0[3];
  for (int k = 0; k < 3; ++k) {
    double u = (std::clamp(p[k], -0.5, 0.5) + 0.5) * res;
    double fl = std::floor(u);
    c0[k] = static_cast<uint32_t>(fl);
    fr[k] = u - fl;
  }
  for (int corner = 0; corner < 8; ++corner) {
    uint32_t dx = corner & 1, dy = (corner >> 1) & 1, dz = (corner >> 2) & 1;
    out.idx[corner] = lattice_hash(c0[0] + dx, c0[1] + dy, c0[2] + dz, mask);
    double wx = dx ? fr[0] : 1.0 - fr[0];
    double wy = dy ? fr[1] : 1.0 - fr[1];
    double wz = dz ? fr[2] : 1.0 - fr[2];
    out.w[corner] = static_cast<T>(wx * wy * wz);
  }
  return out;
}

}  // namespace detail

// Trilinear interpolation of hashed corner features for one level. Corner
// indices and weights are recomputed in the backward pass instead of being
// retained, which keeps graph memory proportional to features, not corners.
// The scatter-add into the table gradient is serial, so results do not
// depend on the thread count.
template <typename T>
Var<T> hash_interp(const Var<T>& table, const std::shared_ptr<Tensor<double>>& points,
                   double level_res, uint32_t table_mask) {
  const Shape& st = table->value.shape();
  MVSDS_REQUIRE(st.size() == 2, "hash_interp: table must be [entries,features]");
  const int64_t n = points->dim(0), D = st[1];
  Tensor<T> y = Tensor<T>::uninitialized({n, D});
  const T* tp = table->value.data();
  T* yp = y.data();
  const double* pp = points->data();
  parallel_for(
      n,
      [&](int64_t i) {
        auto c = detail::corners_at<T>(pp + i * 3, level_res, table_mask);
        for (int64_t d = 0; d < D; ++d) yp[i * D + d] = T(0);
        for (int corner = 0; corner < 8; ++corner) {
          const T* row = tp + c.idx[corner] * D;
          for (int64_t d = 0; d < D; ++d) yp[i * D + d] += c.w[corner] * row[d];
        }
      },
      1 << 10);
  return mvsds::detail::make_op<T>(
      std::move(y), {table}, [table, points, level_res, table_mask, n, D](Node<T>& out) {
        const T* g = out.grad.data();
        T* gt = table->grad.data();
        const double* pp = points->data();
        for (int64_t i = 0; i < n; ++i) {
          auto c = detail::corners_at<T>(pp + i * 3, level_res, table_mask);
          for (int corner = 0; corner < 8; ++corner) {
            T* dst = gt + c.idx[corner] * D;
            for (int64_t d = 0; d < D; ++d) dst[d] += c.w[corner] * g[i * D + d];
          }
        }
      });
}

template <typename T>
struct FieldQuery {
  Var<T> density;  // [N]
  Var<T> rgb;      // [N, 3]
};

// Per-level trilinear interpolation of hashed corner features, concatenated
// and decoded. Points outside the box contribute density exactly 0.
template <typename T>
FieldQuery<T> query_field(const RadianceField<T>& f, const Tensor<double>& points) {
  MVSDS_REQUIRE(points.rank() == 2 && points.dim(1) == 3,
                "query_field: points must be [N,3]");
  const int64_t n = points.dim(0);
  for (int64_t i = 0; i < points.numel(); ++i)
    MVSDS_REQUIRE(std::isfinite(points[i]), "query_field: non-finite point");

  Tensor<T> inside_mask({n});
  for (int64_t i = 0; i < n; ++i) {
    bool inside = std::abs(points[i * 3]) <= 0.5 && std::abs(points[i * 3 + 1]) <= 0.5 &&
                  std::abs(points[i * 3 + 2]) <= 0.5;
    inside_mask[i] = inside ? T(1) : T(0);
  }

  const uint32_t mask = static_cast<uint32_t>(f.cfg.table_size() - 1);
  auto shared_points = std::make_shared<Tensor<double>>(points);
  std::vector<Var<T>> level_feats;
  for (int l = 0; l < f.cfg.levels; ++l)
    level_feats.push_back(hash_interp(f.tables[static_cast<size_t>(l)], shared_points,
                                      f.cfg.level_resolution(l), mask));
  Var<T> feats = concat_cols(level_feats);  // [N, levels*features]
  Var<T> h = silu(f.fc2(silu(f.fc1(feats))));
  Var<T> raw_density = reshape(f.density_head(h), {n});
  FieldQuery<T> out;
  out.density = scale_rows_const(
      softplus_shifted(raw_density, static_cast<T>(f.cfg.density_bias)), inside_mask);
  out.rgb = sigmoid(f.rgb_head(h));
  return out;
}

// ---------------------------------------------------------------------------
// Volume rendering
// ---------------------------------------------------------------------------

enum class BackgroundMode { random_color, fixed };

struct RenderSettings {
  int samples_per_ray = 64;
  int resolution = 32;
  BackgroundMode background = BackgroundMode::random_color;
  std::array<double, 3> fixed_color = {0.5, 0.5, 0.5};
  bool jitter = true;

  void validate() const {
    MVSDS_REQUIRE(samples_per_ray >= 2, "need at least 2 samples per ray");
    MVSDS_REQUIRE(resolution >= 2, "render resolution too small");
  }
};

template <typename T>
struct RenderOutput {
  Var<T> image;         // [R,3] composited over the background
  Var<T> alpha;         // [R]
  Tensor<T> depth;      // [R], value only
  Tensor<T> background; // [3]
  // Sample data for regularizers (values only; weights are detached).
  Tensor<double> positions;  // [R*S, 3]
  Tensor<T> weights;         // [R, S]
  Tensor<double> ray_dirs;   // [R, 3]
  int resolution = 0;
  int samples = 0;
};

namespace detail {

inline bool box_intersect(const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                          double* t_near, double* t_far) {
  double lo = 0.0, hi = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d(k)) < 1e-12) {
      if (std::abs(o(k)) > 0.5) return false;
      continue;
    }
    double inv = 1.0 / d(k);
    double t0 = (-0.5 - o(k)) * inv;
    double t1 = (0.5 - o(k)) * inv;
    if (t0 > t1) std::swap(t0, t1);
    lo = std::max(lo, t0);
    hi = std::min(hi, t1);
  }
  if (hi <= lo) return false;
  *t_near = lo;
  *t_far = hi;
  return true;
}

}  // namespace detail

// Stratified ray marching with the standard emission-absorption quadrature:
// a_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - a_j),
// pixel = sum T_i a_i rgb_i + (1 - sum T_i a_i) * background.
template <typename T>
RenderOutput<T> render(const RadianceField<T>& f, const cam::CameraPose& pose,
                       const RenderSettings& settings, Rng& rng) {
  settings.validate();
  const int res = settings.resolution;
  const int S = settings.samples_per_ray;
  const int64_t R = static_cast<int64_t>(res) * res;
  cam::RayBatch rays = cam::camera_rays(pose, res, res);

  Tensor<T> bg({3});
  if (settings.background == BackgroundMode::random_color) {
    for (int k = 0; k < 3; ++k) bg[k] = static_cast<T>(rng.uniform());
  } else {
    for (int k = 0; k < 3; ++k) bg[k] = static_cast<T>(settings.fixed_color[static_cast<size_t>(k)]);
  }

  Tensor<double> positions({R * S, 3});
  Tensor<T> deltas({R, S});
  Tensor<double> sample_t({R, S});
  Tensor<double> dirs({R, 3});
  // Per-pixel derived rng streams keep jitter independent of evaluation
  // order.
  const uint64_t jitter_seed = rng.next_u64();
  parallel_for(R, [&](int64_t r) {
    const Eigen::Vector3d& o = rays.origins[static_cast<size_t>(r)];
    const Eigen::Vector3d& d = rays.directions[static_cast<size_t>(r)];
    for (int k = 0; k < 3; ++k) dirs[r * 3 + k] = d(k);
    double t0 = 1.0, t1 = 1.0;
    bool hit = detail::box_intersect(o, d, &t0, &t1);
    double span = hit ? (t1 - t0) / S : 0.0;
    Rng pixel_rng(mvsds::detail::splitmix64(jitter_seed ^ static_cast<uint64_t>(r)));
    for (int i = 0; i < S; ++i) {
      double u = settings.jitter ? pixel_rng.uniform() : 0.5;
      double t = hit ? t0 + (i + u) * span : -1.0;  // off-box: outside sample
      sample_t[r * S + i] = t;
      deltas[r * S + i] = static_cast<T>(span);
      Eigen::Vector3d p = hit ? (o + t * d) : Eigen::Vector3d(2.0, 2.0, 2.0);
      for (int k = 0; k < 3; ++k) positions[(r * S + i) * 3 + k] = p(k);
    }
  });

  FieldQuery<T> q = query_field(f, positions);
  Var<T> sigma = reshape(q.density, {R, S});
  Var<T> sigma_delta = mul_const(sigma, deltas);
  Var<T> transmittance = exp_op(neg(cumsum_exclusive_lastdim(sigma_delta)));
  Var<T> opacity =
      add_scalar(neg(exp_op(neg(sigma_delta))), T(1));  // 1 - exp(-sigma*delta)
  Var<T> weights = mul(transmittance, opacity);         // [R,S]
  Var<T> color = weighted_sum_mid(weights, reshape(q.rgb, {R, S, 3}));
  Var<T> alpha = sum_lastdim(weights);

  RenderOutput<T> out;
  out.image = composite_over_bg(color, alpha, bg);
  out.alpha = alpha;
  out.background = bg;
  out.positions = positions;
  out.weights = weights->value.clone();
  out.ray_dirs = dirs;
  out.resolution = res;
  out.samples = S;
  out.depth = Tensor<T>({R});
  for (int64_t r = 0; r < R; ++r) {
    double acc = 0.0;
    for (int i = 0; i < S; ++i)
      acc += static_cast<double>(out.weights[r * S + i]) * sample_t[r * S + i];
    out.depth[r] = static_cast<T>(acc);
  }
  return out;
}

// [R,3] ray colors to a [1,3,res,res] image tensor in the graph.
template <typename T>
Var<T> image_chw(const Var<T>& rays_rgb, int res) {
  return reshape(transpose2d(rays_rgb), {1, 3, res, res});
}

// ---------------------------------------------------------------------------
// Normals and the orientation regularizer
// ---------------------------------------------------------------------------

// -grad(density)/|grad(density)| by central differences; rows with vanishing
// gradient return the zero vector and pass no gradient. DensityFn maps a
// [M,3] position tensor to a density Var.
template <typename T, typename DensityFn>
Var<T> normals_of(const DensityFn& density_at, const Tensor<double>& points,
                  double h = 1e-3, T grad_eps = T(1e-6)) {
  const int64_t n = points.dim(0);
  auto shifted = [&](int axis, double delta) {
    Tensor<double> moved = points.clone();
    for (int64_t i = 0; i < n; ++i) moved[i * 3 + axis] += delta;
    return density_at(moved);
  };
  const T inv = static_cast<T>(1.0 / (2.0 * h));
  // normal = -grad sigma: (sigma(p-h) - sigma(p+h)) / 2h per axis
  Var<T> gx = mul_scalar(sub(shifted(0, -h), shifted(0, h)), inv);
  Var<T> gy = mul_scalar(sub(shifted(1, -h), shifted(1, h)), inv);
  Var<T> gz = mul_scalar(sub(shifted(2, -h), shifted(2, h)), inv);
  return normalize_rows(stack_cols3(gx, gy, gz), grad_eps);
}

template <typename T>
Var<T> field_normals(const RadianceField<T>& f, const Tensor<double>& points,
                     double h = 1e-3) {
  return normals_of<T>(
      [&f](const Tensor<double>& p) { return query_field(f, p).density; }, points, h);
}

// sum_i stopgrad(w_i) * max(0, n_i . d_i)^2, summed over samples and averaged
// over rays. Weights enter as constants, so gradients flow through the
// normals only.
template <typename T>
Var<T> orientation_loss_from_normals(const Var<T>& normals,
                                     const Tensor<T>& ray_dirs_per_sample,
                                     const Tensor<T>& weights_detached,
                                     int64_t n_rays) {
  MVSDS_REQUIRE(normals->value.dim(0) == ray_dirs_per_sample.dim(0) &&
                    normals->value.dim(0) == weights_detached.numel(),
                "orientation_loss: sample count mismatch");
  MVSDS_REQUIRE(n_rays >= 1, "orientation_loss: need n_rays >= 1");
  Var<T> dots = dot_rows_const(normals, ray_dirs_per_sample);
  Var<T> hinge = square(relu(dots));
  Tensor<T> w_flat = weights_detached.reshaped({weights_detached.numel()});
  Var<T> weighted = mul_const(hinge, w_flat);
  return mul_scalar(sum_all(weighted), static_cast<T>(1.0 / static_cast<double>(n_rays)));
}

template <typename T>
Var<T> orientation_loss(const RadianceField<T>& f, const Tensor<double>& positions,
                        const Tensor<T>& ray_dirs_per_sample,
                        const Tensor<T>& weights_detached, int64_t n_rays,
                        double h = 1e-3) {
  return orientation_loss_from_normals(field_normals(f, positions, h),
                                       ray_dirs_per_sample, weights_detached, n_rays);
}

// Density sampled on a G^3 voxel grid (no gradients), for occupancy export.
template <typename T>
Tensor<float> density_grid(const RadianceField<T>& f, int grid) {
  struct GradOff {
    ParamTree<T>& tree;
    std::vector<bool> saved;
    explicit GradOff(ParamTree<T>& t) : tree(t) {
      for (const auto& name : tree.names()) {
        saved.push_back(tree.get(name)->requires_grad);
        tree.get(name)->requires_grad = false;
      }
    }
    ~GradOff() {
      size_t i = 0;
      for (const auto& name : tree.names())
        tree.get(name)->requires_grad = saved[i++];
    }
  } guard(const_cast<ParamTree<T>&>(f.params));
  Tensor<double> points({static_cast<int64_t>(grid) * grid * grid, 3});
  int64_t idx = 0;
  for (int z = 0; z < grid; ++z)
    for (int y = 0; y < grid; ++y)
      for (int x = 0; x < grid; ++x) {
        points[idx * 3 + 0] = (x + 0.5) / grid - 0.5;
        points[idx * 3 + 1] = (y + 0.5) / grid - 0.5;
        points[idx * 3 + 2] = (z + 0.5) / grid - 0.5;
        ++idx;
      }
  FieldQuery<T> q = query_field(f, points);
  Tensor<float> out({grid, grid, grid});
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = static_cast<float>(q.density->value[i]);
  return out;
}

}  // namespace mvsds::rad
