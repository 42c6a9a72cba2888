#include <catch2/catch_amalgamated.hpp>

#include "mvsds/radiance.hpp"
#include "testutil.hpp"

using namespace mvsds;
using namespace mvsds::rad;

namespace {

FieldConfig tiny_field_config() {
  FieldConfig cfg;
  cfg.levels = 4;
  cfg.table_size_log2 = 8;
  cfg.res_min = 4.0;
  cfg.res_max = 16.0;
  cfg.hidden = 8;
  return cfg;
}

// Forces a spatially constant density: zeroed tables and decode weights,
// density head bias set so softplus(bias + density_bias) = sigma.
template <typename T>
void make_constant_density(RadianceField<T>& f, double sigma) {
  for (const auto& name : f.params.names()) f.params.get(name)->value.fill(T(0));
  double bias = std::log(std::exp(sigma) - 1.0) - f.cfg.density_bias;  // softplus^-1
  f.params.get("decode.density.b")->value[0] = static_cast<T>(bias);
}

Tensor<double> grid_points(int n, Rng& rng, double extent = 0.45) {
  Tensor<double> pts({n, 3});
  for (int64_t i = 0; i < pts.numel(); ++i) pts[i] = rng.uniform(-extent, extent);
  return pts;
}

}  // namespace

TEST_CASE("hash level resolutions form an exact geometric sequence") {
  FieldConfig cfg;  // defaults: 16 -> 128 over 8 levels
  double ratio = std::pow(128.0 / 16.0, 1.0 / 7.0);
  for (int l = 0; l < cfg.levels; ++l)
    REQUIRE(cfg.level_resolution(l) ==
            Catch::Approx(16.0 * std::pow(ratio, l)).epsilon(1e-12));
  REQUIRE(cfg.level_resolution(0) == Catch::Approx(16.0));
  REQUIRE(cfg.level_resolution(7) == Catch::Approx(128.0));
}

TEST_CASE("query_field basics") {
  Rng rng(61);
  auto f = init_field<double>(tiny_field_config(), rng);

  SECTION("outside the box the density is exactly zero") {
    Tensor<double> pts({4, 3});
    double coords[4][3] = {{0.7, 0, 0}, {0, -0.51, 0}, {0, 0, 2}, {0.49, 0.49, 0.49}};
    for (int i = 0; i < 4; ++i)
      for (int k = 0; k < 3; ++k) pts[i * 3 + k] = coords[i][k];
    auto q = query_field(f, pts);
    REQUIRE(q.density->value[0] == 0.0);
    REQUIRE(q.density->value[1] == 0.0);
    REQUIRE(q.density->value[2] == 0.0);
    REQUIRE(q.density->value[3] > 0.0);  // inside
  }

  SECTION("zero decode weights give the documented constant softplus(bias)") {
    auto fz = init_field<double>(tiny_field_config(), rng);
    for (const auto& name : fz.params.names())
      fz.params.get(name)->value.fill(0.0);
    Rng pr(62);
    Tensor<double> pts = grid_points(10, pr);
    auto q = query_field(fz, pts);
    double expected = std::log1p(std::exp(fz.cfg.density_bias));
    for (int64_t i = 0; i < 10; ++i)
      REQUIRE(q.density->value[i] == Catch::Approx(expected).epsilon(1e-12));
    for (int64_t i = 0; i < q.rgb->value.numel(); ++i)
      REQUIRE(q.rgb->value[i] == Catch::Approx(0.5));
  }

  SECTION("density gradient w.r.t. hash entries matches finite differences") {
    Rng pr(63);
    Tensor<double> pts = grid_points(6, pr);
    Rng wr(64);
    Tensor<double> probe_w = Tensor<double>::randn({6}, wr);
    auto loss_fn = [&] {
      return sum_all(mul_const(query_field(f, pts).density, probe_w));
    };
    f.params.zero_grad();
    backward(loss_fn());
    Rng pick(65);
    int checked = 0;
    for (int trial = 0; trial < 200 && checked < 12; ++trial) {
      auto table = f.params.get("grid.level" + std::to_string(pick.uniform_int(0, 3)));
      int64_t idx = pick.uniform_int(0, table->value.numel() - 1);
      if (!table->grad.defined() || std::abs(table->grad[idx]) < 1e-7) continue;
      const double h = 1e-5;
      double saved = table->value[idx];
      table->value[idx] = saved + h;
      double up = loss_fn()->value[0];
      table->value[idx] = saved - h;
      double down = loss_fn()->value[0];
      table->value[idx] = saved;
      double fd = (up - down) / (2 * h);
      REQUIRE(std::abs(fd - table->grad[idx]) /
                  std::max({std::abs(fd), std::abs(table->grad[idx]), 1e-8}) <
              1e-3);
      ++checked;
    }
    REQUIRE(checked >= 8);
  }
}

TEST_CASE("render: empty field, opaque slab, determinism, energy bounds") {
  cam::CameraPose pose = cam::pose_from_spherical(30.0, 20.0, 1.4, 45.0);
  RenderSettings settings;
  settings.resolution = 8;
  settings.samples_per_ray = 32;
  settings.jitter = false;
  settings.background = BackgroundMode::fixed;
  settings.fixed_color = {0.2, 0.4, 0.6};

  SECTION("empty field: alpha 0, image equals the background") {
    Rng rng(66);
    auto f = init_field<double>(tiny_field_config(), rng);
    make_constant_density(f, 1e-12);
    Rng render_rng(67);
    auto out = render(f, pose, settings, render_rng);
    for (int64_t r = 0; r < 64; ++r) {
      REQUIRE(out.alpha->value[r] == Catch::Approx(0.0).margin(1e-9));
      REQUIRE(out.image->value[r * 3 + 0] == Catch::Approx(0.2).margin(1e-9));
      REQUIRE(out.image->value[r * 3 + 1] == Catch::Approx(0.4).margin(1e-9));
      REQUIRE(out.image->value[r * 3 + 2] == Catch::Approx(0.6).margin(1e-9));
    }
  }

  SECTION("unit-density slab: alpha = 1 - exp(-ray length) per ray") {
    Rng rng(68);
    auto f = init_field<double>(tiny_field_config(), rng);
    make_constant_density(f, 1.0);
    Rng render_rng(69);
    auto out = render(f, pose, settings, render_rng);
    cam::RayBatch rays = cam::camera_rays(pose, 8, 8);
    for (int64_t r = 0; r < 64; ++r) {
      double t0, t1;
      bool hit = rad::detail::box_intersect(rays.origins[static_cast<size_t>(r)],
                                            rays.directions[static_cast<size_t>(r)],
                                            &t0, &t1);
      double expected = hit ? 1.0 - std::exp(-(t1 - t0)) : 0.0;
      REQUIRE(out.alpha->value[r] == Catch::Approx(expected).margin(1e-9));
    }
  }

  SECTION("same seed renders identical images; alpha and rgb stay bounded") {
    Rng rng(70);
    auto f = init_field<double>(tiny_field_config(), rng);
    // random-ish content
    for (const auto& name : f.params.names()) {
      auto p = f.params.get(name);
      Rng fill(mvsds::detail::fnv1a64(name));
      for (int64_t i = 0; i < p->value.numel(); ++i)
        p->value[i] = fill.normal() * 0.3;
    }
    RenderSettings jitter_settings = settings;
    jitter_settings.jitter = true;
    jitter_settings.background = BackgroundMode::random_color;
    Rng r1(71), r2(71);
    auto a = render(f, pose, jitter_settings, r1);
    auto b = render(f, pose, jitter_settings, r2);
    for (int64_t i = 0; i < a.image->value.numel(); ++i)
      REQUIRE(std::memcmp(&a.image->value[i], &b.image->value[i], sizeof(double)) == 0);
    auto q = query_field(f, a.positions);
    for (int64_t i = 0; i < a.alpha->value.numel(); ++i) {
      REQUIRE(a.alpha->value[i] >= 0.0);
      REQUIRE(a.alpha->value[i] <= 1.0 + 1e-12);
    }
    for (int64_t i = 0; i < q.rgb->value.numel(); ++i) {
      REQUIRE(q.rgb->value[i] >= 0.0);
      REQUIRE(q.rgb->value[i] <= 1.0);
    }
  }
}

TEST_CASE("doubling samples changes a smooth field image by < 2%") {
  Rng rng(72);
  FieldConfig cfg = tiny_field_config();
  cfg.density_bias = -1.0;
  auto f = init_field<double>(cfg, rng);
  for (const auto& name : f.params.names()) {
    auto p = f.params.get(name);
    Rng fill(mvsds::detail::fnv1a64(name) + 1);
    for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = fill.normal() * 0.2;
  }
  cam::CameraPose pose = cam::pose_from_spherical(75.0, 12.0, 1.4, 45.0);
  RenderSettings s1;
  s1.resolution = 16;
  s1.samples_per_ray = 64;
  s1.jitter = false;
  s1.background = BackgroundMode::fixed;
  RenderSettings s2 = s1;
  s2.samples_per_ray = 128;
  Rng ra(73), rb(73);
  auto img1 = render(f, pose, s1, ra);
  auto img2 = render(f, pose, s2, rb);
  double mae = 0.0;
  for (int64_t i = 0; i < img1.image->value.numel(); ++i)
    mae += std::abs(img1.image->value[i] - img2.image->value[i]);
  mae /= static_cast<double>(img1.image->value.numel());
  INFO("mae " << mae);
  REQUIRE(mae < 0.02);
}

TEST_CASE("end-to-end render gradient matches finite differences") {
  Rng rng(74);
  FieldConfig cfg = tiny_field_config();
  cfg.density_bias = -1.0;
  auto f = init_field<double>(cfg, rng);
  for (const auto& name : f.params.names()) {
    auto p = f.params.get(name);
    Rng fill(mvsds::detail::fnv1a64(name) + 2);
    for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = fill.normal() * 0.2;
  }
  cam::CameraPose pose = cam::pose_from_spherical(10.0, 25.0, 1.3, 50.0);
  RenderSettings settings;
  settings.resolution = 4;
  settings.samples_per_ray = 16;
  settings.jitter = false;
  settings.background = BackgroundMode::fixed;

  auto loss_fn = [&] {
    Rng r(75);
    return mean_all(render(f, pose, settings, r).image);
  };
  f.params.zero_grad();
  backward(loss_fn());

  Rng pick(76);
  int checked = 0;
  const double h = 1e-5;
  for (int trial = 0; trial < 400 && checked < 10; ++trial) {
    const auto& names = f.params.names();
    auto p = f.params.get(
        names[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(names.size()) - 1))]);
    int64_t idx = pick.uniform_int(0, p->value.numel() - 1);
    if (!p->grad.defined() || std::abs(p->grad[idx]) < 1e-6) continue;
    double saved = p->value[idx];
    p->value[idx] = saved + h;
    double up = loss_fn()->value[0];
    p->value[idx] = saved - h;
    double down = loss_fn()->value[0];
    p->value[idx] = saved;
    double fd = (up - down) / (2 * h);
    REQUIRE(std::abs(fd - p->grad[idx]) /
                std::max({std::abs(fd), std::abs(p->grad[idx]), 1e-8}) < 1e-3);
    ++checked;
  }
  REQUIRE(checked >= 6);
}

TEST_CASE("normals from analytic densities") {
  SECTION("planar step facing +z") {
    auto planar = [](const Tensor<double>& pts) {
      Tensor<double> d({pts.dim(0)});
      for (int64_t i = 0; i < pts.dim(0); ++i) {
        double z = pts[i * 3 + 2];
        d[i] = std::log1p(std::exp(20.0 * (0.1 - z)));  // dense below z=0.1
      }
      return constant(d);
    };
    Tensor<double> pts({3, 3});
    double coords[3][3] = {{0.0, 0.0, 0.1}, {0.2, -0.1, 0.12}, {-0.3, 0.2, 0.08}};
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) pts[i * 3 + k] = coords[i][k];
    Var<double> n = normals_of<double>(planar, pts, 1e-4);
    for (int64_t i = 0; i < 3; ++i) {
      REQUIRE(n->value[i * 3 + 0] == Catch::Approx(0.0).margin(1e-2));
      REQUIRE(n->value[i * 3 + 1] == Catch::Approx(0.0).margin(1e-2));
      REQUIRE(n->value[i * 3 + 2] == Catch::Approx(1.0).margin(1e-2));
    }
  }

  SECTION("spherical bump: normals point radially outward") {
    auto bump = [](const Tensor<double>& pts) {
      Tensor<double> d({pts.dim(0)});
      for (int64_t i = 0; i < pts.dim(0); ++i) {
        double r2 = pts[i * 3] * pts[i * 3] + pts[i * 3 + 1] * pts[i * 3 + 1] +
                    pts[i * 3 + 2] * pts[i * 3 + 2];
        d[i] = 5.0 * std::exp(-r2 / 0.04);
      }
      return constant(d);
    };
    Rng rng(77);
    const int n_pts = 20;
    Tensor<double> pts({n_pts, 3});
    for (int i = 0; i < n_pts; ++i) {
      Eigen::Vector3d dir(rng.normal(), rng.normal(), rng.normal());
      dir.normalize();
      for (int k = 0; k < 3; ++k) pts[i * 3 + k] = 0.2 * dir(k);  // on the shell
    }
    Var<double> n = normals_of<double>(bump, pts, 1e-4);
    for (int i = 0; i < n_pts; ++i) {
      Eigen::Vector3d radial(pts[i * 3], pts[i * 3 + 1], pts[i * 3 + 2]);
      radial.normalize();
      double dot = n->value[i * 3] * radial(0) + n->value[i * 3 + 1] * radial(1) +
                   n->value[i * 3 + 2] * radial(2);
      REQUIRE(dot > 0.9);
    }
  }

  SECTION("constant density returns masked zero vectors") {
    auto flat = [](const Tensor<double>& pts) {
      return constant(Tensor<double>::full({pts.dim(0)}, 2.0));
    };
    Tensor<double> pts({4, 3});
    Var<double> n = normals_of<double>(flat, pts, 1e-4);
    for (int64_t i = 0; i < n->value.numel(); ++i) REQUIRE(n->value[i] == 0.0);
  }
}

TEST_CASE("orientation loss formula, hinge and detachment") {
  SECTION("all normals facing the camera give zero loss") {
    Tensor<double> dirs({5, 3});
    Tensor<double> w({5});
    Tensor<double> n_raw({5, 3});
    for (int i = 0; i < 5; ++i) {
      dirs[i * 3 + 2] = -1.0;  // rays toward -z
      n_raw[i * 3 + 2] = 1.0;  // normals toward +z: n.d = -1 < 0
      w[i] = 0.5;
    }
    Var<double> loss = orientation_loss_from_normals(
        constant(n_raw), dirs, w, 5);
    REQUIRE(loss->value[0] == 0.0);
  }

  SECTION("single sample, w = 1, n.d = 0.5 gives 0.25") {
    Tensor<double> dirs({1, 3});
    dirs[0] = std::sqrt(3.0) / 2.0;
    dirs[2] = 0.5;
    Tensor<double> n_raw({1, 3});
    n_raw[2] = 1.0;  // unit +z normal; dot with dir = 0.5
    Tensor<double> w = Tensor<double>::full({1}, 1.0);
    Var<double> loss = orientation_loss_from_normals(constant(n_raw), dirs, w, 1);
    REQUIRE(loss->value[0] == Catch::Approx(0.25).epsilon(1e-12));
  }

  SECTION("weights are constants: no gradient without the normals path") {
    Rng rng(78);
    auto f = init_field<double>(tiny_field_config(), rng);
    Rng pr(79);
    Tensor<double> pts = grid_points(6, pr);
    Tensor<double> dirs({6, 3});
    for (int i = 0; i < 6; ++i) dirs[i * 3 + 1] = 1.0;
    Tensor<double> w = Tensor<double>::full({6}, 0.3);

    // With detached normals the whole loss is constant.
    Var<double> frozen = orientation_loss_from_normals(
        detach(field_normals(f, pts)), dirs, w, 6);
    REQUIRE_FALSE(frozen->requires_grad);

    // With live normals, gradients reach field parameters through the
    // normals only; the analytic gradient matches finite differences of a
    // loss evaluated with those same frozen weights.
    auto loss_fn = [&] { return orientation_loss(f, pts, dirs, w, 6, 1e-3); };
    f.params.zero_grad();
    Var<double> live = loss_fn();
    if (live->value[0] > 0.0) {
      backward(live);
      auto p = f.params.get("decode.density.b");
      REQUIRE(p->grad.defined());
      const double h = 1e-6;
      double saved = p->value[0];
      p->value[0] = saved + h;
      double up = loss_fn()->value[0];
      p->value[0] = saved - h;
      double down = loss_fn()->value[0];
      p->value[0] = saved;
      double fd = (up - down) / (2 * h);
      REQUIRE(fd == Catch::Approx(p->grad[0]).margin(1e-4));
    }
  }
}

TEST_CASE("field checkpoints and density grid export round trip") {
  Rng rng(80);
  auto f = init_field<float>(tiny_field_config(), rng);
  auto dir = testutil::scratch_dir("field_ckpt");
  save_field(dir, f);
  auto loaded = load_field<float>(dir);
  REQUIRE(loaded.cfg.levels == f.cfg.levels);
  Rng pr(81);
  Tensor<double> pts = grid_points(5, pr);
  auto q1 = query_field(f, pts);
  auto q2 = query_field(loaded, pts);
  for (int64_t i = 0; i < 5; ++i)
    REQUIRE(q1.density->value[i] == q2.density->value[i]);

  Tensor<float> grid = density_grid(f, 8);
  REQUIRE(grid.shape() == Shape{8, 8, 8});
  for (int64_t i = 0; i < grid.numel(); ++i) REQUIRE(grid[i] >= 0.0f);
}
