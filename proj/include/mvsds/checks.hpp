#pragma once

#include "mvsds/config.hpp"

namespace mvsds::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct CheckReport {
  std::vector<CheckResult> results;
  double a2_max_deviation = 0.0;

  bool all_pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return true;
  }

  Json to_json() const {
    Json j;
    Json list = Json::array();
    for (const auto& r : results) {
      Json e;
      e["name"] = r.name;
      e["pass"] = r.pass;
      e["detail"] = r.detail;
      list.push_back(e);
    }
    j["checks"] = list;
    j["a2_max_deviation"] = a2_max_deviation;
    j["pass"] = all_pass();
    return j;
  }
};

// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
inline double ks_two_sample_p(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j])
      ++i;
    else
      ++j;
    double fa = static_cast<double>(i) / a.size();
    double fb = static_cast<double>(j) / b.size();
    d = std::max(d, std::abs(fa - fb));
  }
  double n_eff = static_cast<double>(a.size()) * b.size() / (a.size() + b.size());
  double lambda = (std::sqrt(n_eff) + 0.12 + 0.11 / std::sqrt(n_eff)) * d;
  double p = 0.0;
  for (int k = 1; k <= 100; ++k)
    p += 2.0 * (k % 2 == 1 ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(p, 0.0, 1.0);
}

namespace detail {

template <typename Fn>
void run_check(CheckReport& report, const std::string& name, const Fn& fn) {
  CheckResult r;
  r.name = name;
  try {
    r.detail = fn();
    r.pass = true;
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = e.what();
  }
  report.results.push_back(r);
}

#define MVSDS_CHECK_THAT(cond, ...)                                       \
  do {                                                                    \
    if (!(cond))                                                          \
      throw std::runtime_error(                                          \
          ::mvsds::detail::format_msg("violated: ", #cond, " (", __VA_ARGS__, ")")); \
  } while (0)

inline net::DenoiserConfig fixture_net_config() {
  net::DenoiserConfig cfg;
  cfg.image_res = 16;
  cfg.base_channels = 16;
  cfg.channel_mults = {1, 2};
  cfg.attention_res = {8, 4};
  cfg.text_dim = 32;
  cfg.time_dim = 32;
  cfg.zero_init = false;
  return cfg;
}

inline rad::FieldConfig fixture_field_config() {
  rad::FieldConfig cfg;
  cfg.levels = 4;
  cfg.table_size_log2 = 8;
  cfg.res_min = 4.0;
  cfg.res_max = 16.0;
  cfg.hidden = 8;
  cfg.density_bias = -1.0;
  return cfg;
}

inline Tensor<float> fixture_cameras(int n_views) {
  std::vector<cam::CameraPose> poses;
  for (int k = 0; k < n_views; ++k)
    poses.push_back(
        cam::pose_from_spherical(360.0 * k / n_views, 12.0, 1.4, 40.0));
  return cam::camera16_tensor(poses);
}

}  // namespace detail

// The full invariant suite over tiny internally built fixtures. Math
// identities run in double precision; structural checks run in the
// production float path.
inline CheckReport run_all_checks() {
  CheckReport report;
  using detail::run_check;

  // --- schedule ---------------------------------------------------------
  run_check(report, "sched.normalization", [] {
    for (auto family : {sched::ScheduleFamily::linear_beta, sched::ScheduleFamily::cosine}) {
      auto s = sched::build_schedule(1000, family);
      for (int t = 0; t < s.num_steps; ++t) {
        double r = s.alpha_at(t) * s.alpha_at(t) + s.sigma_at(t) * s.sigma_at(t);
        MVSDS_CHECK_THAT(std::abs(r - 1.0) < 1e-6, "t=", t, " family=",
                         sched::to_string(family));
        if (t > 0)
          MVSDS_CHECK_THAT(s.alpha_at(t) < s.alpha_at(t - 1) &&
                               s.sigma_at(t) > s.sigma_at(t - 1),
                           "monotonicity at t=", t);
      }
    }
    return "alpha^2+sigma^2=1 within 1e-6, strict monotonicity, both families";
  });

  run_check(report, "sched.roundtrip", [] {
    auto s = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
    Rng rng(1);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      Tensor<double> x = Tensor<double>::rand_uniform({4, 4}, rng, -1.0, 1.0);
      Tensor<double> eps = Tensor<double>::randn({4, 4}, rng);
      int t = static_cast<int>(rng.uniform_int(0, 999));
      Tensor<double> back = sched::estimate_x0(sched::add_noise(x, eps, t, s), eps, t, s);
      for (int64_t i = 0; i < x.numel(); ++i)
        worst = std::max(worst, std::abs(back[i] - x[i]));
    }
    MVSDS_CHECK_THAT(worst < 1e-5, "max roundtrip error ", worst);
    return "max |estimate_x0(add_noise(x)) - x| = " + std::to_string(worst);
  });

  run_check(report, "sched.ddim_determinism", [] {
    auto s = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
    Rng rng(2);
    Tensor<double> x = Tensor<double>::randn({3, 3}, rng);
    Tensor<double> e = Tensor<double>::randn({3, 3}, rng);
    Tensor<double> a = sched::ddim_step(x, e, 700, 100, s);
    Tensor<double> b = sched::ddim_step(x, e, 700, 100, s);
    for (int64_t i = 0; i < a.numel(); ++i)
      MVSDS_CHECK_THAT(std::memcmp(&a[i], &b[i], sizeof(double)) == 0, "i=", i);
    return "bit-identical repeated evaluation";
  });

  run_check(report, "sched.anneal_window", [] {
    sched::AnnealWindow win;
    win.anneal_steps = 8000;
    auto [lo0, hi0] = sched::anneal_bounds(0, win, 1000);
    MVSDS_CHECK_THAT(lo0 == 980 && hi0 == 980, "start ", lo0, ",", hi0);
    auto [lo1, hi1] = sched::anneal_bounds(8000, win, 1000);
    MVSDS_CHECK_THAT(lo1 == 20 && hi1 == 500, "end ", lo1, ",", hi1);
    int pl = 1000, ph = 1000;
    for (int step = 0; step <= 9000; step += 25) {
      auto [lo, hi] = sched::anneal_bounds(step, win, 1000);
      MVSDS_CHECK_THAT(lo <= hi && lo <= pl && hi <= ph, "step ", step);
      if (step > 0) MVSDS_CHECK_THAT(lo < hi, "strict below start, step ", step);
      pl = lo;
      ph = hi;
    }
    return "bounds (980,980) -> (20,500), monotone non-increasing";
  });

  // --- camera -----------------------------------------------------------
  run_check(report, "camera.distance_invariance", [] {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      double az = rng.uniform(0, 360), el = rng.uniform(-20, 70), fov = rng.uniform(15, 60);
      auto a = cam::normalize_extrinsic(cam::pose_from_spherical(az, el, 1.7, fov));
      auto b = cam::normalize_extrinsic(cam::pose_from_spherical(az, el, 4.1, fov));
      for (int j = 0; j < 16; ++j)
        MVSDS_CHECK_THAT(std::abs(a[j] - b[j]) < 1e-6, "element ", j);
    }
    return "identical 16-vectors at distances 1.7 and 4.1";
  });

  run_check(report, "camera.orthogonal_uniformity", [] {
    Rng rng(4);
    cam::CameraRig rig = cam::sample_dataset_rig(rng, 32);
    std::map<int, int> counts;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      auto v = cam::select_orthogonal_views(rng, rig, 4);
      for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
          double diff = std::fmod(
              std::abs(rig.azimuth_deg[v[a]] - rig.azimuth_deg[v[b]]), 360.0);
          double rem = std::fmod(diff, 90.0);
          MVSDS_CHECK_THAT(std::min(rem, 90.0 - rem) < 1e-9, "gap ", diff);
        }
      counts[*std::min_element(v.begin(), v.end())]++;
    }
    double chi2 = 0.0;
    for (const auto& [k, n] : counts) chi2 += (n - 1250.0) * (n - 1250.0) / 1250.0;
    MVSDS_CHECK_THAT(counts.size() == 8 && chi2 < 18.475, "chi2 ", chi2);
    return "gaps in {90,180,270} deg; chi-square " + std::to_string(chi2) +
           " < 18.475 (p > 0.01)";
  });

  run_check(report, "camera.rig_bounds", [] {
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) {
      cam::CameraRig r = cam::sample_dataset_rig(rng, 4);
      MVSDS_CHECK_THAT(r.fov_deg >= 15 && r.fov_deg <= 60, "fov ", r.fov_deg);
      MVSDS_CHECK_THAT(r.elevation_deg >= 0 && r.elevation_deg <= 30, "elev ",
                       r.elevation_deg);
      double ratio = r.distance / (0.5 * cam::ndc_focal(r.fov_deg));
      MVSDS_CHECK_THAT(ratio >= 0.9 && ratio <= 1.1, "distance ratio ", ratio);
    }
    return "fov in [15,60], elevation in [0,30], distance scale in [0.9,1.1]";
  });

  // --- scenegen ---------------------------------------------------------
  run_check(report, "scenegen.dataset_roundtrip", [] {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mvsds_check_ds";
    fs::remove_all(dir);
    Rng rng(6);
    scenegen::build_dataset(rng, 2, dir, 2, 32, 32);
    Rng rng2(6);
    fs::path dir2 = fs::temp_directory_path() / "mvsds_check_ds2";
    fs::remove_all(dir2);
    scenegen::build_dataset(rng2, 2, dir2, 2, 32, 32);
    MVSDS_CHECK_THAT(read_text_file(dir / "manifest.json") ==
                         read_text_file(dir2 / "manifest.json"),
                     "manifest differs");
    auto ds = scenegen::Dataset::open(dir);
    MVSDS_CHECK_THAT(ds.multiview_records().size() == 4 &&
                         ds.single_records().size() == 2,
                     "record counts");
    Rng scene_rng = Rng(6).child(uint64_t{0});
    auto scene = scenegen::sample_scene(scene_rng);
    Rng pass_rng = scene_rng.child("pass_0");
    auto rig = cam::sample_dataset_rig(pass_rng, 32);
    auto img = scenegen::render_view(scene, rig.poses[7], 32);
    MVSDS_CHECK_THAT(ds.multiview_records()[0].views[7].image.pixels == img.pixels,
                     "pixels differ after reload");
    fs::remove_all(dir);
    fs::remove_all(dir2);
    return "byte-identical manifests, bit-exact pixel reload";
  });

  run_check(report, "scenegen.batch_contracts", [] {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mvsds_check_batch";
    fs::remove_all(dir);
    Rng rng(7);
    scenegen::build_dataset(rng, 2, dir, 1, 32, 32);
    auto ds = scenegen::Dataset::open(dir);
    Rng br(8);
    for (int i = 0; i < 30; ++i) {
      auto mv = ds.load_batch(br, scenegen::BatchMode::multiview, 4);
      MVSDS_CHECK_THAT(mv.cameras.has_value(), "cameras missing");
      MVSDS_CHECK_THAT(std::count(mv.tokens.begin(), mv.tokens.end(),
                                  vocab::kStyle3dId) == 1,
                       "style token missing");
      // Azimuths recovered from the unit camera positions sit 90 deg apart.
      for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
          const Tensor<float>& cams = *mv.cameras;
          double az_a = std::atan2(cams[a * 16 + 3], cams[a * 16 + 11]);
          double az_b = std::atan2(cams[b * 16 + 3], cams[b * 16 + 11]);
          double diff = std::fmod(std::abs(az_a - az_b) * 180.0 / M_PI, 360.0);
          double rem = std::fmod(diff, 90.0);
          MVSDS_CHECK_THAT(std::min(rem, 90.0 - rem) < 1e-4, "azimuth gap ", diff);
        }
      auto sg = ds.load_batch(br, scenegen::BatchMode::single, 4);
      MVSDS_CHECK_THAT(!sg.cameras.has_value(), "single batch has cameras");
      MVSDS_CHECK_THAT(std::count(sg.tokens.begin(), sg.tokens.end(),
                                  vocab::kStyle3dId) == 0,
                       "style token in single caption");
    }
    fs::remove_all(dir);
    return "90-degree view gaps; style token in every multiview caption and no "
           "single caption";
  });

  run_check(report, "scenegen.visual_hull", [] {
    Rng scene_rng(77);
    auto scene = scenegen::sample_scene(scene_rng);
    Rng rig_rng(78);
    auto rig = cam::sample_dataset_rig(rig_rng, 32);
    std::vector<ImageRGBA> imgs;
    for (const auto& pose : rig.poses)
      imgs.push_back(scenegen::render_view(scene, pose, 64));
    const int G = 20;
    Tensor<float> truth = scenegen::occupancy_grid(scene, G);
    int64_t inter = 0, uni = 0;
    for (int z = 0; z < G; ++z)
      for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
          Eigen::Vector3d p((x + 0.5) / G - 0.5, (y + 0.5) / G - 0.5,
                            (z + 0.5) / G - 0.5);
          bool in_hull = true;
          for (size_t v = 0; v < rig.poses.size() && in_hull; ++v) {
            double px, py;
            if (!cam::project_point(rig.poses[v], p, 64, 64, &px, &py) ||
                px < 0 || px >= 64 || py < 0 || py >= 64 ||
                imgs[v].at(static_cast<int>(px), static_cast<int>(py))[3] == 0)
              in_hull = false;
          }
          bool occ = truth[(z * G + y) * G + x] > 0.5f;
          inter += (in_hull && occ) ? 1 : 0;
          uni += (in_hull || occ) ? 1 : 0;
        }
    double iou = uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
    MVSDS_CHECK_THAT(iou >= 0.5, "IoU ", iou);
    return "silhouette visual hull vs analytic occupancy: IoU " + std::to_string(iou);
  });

  // --- denoiser ---------------------------------------------------------
  run_check(report, "mvnet.f1_reduction", [] {
    Rng rng(9);
    auto d = net::init_denoiser<float>(detail::fixture_net_config(), rng);
    Rng r(10);
    Tensor<float> x = Tensor<float>::randn({2, 3, 16, 16}, r);
    net::ForwardInput<float> in;
    in.x_t = constant(x);
    in.tokens = {vocab::pad_tokens({vocab::kCountBase}),
                 vocab::pad_tokens({vocab::kCountBase + 1})};
    in.cameras = constant(detail::fixture_cameras(2));
    in.views = 1;
    auto d3 = d;
    d3.cfg.attention_mode = net::AttentionMode::inflated_3d;
    auto d2 = d;
    d2.cfg.attention_mode = net::AttentionMode::per_view_2d;
    Tensor<float> y3 = net::forward(d3, in)->value;
    Tensor<float> y2 = net::forward(d2, in)->value;
    for (int64_t i = 0; i < y3.numel(); ++i)
      MVSDS_CHECK_THAT(std::memcmp(&y3[i], &y2[i], sizeof(float)) == 0, "i=", i);
    return "inflated and per-view paths agree bit-exactly at F=1";
  });

  run_check(report, "mvnet.cross_view_flow", [] {
    Rng rng(11);
    auto d = net::init_denoiser<float>(detail::fixture_net_config(), rng);
    Rng r(12);
    Tensor<float> x = Tensor<float>::randn({4, 3, 16, 16}, r);
    Tensor<float> xp = x.clone();
    xp[1 * 3 * 256 + 17] += 0.3f;
    auto run = [&](net::AttentionMode mode, const Tensor<float>& images) {
      auto dd = d;
      dd.cfg.attention_mode = mode;
      net::ForwardInput<float> in;
      in.x_t = constant(images);
      in.tokens = {vocab::pad_tokens({vocab::kCountBase})};
      in.cameras = constant(detail::fixture_cameras(4));
      in.views = 4;
      in.t = 31;
      return net::forward(dd, in)->value;
    };
    auto a3 = run(net::AttentionMode::inflated_3d, x);
    auto b3 = run(net::AttentionMode::inflated_3d, xp);
    double flow = 0.0;
    for (int64_t i = 0; i < 3 * 256; ++i)
      flow = std::max(flow, std::abs(double(a3[i]) - double(b3[i])));
    MVSDS_CHECK_THAT(flow >= 1e-6, "inflated cross-view response ", flow);
    auto a2 = run(net::AttentionMode::per_view_2d, x);
    auto b2 = run(net::AttentionMode::per_view_2d, xp);
    for (int64_t i = 0; i < 3 * 256; ++i)
      MVSDS_CHECK_THAT(a2[i] == b2[i], "per-view leak at ", i);
    return "inflated response " + std::to_string(flow) + "; per-view exactly zero";
  });

  run_check(report, "mvnet.permutation_equivariance", [] {
    Rng rng(13);
    auto d = net::init_denoiser<float>(detail::fixture_net_config(), rng);
    Rng r(14);
    Tensor<float> x = Tensor<float>::randn({4, 3, 16, 16}, r);
    Tensor<float> cams = detail::fixture_cameras(4);
    std::vector<int> perm = {3, 1, 0, 2};
    Tensor<float> xp({4, 3, 16, 16});
    Tensor<float> cp({4, 16});
    for (int v = 0; v < 4; ++v) {
      std::copy(x.data() + perm[v] * 768, x.data() + (perm[v] + 1) * 768,
                xp.data() + v * 768);
      std::copy(cams.data() + perm[v] * 16, cams.data() + (perm[v] + 1) * 16,
                cp.data() + v * 16);
    }
    auto run = [&](const Tensor<float>& img, const Tensor<float>& cam16) {
      net::ForwardInput<float> in;
      in.x_t = constant(img);
      in.tokens = {vocab::pad_tokens({vocab::kCountBase})};
      in.cameras = constant(cam16);
      in.views = 4;
      in.t = 77;
      return net::forward(d, in)->value;
    };
    auto y = run(x, cams);
    auto yp = run(xp, cp);
    double worst = 0.0;
    for (int v = 0; v < 4; ++v)
      for (int64_t i = 0; i < 768; ++i)
        worst = std::max(worst,
                         std::abs(double(yp[v * 768 + i]) - double(y[perm[v] * 768 + i])));
    MVSDS_CHECK_THAT(worst < 1e-5, "max deviation ", worst);
    return "permutation deviation " + std::to_string(worst) + " < 1e-5";
  });

  run_check(report, "mvnet.gradient_check", [] {
    Rng rng(15);
    auto d = net::init_denoiser<double>(detail::fixture_net_config(), rng);
    Rng r(16);
    Tensor<double> x = Tensor<double>::randn({2, 3, 16, 16}, r);
    Tensor<double> target = Tensor<double>::randn({2, 3, 16, 16}, r);
    Tensor<double> cams = detail::fixture_cameras(2).cast<double>();
    auto loss_fn = [&] {
      net::ForwardInput<double> in;
      in.x_t = constant(x);
      in.tokens = {vocab::pad_tokens({vocab::kCountBase})};
      in.cameras = constant(cams);
      in.views = 2;
      in.t = 40;
      return mse(net::forward(d, in), constant(target));
    };
    d.params.zero_grad();
    backward(loss_fn());
    Rng pick(17);
    const auto& names = d.params.names();
    double analytic = 0.0;
    struct Slot { std::string name; int64_t idx; double sign; };
    std::vector<Slot> slots;
    for (int k = 0; k < 32; ++k) {
      const auto& name = names[pick.uniform_int(0, static_cast<int64_t>(names.size()) - 1)];
      auto p = d.params.get(name);
      slots.push_back({name, pick.uniform_int(0, p->value.numel() - 1),
                       pick.uniform() < 0.5 ? -1.0 : 1.0});
    }
    for (const auto& s : slots) analytic += s.sign * d.params.get(s.name)->grad[s.idx];
    const double h = 1e-5;
    for (const auto& s : slots) d.params.get(s.name)->value[s.idx] += s.sign * h;
    double up = loss_fn()->value[0];
    for (const auto& s : slots) d.params.get(s.name)->value[s.idx] -= 2 * s.sign * h;
    double down = loss_fn()->value[0];
    for (const auto& s : slots) d.params.get(s.name)->value[s.idx] += s.sign * h;
    double fd = (up - down) / (2 * h);
    double rel = std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
    MVSDS_CHECK_THAT(rel < 1e-3, "relative error ", rel);
    return "directional FD over 32 parameters, relative error " + std::to_string(rel);
  });

  run_check(report, "mvnet.guided_identity", [] {
    Rng rng(18);
    auto d = net::init_denoiser<float>(detail::fixture_net_config(), rng);
    auto s = sched::build_schedule(100, sched::ScheduleFamily::linear_beta);
    Rng r(19);
    Tensor<float> x_t = Tensor<float>::randn({4, 3, 16, 16}, r);
    auto pos = vocab::pad_tokens({vocab::kCountBase});
    auto g = net::guided_eps(d, x_t, pos, pos,
                             std::optional<Tensor<float>>(detail::fixture_cameras(4)),
                             50, 30.0, 0.5, s);
    Tensor<float> ref = net::predict_eps(
        d, x_t, {pos}, std::optional<Tensor<float>>(detail::fixture_cameras(4)), 50,
        scenegen::BatchMode::multiview, 4);
    for (int64_t i = 0; i < ref.numel(); ++i)
      MVSDS_CHECK_THAT(g.eps_guided[i] == ref[i], "i=", i);
    return "neg == pos collapses to the positive prediction at scale 30";
  });

  // --- trainer ----------------------------------------------------------
  run_check(report, "trainer.mode_mixing", [] {
    Rng rng(20);
    int mv = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) mv += train::draw_multiview(rng, 0.7) ? 1 : 0;
    double frac = mv / static_cast<double>(n);
    MVSDS_CHECK_THAT(std::abs(frac - 0.7) <= 0.02, "fraction ", frac);
    return "multiview fraction " + std::to_string(frac) + " within 0.7 +/- 0.02";
  });

  run_check(report, "trainer.finite_params", [] {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mvsds_check_train";
    fs::remove_all(dir);
    Rng rng(66);
    scenegen::build_dataset(rng, 2, dir, 1, 32, 32);
    auto ds = scenegen::Dataset::open(dir);
    net::DenoiserConfig cfg = detail::fixture_net_config();
    cfg.image_res = 32;
    cfg.base_channels = 8;
    cfg.channel_mults = {1, 2, 4};
    Rng ir(67);
    auto d = net::init_denoiser<float>(cfg, ir);
    auto schedule = sched::build_schedule(100, sched::ScheduleFamily::linear_beta);
    train::TrainConfig tcfg;
    tcfg.seed = 68;
    tcfg.lr = 1e-3;
    train::Trainer<float> trainer(d, tcfg);
    // Trainer::step aborts on any non-finite parameter; surviving the loop
    // is the check.
    for (int step = 0; step < 6; ++step) trainer.step(ds, schedule, step);
    MVSDS_CHECK_THAT(d.params.all_finite(), "post-loop scan");
    fs::remove_all(dir);
    return "6 optimizer updates, every parameter finite after each step";
  });

  run_check(report, "trainer.eq3_decomposition", [] {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "mvsds_check_db";
    fs::remove_all(dir);
    Rng rng(21);
    scenegen::build_dataset(rng, 1, dir, 1, 32, 32);
    auto ds = scenegen::Dataset::open(dir);
    auto set = train::build_identity_set(ds, 4);
    net::DenoiserConfig cfg = detail::fixture_net_config();
    cfg.image_res = 32;
    cfg.base_channels = 8;
    cfg.channel_mults = {1, 2, 4};
    Rng ir(22);
    auto d = net::init_denoiser<float>(cfg, ir);
    auto schedule = sched::build_schedule(100, sched::ScheduleFamily::linear_beta);
    train::DreamBoothConfig db;
    db.steps = 4;
    db.lambda = 1.0;
    db.lr = 1e-4;
    auto hist = train::dreambooth_finetune(d, set, db, schedule);
    for (const auto& m : hist)
      MVSDS_CHECK_THAT(std::abs(m.loss - (m.loss_image + db.lambda * m.loss_preserve)) <
                           1e-6,
                       "step ", m.step);
    fs::remove_all(dir);
    return "total = image + lambda * preservation within 1e-6 each step";
  });

  // --- radiance ---------------------------------------------------------
  run_check(report, "radiance.energy_bounds", [] {
    Rng rng(23);
    auto f = rad::init_field<float>(detail::fixture_field_config(), rng);
    for (const auto& name : f.params.names()) {
      auto p = f.params.get(name);
      Rng fill(mvsds::detail::fnv1a64(name));
      for (int64_t i = 0; i < p->value.numel(); ++i)
        p->value[i] = static_cast<float>(fill.normal() * 0.3);
    }
    rad::RenderSettings settings;
    settings.resolution = 12;
    settings.samples_per_ray = 24;
    Rng rr(24);
    auto out = rad::render(f, cam::pose_from_spherical(40, 15, 1.4, 45), settings, rr);
    for (int64_t i = 0; i < out.alpha->value.numel(); ++i)
      MVSDS_CHECK_THAT(out.alpha->value[i] >= 0.0f &&
                           out.alpha->value[i] <= 1.0f + 1e-6f,
                       "alpha ", out.alpha->value[i]);
    auto q = rad::query_field(f, out.positions);
    for (int64_t i = 0; i < q.rgb->value.numel(); ++i)
      MVSDS_CHECK_THAT(q.rgb->value[i] >= 0.0f && q.rgb->value[i] <= 1.0f, "rgb");
    return "alpha in [0,1], pre-compositing rgb in [0,1]";
  });

  run_check(report, "radiance.resolution_consistency", [] {
    Rng rng(25);
    auto f = rad::init_field<double>(detail::fixture_field_config(), rng);
    for (const auto& name : f.params.names()) {
      auto p = f.params.get(name);
      Rng fill(mvsds::detail::fnv1a64(name) + 7);
      for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = fill.normal() * 0.2;
    }
    rad::RenderSettings s1;
    s1.resolution = 12;
    s1.samples_per_ray = 64;
    s1.jitter = false;
    s1.background = rad::BackgroundMode::fixed;
    rad::RenderSettings s2 = s1;
    s2.samples_per_ray = 128;
    Rng ra(26), rb(26);
    auto a = rad::render(f, cam::pose_from_spherical(10, 20, 1.4, 45), s1, ra);
    auto b = rad::render(f, cam::pose_from_spherical(10, 20, 1.4, 45), s2, rb);
    double mae = 0.0;
    for (int64_t i = 0; i < a.image->value.numel(); ++i)
      mae += std::abs(a.image->value[i] - b.image->value[i]);
    mae /= a.image->value.numel();
    MVSDS_CHECK_THAT(mae < 0.02, "mae ", mae);
    return "sample doubling changes the image by " + std::to_string(mae) + " < 0.02";
  });

  run_check(report, "radiance.render_gradient", [] {
    Rng rng(27);
    auto f = rad::init_field<double>(detail::fixture_field_config(), rng);
    for (const auto& name : f.params.names()) {
      auto p = f.params.get(name);
      Rng fill(mvsds::detail::fnv1a64(name) + 9);
      for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = fill.normal() * 0.2;
    }
    rad::RenderSettings settings;
    settings.resolution = 4;
    settings.samples_per_ray = 12;
    settings.jitter = false;
    settings.background = rad::BackgroundMode::fixed;
    auto loss_fn = [&] {
      Rng r(28);
      return mean_all(rad::render(f, cam::pose_from_spherical(33, 18, 1.35, 48),
                                  settings, r)
                          .image);
    };
    f.params.zero_grad();
    backward(loss_fn());
    Rng pick(29);
    int checked = 0;
    for (int trial = 0; trial < 300 && checked < 8; ++trial) {
      const auto& names = f.params.names();
      auto p = f.params.get(names[pick.uniform_int(0, static_cast<int64_t>(names.size()) - 1)]);
      int64_t idx = pick.uniform_int(0, p->value.numel() - 1);
      if (!p->grad.defined() || std::abs(p->grad[idx]) < 1e-6) continue;
      const double h = 1e-5;
      double saved = p->value[idx];
      p->value[idx] = saved + h;
      double up = loss_fn()->value[0];
      p->value[idx] = saved - h;
      double down = loss_fn()->value[0];
      p->value[idx] = saved;
      double fd = (up - down) / (2 * h);
      double rel = std::abs(fd - p->grad[idx]) /
                   std::max({std::abs(fd), std::abs(p->grad[idx]), 1e-8});
      MVSDS_CHECK_THAT(rel < 1e-3, "rel ", rel);
      ++checked;
    }
    MVSDS_CHECK_THAT(checked >= 6, "only ", checked, " live entries probed");
    return "hash/decoder gradients match finite differences through a 4x4 render";
  });

  run_check(report, "radiance.hash_levels", [] {
    rad::FieldConfig cfg;
    double ratio = std::pow(cfg.res_max / cfg.res_min, 1.0 / (cfg.levels - 1));
    for (int l = 0; l < cfg.levels; ++l) {
      double want = cfg.res_min * std::pow(ratio, l);
      MVSDS_CHECK_THAT(std::abs(cfg.level_resolution(l) - want) < 1e-9, "level ", l);
    }
    return "geometric ladder 16..128 with ratio (128/16)^(1/(L-1))";
  });

  // --- distillation -----------------------------------------------------
  run_check(report, "distill.detachment", [] {
    Rng rng(30);
    auto d = net::init_denoiser<double>(detail::fixture_net_config(), rng);
    auto f = rad::init_field<double>(detail::fixture_field_config(), rng);
    auto s = sched::build_schedule(100, sched::ScheduleFamily::linear_beta);
    Rng r(31);
    rad::RenderSettings settings;
    settings.resolution = 16;
    settings.samples_per_ray = 8;
    settings.jitter = false;
    settings.background = rad::BackgroundMode::fixed;
    auto pose = cam::pose_from_spherical(80, 10, 1.4, 40);
    auto out = rad::render(f, pose, settings, r);
    Var<double> x = add_scalar(mul_scalar(rad::image_chw(out.image, 16), 2.0), -1.0);
    Tensor<double> eps = Tensor<double>::randn(x->value.shape(), r);
    Tensor<double> x_t = sched::add_noise(x->value, eps, 30, s);
    auto g = net::guided_eps(d, x_t, vocab::pad_tokens({vocab::kCountBase}),
                             vocab::negative_tokens(),
                             cam::camera16_tensor({pose}).cast<double>(), 30, 5.0,
                             0.5, s);
    f.params.zero_grad();
    backward(distill::sds_x0_loss(x, g.x0_adjusted));
    bool any_denoiser_grad = false;
    for (const auto& name : d.params.names())
      any_denoiser_grad |= d.params.get(name)->grad.defined();
    MVSDS_CHECK_THAT(!any_denoiser_grad, "denoiser accumulated gradients");
    MVSDS_CHECK_THAT(f.params.get("grid.level0")->grad.defined(),
                     "field got no gradient");
    return "x0 target is gradient-detached; only the field receives gradients";
  });

  run_check(report, "distill.camera_ks", [] {
    Rng a(32), b(33);
    std::vector<double> fov_a, fov_b, el_a, el_b;
    for (int i = 0; i < 10000; ++i) {
      auto r1 = cam::sample_dataset_rig(a, 4);    // dataset-side stream
      auto r2 = cam::sample_dataset_rig(b, 4);    // distillation-side stream
      fov_a.push_back(r1.fov_deg);
      fov_b.push_back(r2.fov_deg);
      el_a.push_back(r1.elevation_deg);
      el_b.push_back(r2.elevation_deg);
    }
    double p_fov = ks_two_sample_p(fov_a, fov_b);
    double p_el = ks_two_sample_p(el_a, el_b);
    MVSDS_CHECK_THAT(p_fov > 0.01 && p_el > 0.01, "p_fov=", p_fov, " p_el=", p_el);
    return "KS p-values fov=" + std::to_string(p_fov) +
           ", elevation=" + std::to_string(p_el) + " (> 0.01)";
  });

  run_check(report, "distill.anneal_t_decreases", [] {
    sched::AnnealWindow win;
    win.anneal_steps = 1600;
    Rng rng(34);
    const int total = 2000;
    std::vector<double> third_mean(3, 0.0);
    std::vector<int> third_n(3, 0);
    for (int step = 0; step < total; ++step) {
      auto [lo, hi] = sched::anneal_bounds(step, win, 1000);
      int t = static_cast<int>(rng.uniform_int(lo, hi));
      int third = step * 3 / total;
      third_mean[third] += t;
      third_n[third]++;
    }
    for (int k = 0; k < 3; ++k) third_mean[k] /= third_n[k];
    MVSDS_CHECK_THAT(third_mean[0] > third_mean[1] && third_mean[1] > third_mean[2],
                     "means ", third_mean[0], ",", third_mean[1], ",", third_mean[2]);
    return "mean sampled t per third: " + std::to_string(third_mean[0]) + " > " +
           std::to_string(third_mean[1]) + " > " + std::to_string(third_mean[2]);
  });

  // A.2-style equivalence; the report carries the deviation value.
  {
    CheckResult r;
    r.name = "distill.x0_gradient_equivalence";
    try {
      Rng rng(35);
      auto d = net::init_denoiser<double>(detail::fixture_net_config(), rng);
      auto f = rad::init_field<double>(detail::fixture_field_config(), rng);
      auto s = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
      Rng tr(36);
      auto rep = distill::verify_sds_equivalence(d, f, s, 40, tr, 1.0, 0.0);
      report.a2_max_deviation = rep.max_rel_deviation;
      r.pass = rep.max_rel_deviation < 1e-5;
      r.detail = "max relative deviation " + std::to_string(rep.max_rel_deviation) +
                 (r.pass ? " < 1e-5" : " exceeds 1e-5");
    } catch (const std::exception& e) {
      r.pass = false;
      r.detail = e.what();
    }
    report.results.push_back(r);
  }

#undef MVSDS_CHECK_THAT

  return report;
}

}  // namespace mvsds::checks
