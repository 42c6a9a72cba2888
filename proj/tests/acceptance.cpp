// Acceptance suite: runs every gate criterion end to end and prints one
// PASS/FAIL line per criterion. Mathematical identities run in double
// precision; pipeline and statistical criteria run the production float
// path. Exits nonzero if any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>

#include "mvsds/checks.hpp"

using namespace mvsds;
namespace fs = std::filesystem;

namespace {

struct Gate {
  int passed = 0;
  int failed = 0;

  void run(const std::string& name, const std::function<std::string()>& fn) {
    auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = fn();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                      .count();
    std::printf("[%s] %-22s (%.1fs): %s\n", ok ? "PASS" : "FAIL", name.c_str(), secs,
                detail.c_str());
    std::fflush(stdout);
    (ok ? passed : failed)++;
  }
};

#define GATE_ASSERT(cond, ...)                                              \
  do {                                                                      \
    if (!(cond))                                                            \
      throw std::runtime_error(                                             \
          ::mvsds::detail::format_msg(#cond, " failed: ", __VA_ARGS__));    \
  } while (0)

std::string g_cli_path;
fs::path g_work;
bool g_reuse = false;

// Shared fixtures built once and reused by later criteria.
struct Artifacts {
  fs::path train_ds = g_work / "train_ds";
  fs::path eval_ds = g_work / "eval_ds";
  fs::path identity_ds = g_work / "identity_ds";
  fs::path ckpt = g_work / "ckpt";
  scenegen::Scene scene0;  // analytic scene behind scene_0000
  std::vector<int> scene0_prompt;
} g_art;

net::DenoiserConfig fixture_net_config() {
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

rad::FieldConfig fixture_field_config() {
  rad::FieldConfig cfg;
  cfg.levels = 4;
  cfg.table_size_log2 = 8;
  cfg.res_min = 4.0;
  cfg.res_max = 16.0;
  cfg.hidden = 8;
  cfg.density_bias = -1.0;
  return cfg;
}

Tensor<float> rig16(int n_views, double elevation = 12.0, double fov = 40.0) {
  std::vector<cam::CameraPose> poses;
  for (int k = 0; k < n_views; ++k)
    poses.push_back(cam::pose_from_spherical(360.0 * k / n_views, elevation,
                                             0.5 * cam::ndc_focal(fov), fov));
  return cam::camera16_tensor(poses);
}

int run_cli(const std::string& args) {
  std::string cmd = g_cli_path + " " + args + " >> " +
                    (g_work / "cli.log").string() + " 2>&1";
  return std::system(cmd.c_str());
}

uint64_t hash_tree(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& f : files) {
    mix(fs::relative(f, root).string());
    mix(read_text_file(f));
  }
  return h;
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

std::string criterion_schedule_identities() {
  double worst_norm = 0.0;
  for (auto family : {sched::ScheduleFamily::linear_beta, sched::ScheduleFamily::cosine}) {
    auto s = sched::build_schedule(1000, family);
    for (int t = 0; t < s.num_steps; ++t)
      worst_norm = std::max(worst_norm,
                            std::abs(s.alpha_at(t) * s.alpha_at(t) +
                                     s.sigma_at(t) * s.sigma_at(t) - 1.0));
  }
  GATE_ASSERT(worst_norm < 1e-6, "normalization error ", worst_norm);

  auto s = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
  Rng rng(1);
  double worst_rt = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    Tensor<double> x = Tensor<double>::rand_uniform({3, 3}, rng, -1.0, 1.0);
    Tensor<double> eps = Tensor<double>::randn({3, 3}, rng);
    int t = static_cast<int>(rng.uniform_int(0, 999));
    Tensor<double> back = sched::estimate_x0(sched::add_noise(x, eps, t, s), eps, t, s);
    for (int64_t i = 0; i < x.numel(); ++i)
      worst_rt = std::max(worst_rt, std::abs(back[i] - x[i]));
  }
  GATE_ASSERT(worst_rt < 1e-5, "roundtrip error ", worst_rt);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "norm error %.2e < 1e-6 (both families), roundtrip %.2e < 1e-5",
                worst_norm, worst_rt);
  return buf;
}

std::string criterion_a2_equivalence() {
  Rng rng(2);
  auto d = net::init_denoiser<double>(fixture_net_config(), rng);
  auto field = rad::init_field<double>(fixture_field_config(), rng);
  auto s = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
  Rng trial_rng(3);
  auto t0 = std::chrono::steady_clock::now();
  auto report = distill::verify_sds_equivalence(d, field, s, 200, trial_rng, 1.0, 0.0);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                    .count();
  GATE_ASSERT(report.max_rel_deviation < 1e-5, "max deviation ",
              report.max_rel_deviation);
  GATE_ASSERT(secs < 60.0, "took ", secs, "s, budget is 60s");
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d trials, max relative deviation %.2e < 1e-5",
                report.trials, report.max_rel_deviation);
  return buf;
}

std::string criterion_attention_inflation() {
  Rng rng(4);
  auto d = net::init_denoiser<float>(fixture_net_config(), rng);

  // F=1 bit equality.
  Rng r(5);
  Tensor<float> x1 = Tensor<float>::randn({2, 3, 16, 16}, r);
  net::ForwardInput<float> in;
  in.x_t = constant(x1);
  in.tokens = {vocab::pad_tokens({vocab::kCountBase}),
               vocab::pad_tokens({vocab::kCountBase + 1})};
  in.cameras = constant(rig16(2));
  in.views = 1;
  auto d3 = d;
  d3.cfg.attention_mode = net::AttentionMode::inflated_3d;
  auto d2 = d;
  d2.cfg.attention_mode = net::AttentionMode::per_view_2d;
  Tensor<float> y3 = net::forward(d3, in)->value;
  Tensor<float> y2 = net::forward(d2, in)->value;
  for (int64_t i = 0; i < y3.numel(); ++i)
    GATE_ASSERT(std::memcmp(&y3[i], &y2[i], sizeof(float)) == 0,
                "F=1 divergence at ", i);

  // Cross-view probe.
  Tensor<float> x4 = Tensor<float>::randn({4, 3, 16, 16}, r);
  Tensor<float> xp = x4.clone();
  xp[2 * 768 + 100] += 0.25f;
  auto run = [&](net::AttentionMode mode, const Tensor<float>& img) {
    auto dd = d;
    dd.cfg.attention_mode = mode;
    net::ForwardInput<float> fin;
    fin.x_t = constant(img);
    fin.tokens = {vocab::pad_tokens({vocab::kCountBase})};
    fin.cameras = constant(rig16(4));
    fin.views = 4;
    fin.t = 60;
    return net::forward(dd, fin)->value;
  };
  auto a3 = run(net::AttentionMode::inflated_3d, x4);
  auto b3 = run(net::AttentionMode::inflated_3d, xp);
  double flow = 0.0;
  for (int64_t i = 0; i < 768; ++i)
    flow = std::max(flow, std::abs(double(a3[i]) - double(b3[i])));
  GATE_ASSERT(flow >= 1e-6, "no cross-view flow under inflated attention: ", flow);
  auto a2 = run(net::AttentionMode::per_view_2d, x4);
  auto b2 = run(net::AttentionMode::per_view_2d, xp);
  for (int64_t i = 0; i < 768; ++i)
    GATE_ASSERT(a2[i] == b2[i], "per-view cross-view leak at ", i);

  // Permutation equivariance.
  std::vector<int> perm = {2, 0, 3, 1};
  Tensor<float> xperm({4, 3, 16, 16});
  Tensor<float> cams = rig16(4);
  Tensor<float> cperm({4, 16});
  for (int v = 0; v < 4; ++v) {
    std::copy(x4.data() + perm[v] * 768, x4.data() + (perm[v] + 1) * 768,
              xperm.data() + v * 768);
    std::copy(cams.data() + perm[v] * 16, cams.data() + (perm[v] + 1) * 16,
              cperm.data() + v * 16);
  }
  net::ForwardInput<float> pin;
  pin.x_t = constant(x4);
  pin.tokens = {vocab::pad_tokens({vocab::kCountBase})};
  pin.cameras = constant(cams);
  pin.views = 4;
  pin.t = 60;
  auto y = net::forward(d, pin)->value;
  pin.x_t = constant(xperm);
  pin.cameras = constant(cperm);
  auto yp = net::forward(d, pin)->value;
  double worst = 0.0;
  for (int v = 0; v < 4; ++v)
    for (int64_t i = 0; i < 768; ++i)
      worst = std::max(worst,
                       std::abs(double(yp[v * 768 + i]) - double(y[perm[v] * 768 + i])));
  GATE_ASSERT(worst < 1e-5, "permutation deviation ", worst);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "F=1 bit-equal; cross-view flow %.1e vs exact 0; permutation dev %.1e",
                flow, worst);
  return buf;
}

std::string criterion_gradient_correctness() {
  // Denoiser: directional FD over 32 sampled parameters.
  Rng rng(6);
  auto d = net::init_denoiser<double>(fixture_net_config(), rng);
  Rng r(7);
  Tensor<double> x = Tensor<double>::randn({2, 3, 16, 16}, r);
  Tensor<double> target = Tensor<double>::randn({2, 3, 16, 16}, r);
  Tensor<double> cams = rig16(2).cast<double>();
  auto loss_fn = [&] {
    net::ForwardInput<double> in;
    in.x_t = constant(x);
    in.tokens = {vocab::pad_tokens({vocab::kCountBase})};
    in.cameras = constant(cams);
    in.views = 2;
    in.t = 200;
    return mse(net::forward(d, in), constant(target));
  };
  d.params.zero_grad();
  backward(loss_fn());
  Rng pick(8);
  struct Slot { std::string name; int64_t idx; double sign; };
  std::vector<Slot> slots;
  const auto& names = d.params.names();
  for (int k = 0; k < 32; ++k) {
    const auto& name =
        names[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(names.size()) - 1))];
    auto p = d.params.get(name);
    slots.push_back({name, pick.uniform_int(0, p->value.numel() - 1),
                     pick.uniform() < 0.5 ? -1.0 : 1.0});
  }
  double analytic = 0.0;
  for (const auto& s : slots) analytic += s.sign * d.params.get(s.name)->grad[s.idx];
  const double h = 1e-5;
  for (const auto& s : slots) d.params.get(s.name)->value[s.idx] += s.sign * h;
  double up = loss_fn()->value[0];
  for (const auto& s : slots) d.params.get(s.name)->value[s.idx] -= 2 * s.sign * h;
  double down = loss_fn()->value[0];
  for (const auto& s : slots) d.params.get(s.name)->value[s.idx] += s.sign * h;
  double fd = (up - down) / (2 * h);
  double rel_net =
      std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
  GATE_ASSERT(rel_net <= 1e-3, "denoiser relative error ", rel_net);

  // Hash-grid entries through a 4x4 render.
  Rng frng(9);
  auto field = rad::init_field<double>(fixture_field_config(), frng);
  for (const auto& name : field.params.names()) {
    auto p = field.params.get(name);
    Rng fill(detail::fnv1a64(name) + 3);
    for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] = fill.normal() * 0.2;
  }
  rad::RenderSettings settings;
  settings.resolution = 4;
  settings.samples_per_ray = 12;
  settings.jitter = false;
  settings.background = rad::BackgroundMode::fixed;
  auto render_loss = [&] {
    Rng rr(10);
    return mean_all(
        rad::render(field, cam::pose_from_spherical(25, 20, 1.35, 45), settings, rr)
            .image);
  };
  field.params.zero_grad();
  backward(render_loss());
  Rng pick2(11);
  int checked = 0;
  double worst_rel = 0.0;
  for (int trial = 0; trial < 500 && checked < 16; ++trial) {
    auto table = field.params.get("grid.level" + std::to_string(pick2.uniform_int(0, 3)));
    int64_t idx = pick2.uniform_int(0, table->value.numel() - 1);
    if (!table->grad.defined() || std::abs(table->grad[idx]) < 1e-6) continue;
    double saved = table->value[idx];
    table->value[idx] = saved + h;
    double u2 = render_loss()->value[0];
    table->value[idx] = saved - h;
    double d2 = render_loss()->value[0];
    table->value[idx] = saved;
    double fd2 = (u2 - d2) / (2 * h);
    double rel = std::abs(fd2 - table->grad[idx]) /
                 std::max({std::abs(fd2), std::abs(table->grad[idx]), 1e-8});
    worst_rel = std::max(worst_rel, rel);
    ++checked;
  }
  GATE_ASSERT(checked >= 12, "too few live hash entries probed: ", checked);
  GATE_ASSERT(worst_rel <= 1e-3, "hash-grid relative error ", worst_rel);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "denoiser dir-FD rel %.1e; hash-grid FD rel %.1e over %d entries",
                rel_net, worst_rel, checked);
  return buf;
}

std::string criterion_camera_pipeline() {
  Rng rng(12);
  for (int i = 0; i < 300; ++i) {
    double az = rng.uniform(0, 360), el = rng.uniform(-20, 75), fov = rng.uniform(15, 60);
    auto a = cam::normalize_extrinsic(cam::pose_from_spherical(az, el, 1.6, fov));
    auto b = cam::normalize_extrinsic(cam::pose_from_spherical(az, el, 5.2, fov));
    for (int j = 0; j < 16; ++j)
      GATE_ASSERT(std::abs(a[j] - b[j]) < 1e-6, "distance invariance, element ", j);
  }

  Rng rig_rng(13);
  cam::CameraRig rig = cam::sample_dataset_rig(rig_rng, 32);
  for (int trial = 0; trial < 2000; ++trial) {
    auto v = cam::select_orthogonal_views(rig_rng, rig, 4);
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) {
        double diff =
            std::fmod(std::abs(rig.azimuth_deg[v[a]] - rig.azimuth_deg[v[b]]), 360.0);
        GATE_ASSERT(std::abs(diff - 90) < 1e-9 || std::abs(diff - 180) < 1e-9 ||
                        std::abs(diff - 270) < 1e-9,
                    "azimuth gap ", diff);
      }
  }

  Rng bounds_rng(14);
  std::vector<double> fov_train, el_train;
  for (int i = 0; i < 10000; ++i) {
    cam::CameraRig r = cam::sample_dataset_rig(bounds_rng, 4);
    GATE_ASSERT(r.fov_deg >= 15 && r.fov_deg <= 60, "fov ", r.fov_deg);
    GATE_ASSERT(r.elevation_deg >= 0 && r.elevation_deg <= 30, "elev ", r.elevation_deg);
    double ratio = r.distance / (0.5 * cam::ndc_focal(r.fov_deg));
    GATE_ASSERT(ratio >= 0.9 && ratio <= 1.1, "distance ratio ", ratio);
    fov_train.push_back(r.fov_deg);
    el_train.push_back(r.elevation_deg);
  }
  // Distill-side camera stream (different seed, same sampler).
  Rng distill_rng(15);
  std::vector<double> fov_distill, el_distill;
  for (int i = 0; i < 10000; ++i) {
    cam::CameraRig r = cam::sample_dataset_rig(distill_rng, 4);
    fov_distill.push_back(r.fov_deg);
    el_distill.push_back(r.elevation_deg);
  }
  double p_fov = checks::ks_two_sample_p(fov_train, fov_distill);
  double p_el = checks::ks_two_sample_p(el_train, el_distill);
  GATE_ASSERT(p_fov > 0.01 && p_el > 0.01, "KS p-values fov=", p_fov, " el=", p_el);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "distance-invariant to 1e-6; gaps in {90,180,270}; bounds over 10k; "
                "KS p fov=%.2f el=%.2f",
                p_fov, p_el);
  return buf;
}

std::string criterion_training_smoke() {
  auto schedule = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
  if (!(g_reuse && fs::exists(g_art.train_ds / "manifest.json"))) {
    Rng data_rng(2024);
    scenegen::build_dataset(data_rng, 64, g_art.train_ds, 2, 32, 32);
    Rng eval_rng(7077);
    scenegen::build_dataset(eval_rng, 16, g_art.eval_ds, 2, 32, 32);
    Rng id_rng(313);
    scenegen::build_dataset(id_rng, 1, g_art.identity_ds, 2, 32, 32);
  }
  auto ds = scenegen::Dataset::open(g_art.train_ds);
  auto eval_ds = scenegen::Dataset::open(g_art.eval_ds);
  // The analytic scene behind scene_0000 of the training set.
  Rng scene_rng = Rng(2024).child(uint64_t{0});
  g_art.scene0 = scenegen::sample_scene(scene_rng);
  g_art.scene0_prompt = g_art.scene0.caption;
  g_art.scene0_prompt.push_back(vocab::kStyle3dId);

  double mv_mse = 0.0, single_mse = 0.0;
  if (g_reuse && fs::exists(g_art.ckpt / "manifest.json")) {
    auto d = net::load_denoiser<float>(g_art.ckpt);
    auto ev = train::evaluate(d, eval_ds, schedule, 64, 1234);
    mv_mse = ev.multiview_mse;
    single_mse = ev.single_mse;
  } else {
    Rng init_rng(1);
    net::DenoiserConfig cfg;  // default full model
    auto d = net::init_denoiser<float>(cfg, init_rng);
    train::TrainConfig tcfg;
    tcfg.total_steps = 2000;
    tcfg.seed = 11;
    train::Trainer<float> trainer(d, tcfg);
    for (int step = 0; step < tcfg.total_steps; ++step)
      trainer.step(ds, schedule, step);
    Json meta;
    meta["step"] = tcfg.total_steps;
    net::save_denoiser(g_art.ckpt, d, meta);
    auto ev = train::evaluate(d, eval_ds, schedule, 64, 1234);
    mv_mse = ev.multiview_mse;
    single_mse = ev.single_mse;
  }
  GATE_ASSERT(mv_mse < 0.9, "held-out multiview eps-MSE ", mv_mse,
              " fails the 0.9 bar (zero-predictor baseline 1.0)");

  // Single fixed batch overfit: 200 steps to < 0.05.
  Rng init2(2);
  net::DenoiserConfig cfg2;
  auto d2 = net::init_denoiser<float>(cfg2, init2);
  Rng br(3);
  auto batch = ds.load_batch(br, scenegen::BatchMode::multiview, 4);
  Tensor<float> eps = Tensor<float>::randn(batch.images.shape(), br);
  AdamW<float> opt({.lr = 3e-3});
  double overfit = 1.0;
  for (int it = 0; it < 200; ++it) {
    d2.params.zero_grad();
    auto loss = train::diffusion_loss(d2, batch, 350, eps, schedule);
    overfit = loss->value[0];
    backward(loss);
    opt.step(d2.params);
  }
  GATE_ASSERT(overfit < 0.05, "single-batch overfit reached only ", overfit);

  // Trained camera embeddings distinguish the 32 rig cameras.
  auto d = net::load_denoiser<float>(g_art.ckpt);
  Rng rr(5);
  auto rig = cam::sample_dataset_rig(rr, 32);
  auto emb = net::embed_camera(d, constant(cam::camera16_tensor(rig.poses)))->value;
  double worst_cos = -1.0;
  const int64_t dim = emb.dim(1);
  for (int a = 0; a < 32; ++a)
    for (int b = a + 1; b < 32; ++b) {
      double dot = 0, na = 0, nb = 0;
      for (int64_t j = 0; j < dim; ++j) {
        dot += emb[a * dim + j] * emb[b * dim + j];
        na += emb[a * dim + j] * emb[a * dim + j];
        nb += emb[b * dim + j] * emb[b * dim + j];
      }
      worst_cos = std::max(worst_cos, dot / std::sqrt(na * nb));
    }
  GATE_ASSERT(worst_cos < 0.999, "camera embeddings collapsed: max cosine ", worst_cos);

  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "held-out eps-MSE mv=%.3f single=%.3f < 0.9; overfit %.3f < 0.05; "
                "max camera-emb cosine %.4f",
                mv_mse, single_mse, overfit, worst_cos);
  return buf;
}

std::string criterion_more_views() {
  auto d = net::load_denoiser<float>(g_art.ckpt);
  auto schedule = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
  auto prompt = vocab::pad_tokens(g_art.scene0_prompt, d.cfg.seq_len);

  std::vector<double> means, stds;
  for (uint64_t seed = 100; seed < 108; ++seed) {
    Rng rng(seed);
    Tensor<float> imgs = net::sample_views(d, prompt, rig16(4, 15.0), 25, 7.5, rng,
                                           schedule);
    const int64_t per_view = imgs.numel() / 4;
    for (int v = 0; v < 4; ++v) {
      double m = 0, s = 0;
      for (int64_t i = 0; i < per_view; ++i) m += imgs[v * per_view + i];
      m /= per_view;
      for (int64_t i = 0; i < per_view; ++i) {
        double c = imgs[v * per_view + i] - m;
        s += c * c;
      }
      means.push_back(m);
      stds.push_back(std::sqrt(s / per_view));
    }
  }
  auto stat = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= v.size();
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::make_pair(m, std::max(std::sqrt(s / v.size()), 1e-4));
  };
  auto [mu_mean, sd_mean] = stat(means);
  auto [mu_std, sd_std] = stat(stds);

  Rng rng8(999);
  Tensor<float> eight = net::sample_views(d, prompt, rig16(8, 15.0), 25, 7.5, rng8,
                                          schedule);
  GATE_ASSERT(eight.shape() == (Shape{8, 3, 32, 32}), "unexpected F=8 output shape");
  const int64_t per_view = eight.numel() / 8;
  double worst_z = 0.0;
  for (int v = 0; v < 8; ++v) {
    double m = 0, s = 0;
    for (int64_t i = 0; i < per_view; ++i) m += eight[v * per_view + i];
    m /= per_view;
    for (int64_t i = 0; i < per_view; ++i) {
      double c = eight[v * per_view + i] - m;
      s += c * c;
    }
    s = std::sqrt(s / per_view);
    double z_mean = std::abs(m - mu_mean) / sd_mean;
    double z_std = std::abs(s - mu_std) / sd_std;
    worst_z = std::max({worst_z, z_mean, z_std});
    GATE_ASSERT(z_mean <= 3.0 && z_std <= 3.0, "view ", v, ": mean z=", z_mean,
                ", std z=", z_std, " exceeds 3 sigma");
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "F=8 sampling on the F=4 model: worst per-view z-score %.2f <= 3", worst_z);
  return buf;
}

std::string criterion_dreambooth() {
  auto schedule = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);
  auto identity_data = scenegen::Dataset::open(g_art.identity_ds);
  auto identity = train::build_identity_set(identity_data, 8);

  // lambda = 1e6 pins parameters.
  auto d_pin = net::load_denoiser<float>(g_art.ckpt);
  auto theta0 = d_pin.params.snapshot();
  train::DreamBoothConfig pin_cfg;
  pin_cfg.lambda = 1e6;
  pin_cfg.steps = 100;
  pin_cfg.seed = 21;
  train::dreambooth_finetune(d_pin, identity, pin_cfg, schedule);
  double drift = train::mean_abs_deviation(d_pin.params, theta0);
  GATE_ASSERT(drift < 1e-4, "mean |theta - theta0| = ", drift, " at lambda 1e6");

  // lambda = 0: deterministic identity probe decreases over the first 50
  // steps (checked on a 10-step grid).
  auto d_fit = net::load_denoiser<float>(g_art.ckpt);
  train::DreamBoothConfig fit_cfg;
  fit_cfg.lambda = 0.0;
  fit_cfg.steps = 10;
  std::vector<double> probes;
  probes.push_back(train::identity_probe_loss(d_fit, identity, schedule));
  for (int chunk = 0; chunk < 5; ++chunk) {
    fit_cfg.seed = 22 + static_cast<uint64_t>(chunk);
    train::dreambooth_finetune(d_fit, identity, fit_cfg, schedule);
    probes.push_back(train::identity_probe_loss(d_fit, identity, schedule));
  }
  for (size_t i = 1; i < probes.size(); ++i)
    GATE_ASSERT(probes[i] < probes[i - 1], "identity loss rose between probe ",
                i - 1, " (", probes[i - 1], ") and ", i, " (", probes[i], ")");

  // lambda = 1: both components logged and finite.
  auto d_both = net::load_denoiser<float>(g_art.ckpt);
  train::DreamBoothConfig both_cfg;
  both_cfg.lambda = 1.0;
  both_cfg.steps = 20;
  both_cfg.seed = 29;
  auto history = train::dreambooth_finetune(d_both, identity, both_cfg, schedule);
  for (const auto& m : history) {
    GATE_ASSERT(std::isfinite(m.loss_image) && std::isfinite(m.loss_preserve),
                "non-finite component at step ", m.step);
    GATE_ASSERT(std::abs(m.loss - (m.loss_image + m.loss_preserve)) < 1e-6,
                "decomposition broke at step ", m.step);
  }
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "lambda=1e6 drift %.2e < 1e-4; lambda=0 probe %.3f -> %.3f strictly "
                "decreasing; lambda=1 components finite",
                drift, probes.front(), probes.back());
  return buf;
}

std::string criterion_technique_toggles() {
  auto d = net::load_denoiser<float>(g_art.ckpt);
  auto schedule = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);

  // rescale_phi endpoint identities on the trained model.
  Rng r(31);
  Tensor<float> x_t = Tensor<float>::randn({4, 3, 32, 32}, r);
  auto pos = vocab::pad_tokens(g_art.scene0_prompt, d.cfg.seq_len);
  auto neg = vocab::negative_tokens(d.cfg.seq_len);
  std::optional<Tensor<float>> cams = rig16(4);
  auto g0 = net::guided_eps(d, x_t, pos, neg, cams, 500, 10.0, 0.0, schedule);
  for (int64_t i = 0; i < g0.x0_cfg.numel(); ++i)
    GATE_ASSERT(g0.x0_adjusted[i] == g0.x0_cfg[i], "phi=0 identity broke at ", i);
  auto g1 = net::guided_eps(d, x_t, pos, neg, cams, 500, 10.0, 1.0, schedule);
  const int64_t per_view = g1.x0_pos.numel() / 4;
  for (int v = 0; v < 4; ++v) {
    auto stddev = [&](const Tensor<float>& img) {
      double m = 0, s = 0;
      for (int64_t i = 0; i < per_view; ++i) m += img[v * per_view + i];
      m /= per_view;
      for (int64_t i = 0; i < per_view; ++i) {
        double c = img[v * per_view + i] - m;
        s += c * c;
      }
      return std::sqrt(s / per_view);
    };
    double sa = stddev(g1.x0_adjusted), sp = stddev(g1.x0_pos);
    GATE_ASSERT(std::abs(sa - sp) < 1e-5, "phi=1 std mismatch view ", v, ": ", sa,
                " vs ", sp);
  }

  // Each switch runs end-to-end and lands in the recorded metadata.
  struct Case { bool anneal, neg, rescale; const char* tag; };
  for (const Case& c : {Case{false, true, true, "no-anneal"},
                        Case{true, false, true, "no-neg"},
                        Case{true, true, false, "no-rescale"}}) {
    distill::DistillConfig cfg;
    cfg.total_steps = 6;
    cfg.pos_tokens = g_art.scene0_prompt;
    cfg.views = 2;
    cfg.samples_per_ray = 16;
    cfg.res_start = 32;
    cfg.res_end = 32;
    cfg.anneal.anneal_steps = 6;
    cfg.use_anneal = c.anneal;
    cfg.use_neg_prompt = c.neg;
    cfg.use_rescale = c.rescale;
    cfg.seed = 41;
    Rng frng(42);
    auto field = rad::init_field<float>(rad::FieldConfig{}, frng);
    fs::path out = g_work / (std::string("toggle_") + c.tag);
    fs::remove_all(out);
    fs::create_directories(out);
    mvsds::distill::distill(field, d, cfg, schedule, &out);
    Json meta;
    rad::load_field<float>(out / "field", &meta);
    const Json& rec = meta.at("distill_config");
    GATE_ASSERT(rec.at("use_anneal") == c.anneal && rec.at("use_neg_prompt") == c.neg &&
                    rec.at("use_rescale") == c.rescale,
                "metadata does not record the ", c.tag, " toggle");
  }
  return "phi in {0,1} identities hold to 1e-5; all three switches run and are "
         "recorded in checkpoint metadata";
}

std::string criterion_distillation_smoke() {
  auto d = net::load_denoiser<float>(g_art.ckpt);
  auto schedule = sched::build_schedule(1000, sched::ScheduleFamily::linear_beta);

  distill::DistillConfig cfg;
  cfg.total_steps = 2000;
  cfg.anneal.anneal_steps = 1600;
  cfg.pos_tokens = g_art.scene0_prompt;
  cfg.seed = 51;
  Rng field_rng(52);
  auto field = rad::init_field<float>(rad::FieldConfig{}, field_rng);

  // Random-init baseline IoU (near-empty field) for reference.
  const int G = 32;
  Tensor<float> truth = scenegen::occupancy_grid(g_art.scene0, G);
  const double sigma_threshold = 10.0;
  auto iou_against_truth = [&](const rad::RadianceField<float>& f) {
    Tensor<float> grid = rad::density_grid(f, G);
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < grid.numel(); ++i) {
      bool occ = grid[i] > sigma_threshold;
      bool want = truth[i] > 0.5f;
      inter += (occ && want) ? 1 : 0;
      uni += (occ || want) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
  };
  double baseline_iou = iou_against_truth(field);

  fs::path out = g_work / "distill_smoke";
  fs::remove_all(out);
  fs::create_directories(out);
  auto result = mvsds::distill::distill(field, d, cfg, schedule, &out);

  double cov_min = 1.0, cov_max = 0.0;
  for (double c : result.final_coverage) {
    cov_min = std::min(cov_min, c);
    cov_max = std::max(cov_max, c);
  }
  GATE_ASSERT(cov_min >= 0.05 && cov_max <= 0.9,
              "alpha coverage outside [0.05, 0.9]: min=", cov_min, " max=", cov_max);

  double iou = iou_against_truth(field);
  GATE_ASSERT(iou >= 0.3, "occupancy IoU ", iou, " below 0.3 (baseline ", baseline_iou,
              ")");
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "prompt '%s': coverage [%.2f, %.2f] in [0.05,0.9]; occupancy IoU "
                "%.2f >= 0.3 (random-init baseline %.2f)",
                vocab::format_tokens(g_art.scene0_prompt).c_str(), cov_min, cov_max,
                iou, baseline_iou);
  return buf;
}

std::string criterion_determinism() {
  GATE_ASSERT(!g_cli_path.empty(), "pass --cli <path to the mvsds binary>");
  fs::path droot = g_work / "determinism";
  fs::remove_all(droot);
  fs::create_directories(droot);

  auto rerun = [&](const std::string& what, const std::string& args_a,
                   const std::string& args_b, const fs::path& da, const fs::path& db) {
    GATE_ASSERT(run_cli(args_a) == 0, what, " run A failed (see cli.log)");
    GATE_ASSERT(run_cli(args_b) == 0, what, " run B failed (see cli.log)");
    GATE_ASSERT(hash_tree(da) == hash_tree(db), what, " artifacts differ between runs");
  };

  fs::path ds_a = droot / "ds_a", ds_b = droot / "ds_b";
  rerun("gen-data",
        "gen-data --out " + ds_a.string() + " --scenes 2 --seed 5",
        "gen-data --out " + ds_b.string() + " --scenes 2 --seed 5", ds_a, ds_b);

  fs::path tr_a = droot / "train_a", tr_b = droot / "train_b";
  std::string train_common =
      " --data " + ds_a.string() +
      " --steps 3 --seed 5 --set model.base_channels=8 --set train.ckpt_every=3";
  rerun("train", "train --out " + tr_a.string() + train_common,
        "train --out " + tr_b.string() + train_common, tr_a, tr_b);

  fs::path sm_a = droot / "sample_a", sm_b = droot / "sample_b";
  std::string sample_common = " --checkpoint " + (tr_a / "ckpt").string() +
                              " --prompt \"one red sphere\" --seed 5"
                              " --set sample.ddim_steps=4";
  rerun("sample", "sample --out " + sm_a.string() + sample_common,
        "sample --out " + sm_b.string() + sample_common, sm_a, sm_b);

  fs::path di_a = droot / "distill_a", di_b = droot / "distill_b";
  std::string distill_common =
      " --checkpoint " + (tr_a / "ckpt").string() +
      " --prompt \"one red sphere\" --seed 5 --steps 2"
      " --set distill.samples_per_ray=8 --set distill.res_end=32";
  // Coverage sanity is expected to fail on a 2-step run; only artifact
  // equality matters here, so exit codes 0 and 2 are both accepted.
  int rc_a = run_cli("distill --out " + di_a.string() + distill_common);
  int rc_b = run_cli("distill --out " + di_b.string() + distill_common);
  GATE_ASSERT((rc_a == 0 || WEXITSTATUS(rc_a) == 2) &&
                  (rc_b == 0 || WEXITSTATUS(rc_b) == 2),
              "distill runs failed (see cli.log)");
  GATE_ASSERT(hash_tree(di_a) == hash_tree(di_b), "distill artifacts differ");

  return "gen-data, train, sample and distill reruns are byte-identical";
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--cli" && i + 1 < argc) g_cli_path = argv[++i];
    else if (arg == "--work" && i + 1 < argc) g_work = argv[++i];
    else if (arg == "--reuse") g_reuse = true;
  }
  if (g_work.empty()) g_work = fs::current_path() / "acceptance_work";
  if (!g_reuse) fs::remove_all(g_work);
  fs::create_directories(g_work);
  std::printf("acceptance work directory: %s\n", g_work.string().c_str());

  Gate gate;
  gate.run("schedule-identities", criterion_schedule_identities);
  gate.run("a2-equivalence", criterion_a2_equivalence);
  gate.run("attention-inflation", criterion_attention_inflation);
  gate.run("gradient-correctness", criterion_gradient_correctness);
  gate.run("camera-pipeline", criterion_camera_pipeline);
  gate.run("training-smoke", criterion_training_smoke);
  gate.run("more-views-inference", criterion_more_views);
  gate.run("dreambooth", criterion_dreambooth);
  gate.run("technique-toggles", criterion_technique_toggles);
  gate.run("determinism", criterion_determinism);
  gate.run("distillation-smoke", criterion_distillation_smoke);

  std::printf("%d passed, %d failed\n", gate.passed, gate.failed);
  return gate.failed == 0 ? 0 : 1;
}
