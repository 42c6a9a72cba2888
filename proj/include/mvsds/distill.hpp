#pragma once

#include "mvsds/radiance.hpp"
#include "mvsds/trainer.hpp"

namespace mvsds::distill {

using net::Denoiser;
using rad::RadianceField;

struct DistillConfig {
  int total_steps = 2000;
  double cfg_scale = 50.0;
  double rescale_phi = 0.5;
  sched::AnnealWindow anneal;  // anneal_steps set relative to total_steps
  std::vector<int> pos_tokens;
  std::vector<int> neg_tokens = vocab::negative_tokens();
  double orient_weight = 0.01;
  double bg_replace_prob = 0.5;
  double field_lr = 0.01;
  int views = 4;
  int rig_size = 32;
  int samples_per_ray = 64;
  int res_start = 32;
  int res_end = 64;
  double res_switch_frac = 0.5;
  // Fig-6 style technique switches.
  bool use_anneal = true;
  bool use_neg_prompt = true;
  bool use_rescale = true;
  uint64_t seed = 0;
  // Orientation term runs on the samples that carry rendering weight.
  double orient_sample_threshold = 1e-3;
  int64_t orient_max_samples = 8192;

  DistillConfig() { anneal.anneal_steps = 1600; }

  int resolution_at(int step) const {
    return step < static_cast<int>(res_switch_frac * total_steps) ? res_start
                                                                  : res_end;
  }

  void validate() const {
    MVSDS_REQUIRE(rescale_phi >= 0.0 && rescale_phi <= 1.0, "rescale_phi in [0,1]");
    MVSDS_REQUIRE(bg_replace_prob >= 0.0 && bg_replace_prob <= 1.0,
                  "bg_replace_prob in [0,1]");
    MVSDS_REQUIRE(cfg_scale >= 0.0, "cfg_scale must be >= 0");
    MVSDS_REQUIRE(total_steps >= 1 && views >= 1, "counts must be positive");
    MVSDS_REQUIRE(rig_size % views == 0, "rig size must be divisible by views");
    MVSDS_REQUIRE(!pos_tokens.empty(), "distillation needs a prompt");
  }

  Json to_json() const {
    Json j;
    j["total_steps"] = total_steps;
    j["cfg_scale"] = cfg_scale;
    j["rescale_phi"] = rescale_phi;
    j["use_anneal"] = use_anneal;
    j["use_neg_prompt"] = use_neg_prompt;
    j["use_rescale"] = use_rescale;
    j["orient_weight"] = orient_weight;
    j["bg_replace_prob"] = bg_replace_prob;
    j["field_lr"] = field_lr;
    j["views"] = views;
    j["samples_per_ray"] = samples_per_ray;
    j["res_start"] = res_start;
    j["res_end"] = res_end;
    j["res_switch_frac"] = res_switch_frac;
    j["prompt"] = vocab::format_tokens(pos_tokens);
    j["negative_prompt"] = vocab::format_tokens(neg_tokens);
    j["seed"] = seed;
    return j;
  }
};

// ---------------------------------------------------------------------------
// x0-reconstruction loss
// ---------------------------------------------------------------------------

// Mean squared error between the (gradient-carrying) renders and the
// detached clean-image target. The target is a plain tensor, so gradients
// can only flow through the render argument.
template <typename T>
Var<T> sds_x0_loss(const Var<T>& renders, const Tensor<T>& x0_adjusted) {
  MVSDS_REQUIRE(renders->value.same_shape(x0_adjusted),
                "sds_x0_loss: shape mismatch ", shape_str(renders->value.shape()),
                " vs ", shape_str(x0_adjusted.shape()));
  return mse(renders, constant(x0_adjusted));
}

// ---------------------------------------------------------------------------
// Appendix-identity check: grad of the summed x0 loss vs (2 sigma/alpha) *
// (eps_pred - eps)
// ---------------------------------------------------------------------------

struct EquivalenceReport {
  double max_rel_deviation = 0.0;
  int trials = 0;
};

// For random (t, eps, render): the gradient of sum((x - x0_hat)^2) w.r.t.
// the rendered pixels must equal (2 sigma_t/alpha_t) (eps_pred - eps)
// elementwise when guidance is plain (cfg 1, no rescale). `rescale_phi` and
// `cfg_scale` are exposed so tests can document that rescale changes the
// gradient.
template <typename T>
EquivalenceReport verify_sds_equivalence(const Denoiser<T>& d,
                                         RadianceField<T>& field,
                                         const sched::NoiseSchedule& schedule,
                                         int n_trials, Rng& rng,
                                         double cfg_scale = 1.0,
                                         double rescale_phi = 0.0) {
  EquivalenceReport report;
  report.trials = n_trials;
  auto pos = vocab::pad_tokens({vocab::kCountBase, vocab::kColorBase, vocab::kShapeBase},
                               d.cfg.seq_len);
  auto neg = vocab::negative_tokens(d.cfg.seq_len);

  for (int trial = 0; trial < n_trials; ++trial) {
    cam::CameraPose pose = cam::pose_from_spherical(
        rng.uniform(0, 360), rng.uniform(0, 30),
        0.5 * cam::ndc_focal(40.0) * rng.uniform(0.9, 1.1), 40.0);
    rad::RenderSettings settings;
    settings.resolution = d.cfg.image_res;
    settings.samples_per_ray = 16;
    settings.background = rad::BackgroundMode::random_color;
    auto render_out = rad::render(field, pose, settings, rng);
    Var<T> x = add_scalar(mul_scalar(rad::image_chw(render_out.image, settings.resolution),
                                     T(2)),
                          T(-1));  // [1,3,res,res] in [-1,1]

    int t = static_cast<int>(rng.uniform_int(0, schedule.num_steps - 1));
    Rng noise_rng(rng.next_u64());
    Tensor<T> eps = Tensor<T>::randn(x->value.shape(), noise_rng);
    Tensor<T> x_t = sched::add_noise(x->value, eps, t, schedule);

    Tensor<T> cams = cam::camera16_tensor({pose}).template cast<T>();
    auto guided = net::guided_eps(d, x_t, pos, neg, cams, t, cfg_scale, rescale_phi,
                                  schedule);

    // Summed (not mean) loss so the gradient is 2(x - x0_hat) exactly.
    Var<T> diff = sub(x, constant(guided.x0_adjusted));
    Var<T> loss = sum_all(square(diff));
    field.params.zero_grad();
    x->zero_grad();
    backward(loss);

    const double w = 2.0 * schedule.sigma_at(t) / schedule.alpha_at(t);
    for (int64_t i = 0; i < x->value.numel(); ++i) {
      double got = x->grad[i];
      double want = w * (static_cast<double>(guided.eps_guided[i]) -
                         static_cast<double>(eps[i]));
      double denom = std::max({std::abs(got), std::abs(want), 1e-12});
      report.max_rel_deviation =
          std::max(report.max_rel_deviation, std::abs(got - want) / denom);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Distillation loop
// ---------------------------------------------------------------------------

struct DistillStepMetrics {
  int step = 0;
  double loss_sds = 0.0;
  double loss_orient = 0.0;
  int t = 0;
  int resolution = 0;

  Json to_json() const {
    Json j;
    j["step"] = step;
    j["loss_sds"] = loss_sds;
    j["loss_orient"] = loss_orient;
    j["t"] = t;
    j["resolution"] = resolution;
    return j;
  }
};

template <typename T>
class Distiller {
 public:
  Distiller(RadianceField<T>& field, const Denoiser<T>& denoiser, DistillConfig cfg,
            const sched::NoiseSchedule& schedule)
      : field_(field), d_(denoiser), cfg_(cfg), schedule_(schedule),
        root_rng_(cfg.seed), opt_({.lr = cfg.field_lr, .weight_decay = 0.0}) {
    cfg_.validate();
  }

  const DistillConfig& config() const { return cfg_; }

  std::pair<int, int> timestep_bounds(int step) const {
    if (cfg_.use_anneal) return sched::anneal_bounds(step, cfg_.anneal, schedule_.num_steps);
    // Plain mode: the fixed endpoint window.
    int lo = static_cast<int>(std::floor(cfg_.anneal.t_min_end * schedule_.num_steps));
    int hi = static_cast<int>(std::floor(cfg_.anneal.t_max_start * schedule_.num_steps));
    return {lo, hi};
  }

  DistillStepMetrics step(int step_index) {
    Rng rng = root_rng_.child(static_cast<uint64_t>(step_index));
    DistillStepMetrics m;
    m.step = step_index;
    m.resolution = cfg_.resolution_at(step_index);

    // Cameras drawn exactly like dataset rendering: a full rig, then an
    // orthogonal subset.
    cam::CameraRig rig = cam::sample_dataset_rig(rng, cfg_.rig_size);
    std::vector<int> picked = cam::select_orthogonal_views(rng, rig, cfg_.views);
    std::vector<cam::CameraPose> poses;
    for (int idx : picked) poses.push_back(rig.poses[static_cast<size_t>(idx)]);

    rad::RenderSettings settings;
    settings.resolution = m.resolution;
    settings.samples_per_ray = cfg_.samples_per_ray;
    settings.background = rng.uniform() < cfg_.bg_replace_prob
                              ? rad::BackgroundMode::random_color
                              : rad::BackgroundMode::fixed;

    std::vector<Var<T>> view_images;
    std::vector<Tensor<double>> positions;
    std::vector<Tensor<T>> weights;
    std::vector<Tensor<double>> dirs;
    for (const auto& pose : poses) {
      auto out = rad::render(field_, pose, settings, rng);
      view_images.push_back(rad::image_chw(out.image, m.resolution));
      positions.push_back(out.positions);
      weights.push_back(out.weights);
      dirs.push_back(out.ray_dirs);
    }
    Var<T> x01 = concat_axis0(view_images);  // [F,3,R,R] in [0,1]
    Var<T> x = add_scalar(mul_scalar(x01, T(2)), T(-1));
    // The denoiser runs at its native resolution; finer renders are
    // average-pooled down before the reconstruction loss.
    while (x->value.dim(2) > d_.cfg.image_res) x = avg_pool2x2(x);
    MVSDS_CHECK(x->value.dim(2) == d_.cfg.image_res,
                "render resolution below the denoiser resolution");

    auto [t_lo, t_hi] = timestep_bounds(step_index);
    int t = static_cast<int>(rng.uniform_int(t_lo, t_hi));
    m.t = t;
    Tensor<T> eps = Tensor<T>::randn(x->value.shape(), rng);
    Tensor<T> x_t = sched::add_noise(x->value, eps, t, schedule_);

    Tensor<T> cams = cam::camera16_tensor(poses).template cast<T>();
    auto pos_tokens = vocab::pad_tokens(cfg_.pos_tokens, d_.cfg.seq_len);
    auto neg_tokens = cfg_.use_neg_prompt
                          ? vocab::pad_tokens(cfg_.neg_tokens, d_.cfg.seq_len)
                          : vocab::unconditional_tokens(d_.cfg.seq_len);
    auto guided = net::guided_eps(d_, x_t, pos_tokens, neg_tokens, cams, t,
                                  cfg_.cfg_scale,
                                  cfg_.use_rescale ? cfg_.rescale_phi : 0.0,
                                  schedule_);
    // The reconstruction target lives in image space: clamp it to the valid
    // range. Early in the annealing window (t near 0.98 T) the 1/alpha_t
    // factor otherwise amplifies guided predictions into targets orders of
    // magnitude outside [-1,1], which slams the field solid.
    Tensor<T> target = guided.x0_adjusted.clone();
    for (int64_t i = 0; i < target.numel(); ++i)
      target[i] = std::clamp(target[i], T(-1), T(1));

    Var<T> loss = sds_x0_loss(x, target);
    m.loss_sds = loss->value[0];

    if (cfg_.orient_weight > 0.0) {
      Var<T> orient = orientation_term(positions, weights, dirs);
      if (orient) {
        m.loss_orient = orient->value[0];
        loss = add(loss, mul_scalar(orient, static_cast<T>(cfg_.orient_weight)));
      }
    }

    field_.params.zero_grad();
    backward(loss);
    opt_.step(field_.params);
    for (const auto& name : field_.params.names())
      MVSDS_CHECK(field_.params.get(name)->value.all_finite(),
                  "non-finite field parameter '", name, "' at step ", step_index);
    return m;
  }

 private:
  // Orientation regularizer on the samples that actually carry rendering
  // weight (the weights are detached, so subsetting does not bias gradients).
  Var<T> orientation_term(const std::vector<Tensor<double>>& positions,
                          const std::vector<Tensor<T>>& weights,
                          const std::vector<Tensor<double>>& dirs) {
    std::vector<double> sel_pos;
    std::vector<T> sel_w;
    std::vector<T> sel_dir;
    int64_t n_rays = 0;
    for (size_t v = 0; v < positions.size(); ++v) {
      const int64_t rays = weights[v].dim(0);
      const int64_t samples = weights[v].dim(1);
      n_rays += rays;
      for (int64_t r = 0; r < rays; ++r)
        for (int64_t s = 0; s < samples; ++s) {
          T w = weights[v][r * samples + s];
          if (w <= static_cast<T>(cfg_.orient_sample_threshold)) continue;
          if (static_cast<int64_t>(sel_w.size()) >= cfg_.orient_max_samples) break;
          for (int k = 0; k < 3; ++k)
            sel_pos.push_back(positions[v][(r * samples + s) * 3 + k]);
          for (int k = 0; k < 3; ++k)
            sel_dir.push_back(static_cast<T>(dirs[v][r * 3 + k]));
          sel_w.push_back(w);
        }
    }
    if (sel_w.empty()) return nullptr;
    const int64_t n = static_cast<int64_t>(sel_w.size());
    Tensor<double> pos_t({n, 3}, std::move(sel_pos));
    Tensor<T> dir_t({n, 3}, std::move(sel_dir));
    Tensor<T> w_t({n}, std::move(sel_w));
    return rad::orientation_loss(field_, pos_t, dir_t, w_t, n_rays);
  }

  RadianceField<T>& field_;
  const Denoiser<T>& d_;
  DistillConfig cfg_;
  const sched::NoiseSchedule& schedule_;
  Rng root_rng_;
  AdamW<T> opt_;
};

// ---------------------------------------------------------------------------
// Full distillation with galleries
// ---------------------------------------------------------------------------

// Canonical evaluation rig used for galleries and coverage checks.
inline std::vector<cam::CameraPose> canonical_rig(int views = 4,
                                                  double elevation = 15.0,
                                                  double fov = 40.0) {
  std::vector<cam::CameraPose> poses;
  for (int k = 0; k < views; ++k)
    poses.push_back(cam::pose_from_spherical(360.0 * k / views, elevation,
                                             0.5 * cam::ndc_focal(fov), fov));
  return poses;
}

template <typename T>
ImageRGBA render_preview(const RadianceField<T>& field, const cam::CameraPose& pose,
                         int resolution) {
  rad::RenderSettings settings;
  settings.resolution = resolution;
  settings.samples_per_ray = 64;
  settings.jitter = false;
  settings.background = rad::BackgroundMode::fixed;
  Rng rng(0);
  auto out = rad::render(field, pose, settings, rng);
  ImageRGBA img(resolution, resolution);
  for (int64_t r = 0; r < resolution * resolution; ++r) {
    uint8_t* px = img.pixels.data() + r * 4;
    for (int k = 0; k < 3; ++k)
      px[k] = static_cast<uint8_t>(std::lround(
          std::clamp(static_cast<double>(out.image->value[r * 3 + k]), 0.0, 1.0) *
          255.0));
    px[3] = static_cast<uint8_t>(std::lround(
        std::clamp(static_cast<double>(out.alpha->value[r]), 0.0, 1.0) * 255.0));
  }
  return img;
}

// F columns x one row per snapshot.
inline ImageRGBA assemble_grid(const std::vector<std::vector<ImageRGBA>>& rows) {
  MVSDS_REQUIRE(!rows.empty() && !rows[0].empty(), "assemble_grid: empty input");
  const int tile = rows[0][0].width;
  const int cols = static_cast<int>(rows[0].size());
  ImageRGBA grid(cols * tile, static_cast<int>(rows.size()) * tile);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      for (int y = 0; y < tile; ++y)
        for (int x = 0; x < tile; ++x) {
          const uint8_t* src = rows[r][c].at(x, y);
          uint8_t* dst = grid.at(static_cast<int>(c) * tile + x,
                                 static_cast<int>(r) * tile + y);
          for (int k = 0; k < 4; ++k) dst[k] = src[k];
        }
  return grid;
}

// Mean fraction of foreground pixels (alpha > 0.5) over the canonical views.
template <typename T>
std::vector<double> alpha_coverage(const RadianceField<T>& field, int views = 4,
                                   int resolution = 32) {
  std::vector<double> coverage;
  for (const auto& pose : canonical_rig(views)) {
    ImageRGBA img = render_preview(field, pose, resolution);
    double fg = 0;
    for (size_t i = 3; i < img.pixels.size(); i += 4) fg += img.pixels[i] > 127 ? 1 : 0;
    coverage.push_back(fg / (resolution * static_cast<double>(resolution)));
  }
  return coverage;
}

struct DistillResult {
  std::vector<DistillStepMetrics> history;
  std::vector<double> final_coverage;
};

// Runs the full loop; when out_dir is set, emits snapshot galleries at
// 0/25/50/75/100% plus a combined grid, the metrics stream and the final
// field checkpoint.
template <typename T>
DistillResult distill(RadianceField<T>& field, const Denoiser<T>& denoiser,
                      const DistillConfig& cfg, const sched::NoiseSchedule& schedule,
                      const std::filesystem::path* out_dir = nullptr) {
  Distiller<T> distiller(field, denoiser, cfg, schedule);
  std::optional<train::MetricsWriter> metrics;
  if (out_dir) metrics.emplace(*out_dir / "metrics.ndjson");

  std::vector<std::vector<ImageRGBA>> gallery_rows;
  auto snapshot = [&](int step_label) {
    if (!out_dir) return;
    std::vector<ImageRGBA> row;
    for (const auto& pose : canonical_rig(cfg.views))
      row.push_back(render_preview(field, pose, cfg.res_start));
    save_png(*out_dir / ("gallery_step_" + std::to_string(step_label) + ".png"),
             assemble_grid({row}));
    gallery_rows.push_back(std::move(row));
  };

  DistillResult result;
  std::vector<int> snap_steps;
  for (int q = 0; q <= 4; ++q)
    snap_steps.push_back(static_cast<int>(static_cast<double>(q) * cfg.total_steps / 4.0));

  snapshot(0);
  for (int step = 0; step < cfg.total_steps; ++step) {
    DistillStepMetrics m = distiller.step(step);
    if (metrics) metrics->write(m.to_json());
    result.history.push_back(m);
    for (int snap : snap_steps)
      if (snap == step + 1 && snap != 0) snapshot(snap);
  }
  if (out_dir) {
    save_png(*out_dir / "gallery.png", assemble_grid(gallery_rows));
    Json extra;
    extra["distill_config"] = cfg.to_json();
    rad::save_field(*out_dir / "field", field, extra);
  }
  result.final_coverage = alpha_coverage(field, cfg.views, cfg.res_start);
  return result;
}

}  // namespace mvsds::distill
