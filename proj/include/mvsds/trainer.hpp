#pragma once

#include <deque>
#include <fstream>

#include "mvsds/mvnet.hpp"

namespace mvsds::train {

using net::Denoiser;
using net::ForwardInput;
using scenegen::BatchMode;
using scenegen::Dataset;
using scenegen::MultiViewBatch;

struct TrainConfig {
  int total_steps = 2000;
  int batch_scenes = 1;       // scene groups per step (multiview mode)
  double mv_probability = 0.7;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double ema_decay = 0.0;     // 0 disables the EMA shadow
  double cond_dropout = 0.1;  // chance of replacing the caption with padding
  int views = 4;
  int ckpt_every = 500;
  uint64_t seed = 0;

  void validate() const {
    MVSDS_REQUIRE(mv_probability >= 0.0 && mv_probability <= 1.0,
                  "mv_probability must be in [0,1]");
    MVSDS_REQUIRE(cond_dropout >= 0.0 && cond_dropout <= 1.0,
                  "cond_dropout must be in [0,1]");
    MVSDS_REQUIRE(total_steps >= 1 && batch_scenes >= 1 && views >= 1,
                  "step/batch/view counts must be positive");
  }
};

// Newline-delimited JSON metrics stream.
class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path, bool append = false) {
    std::filesystem::create_directories(path.parent_path().empty()
                                            ? "."
                                            : path.parent_path());
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    MVSDS_CHECK(out_.good(), "cannot open metrics stream ", path.string());
  }
  void write(const Json& j) {
    if (out_.is_open()) {
      out_ << j.dump() << "\n";
      out_.flush();
    }
  }

 private:
  std::ofstream out_;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Mean squared error between the drawn noise and the model prediction over
// all views and pixels of the groups. All groups share one timestep.
template <typename T>
Var<T> diffusion_loss(const Denoiser<T>& d, const std::vector<MultiViewBatch>& groups,
                      int t, const Tensor<T>& eps, const sched::NoiseSchedule& schedule,
                      const std::vector<std::vector<int>>* token_override = nullptr) {
  MVSDS_REQUIRE(!groups.empty(), "diffusion_loss: empty batch");
  const BatchMode mode = groups[0].mode;
  const int64_t views = groups[0].views();
  std::vector<Var<T>> image_parts;
  std::vector<Var<T>> camera_parts;
  std::vector<std::vector<int>> tokens;
  for (const auto& g : groups) {
    MVSDS_REQUIRE(g.mode == mode && g.views() == views,
                  "diffusion_loss: mixed group shapes");
    image_parts.push_back(constant(g.images.template cast<T>()));
    if (g.cameras) camera_parts.push_back(constant(g.cameras->template cast<T>()));
    tokens.push_back(g.tokens);
  }
  if (token_override) tokens = *token_override;

  Var<T> x = image_parts.size() == 1 ? image_parts[0] : concat_axis0(image_parts);
  Tensor<T> x_t = sched::add_noise(x->value, eps, t, schedule);

  ForwardInput<T> in;
  in.x_t = constant(std::move(x_t));
  in.tokens = std::move(tokens);
  if (!camera_parts.empty())
    in.cameras = camera_parts.size() == 1 ? camera_parts[0] : concat_axis0(camera_parts);
  in.t = t;
  in.mode = mode;
  in.views = static_cast<int>(views);
  return mse(forward(d, in), constant(eps));
}

template <typename T>
Var<T> diffusion_loss(const Denoiser<T>& d, const MultiViewBatch& batch, int t,
                      const Tensor<T>& eps, const sched::NoiseSchedule& schedule) {
  return diffusion_loss(d, std::vector<MultiViewBatch>{batch}, t, eps, schedule);
}

// ---------------------------------------------------------------------------
// Joint 2D / multi-view training
// ---------------------------------------------------------------------------

inline bool draw_multiview(Rng& rng, double mv_probability) {
  return rng.uniform() <= mv_probability;
}

struct StepMetrics {
  int step = 0;
  BatchMode mode = BatchMode::multiview;
  double loss = 0.0;
  int t = 0;

  Json to_json(double lr) const {
    Json j;
    j["step"] = step;
    j["mode"] = scenegen::to_string(mode);
    j["loss"] = loss;
    j["loss_image"] = loss;
    j["loss_preserve"] = 0.0;
    j["lr"] = lr;
    return j;
  }
};

template <typename T>
class Trainer {
 public:
  Trainer(Denoiser<T>& denoiser, TrainConfig cfg)
      : d_(denoiser), cfg_(cfg), root_rng_(cfg.seed),
        opt_({.lr = cfg.lr, .weight_decay = cfg.weight_decay}) {
    cfg_.validate();
    if (cfg_.ema_decay > 0.0) ema_ = d_.params.snapshot();
  }

  AdamW<T>& optimizer() { return opt_; }
  const std::map<std::string, Tensor<T>>& ema() const { return ema_; }

  // One optimization step at absolute index `step_index`. Each step draws
  // from its own derived stream, so resumed runs are reproducible.
  StepMetrics step(const Dataset& dataset, const sched::NoiseSchedule& schedule,
                   int step_index) {
    Rng rng = root_rng_.child(static_cast<uint64_t>(step_index));
    StepMetrics m;
    m.step = step_index;

    std::vector<MultiViewBatch> groups;
    if (draw_multiview(rng, cfg_.mv_probability)) {
      m.mode = BatchMode::multiview;
      for (int b = 0; b < cfg_.batch_scenes; ++b)
        groups.push_back(dataset.load_batch(rng, BatchMode::multiview, cfg_.views));
    } else {
      // 2D mode: `views` independent single images per scene slot.
      m.mode = BatchMode::single;
      for (int b = 0; b < cfg_.batch_scenes * cfg_.views; ++b)
        groups.push_back(dataset.load_batch(rng, BatchMode::single, cfg_.views));
    }
    std::vector<std::vector<int>> tokens;
    for (const auto& g : groups)
      tokens.push_back(rng.uniform() < cfg_.cond_dropout
                           ? vocab::unconditional_tokens(d_.cfg.seq_len)
                           : g.tokens);

    int t = static_cast<int>(rng.uniform_int(0, schedule.num_steps - 1));
    m.t = t;
    int64_t n_images = 0;
    for (const auto& g : groups) n_images += g.views();
    Tensor<T> eps = Tensor<T>::randn(
        {n_images, 3, groups[0].images.dim(2), groups[0].images.dim(3)}, rng);

    d_.params.zero_grad();
    Var<T> loss = diffusion_loss(d_, groups, t, eps, schedule, &tokens);
    backward(loss);
    m.loss = loss->value[0];
    opt_.step(d_.params);
    ensure_finite(step_index);
    if (cfg_.ema_decay > 0.0) update_ema();
    return m;
  }

 private:
  void ensure_finite(int step_index) {
    for (const auto& name : d_.params.names())
      MVSDS_CHECK(d_.params.get(name)->value.all_finite(),
                  "non-finite parameter '", name, "' after step ", step_index);
  }

  void update_ema() {
    const T decay = static_cast<T>(cfg_.ema_decay);
    for (auto& [name, shadow] : ema_) {
      const Tensor<T>& live = d_.params.get(name)->value;
      for (int64_t i = 0; i < shadow.numel(); ++i)
        shadow[i] = decay * shadow[i] + (T(1) - decay) * live[i];
    }
  }

  Denoiser<T>& d_;
  TrainConfig cfg_;
  Rng root_rng_;
  AdamW<T> opt_;
  std::map<std::string, Tensor<T>> ema_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalMetrics {
  double multiview_mse = 0.0;
  double single_mse = 0.0;
  std::vector<double> bucket_mse;  // per-timestep-decile MSE, both modes pooled

  Json to_json() const {
    Json j;
    j["multiview_mse"] = multiview_mse;
    j["single_mse"] = single_mse;
    j["bucket_mse"] = bucket_mse;
    return j;
  }
};

// Deterministic held-out evaluation with a fixed seed: per-mode noise-MSE
// plus a per-timestep-bucket curve.
template <typename T>
EvalMetrics evaluate(const Denoiser<T>& d, const Dataset& dataset,
                     const sched::NoiseSchedule& schedule, int n_batches,
                     uint64_t eval_seed = 1234, int views = 4) {
  MVSDS_REQUIRE(!dataset.multiview_records().empty() &&
                    !dataset.single_records().empty(),
                "evaluate: dataset must contain both splits");
  EvalMetrics out;
  const int buckets = 10;
  std::vector<double> bucket_sum(buckets, 0.0);
  std::vector<int> bucket_n(buckets, 0);

  for (int mode_idx = 0; mode_idx < 2; ++mode_idx) {
    BatchMode mode = mode_idx == 0 ? BatchMode::multiview : BatchMode::single;
    Rng rng(detail::splitmix64(eval_seed + static_cast<uint64_t>(mode_idx)));
    double total = 0.0;
    for (int b = 0; b < n_batches; ++b) {
      MultiViewBatch batch = dataset.load_batch(rng, mode, views);
      int t = static_cast<int>(rng.uniform_int(0, schedule.num_steps - 1));
      Tensor<T> eps = Tensor<T>::randn(batch.images.shape(), rng);
      Tensor<T> x_t =
          sched::add_noise(batch.images.template cast<T>(), eps, t, schedule);
      std::optional<Tensor<T>> cams;
      if (batch.cameras) cams = batch.cameras->template cast<T>();
      Tensor<T> pred = net::predict_eps(
          d, x_t, {batch.tokens}, cams, t, mode,
          mode == BatchMode::multiview ? static_cast<int>(batch.views()) : 1);
      double se = 0.0;
      for (int64_t i = 0; i < eps.numel(); ++i) {
        double diff = static_cast<double>(pred[i]) - static_cast<double>(eps[i]);
        se += diff * diff;
      }
      double mse_val = se / static_cast<double>(eps.numel());
      total += mse_val;
      int bucket = std::min(buckets - 1, t * buckets / schedule.num_steps);
      bucket_sum[static_cast<size_t>(bucket)] += mse_val;
      bucket_n[static_cast<size_t>(bucket)]++;
    }
    (mode == BatchMode::multiview ? out.multiview_mse : out.single_mse) =
        total / n_batches;
  }
  for (int b = 0; b < buckets; ++b)
    out.bucket_mse.push_back(bucket_n[static_cast<size_t>(b)] == 0
                                 ? 0.0
                                 : bucket_sum[static_cast<size_t>(b)] /
                                       bucket_n[static_cast<size_t>(b)]);
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view identity fine-tuning (image loss + parameter preservation)
// ---------------------------------------------------------------------------

struct DreamBoothConfig {
  std::filesystem::path identity_dir;  // dataset whose first scene is the identity
  double lambda = 1.0;
  int steps = 200;
  double lr = 2e-5;
  int batch_size = 4;
  int identity_views = 8;
  uint64_t seed = 0;

  void validate() const {
    MVSDS_REQUIRE(lambda >= 0.0, "lambda must be >= 0");
    MVSDS_REQUIRE(steps >= 1 && batch_size >= 1, "steps/batch must be positive");
  }
};

// Identity image pool: renders of one scene treated as independent single
// images with the scene caption.
struct IdentitySet {
  std::vector<ImageRGBA> images;
  std::vector<int> caption;
};

inline IdentitySet build_identity_set(const Dataset& dataset, int n_views) {
  MVSDS_REQUIRE(!dataset.multiview_records().empty(),
                "identity dataset has no multi-view record");
  const auto& rec = dataset.multiview_records().front();
  IdentitySet set;
  set.caption = rec.caption;
  int take = std::min<int>(n_views, static_cast<int>(rec.views.size()));
  int stride = std::max<int>(1, static_cast<int>(rec.views.size()) / take);
  for (int k = 0; k < take; ++k)
    set.images.push_back(rec.views[static_cast<size_t>(k * stride)].image);
  MVSDS_REQUIRE(!set.images.empty(), "identity set is empty");
  return set;
}

struct DreamBoothStepMetrics {
  int step = 0;
  double loss = 0.0;
  double loss_image = 0.0;
  double loss_preserve = 0.0;

  Json to_json(double lr) const {
    Json j;
    j["step"] = step;
    j["mode"] = "dreambooth";
    j["loss"] = loss;
    j["loss_image"] = loss_image;
    j["loss_preserve"] = loss_preserve;
    j["lr"] = lr;
    return j;
  }
};

// Deterministic probe loss on the identity set (fixed noise and timesteps).
template <typename T>
double identity_probe_loss(const Denoiser<T>& d, const IdentitySet& set,
                           const sched::NoiseSchedule& schedule, uint64_t seed = 99) {
  Rng rng(seed);
  double total = 0.0;
  auto tokens = vocab::pad_tokens(set.caption, d.cfg.seq_len);
  for (size_t i = 0; i < set.images.size(); ++i) {
    Tensor<float> img = Dataset::composite_to_tensor(
        {&set.images[i]}, static_cast<float>(rng.uniform()));
    Tensor<T> x = img.cast<T>();
    int t = static_cast<int>(rng.uniform_int(0, schedule.num_steps - 1));
    Tensor<T> eps = Tensor<T>::randn(x.shape(), rng);
    Tensor<T> x_t = sched::add_noise(x, eps, t, schedule);
    Tensor<T> pred = net::predict_eps(d, x_t, {tokens}, std::optional<Tensor<T>>{},
                                      t, BatchMode::single, 1);
    double se = 0.0;
    for (int64_t j = 0; j < eps.numel(); ++j) {
      double diff = static_cast<double>(pred[j]) - static_cast<double>(eps[j]);
      se += diff * diff;
    }
    total += se / static_cast<double>(eps.numel());
  }
  return total / static_cast<double>(set.images.size());
}

// Fine-tunes in place with L = image diffusion loss + lambda * mean|theta -
// theta0|. Runs the 2D image mode only: per-view attention and no cameras.
template <typename T>
std::vector<DreamBoothStepMetrics> dreambooth_finetune(
    Denoiser<T>& d, const IdentitySet& set, const DreamBoothConfig& cfg,
    const sched::NoiseSchedule& schedule, MetricsWriter* metrics = nullptr) {
  cfg.validate();
  MVSDS_REQUIRE(!set.images.empty(), "dreambooth: identity set is empty");

  const std::map<std::string, Tensor<T>> theta0 = d.params.snapshot();
  const double n_params = static_cast<double>(d.params.total_elements());
  AdamW<T> opt({.lr = cfg.lr, .weight_decay = 0.0});
  Rng root(cfg.seed);
  auto tokens = vocab::pad_tokens(set.caption, d.cfg.seq_len);

  std::vector<DreamBoothStepMetrics> history;
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng = root.child(static_cast<uint64_t>(step));
    // Assemble a batch of independent identity images.
    std::vector<const ImageRGBA*> picks;
    for (int b = 0; b < cfg.batch_size; ++b)
      picks.push_back(&set.images[static_cast<size_t>(
          rng.uniform_int(0, static_cast<int64_t>(set.images.size()) - 1))]);
    Tensor<float> imgs =
        Dataset::composite_to_tensor(picks, static_cast<float>(rng.uniform()));
    Tensor<T> x = imgs.cast<T>();
    int t = static_cast<int>(rng.uniform_int(0, schedule.num_steps - 1));
    Tensor<T> eps = Tensor<T>::randn(x.shape(), rng);
    Tensor<T> x_t = sched::add_noise(x, eps, t, schedule);

    d.params.zero_grad();
    ForwardInput<T> in;
    in.x_t = constant(std::move(x_t));
    in.tokens.assign(static_cast<size_t>(cfg.batch_size), tokens);
    in.t = t;
    in.mode = BatchMode::single;
    in.views = 1;
    Var<T> image_loss = mse(forward(d, in), constant(eps));

    Var<T> preserve = constant(Tensor<T>::scalar(T(0)));
    if (cfg.lambda > 0.0) {
      for (const auto& name : d.params.names())
        preserve = add(preserve, sum_abs_dev(d.params.get(name), theta0.at(name)));
      preserve = mul_scalar(preserve, static_cast<T>(1.0 / n_params));
    }
    Var<T> total = add(image_loss, mul_scalar(preserve, static_cast<T>(cfg.lambda)));
    backward(total);
    opt.step(d.params);

    DreamBoothStepMetrics m;
    m.step = step;
    m.loss = total->value[0];
    m.loss_image = image_loss->value[0];
    m.loss_preserve = preserve->value[0];
    MVSDS_CHECK(std::isfinite(m.loss) && std::isfinite(m.loss_image) &&
                    std::isfinite(m.loss_preserve),
                "non-finite dreambooth loss at step ", step);
    if (metrics) metrics->write(m.to_json(cfg.lr));
    history.push_back(m);
  }
  return history;
}

// Mean absolute parameter deviation from a snapshot.
template <typename T>
double mean_abs_deviation(const ParamTree<T>& tree,
                          const std::map<std::string, Tensor<T>>& theta0) {
  double acc = 0.0;
  int64_t n = 0;
  for (const auto& name : tree.names()) {
    const Tensor<T>& now = tree.get(name)->value;
    const Tensor<T>& ref = theta0.at(name);
    for (int64_t i = 0; i < now.numel(); ++i)
      acc += std::abs(static_cast<double>(now[i]) - static_cast<double>(ref[i]));
    n += now.numel();
  }
  return acc / static_cast<double>(n);
}

}  // namespace mvsds::train
