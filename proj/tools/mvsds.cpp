// mvsds: multi-view diffusion training, sampling and score-distillation
// toolbox. One command per process; every run directory receives the exact
// resolved configuration that produced it.

#include <CLI11.hpp>
#include <cstdio>

#include "mvsds/checks.hpp"

using namespace mvsds;

namespace {

struct CommonOpts {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string seed;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_file, "key = value configuration file");
  cmd->add_option("--set", opts.overrides, "override a config key (key=value)")
      ->take_all();
  cmd->add_option("--seed", opts.seed, "override the root seed");
}

config::RunConfig resolve_config(const CommonOpts& opts) {
  config::RunConfig cfg = config::RunConfig::defaults();
  if (!opts.config_file.empty()) cfg.load_file(opts.config_file);
  for (const auto& kv : opts.overrides) cfg.set_kv(kv);
  if (!opts.seed.empty()) cfg.set("seed", opts.seed);
  return cfg;
}

void prepare_out_dir(const std::filesystem::path& out, bool force) {
  namespace fs = std::filesystem;
  if (fs::exists(out) && !fs::is_empty(out)) {
    MVSDS_REQUIRE(force, "output directory ", out.string(),
                  " exists and is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

std::string config_schema_help() {
  std::string out = "configuration keys (defaults in parentheses):\n";
  for (const auto& k : config::schema())
    out += "  " + std::string(k.key) + " (" + k.def + "): " + k.help + "\n";
  return out;
}

Tensor<float> canonical_cameras(const config::RunConfig& cfg, int views) {
  std::vector<cam::CameraPose> poses;
  double elevation = cfg.get_double("sample.elevation");
  double fov = cfg.get_double("sample.fov");
  for (int k = 0; k < views; ++k)
    poses.push_back(cam::pose_from_spherical(360.0 * k / views, elevation,
                                             0.5 * cam::ndc_focal(fov), fov));
  return cam::camera16_tensor(poses);
}

ImageRGBA tile_from_chw(const Tensor<float>& images, int64_t view, int res) {
  ImageRGBA img(res, res);
  const int64_t plane = static_cast<int64_t>(res) * res;
  for (int64_t p = 0; p < plane; ++p) {
    uint8_t* px = img.pixels.data() + p * 4;
    for (int64_t c = 0; c < 3; ++c)
      px[c] = static_cast<uint8_t>(std::lround(
          std::clamp(static_cast<double>(images[(view * 3 + c) * plane + p]), 0.0, 1.0) *
          255.0));
    px[3] = 255;
  }
  return img;
}

std::vector<int> parse_prompt_or_die(const std::string& prompt, bool add_style) {
  std::vector<int> tokens = vocab::parse_prompt(prompt);
  MVSDS_REQUIRE(!tokens.empty(), "empty prompt");
  if (add_style &&
      std::count(tokens.begin(), tokens.end(), vocab::kStyle3dId) == 0)
    tokens.push_back(vocab::kStyle3dId);
  return tokens;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_gen_data(const CommonOpts& common, const std::string& out, bool force) {
  config::RunConfig cfg = resolve_config(common);
  prepare_out_dir(out, force);
  Rng rng(detail::splitmix64(cfg.get_u64("seed") ^ detail::fnv1a64("data")));
  auto stats = scenegen::build_dataset(rng, cfg.get_int("data.scenes"), out,
                                       cfg.get_int("data.passes"),
                                       cfg.get_int("data.resolution"),
                                       cfg.get_int("data.azimuths"));
  cfg.write_echo(out);
  std::printf("dataset written to %s: %d multiview records, %d single records\n",
              out.c_str(), stats.multiview_records, stats.single_records);
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& data,
              const std::string& out, const std::string& resume) {
  config::RunConfig cfg = resolve_config(common);
  auto dataset = scenegen::Dataset::open(data);
  auto schedule = config::make_schedule(cfg);
  train::TrainConfig tcfg = config::make_train_config(cfg);

  int start_step = 0;
  net::Denoiser<float> denoiser = [&] {
    if (!resume.empty()) {
      Json meta;
      auto d = net::load_denoiser<float>(resume, &meta);
      start_step = meta.value("step", 0);
      std::printf("resumed from %s at step %d\n", resume.c_str(), start_step);
      return d;
    }
    Rng init_rng(detail::splitmix64(cfg.get_u64("seed") ^ detail::fnv1a64("init")));
    return net::init_denoiser<float>(config::make_denoiser_config(cfg), init_rng);
  }();

  std::filesystem::create_directories(out);
  cfg.write_echo(out);
  train::MetricsWriter metrics(std::filesystem::path(out) / "metrics.ndjson",
                               /*append=*/!resume.empty());
  train::Trainer<float> trainer(denoiser, tcfg);

  auto save = [&](int step, const std::string& name) {
    Json meta;
    meta["step"] = step;
    net::save_denoiser(std::filesystem::path(out) / name, denoiser, meta);
  };
  for (int step = start_step; step < tcfg.total_steps; ++step) {
    train::StepMetrics m = trainer.step(dataset, schedule, step);
    metrics.write(m.to_json(tcfg.lr));
    if ((step + 1) % tcfg.ckpt_every == 0)
      save(step + 1, "ckpt_step_" + std::to_string(step + 1));
    if ((step + 1) % 200 == 0)
      std::printf("step %d/%d mode=%s loss=%.4f\n", step + 1, tcfg.total_steps,
                  scenegen::to_string(m.mode).c_str(), m.loss);
  }
  save(tcfg.total_steps, "ckpt");
  std::printf("final checkpoint: %s/ckpt\n", out.c_str());
  return 0;
}

int cmd_sample(const CommonOpts& common, const std::string& checkpoint,
               const std::string& out, const std::string& prompt, int views_flag) {
  config::RunConfig cfg = resolve_config(common);
  auto denoiser = net::load_denoiser<float>(checkpoint);
  auto schedule = config::make_schedule(cfg);
  int views = views_flag > 0 ? views_flag : cfg.get_int("sample.views");
  std::vector<int> tokens = parse_prompt_or_die(prompt, /*add_style=*/true);

  Tensor<float> cams = canonical_cameras(cfg, views);
  Rng rng(detail::splitmix64(cfg.get_u64("seed") ^ detail::fnv1a64("sample")));
  Tensor<float> images = net::sample_views(
      denoiser, vocab::pad_tokens(tokens, denoiser.cfg.seq_len), cams,
      cfg.get_int("sample.ddim_steps"), cfg.get_double("sample.cfg_scale"), rng,
      schedule);

  std::filesystem::create_directories(out);
  cfg.write_echo(out);
  const int res = denoiser.cfg.image_res;
  std::vector<ImageRGBA> row;
  for (int v = 0; v < views; ++v) row.push_back(tile_from_chw(images, v, res));
  save_png(std::filesystem::path(out) / "grid.png", distill::assemble_grid({row}));

  Json sidecar;
  sidecar["prompt"] = vocab::format_tokens(tokens);
  sidecar["views"] = Json::array();
  for (int v = 0; v < views; ++v) {
    Json entry;
    entry["azimuth_deg"] = 360.0 * v / views;
    entry["elevation_deg"] = cfg.get_double("sample.elevation");
    entry["fov_deg"] = cfg.get_double("sample.fov");
    Json c16 = Json::array();
    for (int j = 0; j < 16; ++j) c16.push_back(cams[v * 16 + j]);
    entry["camera16"] = c16;
    sidecar["views"].push_back(entry);
  }
  save_json_file(std::filesystem::path(out) / "cameras.json", sidecar);
  std::printf("wrote %s/grid.png (%d views)\n", out.c_str(), views);
  return 0;
}

int cmd_distill(const CommonOpts& common, const std::string& checkpoint,
                const std::string& out, const std::string& prompt, bool no_anneal,
                bool no_neg, bool no_rescale, int export_occupancy) {
  config::RunConfig cfg = resolve_config(common);
  if (no_anneal) cfg.set("distill.use_anneal", "false");
  if (no_neg) cfg.set("distill.use_neg", "false");
  if (no_rescale) cfg.set("distill.use_rescale", "false");

  auto denoiser = net::load_denoiser<float>(checkpoint);
  auto schedule = config::make_schedule(cfg);
  std::vector<int> tokens = parse_prompt_or_die(prompt, /*add_style=*/true);
  distill::DistillConfig dcfg = config::make_distill_config(cfg, tokens);

  std::filesystem::create_directories(out);
  cfg.write_echo(out);
  Rng field_rng(detail::splitmix64(cfg.get_u64("seed") ^ detail::fnv1a64("field")));
  auto field = rad::init_field<float>(rad::FieldConfig{}, field_rng);

  std::filesystem::path out_path(out);
  auto result = distill::distill(field, denoiser, dcfg, schedule, &out_path);

  if (export_occupancy > 0) {
    Tensor<float> grid = rad::density_grid(field, export_occupancy);
    Json meta;
    meta["grid"] = export_occupancy;
    save_tensors<float>(out_path / "occupancy",
                        {{"density_grid", grid}}, meta);
  }

  double cov_min = 1.0, cov_max = 0.0;
  for (double c : result.final_coverage) {
    cov_min = std::min(cov_min, c);
    cov_max = std::max(cov_max, c);
  }
  std::printf("final alpha coverage per view: [");
  for (size_t i = 0; i < result.final_coverage.size(); ++i)
    std::printf("%s%.3f", i ? ", " : "", result.final_coverage[i]);
  std::printf("]\n");
  if (cov_min < 0.05 || cov_max > 0.9) {
    std::fprintf(stderr,
                 "coverage sanity failed: views must land in [0.05, 0.9]\n");
    return 2;
  }
  return 0;
}

int cmd_dreambooth(const CommonOpts& common, const std::string& checkpoint,
                   const std::string& identity_data, const std::string& out,
                   bool chain_distill, const std::string& prompt) {
  config::RunConfig cfg = resolve_config(common);
  auto denoiser = net::load_denoiser<float>(checkpoint);
  auto schedule = config::make_schedule(cfg);
  auto dataset = scenegen::Dataset::open(identity_data);
  train::DreamBoothConfig dbcfg = config::make_dreambooth_config(cfg);
  auto identity = train::build_identity_set(dataset, dbcfg.identity_views);

  std::filesystem::create_directories(out);
  cfg.write_echo(out);
  train::MetricsWriter metrics(std::filesystem::path(out) / "metrics.ndjson");
  auto history = train::dreambooth_finetune(denoiser, identity, dbcfg, schedule,
                                            &metrics);
  Json meta;
  meta["step"] = dbcfg.steps;
  meta["finetuned_from"] = checkpoint;
  net::save_denoiser(std::filesystem::path(out) / "ckpt", denoiser, meta);
  std::printf("fine-tuned %d steps; final loss %.4f (image %.4f, preserve %.6f)\n",
              dbcfg.steps, history.back().loss, history.back().loss_image,
              history.back().loss_preserve);

  if (chain_distill) {
    std::string use_prompt =
        prompt.empty() ? vocab::format_tokens(identity.caption) : prompt;
    CommonOpts chained = common;
    return cmd_distill(chained, (std::filesystem::path(out) / "ckpt").string(),
                       (std::filesystem::path(out) / "distill").string(), use_prompt,
                       false, false, false, 0);
  }
  return 0;
}

int cmd_eval(const CommonOpts& common, const std::string& checkpoint,
             const std::string& data, const std::string& out) {
  config::RunConfig cfg = resolve_config(common);
  auto denoiser = net::load_denoiser<float>(checkpoint);
  auto schedule = config::make_schedule(cfg);
  auto dataset = scenegen::Dataset::open(data);
  auto metrics = train::evaluate(denoiser, dataset, schedule,
                                 cfg.get_int("eval.batches"),
                                 cfg.get_u64("eval.seed"),
                                 cfg.get_int("train.views"));
  Json j = metrics.to_json();
  std::printf("%s\n", j.dump(2).c_str());
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    cfg.write_echo(out);
    save_json_file(std::filesystem::path(out) / "eval.json", j);
  }
  return 0;
}

int cmd_check(const std::string& out) {
  checks::CheckReport report = checks::run_all_checks();
  for (const auto& r : report.results)
    std::printf("[%s] %s: %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.detail.c_str());
  Json j = report.to_json();
  if (!out.empty()) write_file_atomic(out, j.dump(2) + "\n");
  std::printf("a2_max_deviation: %.3g\n", report.a2_max_deviation);
  if (!report.all_pass()) {
    std::fprintf(stderr, "invariant checks failed\n");
    return 3;
  }
  std::printf("all %zu checks passed\n", report.results.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-view diffusion + score distillation toolbox"};
  app.require_subcommand(1);
  app.footer(config_schema_help());

  CommonOpts gen_opts, train_opts, sample_opts, distill_opts, db_opts, eval_opts;

  auto* gen = app.add_subcommand("gen-data", "render a procedural multi-view dataset");
  std::string gen_out;
  bool gen_force = false;
  int gen_scenes = -1;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--scenes", gen_scenes, "number of scenes (overrides data.scenes)");
  gen->add_flag("--force", gen_force, "overwrite an existing dataset");
  add_common(gen, gen_opts);

  auto* tr = app.add_subcommand("train", "train the multi-view denoiser");
  std::string train_data, train_out, train_resume;
  int train_steps = -1;
  tr->add_option("--data", train_data, "dataset directory")->required();
  tr->add_option("--out", train_out, "run directory")->required();
  tr->add_option("--resume", train_resume, "checkpoint directory to resume from");
  tr->add_option("--steps", train_steps, "training steps (overrides train.steps)");
  add_common(tr, train_opts);

  auto* sm = app.add_subcommand("sample", "sample multi-view images with DDIM");
  std::string sample_ckpt, sample_out, sample_prompt;
  int sample_views = -1;
  sm->add_option("--checkpoint", sample_ckpt, "denoiser checkpoint")->required();
  sm->add_option("--out", sample_out, "output directory")->required();
  sm->add_option("--prompt", sample_prompt, "caption, e.g. 'one red sphere'")
      ->required();
  sm->add_option("--views", sample_views, "number of views (may exceed training)");
  add_common(sm, sample_opts);

  auto* ds = app.add_subcommand("distill", "optimize a radiance field against the model");
  std::string distill_ckpt, distill_out, distill_prompt;
  bool no_anneal = false, no_neg = false, no_rescale = false;
  int export_occ = 0;
  int distill_steps = -1;
  ds->add_option("--checkpoint", distill_ckpt, "denoiser checkpoint")->required();
  ds->add_option("--out", distill_out, "output directory")->required();
  ds->add_option("--prompt", distill_prompt, "caption to distill")->required();
  ds->add_option("--steps", distill_steps, "distillation steps");
  ds->add_flag("--no-anneal", no_anneal, "disable timestep annealing");
  ds->add_flag("--no-neg", no_neg, "disable the negative prompt");
  ds->add_flag("--no-rescale", no_rescale, "disable the guided-x0 rescale");
  ds->add_option("--export-occupancy", export_occ,
                 "write a G^3 density grid for occupancy comparison");
  add_common(ds, distill_opts);

  auto* db = app.add_subcommand("dreambooth", "identity fine-tuning on a few renders");
  std::string db_ckpt, db_data, db_out, db_prompt;
  bool db_chain = false;
  db->add_option("--checkpoint", db_ckpt, "denoiser checkpoint")->required();
  db->add_option("--identity-data", db_data, "dataset holding the identity scene")
      ->required();
  db->add_option("--out", db_out, "output directory")->required();
  db->add_flag("--chain-distill", db_chain, "run distillation on the fine-tuned model");
  db->add_option("--prompt", db_prompt, "prompt for the chained distillation");
  add_common(db, db_opts);

  auto* ev = app.add_subcommand("eval", "held-out noise-prediction metrics");
  std::string eval_ckpt, eval_data, eval_out;
  ev->add_option("--checkpoint", eval_ckpt, "denoiser checkpoint")->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--out", eval_out, "optional output directory");
  add_common(ev, eval_opts);

  auto* ck = app.add_subcommand("check", "run the invariant suite");
  std::string check_out;
  ck->add_option("--out", check_out, "write the machine-readable report here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      if (gen_scenes >= 0) gen_opts.overrides.push_back(
          "data.scenes=" + std::to_string(gen_scenes));
      return cmd_gen_data(gen_opts, gen_out, gen_force);
    }
    if (tr->parsed()) {
      if (train_steps >= 0) train_opts.overrides.push_back(
          "train.steps=" + std::to_string(train_steps));
      return cmd_train(train_opts, train_data, train_out, train_resume);
    }
    if (sm->parsed())
      return cmd_sample(sample_opts, sample_ckpt, sample_out, sample_prompt,
                        sample_views);
    if (ds->parsed()) {
      if (distill_steps >= 0) distill_opts.overrides.push_back(
          "distill.steps=" + std::to_string(distill_steps));
      return cmd_distill(distill_opts, distill_ckpt, distill_out, distill_prompt,
                         no_anneal, no_neg, no_rescale, export_occ);
    }
    if (db->parsed())
      return cmd_dreambooth(db_opts, db_ckpt, db_data, db_out, db_chain, db_prompt);
    if (ev->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_data, eval_out);
    if (ck->parsed()) return cmd_check(check_out);
  } catch (const invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
