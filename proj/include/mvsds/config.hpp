#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mvsds/distill.hpp"

namespace mvsds::config {

struct KeySpec {
  const char* key;
  const char* def;
  const char* help;
};

// Flat dotted-key schema. Every key has a default; unknown keys are
// rejected so typos cannot silently change a run.
inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"seed", "0", "root seed; all subsystem streams derive from it"},
      {"schedule.family", "linear_beta", "noise schedule family: linear_beta | cosine"},
      {"schedule.steps", "1000", "number of discrete diffusion timesteps"},
      {"schedule.beta_start", "0.0001", "linear-beta start value"},
      {"schedule.beta_end", "0.02", "linear-beta end value"},
      {"data.scenes", "64", "number of procedural scenes"},
      {"data.passes", "2", "independent multi-view rigs rendered per scene"},
      {"data.resolution", "32", "render resolution (32 or 64)"},
      {"data.azimuths", "32", "views per multi-view record"},
      {"model.image_res", "32", "denoiser operating resolution"},
      {"model.base_channels", "32", "UNet base channel count"},
      {"model.channel_mults", "1,2,4", "per-level channel multipliers"},
      {"model.attention_res", "8,4", "feature resolutions that carry attention"},
      {"model.text_dim", "64", "caption embedding width"},
      {"model.time_dim", "128", "timestep embedding width"},
      {"model.camera_injection", "add_to_time",
       "camera conditioning: add_to_time | append_to_text"},
      {"model.attention_mode", "inflated_3d",
       "multi-view attention: inflated_3d | per_view_2d"},
      {"train.steps", "2000", "training steps"},
      {"train.batch_scenes", "1", "scene groups per step"},
      {"train.mv_prob", "0.7", "probability of a multi-view step"},
      {"train.lr", "0.0001", "learning rate"},
      {"train.weight_decay", "0.01", "decoupled weight decay"},
      {"train.ema_decay", "0", "EMA decay (0 disables the shadow weights)"},
      {"train.cond_dropout", "0.1", "caption dropout probability"},
      {"train.views", "4", "views per multi-view batch"},
      {"train.ckpt_every", "500", "checkpoint interval in steps"},
      {"dreambooth.lambda", "1", "parameter-preservation weight"},
      {"dreambooth.steps", "200", "fine-tuning steps"},
      {"dreambooth.lr", "0.00002", "fine-tuning learning rate"},
      {"dreambooth.batch", "4", "identity images per step"},
      {"dreambooth.views", "8", "identity views taken from the dataset"},
      {"distill.steps", "2000", "distillation steps"},
      {"distill.cfg_scale", "50", "classifier-free guidance scale"},
      {"distill.rescale_phi", "0.5", "guided-x0 rescale blend factor"},
      {"distill.orient_weight", "0.01", "orientation regularizer weight"},
      {"distill.bg_replace_prob", "0.5", "random-background probability per step"},
      {"distill.lr", "0.01", "field learning rate"},
      {"distill.views", "4", "views rendered per step"},
      {"distill.samples_per_ray", "64", "volume-rendering samples per ray"},
      {"distill.res_start", "32", "render resolution for the first phase"},
      {"distill.res_end", "64", "render resolution for the second phase"},
      {"distill.res_switch_frac", "0.5", "step fraction where the resolution doubles"},
      {"distill.anneal_frac", "0.8", "fraction of steps spent annealing"},
      {"distill.t_max_start", "0.98", "upper timestep bound, start fraction"},
      {"distill.t_max_end", "0.5", "upper timestep bound, end fraction"},
      {"distill.t_min_start", "0.98", "lower timestep bound, start fraction"},
      {"distill.t_min_end", "0.02", "lower timestep bound, end fraction"},
      {"distill.use_anneal", "true", "anneal the timestep window"},
      {"distill.use_neg", "true", "use the negative prompt"},
      {"distill.use_rescale", "true", "apply the guided-x0 rescale"},
      {"eval.batches", "64", "held-out batches per mode"},
      {"eval.seed", "1234", "fixed evaluation seed"},
      {"sample.ddim_steps", "50", "DDIM steps for sampling"},
      {"sample.cfg_scale", "7.5", "guidance scale for sampling"},
      {"sample.views", "4", "views on the canonical sampling rig"},
      {"sample.elevation", "15", "canonical rig elevation (degrees)"},
      {"sample.fov", "40", "canonical rig field of view (degrees)"},
  };
  return keys;
}

class RunConfig {
 public:
  static RunConfig defaults() {
    RunConfig c;
    for (const auto& k : schema()) c.values_[k.key] = k.def;
    return c;
  }

  void set(const std::string& key, const std::string& value) {
    MVSDS_REQUIRE(values_.count(key), "unknown config key '", key,
                  "' (see --help for the schema)");
    values_[key] = value;
  }

  // `key = value` lines; '#' starts a comment.
  void load_file(const std::filesystem::path& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      auto eq = line.find('=');
      MVSDS_REQUIRE(eq != std::string::npos, path.string(), ":", line_no,
                    ": expected 'key = value'");
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
  }

  // "key=value" as used by --set.
  void set_kv(const std::string& kv) {
    auto eq = kv.find('=');
    MVSDS_REQUIRE(eq != std::string::npos, "--set expects key=value, got '", kv, "'");
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }

  const std::string& get_string(const std::string& key) const {
    auto it = values_.find(key);
    MVSDS_CHECK(it != values_.end(), "unknown config key ", key);
    return it->second;
  }

  int get_int(const std::string& key) const {
    return static_cast<int>(get_i64(key));
  }

  int64_t get_i64(const std::string& key) const {
    const std::string& v = get_string(key);
    size_t pos = 0;
    int64_t out = std::stoll(v, &pos);
    MVSDS_REQUIRE(pos == v.size(), "config key ", key, ": '", v, "' is not an integer");
    return out;
  }

  uint64_t get_u64(const std::string& key) const {
    const std::string& v = get_string(key);
    size_t pos = 0;
    uint64_t out = std::stoull(v, &pos);
    MVSDS_REQUIRE(pos == v.size(), "config key ", key, ": '", v, "' is not an integer");
    return out;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get_string(key);
    size_t pos = 0;
    double out = std::stod(v, &pos);
    MVSDS_REQUIRE(pos == v.size(), "config key ", key, ": '", v, "' is not a number");
    return out;
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get_string(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw invalid_argument("config key " + key + ": '" + v + "' is not a bool");
  }

  std::vector<int> get_int_list(const std::string& key) const {
    std::vector<int> out;
    std::istringstream in(get_string(key));
    std::string item;
    while (std::getline(in, item, ','))
      if (!item.empty()) out.push_back(std::stoi(item));
    MVSDS_REQUIRE(!out.empty(), "config key ", key, " must be a comma list");
    return out;
  }

  // Sorted key=value lines; written into every run directory.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  void write_echo(const std::filesystem::path& dir) const {
    write_file_atomic(dir / "config.txt", echo());
  }

 private:
  std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views over the flat config
// ---------------------------------------------------------------------------

inline sched::NoiseSchedule make_schedule(const RunConfig& c) {
  return sched::build_schedule(c.get_int("schedule.steps"),
                               sched::schedule_family_from_string(
                                   c.get_string("schedule.family")),
                               c.get_double("schedule.beta_start"),
                               c.get_double("schedule.beta_end"));
}

inline net::DenoiserConfig make_denoiser_config(const RunConfig& c) {
  net::DenoiserConfig cfg;
  cfg.image_res = c.get_int("model.image_res");
  cfg.base_channels = c.get_int("model.base_channels");
  cfg.channel_mults = c.get_int_list("model.channel_mults");
  cfg.attention_res = c.get_int_list("model.attention_res");
  cfg.text_dim = c.get_int("model.text_dim");
  cfg.time_dim = c.get_int("model.time_dim");
  std::string inj = c.get_string("model.camera_injection");
  MVSDS_REQUIRE(inj == "add_to_time" || inj == "append_to_text",
                "model.camera_injection must be add_to_time or append_to_text");
  cfg.camera_injection = inj == "add_to_time" ? net::CameraInjection::add_to_time
                                              : net::CameraInjection::append_to_text;
  std::string attn = c.get_string("model.attention_mode");
  MVSDS_REQUIRE(attn == "inflated_3d" || attn == "per_view_2d",
                "model.attention_mode must be inflated_3d or per_view_2d");
  cfg.attention_mode = attn == "inflated_3d" ? net::AttentionMode::inflated_3d
                                             : net::AttentionMode::per_view_2d;
  cfg.validate();
  return cfg;
}

inline train::TrainConfig make_train_config(const RunConfig& c) {
  train::TrainConfig cfg;
  cfg.total_steps = c.get_int("train.steps");
  cfg.batch_scenes = c.get_int("train.batch_scenes");
  cfg.mv_probability = c.get_double("train.mv_prob");
  cfg.lr = c.get_double("train.lr");
  cfg.weight_decay = c.get_double("train.weight_decay");
  cfg.ema_decay = c.get_double("train.ema_decay");
  cfg.cond_dropout = c.get_double("train.cond_dropout");
  cfg.views = c.get_int("train.views");
  cfg.ckpt_every = c.get_int("train.ckpt_every");
  cfg.seed = detail::splitmix64(c.get_u64("seed") ^ detail::fnv1a64("train"));
  cfg.validate();
  return cfg;
}

inline train::DreamBoothConfig make_dreambooth_config(const RunConfig& c) {
  train::DreamBoothConfig cfg;
  cfg.lambda = c.get_double("dreambooth.lambda");
  cfg.steps = c.get_int("dreambooth.steps");
  cfg.lr = c.get_double("dreambooth.lr");
  cfg.batch_size = c.get_int("dreambooth.batch");
  cfg.identity_views = c.get_int("dreambooth.views");
  cfg.seed = detail::splitmix64(c.get_u64("seed") ^ detail::fnv1a64("dreambooth"));
  cfg.validate();
  return cfg;
}

inline distill::DistillConfig make_distill_config(const RunConfig& c,
                                                  const std::vector<int>& pos_tokens) {
  distill::DistillConfig cfg;
  cfg.total_steps = c.get_int("distill.steps");
  cfg.cfg_scale = c.get_double("distill.cfg_scale");
  cfg.rescale_phi = c.get_double("distill.rescale_phi");
  cfg.orient_weight = c.get_double("distill.orient_weight");
  cfg.bg_replace_prob = c.get_double("distill.bg_replace_prob");
  cfg.field_lr = c.get_double("distill.lr");
  cfg.views = c.get_int("distill.views");
  cfg.rig_size = c.get_int("data.azimuths");
  cfg.samples_per_ray = c.get_int("distill.samples_per_ray");
  cfg.res_start = c.get_int("distill.res_start");
  cfg.res_end = c.get_int("distill.res_end");
  cfg.res_switch_frac = c.get_double("distill.res_switch_frac");
  cfg.anneal.t_max_start = c.get_double("distill.t_max_start");
  cfg.anneal.t_max_end = c.get_double("distill.t_max_end");
  cfg.anneal.t_min_start = c.get_double("distill.t_min_start");
  cfg.anneal.t_min_end = c.get_double("distill.t_min_end");
  cfg.anneal.anneal_steps = static_cast<int>(c.get_double("distill.anneal_frac") *
                                             cfg.total_steps);
  cfg.use_anneal = c.get_bool("distill.use_anneal");
  cfg.use_neg_prompt = c.get_bool("distill.use_neg");
  cfg.use_rescale = c.get_bool("distill.use_rescale");
  cfg.pos_tokens = pos_tokens;
  cfg.seed = detail::splitmix64(c.get_u64("seed") ^ detail::fnv1a64("distill"));
  cfg.validate();
  return cfg;
}

}  // namespace mvsds::config
