#include <catch2/catch_amalgamated.hpp>

#include "mvsds/checks.hpp"
#include "testutil.hpp"

using namespace mvsds;
using config::RunConfig;

TEST_CASE("defaults, overrides and unknown-key rejection") {
  RunConfig cfg = RunConfig::defaults();
  REQUIRE(cfg.get_int("schedule.steps") == 1000);
  REQUIRE(cfg.get_double("train.mv_prob") == 0.7);
  REQUIRE(cfg.get_string("model.camera_injection") == "add_to_time");
  REQUIRE(cfg.get_bool("distill.use_anneal"));
  REQUIRE(cfg.get_int_list("model.channel_mults") == std::vector<int>{1, 2, 4});

  cfg.set("train.steps", "123");
  REQUIRE(cfg.get_int("train.steps") == 123);
  cfg.set_kv("distill.cfg_scale=12.5");
  REQUIRE(cfg.get_double("distill.cfg_scale") == 12.5);

  REQUIRE_THROWS_AS(cfg.set("train.stepz", "5"), invalid_argument);
  REQUIRE_THROWS_AS(cfg.set_kv("no_equals_sign"), invalid_argument);
  REQUIRE_THROWS_AS(cfg.get_int("train.lr"), invalid_argument);
  cfg.set("train.lr", "abc");
  REQUIRE_THROWS_AS(cfg.get_double("train.lr"), std::exception);
}

TEST_CASE("config files parse with comments and reject unknown keys") {
  auto dir = testutil::scratch_dir("config");
  write_file_atomic(dir / "run.cfg",
                    "# comment line\n"
                    "train.steps = 50   # trailing comment\n"
                    "\n"
                    "seed = 9\n");
  RunConfig cfg = RunConfig::defaults();
  cfg.load_file(dir / "run.cfg");
  REQUIRE(cfg.get_int("train.steps") == 50);
  REQUIRE(cfg.get_u64("seed") == 9);

  write_file_atomic(dir / "bad.cfg", "train.stepz = 50\n");
  RunConfig cfg2 = RunConfig::defaults();
  REQUIRE_THROWS_AS(cfg2.load_file(dir / "bad.cfg"), invalid_argument);

  write_file_atomic(dir / "malformed.cfg", "train.steps 50\n");
  REQUIRE_THROWS_AS(cfg2.load_file(dir / "malformed.cfg"), invalid_argument);
}

TEST_CASE("echo is sorted, deterministic and round-trips") {
  RunConfig cfg = RunConfig::defaults();
  cfg.set("train.steps", "77");
  std::string echo1 = cfg.echo();
  std::string echo2 = cfg.echo();
  REQUIRE(echo1 == echo2);
  REQUIRE(echo1.find("train.steps = 77\n") != std::string::npos);

  auto dir = testutil::scratch_dir("config_echo");
  write_file_atomic(dir / "echo.cfg", echo1);
  RunConfig back = RunConfig::defaults();
  back.load_file(dir / "echo.cfg");
  REQUIRE(back.echo() == echo1);
}

TEST_CASE("typed config views construct valid module configs") {
  RunConfig cfg = RunConfig::defaults();
  auto schedule = config::make_schedule(cfg);
  REQUIRE(schedule.num_steps == 1000);

  auto net_cfg = config::make_denoiser_config(cfg);
  REQUIRE(net_cfg.image_res == 32);
  REQUIRE(net_cfg.attention_res == std::vector<int>{8, 4});

  auto train_cfg = config::make_train_config(cfg);
  REQUIRE(train_cfg.total_steps == 2000);
  REQUIRE(train_cfg.mv_probability == 0.7);

  auto db_cfg = config::make_dreambooth_config(cfg);
  REQUIRE(db_cfg.lambda == 1.0);
  REQUIRE(db_cfg.lr == 2e-5);

  auto distill_cfg = config::make_distill_config(cfg, {vocab::kCountBase});
  REQUIRE(distill_cfg.cfg_scale == 50.0);
  REQUIRE(distill_cfg.rescale_phi == 0.5);
  REQUIRE(distill_cfg.anneal.anneal_steps == 1600);
  REQUIRE(distill_cfg.resolution_at(0) == 32);
  REQUIRE(distill_cfg.resolution_at(1500) == 64);

  // Seeds derive per subsystem: different streams from one root seed.
  REQUIRE(train_cfg.seed != distill_cfg.seed);

  cfg.set("model.attention_res", "5");
  REQUIRE_THROWS_AS(config::make_denoiser_config(cfg), invalid_argument);
  cfg.set("model.attention_res", "8,4");
  cfg.set("model.camera_injection", "sideways");
  REQUIRE_THROWS_AS(config::make_denoiser_config(cfg), invalid_argument);
}

TEST_CASE("two-sample KS helper behaves sanely") {
  Rng a(1), b(2), c(3);
  std::vector<double> same_a, same_b, shifted;
  for (int i = 0; i < 4000; ++i) {
    same_a.push_back(a.uniform(0, 1));
    same_b.push_back(b.uniform(0, 1));
    shifted.push_back(c.uniform(0.15, 1.15));
  }
  REQUIRE(checks::ks_two_sample_p(same_a, same_b) > 0.01);
  REQUIRE(checks::ks_two_sample_p(same_a, shifted) < 1e-6);
}

TEST_CASE("vocabulary is stable and hash-guarded") {
  REQUIRE(vocab::size() == 19);
  REQUIRE(vocab::token_id("sphere") == 0);
  REQUIRE(vocab::token_id("red") == 5);
  REQUIRE(vocab::token_id("one") == 13);
  REQUIRE(vocab::token_id("3d_asset") == vocab::kStyle3dId);
  REQUIRE(vocab::token_id("low_quality") == vocab::kNegLowQualityId);
  REQUIRE(vocab::token_id("<pad>") == vocab::kPadId);
  REQUIRE_THROWS_AS(vocab::token_id("pineapple"), invalid_argument);
  REQUIRE(vocab::vocabulary_hash() == vocab::vocabulary_hash());
  REQUIRE(vocab::parse_prompt("two green torus") ==
          std::vector<int>{vocab::kCountBase + 1, vocab::kColorBase + 1,
                           vocab::kShapeBase + 4});
  REQUIRE(vocab::format_tokens(vocab::pad_tokens({0, 5})) == "sphere red");
}
