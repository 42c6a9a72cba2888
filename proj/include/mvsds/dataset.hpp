#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mvsds/camera.hpp"
#include "mvsds/core/json_util.hpp"
#include "mvsds/core/png_io.hpp"
#include "mvsds/sdf_render.hpp"

namespace mvsds::scenegen {

enum class BatchMode { multiview, single };

inline std::string to_string(BatchMode m) {
  return m == BatchMode::multiview ? "multiview" : "single";
}

// One conditioning group for the denoiser: V views of one scene (V = F for
// multi-view batches, V = 1 for single-image batches, which the trainer
// stacks as independent samples).
struct MultiViewBatch {
  Tensor<float> images;                   // [V, 3, H, W] in [-1, 1]
  std::optional<Tensor<float>> cameras;   // [V, 16], absent in single mode
  std::vector<int> tokens;                // padded caption ids
  BatchMode mode = BatchMode::multiview;

  int64_t views() const { return images.dim(0); }
  int64_t resolution() const { return images.dim(2); }
};

namespace detail {

// Index-level orthogonal view selection; the caller guarantees the stored
// view order is the rig's azimuth order.
inline std::vector<int> select_orthogonal_indices(Rng& rng, int size, int n_views) {
  MVSDS_REQUIRE(n_views >= 1 && size % n_views == 0,
                "orthogonal selection: ", size, " views not divisible by ", n_views);
  int start = static_cast<int>(rng.uniform_int(0, size - 1));
  int gap = size / n_views;
  std::vector<int> out(static_cast<size_t>(n_views));
  for (int k = 0; k < n_views; ++k) out[static_cast<size_t>(k)] = (start + k * gap) % size;
  return out;
}

inline std::string meta_json_text(const std::vector<int>& caption,
                                  const std::vector<std::array<double, 16>>& cameras,
                                  const std::vector<double>& fovs) {
  std::string out = "{\n  \"caption\": [";
  for (size_t i = 0; i < caption.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(caption[i]);
  }
  out += "],\n  \"views\": [\n";
  for (size_t v = 0; v < cameras.size(); ++v) {
    out += "    {\"camera16\": [";
    for (int j = 0; j < 16; ++j) {
      if (j) out += ", ";
      out += fmt_f32(cameras[v][static_cast<size_t>(j)]);
    }
    out += "], \"fov_deg\": " + fmt_f32(fovs[v]) + "}";
    out += (v + 1 < cameras.size()) ? ",\n" : "\n";
  }
  out += "  ]\n}\n";
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// On-disk dataset
// ---------------------------------------------------------------------------

struct BuildStats {
  int multiview_records = 0;
  int single_records = 0;
};

// Writes <root>/manifest.json plus one directory per record containing
// meta.json and view_<k>.png files. Two independent multi-view rigs per
// scene, plus one single-view record per scene for the 2-D training split.
inline BuildStats build_dataset(Rng& rng, int n_scenes,
                                const std::filesystem::path& out_dir,
                                int passes = 2, int resolution = 32,
                                int n_azimuths = 32) {
  namespace fs = std::filesystem;
  MVSDS_REQUIRE(n_scenes >= 1, "build_dataset: need at least one scene");
  MVSDS_REQUIRE(passes >= 1, "build_dataset: need at least one pass");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  MVSDS_CHECK(!ec, "cannot create dataset directory ", out_dir.string());

  Json manifest;
  manifest["format"] = "mvsds.dataset.v1";
  manifest["seed"] = rng.seed();
  manifest["resolution"] = resolution;
  manifest["n_azimuths"] = n_azimuths;
  manifest["passes"] = passes;
  manifest["vocabulary_hash"] = vocab::vocabulary_hash();
  Json scenes = Json::array();

  BuildStats stats;
  for (int s = 0; s < n_scenes; ++s) {
    char scene_id[32];
    std::snprintf(scene_id, sizeof(scene_id), "scene_%04d", s);
    Rng scene_rng = rng.child(static_cast<uint64_t>(s));
    Scene scene = sample_scene(scene_rng);

    Json scene_json;
    scene_json["id"] = scene_id;
    scene_json["caption"] = scene.caption;
    Json records = Json::array();

    for (int pass = 0; pass < passes; ++pass) {
      Rng pass_rng = scene_rng.child("pass_" + std::to_string(pass));
      cam::CameraRig rig = cam::sample_dataset_rig(pass_rng, n_azimuths);
      std::string rel = std::string(scene_id) + "/pass_" + std::to_string(pass);
      fs::path rec_dir = out_dir / rel;
      fs::create_directories(rec_dir);

      std::vector<std::array<double, 16>> cams;
      std::vector<double> fovs;
      for (int v = 0; v < n_azimuths; ++v) {
        ImageRGBA img = render_view(scene, rig.poses[static_cast<size_t>(v)], resolution);
        save_png(rec_dir / ("view_" + std::to_string(v) + ".png"), img);
        cams.push_back(cam::normalize_extrinsic(rig.poses[static_cast<size_t>(v)]));
        fovs.push_back(rig.fov_deg);
      }
      write_file_atomic(rec_dir / "meta.json",
                        detail::meta_json_text(scene.caption, cams, fovs));
      Json rec;
      rec["split"] = "multiview";
      rec["path"] = rel;
      rec["n_views"] = n_azimuths;
      records.push_back(rec);
      stats.multiview_records++;
    }

    // Single-view record: one pose drawn with the rig distributions but a
    // free azimuth, exercising the 2-D mode of the model.
    {
      Rng single_rng = scene_rng.child("single");
      double fov = single_rng.uniform(15.0, 60.0);
      double elev = single_rng.uniform(0.0, 30.0);
      double dist = 0.5 * cam::ndc_focal(fov) * single_rng.uniform(0.9, 1.1);
      double azim = single_rng.uniform(0.0, 360.0);
      cam::CameraPose pose = cam::pose_from_spherical(azim, elev, dist, fov);
      std::string rel = std::string(scene_id) + "/single";
      fs::path rec_dir = out_dir / rel;
      fs::create_directories(rec_dir);
      ImageRGBA img = render_view(scene, pose, resolution);
      save_png(rec_dir / "view_0.png", img);
      write_file_atomic(rec_dir / "meta.json",
                        detail::meta_json_text(scene.caption,
                                               {cam::normalize_extrinsic(pose)}, {fov}));
      Json rec;
      rec["split"] = "single";
      rec["path"] = rel;
      rec["n_views"] = 1;
      records.push_back(rec);
      stats.single_records++;
    }

    scene_json["records"] = records;
    scenes.push_back(scene_json);
  }
  manifest["scenes"] = scenes;
  save_json_file(out_dir / "manifest.json", manifest);
  return stats;
}

// In-memory dataset. All pixel data is loaded eagerly at open, after which
// batch assembly is read-only.
class Dataset {
 public:
  struct View {
    ImageRGBA image;
    std::array<float, 16> camera16{};
    float fov_deg = 0.0f;
  };
  struct Record {
    std::string scene_id;
    std::vector<int> caption;
    std::vector<View> views;
  };

  static Dataset open(const std::filesystem::path& root) {
    Dataset ds;
    ds.root_ = root;
    Json manifest = load_json_file(root / "manifest.json");
    MVSDS_CHECK(manifest.at("format") == "mvsds.dataset.v1",
                "unsupported dataset format in ", root.string());
    MVSDS_REQUIRE(manifest.at("vocabulary_hash") == vocab::vocabulary_hash(),
                  "dataset was built with a different vocabulary");
    ds.resolution_ = manifest.at("resolution").get<int>();
    for (const auto& scene : manifest.at("scenes")) {
      for (const auto& rec_json : scene.at("records")) {
        Record rec;
        rec.scene_id = scene.at("id").get<std::string>();
        std::filesystem::path rec_dir = root / rec_json.at("path").get<std::string>();
        Json meta = load_json_file(rec_dir / "meta.json");
        rec.caption = meta.at("caption").get<std::vector<int>>();
        int n_views = rec_json.at("n_views").get<int>();
        const auto& views_json = meta.at("views");
        MVSDS_CHECK(static_cast<int>(views_json.size()) == n_views,
                    "view count mismatch in ", rec_dir.string());
        for (int v = 0; v < n_views; ++v) {
          View view;
          view.image = load_png(rec_dir / ("view_" + std::to_string(v) + ".png"));
          const auto& cam_json = views_json[static_cast<size_t>(v)].at("camera16");
          for (int j = 0; j < 16; ++j)
            view.camera16[static_cast<size_t>(j)] = cam_json[static_cast<size_t>(j)].get<float>();
          view.fov_deg = views_json[static_cast<size_t>(v)].at("fov_deg").get<float>();
          rec.views.push_back(std::move(view));
        }
        if (rec_json.at("split") == "multiview")
          ds.multiview_.push_back(std::move(rec));
        else
          ds.single_.push_back(std::move(rec));
      }
    }
    return ds;
  }

  int resolution() const { return resolution_; }
  const std::vector<Record>& multiview_records() const { return multiview_; }
  const std::vector<Record>& single_records() const { return single_; }

  // Composites RGBA over a grayscale level g in [0,1] and maps to [-1,1].
  static Tensor<float> composite_to_tensor(const std::vector<const ImageRGBA*>& imgs,
                                           float gray) {
    const int64_t v_count = static_cast<int64_t>(imgs.size());
    const int h = imgs[0]->height, w = imgs[0]->width;
    Tensor<float> out({v_count, 3, h, w});
    for (int64_t v = 0; v < v_count; ++v) {
      const ImageRGBA& img = *imgs[static_cast<size_t>(v)];
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          const uint8_t* px = img.at(static_cast<int>(x), static_cast<int>(y));
          float a = px[3] / 255.0f;
          for (int64_t c = 0; c < 3; ++c) {
            float fg = px[c] / 255.0f;
            float composed = fg * a + gray * (1.0f - a);
            out[((v * 3 + c) * h + y) * w + x] = 2.0f * composed - 1.0f;
          }
        }
    }
    return out;
  }

  // multiview: one record, F orthogonal views, cameras attached, caption
  // suffixed with the 3d-asset style token. single: one record, one image,
  // no camera condition.
  MultiViewBatch load_batch(Rng& rng, BatchMode mode, int n_views = 4) const {
    const auto& pool = mode == BatchMode::multiview ? multiview_ : single_;
    if (pool.empty())
      throw std::runtime_error("dataset split '" + to_string(mode) + "' is empty");
    const Record& rec = pool[static_cast<size_t>(
        rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
    float gray = static_cast<float>(rng.uniform());

    MultiViewBatch batch;
    batch.mode = mode;
    if (mode == BatchMode::multiview) {
      auto idx = detail::select_orthogonal_indices(
          rng, static_cast<int>(rec.views.size()), n_views);
      std::vector<const ImageRGBA*> imgs;
      Tensor<float> cams({static_cast<int64_t>(idx.size()), 16});
      for (size_t k = 0; k < idx.size(); ++k) {
        const View& view = rec.views[static_cast<size_t>(idx[k])];
        imgs.push_back(&view.image);
        for (int j = 0; j < 16; ++j)
          cams[static_cast<int64_t>(k) * 16 + j] = view.camera16[static_cast<size_t>(j)];
      }
      batch.images = composite_to_tensor(imgs, gray);
      batch.cameras = std::move(cams);
      std::vector<int> caption = rec.caption;
      caption.push_back(vocab::kStyle3dId);
      batch.tokens = vocab::pad_tokens(std::move(caption));
    } else {
      batch.images = composite_to_tensor({&rec.views[0].image}, gray);
      batch.tokens = vocab::pad_tokens(rec.caption);
    }
    return batch;
  }

 private:
  std::filesystem::path root_;
  int resolution_ = 0;
  std::vector<Record> multiview_;
  std::vector<Record> single_;
};

}  // namespace mvsds::scenegen
