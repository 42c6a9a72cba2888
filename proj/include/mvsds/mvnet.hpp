#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mvsds/core/checkpoint.hpp"
#include "mvsds/core/nn_modules.hpp"
#include "mvsds/dataset.hpp"
#include "mvsds/sched.hpp"
#include "mvsds/vocab.hpp"

namespace mvsds::net {

using scenegen::BatchMode;

enum class CameraInjection { add_to_time, append_to_text };
enum class AttentionMode { inflated_3d, per_view_2d };

inline std::string to_string(CameraInjection c) {
  return c == CameraInjection::add_to_time ? "add_to_time" : "append_to_text";
}
inline std::string to_string(AttentionMode m) {
  return m == AttentionMode::inflated_3d ? "inflated_3d" : "per_view_2d";
}

struct DenoiserConfig {
  int image_res = 32;
  int in_channels = 3;
  int base_channels = 32;
  std::vector<int> channel_mults = {1, 2, 4};
  std::vector<int> attention_res = {8, 4};
  int text_dim = 64;
  int time_dim = 128;
  int seq_len = vocab::kMaxCaptionLen;
  int vocab_size = vocab::size();
  CameraInjection camera_injection = CameraInjection::add_to_time;
  AttentionMode attention_mode = AttentionMode::inflated_3d;
  // Fixed smallest-standard constants: attention head width and group-norm
  // group count.
  int head_dim = 8;
  int norm_groups = 8;
  bool zero_init = true;

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int level_channels(int i) const { return base_channels * channel_mults[static_cast<size_t>(i)]; }
  // The UNet downsamples at the entry of each level, so level i runs at
  // image_res / 2^(i+1).
  int level_resolution(int i) const { return image_res >> (i + 1); }
  bool level_has_attention(int i) const {
    for (int r : attention_res)
      if (r == level_resolution(i)) return true;
    return false;
  }

  void validate() const {
    MVSDS_REQUIRE(image_res >= 8 && (image_res & (image_res - 1)) == 0,
                  "image_res must be a power of two >= 8");
    MVSDS_REQUIRE(!channel_mults.empty(), "need at least one level");
    for (int i = 0; i < levels(); ++i) {
      MVSDS_REQUIRE(level_resolution(i) >= 1, "too many levels for image_res");
      MVSDS_REQUIRE(level_channels(i) % norm_groups == 0,
                    "level channels must divide group-norm groups");
      MVSDS_REQUIRE(level_channels(i) % head_dim == 0,
                    "level channels must divide attention head width");
    }
    for (int r : attention_res) {
      bool found = false;
      for (int i = 0; i < levels(); ++i) found |= level_resolution(i) == r;
      MVSDS_REQUIRE(found, "attention resolution ", r,
                    " is not one of the UNet level resolutions");
    }
  }

  Json to_json() const {
    Json j;
    j["image_res"] = image_res;
    j["in_channels"] = in_channels;
    j["base_channels"] = base_channels;
    j["channel_mults"] = channel_mults;
    j["attention_res"] = attention_res;
    j["text_dim"] = text_dim;
    j["time_dim"] = time_dim;
    j["seq_len"] = seq_len;
    j["vocab_size"] = vocab_size;
    j["camera_injection"] = to_string(camera_injection);
    j["attention_mode"] = to_string(attention_mode);
    j["head_dim"] = head_dim;
    j["norm_groups"] = norm_groups;
    return j;
  }

  static DenoiserConfig from_json(const Json& j) {
    DenoiserConfig c;
    c.image_res = j.at("image_res").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.channel_mults = j.at("channel_mults").get<std::vector<int>>();
    c.attention_res = j.at("attention_res").get<std::vector<int>>();
    c.text_dim = j.at("text_dim").get<int>();
    c.time_dim = j.at("time_dim").get<int>();
    c.seq_len = j.at("seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.camera_injection = j.at("camera_injection") == "add_to_time"
                             ? CameraInjection::add_to_time
                             : CameraInjection::append_to_text;
    c.attention_mode = j.at("attention_mode") == "inflated_3d"
                           ? AttentionMode::inflated_3d
                           : AttentionMode::per_view_2d;
    c.head_dim = j.at("head_dim").get<int>();
    c.norm_groups = j.at("norm_groups").get<int>();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

template <typename T>
struct ResBlock {
  GroupNormLayer<T> gn1, gn2;
  Conv2dLayer<T> conv1, conv2;
  LinearLayer<T> emb_proj;
  Conv2dLayer<T> skip;  // 1x1, only when channel counts differ
  bool has_skip = false;

  static ResBlock create(ParamTree<T>& tree, const std::string& name, int64_t in_ch,
                         int64_t out_ch, int64_t emb_dim, const DenoiserConfig& cfg,
                         Rng& rng) {
    ResBlock b;
    b.gn1 = GroupNormLayer<T>::create(tree, name + ".gn1", in_ch, cfg.norm_groups);
    b.conv1 = Conv2dLayer<T>::create(tree, name + ".conv1", in_ch, out_ch, 3, rng);
    b.emb_proj = LinearLayer<T>::create(tree, name + ".emb", emb_dim, out_ch, rng);
    b.gn2 = GroupNormLayer<T>::create(tree, name + ".gn2", out_ch, cfg.norm_groups);
    b.conv2 = Conv2dLayer<T>::create(tree, name + ".conv2", out_ch, out_ch, 3, rng,
                                     1, 1, cfg.zero_init);
    if (in_ch != out_ch) {
      b.skip = Conv2dLayer<T>::create(tree, name + ".skip", in_ch, out_ch, 1, rng, 1, 0);
      b.has_skip = true;
    }
    return b;
  }

  // emb: [N, emb_dim] per-sample conditioning vector.
  Var<T> operator()(const Var<T>& x, const Var<T>& emb) const {
    Var<T> h = conv1(silu(gn1(x)));
    h = add_channel_vec(h, emb_proj(silu(emb)));
    h = conv2(silu(gn2(h)));
    Var<T> base = has_skip ? skip(x) : x;
    return add(base, h);
  }
};

template <typename T>
struct AttentionBlock {
  GroupNormLayer<T> gn_self;
  LinearLayer<T> q, k, v, out;
  GroupNormLayer<T> gn_cross;
  LinearLayer<T> cq, ck, cv, cout;
  int64_t channels = 0;
  int64_t heads = 0;
  int64_t head_dim = 0;

  static AttentionBlock create(ParamTree<T>& tree, const std::string& name,
                               int64_t channels, const DenoiserConfig& cfg, Rng& rng) {
    AttentionBlock b;
    b.channels = channels;
    b.head_dim = cfg.head_dim;
    b.heads = channels / cfg.head_dim;
    b.gn_self = GroupNormLayer<T>::create(tree, name + ".self.gn", channels,
                                          cfg.norm_groups);
    b.q = LinearLayer<T>::create(tree, name + ".self.q", channels, channels, rng);
    b.k = LinearLayer<T>::create(tree, name + ".self.k", channels, channels, rng);
    b.v = LinearLayer<T>::create(tree, name + ".self.v", channels, channels, rng);
    b.out = LinearLayer<T>::create(tree, name + ".self.out", channels, channels, rng,
                                   cfg.zero_init);
    b.gn_cross = GroupNormLayer<T>::create(tree, name + ".cross.gn", channels,
                                           cfg.norm_groups);
    b.cq = LinearLayer<T>::create(tree, name + ".cross.q", channels, channels, rng);
    b.ck = LinearLayer<T>::create(tree, name + ".cross.k", cfg.text_dim, channels, rng);
    b.cv = LinearLayer<T>::create(tree, name + ".cross.v", cfg.text_dim, channels, rng);
    b.cout = LinearLayer<T>::create(tree, name + ".cross.out", channels, channels, rng,
                                    cfg.zero_init);
    return b;
  }
};

namespace detail {

// [N,C,H,W] -> [N,HW,C]
template <typename T>
Var<T> nchw_to_tokens(const Var<T>& x) {
  const Shape& s = x->value.shape();
  Var<T> r = reshape(x, {s[0], s[1], s[2] * s[3], 1});
  return reshape(transpose_12(r), {s[0], s[2] * s[3], s[1]});
}

// [N,S,C] -> [N,C,H,W]
template <typename T>
Var<T> tokens_to_nchw(const Var<T>& x, int64_t h, int64_t w) {
  const Shape& s = x->value.shape();
  Var<T> r = reshape(x, {s[0], s[1], s[2], 1});
  return reshape(transpose_12(r), {s[0], s[2], h, w});
}

// Multi-head attention over tokens: q [G,Sq,C], kv [G,Skv,C].
template <typename T>
Var<T> multihead_attention(const Var<T>& q_tokens, const Var<T>& k_tokens,
                           const Var<T>& v_tokens, int64_t heads, int64_t head_dim) {
  const Shape& sq = q_tokens->value.shape();
  const Shape& sk = k_tokens->value.shape();
  const int64_t G = sq[0], Sq = sq[1], C = sq[2], Skv = sk[1];
  auto split = [&](const Var<T>& t, int64_t S) {
    // [G,S,C] -> [G*heads, S, head_dim]
    Var<T> r = reshape(t, {G, S, heads, head_dim});
    return reshape(transpose_12(r), {G * heads, S, head_dim});
  };
  Var<T> qh = split(q_tokens, Sq);
  Var<T> kh = split(k_tokens, Skv);
  Var<T> vh = split(v_tokens, Skv);
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(head_dim)));
  Var<T> scores = mul_scalar(batched_matmul(qh, kh, /*transpose_b=*/true), scale);
  Var<T> attn = softmax_lastdim(scores);
  Var<T> mixed = batched_matmul(attn, vh);  // [G*heads, Sq, head_dim]
  Var<T> merged = reshape(mixed, {G, heads, Sq, head_dim});
  return reshape(transpose_12(merged), {G, Sq, C});
}

}  // namespace detail

// Self-attention with the token set chosen by the attention mode: per-view
// tokens span one view's pixels; inflated tokens span all views of a scene
// jointly. Weights are shared between the two modes.
template <typename T>
Var<T> inflated_attention(const AttentionBlock<T>& block, const Var<T>& x,
                          int64_t scenes, AttentionMode mode) {
  const Shape& s = x->value.shape();
  const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  MVSDS_REQUIRE(C == block.channels, "inflated_attention: channel mismatch");
  MVSDS_REQUIRE(N % scenes == 0, "inflated_attention: N not divisible by scenes");
  const int64_t views = N / scenes;
  Var<T> tok = detail::nchw_to_tokens(block.gn_self(x));  // [N,HW,C]
  const int64_t group_count = mode == AttentionMode::inflated_3d ? scenes : N;
  const int64_t group_tokens =
      mode == AttentionMode::inflated_3d ? views * H * W : H * W;
  Var<T> flat = reshape(tok, {N * H * W, C});
  Var<T> grouped_q = reshape(block.q(flat), {group_count, group_tokens, C});
  Var<T> grouped_k = reshape(block.k(flat), {group_count, group_tokens, C});
  Var<T> grouped_v = reshape(block.v(flat), {group_count, group_tokens, C});
  Var<T> mixed = detail::multihead_attention(grouped_q, grouped_k, grouped_v,
                                             block.heads, block.head_dim);
  Var<T> o = block.out(reshape(mixed, {N * H * W, C}));
  return add(x, detail::tokens_to_nchw(reshape(o, {N, H * W, C}), H, W));
}

// Cross-attention from image tokens to the per-scene context sequence
// (text embeddings, optionally extended per view by a camera token).
template <typename T>
Var<T> cross_attention(const AttentionBlock<T>& block, const Var<T>& x,
                       const Var<T>& context_per_view) {
  const Shape& s = x->value.shape();
  const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  const Shape& sc = context_per_view->value.shape();
  MVSDS_REQUIRE(sc.size() == 3 && sc[0] == N, "cross_attention: context must be [N,L,D]");
  const int64_t L = sc[1], D = sc[2];
  Var<T> tok = detail::nchw_to_tokens(block.gn_cross(x));
  Var<T> q = reshape(block.cq(reshape(tok, {N * H * W, C})), {N, H * W, C});
  Var<T> k = reshape(block.ck(reshape(context_per_view, {N * L, D})), {N, L, C});
  Var<T> v = reshape(block.cv(reshape(context_per_view, {N * L, D})), {N, L, C});
  Var<T> mixed = detail::multihead_attention(q, k, v, block.heads, block.head_dim);
  Var<T> o = block.cout(reshape(mixed, {N * H * W, C}));
  return add(x, detail::tokens_to_nchw(reshape(o, {N, H * W, C}), H, W));
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

template <typename T>
struct Denoiser {
  DenoiserConfig cfg;
  ParamTree<T> params;

  Var<T> token_table, pos_table;
  LinearLayer<T> time_mlp1, time_mlp2;
  LinearLayer<T> cam_mlp1, cam_mlp2;
  LinearLayer<T> cam_to_text;  // append_to_text variant only
  Conv2dLayer<T> stem;
  std::vector<Conv2dLayer<T>> down;
  std::vector<ResBlock<T>> enc_res;
  std::vector<AttentionBlock<T>> enc_attn;  // indexed by level, unused slots empty
  std::vector<bool> has_attn;
  ResBlock<T> mid_res1, mid_res2;
  AttentionBlock<T> mid_attn;
  std::vector<ResBlock<T>> dec_res;
  std::vector<AttentionBlock<T>> dec_attn;
  std::vector<Conv2dLayer<T>> up;
  ResBlock<T> final_res;
  GroupNormLayer<T> out_gn;
  Conv2dLayer<T> out_conv;
};

// Builds layer handles over `tree` (freshly initialized or preloaded).
template <typename T>
Denoiser<T> wire_denoiser(const DenoiserConfig& cfg, ParamTree<T> tree, Rng& rng) {
  cfg.validate();
  Denoiser<T> d;
  d.cfg = cfg;
  d.params = std::move(tree);
  ParamTree<T>& P = d.params;

  d.token_table = P.param("text.tokens", {cfg.vocab_size, cfg.text_dim},
                          init_fanin_normal<T>({cfg.vocab_size, cfg.text_dim},
                                               cfg.text_dim, rng));
  d.pos_table = P.param("text.pos", {cfg.seq_len, cfg.text_dim},
                        init_fanin_normal<T>({cfg.seq_len, cfg.text_dim},
                                             cfg.text_dim, rng));
  d.time_mlp1 = LinearLayer<T>::create(P, "time.mlp1", cfg.time_dim, cfg.time_dim, rng);
  d.time_mlp2 = LinearLayer<T>::create(P, "time.mlp2", cfg.time_dim, cfg.time_dim, rng);
  d.cam_mlp1 = LinearLayer<T>::create(P, "camera.mlp1", 16, cfg.time_dim, rng);
  d.cam_mlp2 = LinearLayer<T>::create(P, "camera.mlp2", cfg.time_dim, cfg.time_dim, rng);
  if (cfg.camera_injection == CameraInjection::append_to_text)
    d.cam_to_text = LinearLayer<T>::create(P, "camera.to_text", cfg.time_dim,
                                           cfg.text_dim, rng);

  d.stem = Conv2dLayer<T>::create(P, "stem", cfg.in_channels, cfg.base_channels, 3, rng);

  int in_ch = cfg.base_channels;
  for (int i = 0; i < cfg.levels(); ++i) {
    int ch = cfg.level_channels(i);
    std::string lv = "enc" + std::to_string(i);
    d.down.push_back(Conv2dLayer<T>::create(P, lv + ".down", in_ch, ch, 3, rng, 2, 1));
    d.enc_res.push_back(ResBlock<T>::create(P, lv + ".res", ch, ch, cfg.time_dim, cfg, rng));
    d.has_attn.push_back(cfg.level_has_attention(i));
    d.enc_attn.push_back(d.has_attn.back()
                             ? AttentionBlock<T>::create(P, lv + ".attn", ch, cfg, rng)
                             : AttentionBlock<T>{});
    in_ch = ch;
  }

  int mid_ch = cfg.level_channels(cfg.levels() - 1);
  d.mid_res1 = ResBlock<T>::create(P, "mid.res1", mid_ch, mid_ch, cfg.time_dim, cfg, rng);
  d.mid_attn = AttentionBlock<T>::create(P, "mid.attn", mid_ch, cfg, rng);
  d.mid_res2 = ResBlock<T>::create(P, "mid.res2", mid_ch, mid_ch, cfg.time_dim, cfg, rng);

  d.dec_res.resize(static_cast<size_t>(cfg.levels()));
  d.dec_attn.resize(static_cast<size_t>(cfg.levels()));
  d.up.resize(static_cast<size_t>(cfg.levels()));
  for (int i = cfg.levels() - 1; i >= 0; --i) {
    int ch = cfg.level_channels(i);
    int out_ch = i == 0 ? cfg.base_channels : cfg.level_channels(i - 1);
    std::string lv = "dec" + std::to_string(i);
    d.dec_res[static_cast<size_t>(i)] =
        ResBlock<T>::create(P, lv + ".res", 2 * ch, ch, cfg.time_dim, cfg, rng);
    if (d.has_attn[static_cast<size_t>(i)])
      d.dec_attn[static_cast<size_t>(i)] =
          AttentionBlock<T>::create(P, lv + ".attn", ch, cfg, rng);
    d.up[static_cast<size_t>(i)] =
        Conv2dLayer<T>::create(P, lv + ".up", ch, out_ch, 3, rng);
  }

  d.final_res = ResBlock<T>::create(P, "final.res", 2 * cfg.base_channels,
                                    cfg.base_channels, cfg.time_dim, cfg, rng);
  d.out_gn = GroupNormLayer<T>::create(P, "out.gn", cfg.base_channels, cfg.norm_groups);
  d.out_conv = Conv2dLayer<T>::create(P, "out.conv", cfg.base_channels, cfg.in_channels,
                                      3, rng, 1, 1, cfg.zero_init);
  return d;
}

// Fresh fan-in-scaled initialization; the output convolution starts at zero
// so the initial prediction is exactly zero.
template <typename T>
Denoiser<T> init_denoiser(const DenoiserConfig& cfg, Rng& rng) {
  return wire_denoiser(cfg, ParamTree<T>{}, rng);
}

template <typename T>
Denoiser<T> load_denoiser(const std::filesystem::path& dir, Json* meta_out = nullptr) {
  ParamTree<T> tree;
  Json meta = load_param_tree(dir, tree);
  DenoiserConfig cfg = DenoiserConfig::from_json(meta.at("denoiser_config"));
  Rng unused(0);
  Denoiser<T> d = wire_denoiser(cfg, std::move(tree), unused);
  if (meta_out) *meta_out = meta;
  return d;
}

template <typename T>
void save_denoiser(const std::filesystem::path& dir, const Denoiser<T>& d, Json extra) {
  extra["denoiser_config"] = d.cfg.to_json();
  save_param_tree(dir, d.params, extra);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Tensor<double> sinusoidal_embedding(int t, int dim) {
  Tensor<double> out({1, dim});
  int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = std::cos(t * freq);
    out[half + i] = std::sin(t * freq);
  }
  return out;
}

// 2-layer MLP camera embedding with the time-embedding width.
template <typename T>
Var<T> embed_camera(const Denoiser<T>& d, const Var<T>& camera16) {
  MVSDS_REQUIRE(camera16->value.rank() == 2 && camera16->value.dim(1) == 16,
                "embed_camera: need [N,16]");
  MVSDS_REQUIRE(camera16->value.all_finite(), "embed_camera: non-finite camera input");
  return d.cam_mlp2(silu(d.cam_mlp1(camera16)));
}

// Conditioning for one forward pass: `scenes` groups of `views` images each,
// one caption per group, one shared timestep.
template <typename T>
struct ForwardInput {
  Var<T> x_t;  // [scenes*views, C, H, W]
  std::vector<std::vector<int>> tokens;  // per scene, padded to seq_len
  std::optional<Var<T>> cameras;  // [scenes*views, 16] when multiview
  int t = 0;
  BatchMode mode = BatchMode::multiview;
  int views = 4;
};

template <typename T>
Var<T> forward(const Denoiser<T>& d, const ForwardInput<T>& in) {
  const DenoiserConfig& cfg = d.cfg;
  const Shape& s = in.x_t->value.shape();
  MVSDS_REQUIRE(s.size() == 4 && s[1] == cfg.in_channels, "forward: bad input shape ",
                shape_str(s));
  MVSDS_REQUIRE(in.t >= 0, "forward: negative timestep");
  const int64_t N = s[0];
  MVSDS_REQUIRE(in.views >= 1 && N % in.views == 0, "forward: N=", N,
                " not divisible by views=", in.views);
  const int64_t scenes = N / in.views;
  MVSDS_REQUIRE(static_cast<int64_t>(in.tokens.size()) == scenes,
                "forward: need one caption per scene");
  const bool multiview = in.mode == BatchMode::multiview;
  MVSDS_REQUIRE(in.cameras.has_value() == multiview,
                "forward: cameras must be present exactly in multiview mode");
  if (in.cameras)
    MVSDS_REQUIRE(((*in.cameras)->value.shape() == Shape{N, 16}),
                  "forward: cameras must be [N,16]");
  // Single mode runs each view as an independent 2D sample.
  const AttentionMode attn_mode =
      multiview ? cfg.attention_mode : AttentionMode::per_view_2d;
  const int64_t attn_scenes = multiview ? scenes : N;

  // Timestep embedding, shared across the batch, then expanded per sample.
  Var<T> t_vec = constant(sinusoidal_embedding(in.t, cfg.time_dim).template cast<T>());
  Var<T> t_emb = d.time_mlp2(silu(d.time_mlp1(t_vec)));  // [1, time_dim]
  Var<T> emb = reshape(repeat_groups(reshape(t_emb, {1, 1, cfg.time_dim}), N),
                       {N, cfg.time_dim});
  Var<T> cam_emb;
  if (multiview) {
    cam_emb = embed_camera(d, *in.cameras);  // [N, time_dim]
    if (cfg.camera_injection == CameraInjection::add_to_time)
      emb = add(emb, cam_emb);
  }

  // Per-scene text context, expanded to one context per view. The camera
  // token variant appends one extra context token per view.
  std::vector<Var<T>> ctx_rows;
  for (const auto& caption : in.tokens) {
    MVSDS_REQUIRE(static_cast<int>(caption.size()) == cfg.seq_len,
                  "forward: captions must be padded to seq_len");
    Var<T> tok = embedding_lookup(d.token_table, caption);
    ctx_rows.push_back(add(tok, d.pos_table));
  }
  Var<T> ctx = concat_axis0(ctx_rows);  // [scenes*L, text_dim]
  Var<T> ctx_per_view =
      repeat_groups(reshape(ctx, {scenes, cfg.seq_len, cfg.text_dim}), in.views);
  int64_t ctx_len = cfg.seq_len;
  if (multiview && cfg.camera_injection == CameraInjection::append_to_text) {
    Var<T> cam_tok = d.cam_to_text(cam_emb);  // [N, text_dim]
    Var<T> flat = concat_cols<T>({reshape(ctx_per_view, {N, cfg.seq_len * cfg.text_dim}),
                                  cam_tok});
    ctx_per_view = reshape(flat, {N, cfg.seq_len + 1, cfg.text_dim});
    ctx_len = cfg.seq_len + 1;
  }
  (void)ctx_len;

  // Encoder
  Var<T> h = d.stem(in.x_t);
  std::vector<Var<T>> skips = {h};
  for (int i = 0; i < cfg.levels(); ++i) {
    h = d.down[static_cast<size_t>(i)](h);
    h = d.enc_res[static_cast<size_t>(i)](h, emb);
    if (d.has_attn[static_cast<size_t>(i)]) {
      h = inflated_attention(d.enc_attn[static_cast<size_t>(i)], h, attn_scenes, attn_mode);
      h = cross_attention(d.enc_attn[static_cast<size_t>(i)], h, ctx_per_view);
    }
    skips.push_back(h);
  }

  // Middle
  h = d.mid_res1(h, emb);
  h = inflated_attention(d.mid_attn, h, attn_scenes, attn_mode);
  h = cross_attention(d.mid_attn, h, ctx_per_view);
  h = d.mid_res2(h, emb);

  // Decoder
  for (int i = cfg.levels() - 1; i >= 0; --i) {
    h = concat_channels(h, skips[static_cast<size_t>(i + 1)]);
    h = d.dec_res[static_cast<size_t>(i)](h, emb);
    if (d.has_attn[static_cast<size_t>(i)]) {
      h = inflated_attention(d.dec_attn[static_cast<size_t>(i)], h, attn_scenes, attn_mode);
      h = cross_attention(d.dec_attn[static_cast<size_t>(i)], h, ctx_per_view);
    }
    h = d.up[static_cast<size_t>(i)](upsample_nearest2x(h));
  }

  h = concat_channels(h, skips[0]);
  h = d.final_res(h, emb);
  return d.out_conv(silu(d.out_gn(h)));
}

// Convenience wrapper for a no-grad prediction on plain tensors.
template <typename T>
Tensor<T> predict_eps(const Denoiser<T>& d, const Tensor<T>& x_t,
                      const std::vector<std::vector<int>>& tokens,
                      const std::type_identity_t<std::optional<Tensor<T>>>& cameras,
                      int t, BatchMode mode, int views) {
  ForwardInput<T> in;
  in.x_t = constant(x_t);
  in.tokens = tokens;
  if (cameras) in.cameras = constant(*cameras);
  in.t = t;
  in.mode = mode;
  in.views = views;
  // Freeze parameters for this call so no graph is recorded.
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
  } guard(const_cast<ParamTree<T>&>(d.params));
  return forward(d, in)->value;
}

// ---------------------------------------------------------------------------
// Classifier-free guidance with x0 rescale
// ---------------------------------------------------------------------------

template <typename T>
struct GuidedResult {
  Tensor<T> eps_guided;
  Tensor<T> x0_adjusted;
  Tensor<T> x0_cfg;
  Tensor<T> x0_pos;
};

// eps_g = eps(neg) + s * (eps(pos) - eps(neg)); the guided x0 estimate is
// variance-rescaled per view toward the positive branch's statistics and
// blended with the unrescaled estimate by rescale_phi.
template <typename T>
GuidedResult<T> guided_eps(const Denoiser<T>& d, const Tensor<T>& x_t,
                           const std::vector<int>& pos_tokens,
                           const std::vector<int>& neg_tokens,
                           const std::type_identity_t<std::optional<Tensor<T>>>& cameras,
                           int t, double cfg_scale, double rescale_phi,
                           const sched::NoiseSchedule& schedule) {
  MVSDS_REQUIRE(cfg_scale >= 0.0, "guided_eps: cfg_scale must be >= 0");
  MVSDS_REQUIRE(rescale_phi >= 0.0 && rescale_phi <= 1.0,
                "guided_eps: rescale_phi must be in [0,1]");
  const int64_t F = x_t.dim(0);
  BatchMode mode = cameras ? BatchMode::multiview : BatchMode::single;
  int views = cameras ? static_cast<int>(F) : 1;
  std::vector<std::vector<int>> pos(cameras ? 1 : F, vocab::pad_tokens(pos_tokens, d.cfg.seq_len));
  std::vector<std::vector<int>> neg(cameras ? 1 : F, vocab::pad_tokens(neg_tokens, d.cfg.seq_len));

  Tensor<T> eps_pos = predict_eps(d, x_t, pos, cameras, t, mode, views);
  Tensor<T> eps_neg = predict_eps(d, x_t, neg, cameras, t, mode, views);

  GuidedResult<T> out;
  out.eps_guided = Tensor<T>(x_t.shape());
  const T s = static_cast<T>(cfg_scale);
  for (int64_t i = 0; i < x_t.numel(); ++i)
    out.eps_guided[i] = eps_neg[i] + s * (eps_pos[i] - eps_neg[i]);

  out.x0_cfg = sched::estimate_x0(x_t, out.eps_guided, t, schedule);
  out.x0_pos = sched::estimate_x0(x_t, eps_pos, t, schedule);

  // Per-view population std over all pixels and channels.
  const int64_t per_view = x_t.numel() / F;
  auto view_std = [per_view](const Tensor<T>& img, int64_t v) {
    double mean = 0.0;
    for (int64_t i = 0; i < per_view; ++i) mean += img[v * per_view + i];
    mean /= per_view;
    double var = 0.0;
    for (int64_t i = 0; i < per_view; ++i) {
      double c = img[v * per_view + i] - mean;
      var += c * c;
    }
    return std::sqrt(var / per_view);
  };

  out.x0_adjusted = out.x0_cfg.clone();
  for (int64_t v = 0; v < F; ++v) {
    double std_cfg = view_std(out.x0_cfg, v);
    double std_pos = view_std(out.x0_pos, v);
    if (std_cfg == 0.0) continue;  // degenerate view: skip rescale
    const T ratio = static_cast<T>(std_pos / std_cfg);
    const T phi = static_cast<T>(rescale_phi);
    for (int64_t i = 0; i < per_view; ++i) {
      T base = out.x0_cfg[v * per_view + i];
      out.x0_adjusted[v * per_view + i] = phi * (base * ratio) + (T(1) - phi) * base;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-view DDIM sampling
// ---------------------------------------------------------------------------

// Deterministic DDIM sampling across F views (F may exceed the training
// view count). Returns images in [0,1], shaped [F,3,res,res].
template <typename T>
Tensor<T> sample_views(const Denoiser<T>& d, const std::vector<int>& pos_tokens,
                       const Tensor<T>& rig_cameras, int n_ddim_steps,
                       double cfg_scale, Rng& rng,
                       const sched::NoiseSchedule& schedule,
                       const std::vector<int>& neg_tokens = vocab::unconditional_tokens()) {
  MVSDS_REQUIRE(rig_cameras.rank() == 2 && rig_cameras.dim(1) == 16,
                "sample_views: cameras must be [F,16]");
  MVSDS_REQUIRE(n_ddim_steps >= 1, "sample_views: need at least one step");
  const int64_t F = rig_cameras.dim(0);
  const int res = d.cfg.image_res;
  Tensor<T> x = Tensor<T>::randn({F, d.cfg.in_channels, res, res}, rng);

  const int T_steps = schedule.num_steps;
  std::vector<int> ts(static_cast<size_t>(n_ddim_steps));
  for (int k = 0; k < n_ddim_steps; ++k)
    ts[static_cast<size_t>(k)] =
        n_ddim_steps == 1
            ? T_steps - 1
            : static_cast<int>(std::lround(static_cast<double>(T_steps - 1) *
                                           (n_ddim_steps - 1 - k) / (n_ddim_steps - 1)));

  std::optional<Tensor<T>> cams = rig_cameras;
  for (int k = 0; k < n_ddim_steps; ++k) {
    GuidedResult<T> g = guided_eps(d, x, pos_tokens, neg_tokens, cams, ts[static_cast<size_t>(k)],
                                   cfg_scale, 0.0, schedule);
    if (k + 1 == n_ddim_steps) {
      x = g.x0_cfg;
    } else {
      x = sched::ddim_step(x, g.eps_guided, ts[static_cast<size_t>(k)],
                           ts[static_cast<size_t>(k + 1)], schedule);
    }
  }
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i)
    out[i] = std::clamp((x[i] + T(1)) / T(2), T(0), T(1));
  return out;
}

}  // namespace mvsds::net
