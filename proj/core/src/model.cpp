#include "angio/model.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "angio/error.hpp"
#include "angio/rng.hpp"

namespace angio {

using nn::ParamStore;
using nn::Tape;
using nn::Var;
using nlohmann::json;

namespace {

void init_conv(ParamStore& ps, Rng& rng, const std::string& name, int out_ch, int in_ch,
               int k) {
  ps.create(name + ".w", Tensor::randn({out_ch, in_ch, k, k}, rng, 0.02));
  ps.create(name + ".b", Tensor::zeros({out_ch}));
}

Var conv_block(Tape& t, const ParamStore& ps, const std::string& name, Var x, int stride, int pad,
               bool trainable) {
  Var w = t.param(ps, name + ".w", trainable);
  Var b = t.param(ps, name + ".b", trainable);
  return nn::conv2d(x, w, b, stride, pad);
}

}  // namespace

Generator::Generator(GeneratorConfig cfg) : cfg_(cfg) {
  require(cfg_.window_size >= 1, "config", "window_size must be >= 1");
  require(cfg_.frame_count >= 2, "config", "frame_count must be >= 2");
  require(cfg_.resolution % (1 << cfg_.downsample_stages) == 0, "config",
          "resolution must be divisible by 2^downsample_stages");
}

void Generator::init_params(ParamStore& ps, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, fnv1a("generator")));
  const int b = cfg_.base_channels;
  init_conv(ps, rng, "gen.enc.stem", b, cfg_.input_channels(), 7);
  for (int i = 0; i < cfg_.downsample_stages; ++i)
    init_conv(ps, rng, "gen.enc.down" + std::to_string(i), b << (i + 1), b << i, 3);
  const int bc = cfg_.bottleneck_channels();
  for (int i = 0; i < cfg_.residual_blocks; ++i) {
    init_conv(ps, rng, "gen.res" + std::to_string(i) + ".conv1", bc, bc, 3);
    init_conv(ps, rng, "gen.res" + std::to_string(i) + ".conv2", bc, bc, 3);
  }
  for (int i = 0; i < cfg_.downsample_stages; ++i) {
    const int ch = bc >> i;
    init_conv(ps, rng, "gen.dec.up" + std::to_string(i), ch / 2, ch, 3);
  }
  init_conv(ps, rng, "gen.dec.head", 1, b, 7);
  init_conv(ps, rng, "gen.att", 1, b, 3);
}

std::vector<Var> Generator::encoder_stages(Tape& t, const ParamStore& ps, Var stack,
                                           bool trainable, bool include_trunk) const {
  std::vector<Var> stages;
  Var h = nn::relu(nn::instance_norm(conv_block(t, ps, "gen.enc.stem", stack, 1, 3, trainable)));
  stages.push_back(h);
  for (int i = 0; i < cfg_.downsample_stages; ++i) {
    h = nn::relu(nn::instance_norm(
        conv_block(t, ps, "gen.enc.down" + std::to_string(i), h, 2, 1, trainable)));
    stages.push_back(h);
  }
  if (include_trunk) {
    for (int i = 0; i < cfg_.residual_blocks; ++i) {
      const std::string name = "gen.res" + std::to_string(i);
      Var r = nn::relu(nn::instance_norm(conv_block(t, ps, name + ".conv1", h, 1, 1, trainable)));
      r = nn::instance_norm(conv_block(t, ps, name + ".conv2", r, 1, 1, trainable));
      h = nn::add(h, r);
    }
    stages.back() = h;
  }
  return stages;
}

Generator::Forward Generator::forward_stack(Tape& t, const ParamStore& ps, Var stack,
                                            bool trainable) const {
  const Tensor& sv = t.val(stack);
  require(sv.ndim() == 3 && sv.dim(0) == cfg_.input_channels(), "shape",
          "generator stack must be {3+window, H, W}, got " + sv.shape_str());

  Forward out;
  out.encoder_stages = encoder_stages(t, ps, stack, trainable);

  Var h = out.encoder_stages.back();
  for (int i = 0; i < cfg_.residual_blocks; ++i) {
    const std::string name = "gen.res" + std::to_string(i);
    Var r = nn::relu(nn::instance_norm(conv_block(t, ps, name + ".conv1", h, 1, 1, trainable)));
    r = nn::instance_norm(conv_block(t, ps, name + ".conv2", r, 1, 1, trainable));
    h = nn::add(h, r);
  }
  for (int i = 0; i < cfg_.downsample_stages; ++i) {
    h = nn::relu(nn::instance_norm(conv_block(
        t, ps, "gen.dec.up" + std::to_string(i), nn::upsample_nearest2x(h), 1, 1, trainable)));
  }
  out.frame = nn::sigmoid(conv_block(t, ps, "gen.dec.head", h, 1, 3, trainable));
  out.attention = nn::sigmoid(conv_block(t, ps, "gen.att", h, 1, 1, trainable));
  return out;
}

Var Generator::build_stack(Tape& t, const Tensor& source,
                           const std::vector<Tensor>& window) const {
  require(static_cast<int>(window.size()) == cfg_.window_size, "shape",
          "window must hold exactly window_size frames");
  require(source.ndim() == 3 && source.dim(0) == 3, "shape", "source must be {3,H,W}");
  std::vector<Var> parts{t.constant(source)};
  for (const Tensor& f : window) {
    require(f.ndim() == 2 && f.dim(0) == source.dim(1) && f.dim(1) == source.dim(2), "shape",
            "window frame resolution mismatch");
    parts.push_back(t.constant(Tensor({1, f.dim(0), f.dim(1)}, f.v)));
  }
  return nn::concat_channels(parts);
}

Var Generator::build_stack_shifted(Tape& t, const Tensor& source,
                                   const std::vector<Tensor>& window, Var newest) const {
  require(static_cast<int>(window.size()) == cfg_.window_size, "shape",
          "window must hold exactly window_size frames");
  std::vector<Var> parts{t.constant(source)};
  for (std::size_t i = 1; i < window.size(); ++i) {
    const Tensor& f = window[i];
    parts.push_back(t.constant(Tensor({1, f.dim(0), f.dim(1)}, f.v)));
  }
  parts.push_back(newest);
  return nn::concat_channels(parts);
}

Generator::Forward Generator::forward(Tape& t, const ParamStore& ps, const Tensor& source,
                                      const std::vector<Tensor>& window,
                                      bool trainable) const {
  return forward_stack(t, ps, build_stack(t, source, window), trainable);
}

std::pair<Tensor, Tensor> Generator::generate_next_frame(
    const ParamStore& ps, const Tensor& source, const std::vector<Tensor>& window) const {
  Tape t(false);
  Forward f = forward(t, ps, source, window, false);
  const Tensor& frame = t.val(f.frame);
  const Tensor& att = t.val(f.attention);
  const int h = frame.dim(1), w = frame.dim(2);
  return {Tensor({h, w}, frame.v), Tensor({h, w}, att.v)};
}

std::pair<AngioVideo, std::vector<AttentionMap>> Generator::rollout(const ParamStore& ps,
                                                                    const Tensor& source,
                                                                    int frame_count) const {
  require(frame_count >= 1, "rollout", "frame_count must be >= 1");
  const int h = source.dim(1), w = source.dim(2);
  std::vector<Tensor> window(static_cast<std::size_t>(cfg_.window_size), Tensor({h, w}));
  AngioVideo video;
  std::vector<AttentionMap> attentions;
  for (int t = 0; t < frame_count; ++t) {
    auto [frame, att] = generate_next_frame(ps, source, window);
    window.erase(window.begin());
    window.push_back(frame);
    video.frames.push_back(std::move(frame));
    video.phase_tags.push_back(t * 3 < frame_count       ? Phase::arterial
                               : t * 3 < 2 * frame_count ? Phase::venous
                                                         : Phase::late);
    attentions.push_back({std::move(att)});
  }
  return {std::move(video), std::move(attentions)};
}

std::vector<Tensor> Generator::encode_stage_grids(const ParamStore& ps, const Tensor& source,
                                                  bool include_trunk) const {
  require(source.ndim() == 3 && source.dim(0) == 3, "shape", "source must be {3,H,W}");
  Tape t(false);
  const int h = source.dim(1), w = source.dim(2);
  // Same input layout as generation at t=0: zeros-filled previous frames.
  std::vector<Tensor> window(static_cast<std::size_t>(cfg_.window_size), Tensor({h, w}));
  auto stages = encoder_stages(t, ps, build_stack(t, source, window), false, include_trunk);
  std::vector<Tensor> grids;
  grids.reserve(stages.size());
  for (Var s : stages) grids.push_back(t.val(s));
  return grids;
}

EncoderFeatures Generator::encode(const ParamStore& ps, const Tensor& source) const {
  Tape t(false);
  const int h = source.dim(1), w = source.dim(2);
  std::vector<Tensor> window(static_cast<std::size_t>(cfg_.window_size), Tensor({h, w}));
  auto stages = encoder_stages(t, ps, build_stack(t, source, window), false);
  EncoderFeatures f;
  f.grid = t.val(stages.back());
  f.pooled = t.val(nn::global_avg_pool(stages.back()));
  return f;
}

std::int64_t Generator::encoder_parameter_count(const GeneratorConfig& cfg) {
  auto conv = [](std::int64_t o, std::int64_t c, std::int64_t k) { return o * c * k * k + o; };
  const int b = cfg.base_channels;
  std::int64_t n = conv(b, cfg.input_channels(), 7);
  for (int i = 0; i < cfg.downsample_stages; ++i) n += conv(b << (i + 1), b << i, 3);
  const std::int64_t bc = cfg.bottleneck_channels();
  n += 2 * cfg.residual_blocks * conv(bc, bc, 3);
  return n;
}

std::int64_t Generator::total_parameter_count(const GeneratorConfig& cfg) {
  auto conv = [](std::int64_t o, std::int64_t c, std::int64_t k) { return o * c * k * k + o; };
  std::int64_t n = encoder_parameter_count(cfg);
  const std::int64_t bc = cfg.bottleneck_channels();
  for (int i = 0; i < cfg.downsample_stages; ++i) n += conv((bc >> i) / 2, bc >> i, 3);
  n += conv(1, cfg.base_channels, 7);
  n += conv(1, cfg.base_channels, 3);
  return n;
}

// ----------------------------------------------------------- discriminators

DiscriminatorBank::DiscriminatorBank(DiscriminatorConfig cfg) : cfg_(cfg) {
  require(cfg_.scales >= 2, "config", "discriminator bank needs at least 2 scales");
}

void DiscriminatorBank::init_params(ParamStore& ps, std::uint64_t seed) const {
  Rng rng(derive_seed(seed, fnv1a("discriminator")));
  for (int s = 0; s < cfg_.scales; ++s) {
    const std::string scale = "disc.s" + std::to_string(s);
    int in = cfg_.input_channels;
    int out = cfg_.base_channels;
    for (int j = 0; j < 4; ++j) {
      init_conv(ps, rng, scale + ".conv" + std::to_string(j), out, in, 4);
      in = out;
      out *= 2;
    }
    init_conv(ps, rng, scale + ".head", 1, in, 3);
  }
}

std::vector<DiscriminatorBank::ScaleOut> DiscriminatorBank::forward(Tape& t, const ParamStore& ps,
                                                                    Var source, Var frame,
                                                                    Var mask,
                                                                    bool trainable) const {
  Var stack = nn::concat_channels({source, frame, mask});
  std::vector<ScaleOut> outs;
  for (int s = 0; s < cfg_.scales; ++s) {
    if (s > 0) stack = nn::avg_pool2x(stack);
    const std::string scale = "disc.s" + std::to_string(s);
    ScaleOut so;
    Var h = stack;
    for (int j = 0; j < 4; ++j) {
      h = conv_block(t, ps, scale + ".conv" + std::to_string(j), h, 2, 1, trainable);
      if (j > 0) h = nn::instance_norm(h);
      h = nn::leaky_relu(h, 0.2);
      so.features.push_back(h);
    }
    so.scores = conv_block(t, ps, scale + ".head", h, 1, 1, trainable);
    outs.push_back(std::move(so));
  }
  return outs;
}

std::vector<Tensor> DiscriminatorBank::discriminate(const ParamStore& ps, const Tensor& source,
                                                    const Tensor& frame,
                                                    const KnowledgeMask& mask) const {
  require(frame.ndim() == 2, "shape", "frame must be {H,W}");
  check_same_shape(frame, mask.map, "discriminate");
  Tape t(false);
  Var src = t.constant(source);
  Var frm = t.constant(Tensor({1, frame.dim(0), frame.dim(1)}, frame.v));
  Var msk = t.constant(Tensor({1, mask.map.dim(0), mask.map.dim(1)}, mask.map.v));
  auto outs = forward(t, ps, src, frm, msk, false);
  std::vector<Tensor> grids;
  for (const auto& so : outs) {
    const Tensor& g = t.val(so.scores);
    grids.push_back(Tensor({g.dim(1), g.dim(2)}, g.v));
  }
  return grids;
}

// -------------------------------------------------------------- checkpoints

namespace {

json gen_config_json(const GeneratorConfig& c) {
  return json{{"resolution", c.resolution},
              {"base_channels", c.base_channels},
              {"downsample_stages", c.downsample_stages},
              {"residual_blocks", c.residual_blocks},
              {"window_size", c.window_size},
              {"frame_count", c.frame_count}};
}

GeneratorConfig gen_config_from_json(const json& j) {
  GeneratorConfig c;
  c.resolution = j.at("resolution").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.downsample_stages = j.at("downsample_stages").get<int>();
  c.residual_blocks = j.at("residual_blocks").get<int>();
  c.window_size = j.at("window_size").get<int>();
  c.frame_count = j.at("frame_count").get<int>();
  return c;
}

constexpr char kMagic[8] = {'A', 'N', 'G', 'I', 'O', 'C', 'K', 'P'};

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ckpt) {
  json header;
  header["generator"] = gen_config_json(ckpt.gen);
  header["discriminator"] = json{{"scales", ckpt.disc.scales},
                                 {"base_channels", ckpt.disc.base_channels},
                                 {"input_channels", ckpt.disc.input_channels}};
  header["meta"] = ckpt.meta;
  json blobs = json::array();
  for (const auto& [name, tensor] : ckpt.params.t)
    blobs.push_back(json{{"name", name}, {"shape", tensor.shape}});
  header["blobs"] = blobs;

  std::ofstream out(file, std::ios::binary);
  require(out.good(), "io", "cannot write checkpoint: " + file.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  const std::string h = header.dump();
  const std::uint64_t hlen = h.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, tensor] : ckpt.params.t)
    out.write(reinterpret_cast<const char*>(tensor.v.data()),
              static_cast<std::streamsize>(tensor.v.size() * sizeof(double)));
  require(out.good(), "io", "checkpoint write failed: " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  require(in.good(), "missing_file", "cannot open checkpoint: " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  require(in.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof magic) == 0,
          "version_mismatch", "not a checkpoint file: " + file.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  require(version == kCheckpointVersion, "version_mismatch",
          "checkpoint format version " + std::to_string(version) + " unsupported (want " +
              std::to_string(kCheckpointVersion) + ")");
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof hlen);
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  require(static_cast<std::uint64_t>(in.gcount()) == hlen, "parse",
          "truncated checkpoint header");
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw Error("parse", std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ckpt;
  ckpt.gen = gen_config_from_json(header.at("generator"));
  ckpt.disc.scales = header.at("discriminator").at("scales").get<int>();
  ckpt.disc.base_channels = header.at("discriminator").at("base_channels").get<int>();
  ckpt.disc.input_channels = header.at("discriminator").at("input_channels").get<int>();
  if (header.contains("meta"))
    ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
  for (const auto& b : header.at("blobs")) {
    const auto name = b.at("name").get<std::string>();
    const auto shape = b.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    require(static_cast<std::size_t>(in.gcount()) == t.v.size() * sizeof(double), "parse",
            "truncated checkpoint blob: " + name);
    ckpt.params.create(name, std::move(t));
  }
  return ckpt;
}

}  // namespace angio
