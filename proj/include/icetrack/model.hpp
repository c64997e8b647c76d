#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icetrack/dataset.hpp"
#include "icetrack/errors.hpp"
#include "icetrack/nn/autograd.hpp"
#include "icetrack/rng.hpp"

namespace icetrack {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes little-endian hosts");

struct EncoderConfig {
  int input_size = 224;
  int patch_size = 16;
  int embed_dim = 64;

  // Patch features: raw pixels plus coordinate-weighted intensity moments
  // (mass, u*m, v*m, u^2*m, v^2*m, uv*m). The moments keep global blob
  // position and orientation linearly decodable after mean pooling; raw
  // pixels alone lose patch identity in the pooled token.
  static constexpr int kMomentFeatures = 6;

  int grid() const { return input_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size + kMomentFeatures; }

  void validate() const {
    if (input_size <= 0 || patch_size <= 0 || input_size % patch_size != 0)
      throw ConfigError("encoder input_size must be a positive multiple of patch_size");
    if (embed_dim < 8 || embed_dim % 2 != 0)
      throw ConfigError("embed_dim must be even and >= 8");
  }
};

struct ModelConfig {
  int n_frames = 5;
  EncoderConfig encoder;
  int n_layers = 8;
  int n_heads = 6;
  double mlp_ratio = 4.0;
  double dropout = 0.0;
  bool per_patch_tokens = false;
  bool angle_sincos = false;  // extension: angle head regresses [entry, sin rot, cos rot]

  int tokens_per_frame() const { return per_patch_tokens ? encoder.n_patches() : 1; }
  int token_count() const { return 1 + n_frames * tokens_per_frame() + 2; }
  int angle_dims() const { return angle_sincos ? 3 : 2; }
  int mlp_hidden() const { return int(encoder.embed_dim * mlp_ratio); }

  void validate() const {
    encoder.validate();
    if (n_frames < 2) throw ConfigError("n_frames must be >= 2");
    if (n_layers < 1 || n_heads < 1) throw ConfigError("layers and heads must be >= 1");
    if (encoder.embed_dim % n_heads != 0)
      throw ConfigError("embed_dim must be divisible by n_heads");
    if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"n_frames", n_frames},
            {"input_size", encoder.input_size},
            {"patch_size", encoder.patch_size},
            {"embed_dim", encoder.embed_dim},
            {"n_layers", n_layers},
            {"n_heads", n_heads},
            {"mlp_ratio", mlp_ratio},
            {"dropout", dropout},
            {"per_patch_tokens", per_patch_tokens},
            {"angle_sincos", angle_sincos}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_frames = j.at("n_frames").get<int>();
    c.encoder.input_size = j.at("input_size").get<int>();
    c.encoder.patch_size = j.at("patch_size").get<int>();
    c.encoder.embed_dim = j.at("embed_dim").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.per_patch_tokens = j.at("per_patch_tokens").get<bool>();
    c.angle_sincos = j.at("angle_sincos").get<bool>();
    c.validate();
    return c;
  }

  static ModelConfig from_config(const Config& cfg) {
    ModelConfig c;
    c.n_frames = int(cfg.get_i64("model.n_frames", 5));
    c.encoder.input_size = int(cfg.get_i64("model.input_size", 224));
    c.encoder.patch_size = int(cfg.get_i64("model.patch_size", 16));
    c.encoder.embed_dim = int(cfg.get_i64("model.embed_dim", 64));
    c.n_layers = int(cfg.get_i64("model.n_layers", 8));
    c.n_heads = int(cfg.get_i64("model.n_heads", 6));
    c.mlp_ratio = cfg.get_f64("model.mlp_ratio", 4.0);
    c.dropout = cfg.get_f64("model.dropout", 0.0);
    c.per_patch_tokens = cfg.get_bool("model.per_patch_tokens", false);
    c.angle_sincos = cfg.get_bool("model.angle_sincos", false);
    c.validate();
    return c;
  }
};

// Sequence regression network: pluggable image encoder feeding per-frame
// tokens, prior-state embedding tokens, a transformer encoder over
// [CLS, F_I, B_prior, A_prior], and two linear readout heads on CLS.
class TipStateModel {
 public:
  TipStateModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng rng(mix_seed(0x6d6f64656cull, seed));
    const int d = cfg_.encoder.embed_dim;
    const int pd = cfg_.encoder.patch_dim();
    const int hidden = cfg_.mlp_hidden();

    patch_w_ = params_.create("encoder.patch_w", pd, d, 1.0 / std::sqrt(double(pd)), rng);
    patch_b_ = params_.create_const("encoder.patch_b", 1, d, 0.0);
    patch_pos_ = params_.create("encoder.patch_pos", cfg_.encoder.n_patches(), d, 0.02, rng);
    mix_w_ = params_.create("encoder.mix_w", d, d, 1.0 / std::sqrt(double(d)), rng);
    mix_b_ = params_.create_const("encoder.mix_b", 1, d, 0.0);

    prior_box_w_ = params_.create("prior_box.w", 4, d, 0.5, rng);
    prior_box_b_ = params_.create_const("prior_box.b", 1, d, 0.0);
    prior_angle_w_ = params_.create("prior_angle.w", 2, d, 0.5, rng);
    prior_angle_b_ = params_.create_const("prior_angle.b", 1, d, 0.0);

    cls_ = params_.create("cls", 1, d, 0.02, rng);
    pos_ = params_.create("pos", cfg_.token_count(), d, 0.02, rng);

    const double ws = 1.0 / std::sqrt(double(d));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      Layer layer;
      const std::string p = "layer" + std::to_string(l) + ".";
      layer.ln1_g = params_.create_const(p + "ln1.g", 1, d, 1.0);
      layer.ln1_b = params_.create_const(p + "ln1.b", 1, d, 0.0);
      layer.wq = params_.create(p + "attn.wq", d, d, ws, rng);
      layer.bq = params_.create_const(p + "attn.bq", 1, d, 0.0);
      // no key bias: softmax is invariant to a per-row constant shift
      layer.wk = params_.create(p + "attn.wk", d, d, ws, rng);
      layer.wv = params_.create(p + "attn.wv", d, d, ws, rng);
      layer.bv = params_.create_const(p + "attn.bv", 1, d, 0.0);
      layer.wo = params_.create(p + "attn.wo", d, d, ws, rng);
      layer.bo = params_.create_const(p + "attn.bo", 1, d, 0.0);
      layer.ln2_g = params_.create_const(p + "ln2.g", 1, d, 1.0);
      layer.ln2_b = params_.create_const(p + "ln2.b", 1, d, 0.0);
      layer.mlp_w1 = params_.create(p + "mlp.w1", d, hidden, ws, rng);
      layer.mlp_b1 = params_.create_const(p + "mlp.b1", 1, hidden, 0.0);
      layer.mlp_w2 = params_.create(p + "mlp.w2", hidden, d, 1.0 / std::sqrt(double(hidden)), rng);
      layer.mlp_b2 = params_.create_const(p + "mlp.b2", 1, d, 0.0);
      layers_.push_back(layer);
    }
    final_ln_g_ = params_.create_const("final_ln.g", 1, d, 1.0);
    final_ln_b_ = params_.create_const("final_ln.b", 1, d, 0.0);
    head_box_w_ = params_.create("head_box.w", d, 4, ws, rng);
    head_box_b_ = params_.create_const("head_box.b", 1, 4, 0.0);
    head_angle_w_ = params_.create("head_angle.w", d, cfg_.angle_dims(), ws, rng);
    head_angle_b_ = params_.create_const("head_angle.b", 1, cfg_.angle_dims(), 0.0);
  }

  // Parameters are shared state; copying would alias them silently.
  TipStateModel(const TipStateModel&) = delete;
  TipStateModel& operator=(const TipStateModel&) = delete;
  TipStateModel(TipStateModel&&) = default;
  TipStateModel& operator=(TipStateModel&&) = default;

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t init_seed() const { return seed_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  void check_finite() const {
    if (!params_.all_finite()) throw NonFiniteParameters("model parameters are not finite");
  }

  // Splits an image into row-major patches, one patch per row.
  nn::Mat patchify(const Eigen::MatrixXd& img) const {
    const int s = cfg_.encoder.input_size;
    const int ps = cfg_.encoder.patch_size;
    if (img.rows() != s || img.cols() != s)
      throw ShapeMismatch("image must be " + std::to_string(s) + "x" + std::to_string(s) +
                          ", got " + std::to_string(img.rows()) + "x" +
                          std::to_string(img.cols()));
    const int g = cfg_.encoder.grid();
    nn::Mat out(cfg_.encoder.n_patches(), cfg_.encoder.patch_dim());
    for (int py = 0; py < g; ++py) {
      for (int px = 0; px < g; ++px) {
        double mass = 0.0;
        for (int r = 0; r < ps; ++r)
          for (int c = 0; c < ps; ++c) {
            const double v = img(py * ps + r, px * ps + c);
            out(py * g + px, r * ps + c) = v;
            mass += v;
          }
        mass /= double(ps * ps);
        const double uc = (px + 0.5) / g * 2.0 - 1.0;  // patch center, [-1,1]
        const double vc = (py + 0.5) / g * 2.0 - 1.0;
        const int o = ps * ps;
        out(py * g + px, o + 0) = mass;
        out(py * g + px, o + 1) = uc * mass;
        out(py * g + px, o + 2) = vc * mass;
        out(py * g + px, o + 3) = uc * uc * mass;
        out(py * g + px, o + 4) = vc * vc * mass;
        out(py * g + px, o + 5) = uc * vc * mass;
      }
    }
    return out;
  }

  // Foundation-model stand-in: per-patch nonlinear features pooled to one
  // token per frame (or left per-patch).
  std::vector<nn::Var> encode_images(const std::vector<Eigen::MatrixXd>& images) const {
    if (int(images.size()) != cfg_.n_frames)
      throw ShapeMismatch("expected " + std::to_string(cfg_.n_frames) + " frames, got " +
                          std::to_string(images.size()));
    std::vector<nn::Var> tokens;
    for (const auto& img : images) {
      nn::Var x = nn::Var::constant(patchify(img));
      nn::Var h = nn::add(nn::add_rowvec(nn::matmul(x, patch_w_), patch_b_), patch_pos_);
      nn::Var feat = nn::add_rowvec(nn::matmul(nn::gelu(h), mix_w_), mix_b_);
      tokens.push_back(cfg_.per_patch_tokens ? feat : nn::mean_rows(feat));
    }
    return tokens;
  }

  // Linear projections of the prior state into the token space.
  std::pair<nn::Var, nn::Var> embed_prior(const Vec6& prior) const {
    nn::Mat box(1, 4), angle(1, 2);
    box << prior[0], prior[1], prior[2], prior[3];
    angle << prior[4], prior[5];
    nn::Var box_tok = nn::add_rowvec(nn::matmul(nn::Var::constant(box), prior_box_w_), prior_box_b_);
    nn::Var angle_tok =
        nn::add_rowvec(nn::matmul(nn::Var::constant(angle), prior_angle_w_), prior_angle_b_);
    return {box_tok, angle_tok};
  }

  // [CLS, F_I, B_prior, A_prior] with learned positions added.
  nn::Var assemble_tokens(const std::vector<Eigen::MatrixXd>& images, const Vec6& prior) const {
    std::vector<nn::Var> parts;
    parts.push_back(cls_);
    for (auto& t : encode_images(images)) parts.push_back(t);
    auto [box_tok, angle_tok] = embed_prior(prior);
    parts.push_back(box_tok);
    parts.push_back(angle_tok);
    return nn::add(nn::concat_rows(parts), pos_);
  }

  // Transformer encoder over embedded tokens; CLS readout into both heads.
  std::pair<nn::Var, nn::Var> forward_tokens(nn::Var x, Rng* dropout_rng = nullptr) const {
    const int d = cfg_.encoder.embed_dim;
    const int dh = d / cfg_.n_heads;
    const double att_scale = 1.0 / std::sqrt(double(dh));
    for (const auto& layer : layers_) {
      nn::Var h = nn::layernorm_rows(x, layer.ln1_g, layer.ln1_b);
      nn::Var q = nn::add_rowvec(nn::matmul(h, layer.wq), layer.bq);
      nn::Var k = nn::matmul(h, layer.wk);
      nn::Var v = nn::add_rowvec(nn::matmul(h, layer.wv), layer.bv);
      std::vector<nn::Var> heads;
      for (int hd = 0; hd < cfg_.n_heads; ++hd) {
        nn::Var qh = nn::slice_cols(q, hd * dh, dh);
        nn::Var kh = nn::slice_cols(k, hd * dh, dh);
        nn::Var vh = nn::slice_cols(v, hd * dh, dh);
        nn::Var attn = nn::softmax_rows(nn::scale(nn::matmul_nt(qh, kh), att_scale));
        heads.push_back(nn::matmul(attn, vh));
      }
      nn::Var proj = nn::add_rowvec(nn::matmul(nn::concat_cols(heads), layer.wo), layer.bo);
      if (dropout_rng && cfg_.dropout > 0.0) proj = nn::dropout(proj, cfg_.dropout, *dropout_rng);
      x = nn::add(x, proj);

      nn::Var h2 = nn::layernorm_rows(x, layer.ln2_g, layer.ln2_b);
      nn::Var m = nn::add_rowvec(
          nn::matmul(nn::gelu(nn::add_rowvec(nn::matmul(h2, layer.mlp_w1), layer.mlp_b1)),
                     layer.mlp_w2),
          layer.mlp_b2);
      if (dropout_rng && cfg_.dropout > 0.0) m = nn::dropout(m, cfg_.dropout, *dropout_rng);
      x = nn::add(x, m);
    }
    nn::Var cls_out =
        nn::slice_rows(nn::layernorm_rows(x, final_ln_g_, final_ln_b_), 0, 1);
    nn::Var b_hat = nn::add_rowvec(nn::matmul(cls_out, head_box_w_), head_box_b_);
    nn::Var a_hat = nn::add_rowvec(nn::matmul(cls_out, head_angle_w_), head_angle_b_);
    return {b_hat, a_hat};
  }

  std::pair<nn::Var, nn::Var> forward(const WindowTensors& w, Rng* dropout_rng = nullptr) const {
    return forward_tokens(assemble_tokens(w.images, w.prior), dropout_rng);
  }

  // Angle regression target in head coordinates.
  Eigen::RowVectorXd angle_target(const Vec6& state) const {
    Eigen::RowVectorXd t(cfg_.angle_dims());
    if (cfg_.angle_sincos) {
      const double rot = state[5] * kPi;  // normalized rot * pi = radians
      t << state[4], std::sin(rot), std::cos(rot);
    } else {
      t << state[4], state[5];
    }
    return t;
  }

  // l_total = MSE over box dims + MSE over angle dims, unweighted sum.
  nn::Var loss(const nn::Var& b_hat, const nn::Var& a_hat, const Vec6& target) const {
    Eigen::RowVector4d bt(target[0], target[1], target[2], target[3]);
    return nn::add_scalars(nn::mse(b_hat, bt), nn::mse(a_hat, angle_target(target)));
  }

  // Mean loss over a batch; one graph, evaluated window by window. Blown-up
  // parameters surface as a non-finite loss value, which the training loop
  // reports with its batch identifier.
  nn::Var batch_loss(std::span<const WindowTensors> batch, Rng* dropout_rng = nullptr) const {
    if (batch.empty()) throw EmptyInput("empty batch");
    nn::Var total;
    for (const auto& w : batch) {
      auto [b_hat, a_hat] = forward(w, dropout_rng);
      nn::Var l = loss(b_hat, a_hat, w.target);
      total = total.defined() ? nn::add_scalars(total, l) : l;
    }
    return nn::scale(total, 1.0 / double(batch.size()));
  }

  // Plain-value prediction as a normalized state vector.
  Vec6 predict(const WindowTensors& w) const {
    check_finite();
    auto [b_hat, a_hat] = forward(w);
    return decode(b_hat.value(), a_hat.value());
  }

  Vec6 decode(const nn::Mat& b_hat, const nn::Mat& a_hat) const {
    Vec6 out;
    out[0] = b_hat(0, 0);
    out[1] = b_hat(0, 1);
    out[2] = b_hat(0, 2);
    out[3] = b_hat(0, 3);
    if (cfg_.angle_sincos) {
      out[4] = a_hat(0, 0);
      out[5] = std::atan2(a_hat(0, 1), a_hat(0, 2)) / kPi;
    } else {
      out[4] = a_hat(0, 0);
      out[5] = a_hat(0, 1);
    }
    return out;
  }

  // --- checkpoints -------------------------------------------------------
  // "ICKP" | u32 major | u32 minor | u64 header_len | header JSON | f64 data

  static constexpr std::uint32_t kFormatMajor = 1;
  static constexpr std::uint32_t kFormatMinor = 0;

  void save_checkpoint(const std::filesystem::path& path, int epoch,
                       const nlohmann::json& extra = {}) const {
    nlohmann::json header;
    header["model"] = cfg_.to_json();
    header["seed"] = seed_;
    header["epoch"] = epoch;
    header["extra"] = extra;
    auto plist = nlohmann::json::array();
    for (const auto& [name, v] : params_.items())
      plist.push_back({{"name", name}, {"rows", v.rows()}, {"cols", v.cols()}});
    header["params"] = plist;
    const std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IOFailure("cannot write checkpoint: " + path.string());
    out.write("ICKP", 4);
    const std::uint32_t major = kFormatMajor, minor = kFormatMinor;
    out.write(reinterpret_cast<const char*>(&major), 4);
    out.write(reinterpret_cast<const char*>(&minor), 4);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, v] : params_.items()) {
      // row-major element order, independent of Eigen's storage layout
      for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = 0; j < v.cols(); ++j) {
          const double d = v.value()(i, j);
          out.write(reinterpret_cast<const char*>(&d), 8);
        }
    }
    if (!out) throw IOFailure("checkpoint write failed: " + path.string());
  }

  static TipStateModel load_checkpoint(const std::filesystem::path& path,
                                       nlohmann::json* meta_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFile("missing checkpoint: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "ICKP", 4) != 0)
      throw CheckpointVersionMismatch("not a checkpoint file: " + path.string());
    std::uint32_t major = 0, minor = 0;
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&major), 4);
    in.read(reinterpret_cast<char*>(&minor), 4);
    in.read(reinterpret_cast<char*>(&hlen), 8);
    if (major != kFormatMajor)
      throw CheckpointVersionMismatch("checkpoint format " + std::to_string(major) + "." +
                                      std::to_string(minor) + ", this build reads " +
                                      std::to_string(kFormatMajor) + ".x");
    std::string hs(hlen, '\0');
    in.read(hs.data(), std::streamsize(hlen));
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
      throw CheckpointVersionMismatch("corrupt checkpoint header: " + std::string(e.what()));
    }

    TipStateModel model(ModelConfig::from_json(header.at("model")),
                        header.at("seed").get<std::uint64_t>());
    const auto& plist = header.at("params");
    if (plist.size() != model.params_.items().size())
      throw CheckpointVersionMismatch("checkpoint parameter list does not match the model");
    for (std::size_t i = 0; i < plist.size(); ++i) {
      auto& [name, v] = model.params_.items()[i];
      const auto& meta = plist[i];
      if (meta.at("name").get<std::string>() != name ||
          meta.at("rows").get<Eigen::Index>() != v.rows() ||
          meta.at("cols").get<Eigen::Index>() != v.cols())
        throw CheckpointVersionMismatch("checkpoint tensor '" +
                                        meta.at("name").get<std::string>() +
                                        "' does not match model parameter '" + name + "'");
      for (Eigen::Index r = 0; r < v.rows(); ++r)
        for (Eigen::Index c = 0; c < v.cols(); ++c) {
          double d = 0.0;
          in.read(reinterpret_cast<char*>(&d), 8);
          v.value()(r, c) = d;
        }
    }
    if (!in) throw CheckpointVersionMismatch("checkpoint truncated: " + path.string());
    if (meta_out) *meta_out = header;
    return model;
  }

 private:
  struct Layer {
    nn::Var ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo;
    nn::Var ln2_g, ln2_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  ModelConfig cfg_;
  std::uint64_t seed_;
  nn::ParamStore params_;
  nn::Var patch_w_, patch_b_, patch_pos_, mix_w_, mix_b_;
  nn::Var prior_box_w_, prior_box_b_, prior_angle_w_, prior_angle_b_;
  nn::Var cls_, pos_;
  std::vector<Layer> layers_;
  nn::Var final_ln_g_, final_ln_b_;
  nn::Var head_box_w_, head_box_b_, head_angle_w_, head_angle_b_;
};

}  // namespace icetrack
