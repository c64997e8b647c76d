#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "icetrack/dataset.hpp"
#include "icetrack/model.hpp"

namespace icetrack {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 6;
  double lr = 1e-4;
  int lr_step_epoch = 0;        // 0 = constant lr
  double lr_step_factor = 0.3;  // multiplier applied at lr_step_epoch
  std::uint64_t seed = 0;
  bool encoder_frozen = false;
  int checkpoint_every = 0;     // extra snapshots every k epochs; 0 = best/last only
  int early_stop_patience = 0;  // 0 = disabled
  double grad_clip_norm = 1.0;
  // Teacher-forced prior jitter. Box dims get the base std plus an
  // occasional heavy draw (covers autoregressive drift); entry and rotation
  // get their own scales. Rotation noise must stay well under 90 deg
  // normalized (0.5): the image fixes rotation only modulo 180, the prior
  // carries the branch, and a sign-scrambled prior turns the rotation loss
  // into gradient noise for the whole trunk.
  double prior_noise_std = 0.0;        // box dims, base
  double prior_noise_heavy_std = 0.0;  // box dims, occasional
  double prior_noise_heavy_p = 0.25;
  double prior_noise_entry_std = 0.0;        // symmetric; keep small (sign carrier)
  double prior_noise_entry_heavy_std = 0.0;  // magnitude-only, sign preserved
  double prior_noise_rot_std = 0.0;
  double prior_noise_rot_heavy_std = 0.0;  // keep under 0.5 (90 deg)
  bool scheduled_sampling = false;  // replace some priors with model output
  double scheduled_sampling_p = 0.25;

  void validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (prior_noise_std < 0.0 || prior_noise_heavy_std < 0.0 || prior_noise_entry_std < 0.0 ||
        prior_noise_rot_std < 0.0 || prior_noise_entry_heavy_std < 0.0 ||
        prior_noise_rot_heavy_std < 0.0)
      throw ConfigError("prior noise stds must be >= 0");
    if (prior_noise_heavy_p < 0.0 || prior_noise_heavy_p > 1.0)
      throw ConfigError("prior_noise_heavy_p must lie in [0, 1]");
    if (scheduled_sampling_p < 0.0 || scheduled_sampling_p > 1.0)
      throw ConfigError("scheduled_sampling_p must lie in [0, 1]");
  }

  static TrainConfig from_config(const Config& cfg) {
    TrainConfig t;
    t.epochs = int(cfg.get_i64("train.epochs", 30));
    t.batch_size = int(cfg.get_i64("train.batch_size", 6));
    t.lr = cfg.get_f64("train.lr", 1e-4);
    t.lr_step_epoch = int(cfg.get_i64("train.lr_step_epoch", 0));
    t.lr_step_factor = cfg.get_f64("train.lr_step_factor", 0.3);
    t.seed = cfg.get_u64("train.seed", 0);
    t.encoder_frozen = cfg.get_bool("train.encoder_frozen", false);
    t.checkpoint_every = int(cfg.get_i64("train.checkpoint_every", 0));
    t.early_stop_patience = int(cfg.get_i64("train.early_stop_patience", 0));
    t.grad_clip_norm = cfg.get_f64("train.grad_clip_norm", 1.0);
    t.prior_noise_std = cfg.get_f64("train.prior_noise_std", 0.0);
    t.prior_noise_heavy_std = cfg.get_f64("train.prior_noise_heavy_std", 0.0);
    t.prior_noise_heavy_p = cfg.get_f64("train.prior_noise_heavy_p", 0.25);
    t.prior_noise_entry_std = cfg.get_f64("train.prior_noise_entry_std", 0.0);
    t.prior_noise_entry_heavy_std = cfg.get_f64("train.prior_noise_entry_heavy_std", 0.0);
    t.prior_noise_rot_std = cfg.get_f64("train.prior_noise_rot_std", 0.0);
    t.prior_noise_rot_heavy_std = cfg.get_f64("train.prior_noise_rot_heavy_std", 0.0);
    t.scheduled_sampling = cfg.get_bool("train.scheduled_sampling", false);
    t.scheduled_sampling_p = cfg.get_f64("train.scheduled_sampling_p", 0.25);
    t.validate();
    return t;
  }
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_s = 0.0;
};

// Teacher-forced prior augmentation; also applied to the validation priors
// so checkpoint selection scores the objective actually being trained.
inline void apply_prior_noise(WindowTensors& wt, const TrainConfig& tc, Rng& rng) {
  double box_std = tc.prior_noise_std;
  double rot_std = tc.prior_noise_rot_std;
  bool heavy = false;
  if (tc.prior_noise_heavy_std > 0.0 && rng.uniform() < tc.prior_noise_heavy_p) {
    heavy = true;
    box_std = tc.prior_noise_heavy_std;
    rot_std = std::max(rot_std, tc.prior_noise_rot_heavy_std);
  }
  for (int d = 0; d < 4; ++d) wt.prior[d] += rng.normal() * box_std;
  // the image cannot see the entry sign, only |entry|; heavy jitter
  // perturbs the magnitude and leaves the sign to the prior
  wt.prior[4] += rng.normal() * tc.prior_noise_entry_std;
  if (heavy && tc.prior_noise_entry_heavy_std > 0.0) {
    const double sign = wt.prior[4] < 0.0 ? -1.0 : 1.0;
    wt.prior[4] = sign * std::clamp(std::abs(wt.prior[4]) +
                                        rng.normal() * tc.prior_noise_entry_heavy_std,
                                    0.0, 1.0);
  }
  wt.prior[5] += rng.normal() * rot_std;
  wt.prior = clamp_state(wt.prior);
}

struct TrainLog {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  std::string config_hash;

  void write_jsonl(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IOFailure("cannot write train log: " + path.string());
    for (const auto& e : epochs) {
      nlohmann::json j{{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"wall_s", e.wall_s},
                       {"seed", seed},
                       {"config_hash", config_hash}};
      out << j.dump() << '\n';
    }
    nlohmann::json tail{{"best_epoch", best_epoch}, {"best_val_loss", best_val_loss}};
    out << tail.dump() << '\n';
  }
};

// Adam with decoupled global-norm gradient clipping.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // `trainable` filters parameter names (frozen-encoder mode).
  void step(nn::ParamStore& params, double clip_norm,
            const std::function<bool(const std::string&)>& trainable = nullptr) {
    if (m_.empty()) {
      for (const auto& [name, v] : params.items()) {
        m_.push_back(nn::Mat::Zero(v.rows(), v.cols()));
        v_.push_back(nn::Mat::Zero(v.rows(), v.cols()));
      }
    }
    ++t_;
    double scale = 1.0;
    if (clip_norm > 0.0) {
      const double norm = params.grad_norm();
      if (norm > clip_norm) scale = clip_norm / norm;
    }
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.items().size(); ++i) {
      auto& [name, var] = params.items()[i];
      if (trainable && !trainable(name)) continue;
      if (var.node()->grad.size() == 0) continue;
      const nn::Mat g = var.node()->grad * scale;
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
      const nn::Mat m_hat = m_[i] / bc1;
      const nn::Mat v_hat = v_[i] / bc2;
      var.value() -= lr_ * (m_hat.array() / (v_hat.array().sqrt() + eps_)).matrix();
    }
  }

  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<nn::Mat> m_, v_;
};

// Teacher-forced mean loss over a window set; no parameter mutation.
inline double validate_loss(const TipStateModel& model, std::span<const WindowTensors> windows) {
  if (windows.empty()) throw EmptyInput("no validation windows");
  double total = 0.0;
  for (const auto& w : windows) {
    auto [b_hat, a_hat] = model.forward(w);
    total += model.loss(b_hat, a_hat, w.target).value()(0, 0);
  }
  return total / double(windows.size());
}

// Same reduction with an arbitrary state function; lets tests plug in
// ground-truth-emitting doubles.
inline double validate_loss_with(const std::function<Vec6(const WindowTensors&)>& predict,
                                 const TipStateModel& model,
                                 std::span<const WindowTensors> windows) {
  if (windows.empty()) throw EmptyInput("no validation windows");
  double total = 0.0;
  for (const auto& w : windows) {
    const Vec6 p = predict(w);
    Eigen::RowVector4d bt(w.target[0], w.target[1], w.target[2], w.target[3]);
    Eigen::RowVector4d bp(p[0], p[1], p[2], p[3]);
    const Eigen::RowVectorXd at = model.angle_target(w.target);
    const Eigen::RowVectorXd ap = model.angle_target(p);
    total += (bp - bt).squaredNorm() / 4.0 + (ap - at).squaredNorm() / double(at.size());
  }
  return total / double(windows.size());
}

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  TrainLog log;
};

inline std::vector<SequenceWindow> collect_windows(const std::vector<SequenceRecord>& seqs,
                                                   int n) {
  std::vector<SequenceWindow> out;
  for (const auto& s : seqs) {
    if (int(s.frames.size()) < n) continue;
    auto w = window(s, n);
    out.insert(out.end(), w.begin(), w.end());
  }
  return out;
}

// Deterministic training loop. Priors come from ground truth (teacher
// forcing); prior_noise_std jitters them, scheduled sampling optionally
// swaps some for the model's own (detached) estimate of the same frame.
inline TrainResult train(const DatasetView& data, const ModelConfig& mc, const TrainConfig& tc,
                         const std::filesystem::path& out_dir,
                         const std::string& config_hash = "") {
  tc.validate();
  mc.validate();
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  const auto train_seqs = data.load_split("train");
  const auto val_seqs = data.load_split("val");
  std::vector<SequenceWindow> train_windows = collect_windows(train_seqs, mc.n_frames);
  const std::vector<SequenceWindow> val_windows = collect_windows(val_seqs, mc.n_frames);
  if (train_windows.empty()) throw EmptyInput("training split yields no windows");
  if (val_windows.empty()) throw EmptyInput("validation split yields no windows");

  FrameCache cache(mc.encoder.input_size);
  std::vector<WindowTensors> val_tensors;
  val_tensors.reserve(val_windows.size());
  Rng val_noise_rng(mix_seed(tc.seed, 0x76616c6eull));
  for (const auto& w : val_windows) {
    WindowTensors wt = materialize(w, cache);
    apply_prior_noise(wt, tc, val_noise_rng);  // fixed draw, comparable across epochs
    val_tensors.push_back(std::move(wt));
  }

  TipStateModel model(mc, tc.seed);
  Adam opt(tc.lr);
  const auto trainable = [&](const std::string& name) {
    return !(tc.encoder_frozen && name.rfind("encoder.", 0) == 0);
  };

  TrainResult result;
  result.log.seed = tc.seed;
  result.log.config_hash = config_hash;
  result.best_checkpoint = out_dir / "best.ckpt";
  result.last_checkpoint = out_dir / "last.ckpt";

  Rng shuffle_rng(mix_seed(tc.seed, 0x73687566ull));
  Rng noise_rng(mix_seed(tc.seed, 0x6e6f6973ull));
  Rng dropout_rng(mix_seed(tc.seed, 0x64726f70ull));
  Rng sampling_rng(mix_seed(tc.seed, 0x73616d70ull));
  int epochs_since_best = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (tc.lr_step_epoch > 0 && epoch == tc.lr_step_epoch)
      opt.set_lr(tc.lr * tc.lr_step_factor);

    // seeded Fisher-Yates, stable batch order for a given seed
    for (std::size_t i = train_windows.size(); i > 1; --i)
      std::swap(train_windows[i - 1], train_windows[shuffle_rng.below(i)]);

    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t b0 = 0; b0 < train_windows.size(); b0 += std::size_t(tc.batch_size)) {
      const std::size_t bn = std::min(train_windows.size() - b0, std::size_t(tc.batch_size));
      std::vector<WindowTensors> batch;
      batch.reserve(bn);
      for (std::size_t k = 0; k < bn; ++k) {
        WindowTensors wt = materialize(train_windows[b0 + k], cache);
        if (tc.scheduled_sampling && train_windows[b0 + k].start > 0 &&
            sampling_rng.uniform() < tc.scheduled_sampling_p) {
          SequenceWindow prev = train_windows[b0 + k];
          prev.start -= 1;
          bool prev_ok = true;
          for (int f = 0; f < prev.n; ++f)
            if (!prev.frame(f).annotation.visible) prev_ok = false;
          if (prev_ok) wt.prior = clamp_state(model.predict(materialize(prev, cache)));
        }
        apply_prior_noise(wt, tc, noise_rng);
        batch.push_back(std::move(wt));
      }
      nn::Var loss = model.batch_loss(std::span<const WindowTensors>(batch),
                                      mc.dropout > 0.0 ? &dropout_rng : nullptr);
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv))
        throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                            std::to_string(b0 / std::size_t(tc.batch_size)) + " (first sequence " +
                            batch.front().sequence_id + ")");
      nn::backward(loss);
      opt.step(model.params(), tc.grad_clip_norm, trainable);
      epoch_loss += lv * double(bn);
      seen += bn;
    }
    epoch_loss /= double(seen);

    const double val = validate_loss(model, val_tensors);
    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back({epoch, epoch_loss, val, wall});
    if (!std::isfinite(val))
      throw NonFiniteLoss("non-finite validation loss at epoch " + std::to_string(epoch));

    if (val < result.log.best_val_loss) {
      result.log.best_val_loss = val;
      result.log.best_epoch = epoch;
      epochs_since_best = 0;
      model.save_checkpoint(result.best_checkpoint, epoch,
                            {{"val_loss", val}, {"config_hash", config_hash}});
    } else {
      ++epochs_since_best;
    }
    if (tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0)
      model.save_checkpoint(out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), epoch,
                            {{"val_loss", val}});
    if (tc.early_stop_patience > 0 && epochs_since_best >= tc.early_stop_patience) break;
  }

  model.save_checkpoint(result.last_checkpoint,
                        result.log.epochs.empty() ? 0 : result.log.epochs.back().epoch,
                        {{"config_hash", config_hash}});
  result.log.write_jsonl(out_dir / "train_log.jsonl");
  return result;
}

// Loads a checkpoint and reports teacher-forced loss on a split.
inline double validate(const std::filesystem::path& checkpoint, const DatasetView& data,
                       const std::string& split) {
  const TipStateModel model = TipStateModel::load_checkpoint(checkpoint);
  const auto seqs = data.load_split(split);
  const auto windows = collect_windows(seqs, model.config().n_frames);
  if (windows.empty()) throw EmptyInput("split '" + split + "' yields no windows");
  FrameCache cache(model.config().encoder.input_size);
  std::vector<WindowTensors> tensors;
  tensors.reserve(windows.size());
  for (const auto& w : windows) tensors.push_back(materialize(w, cache));
  return validate_loss(model, tensors);
}

}  // namespace icetrack
