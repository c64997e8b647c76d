#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "icetrack/dataset.hpp"
#include "icetrack/image.hpp"
#include "icetrack/model.hpp"
#include "icetrack/png_io.hpp"

namespace icetrack {

// Overlay palette, matching the paper's presentation: target blue,
// prediction orange.
inline constexpr std::array<std::uint8_t, 3> kTargetColor{70, 130, 240};
inline constexpr std::array<std::uint8_t, 3> kPredictedColor{255, 140, 0};

// Anything that maps a window to a normalized state estimate.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Vec6 predict(const WindowTensors& w) = 0;
  virtual std::string name() const = 0;
};

class ModelPredictor : public Predictor {
 public:
  explicit ModelPredictor(const TipStateModel& model) : model_(&model) {}
  Vec6 predict(const WindowTensors& w) override { return model_->predict(w); }
  std::string name() const override { return "model"; }

 private:
  const TipStateModel* model_;
};

// Floor baseline: repeats the prior state unchanged.
class PriorCopyPredictor : public Predictor {
 public:
  Vec6 predict(const WindowTensors& w) override { return w.prior; }
  std::string name() const override { return "prior-copy"; }
};

// Test double that emits the ground-truth target; pipeline identity checks.
class OraclePredictor : public Predictor {
 public:
  Vec6 predict(const WindowTensors& w) override { return w.target; }
  std::string name() const override { return "oracle"; }
};

enum class Bootstrap { ground_truth_first, zeros };

struct FrameState {
  int frame_index = 0;
  Vec6 state = Vec6::Zero();
  bool visible = true;  // targets only; predictions always exist

  BoundingBox box() const { return denormalize_state(state).first.sanitized(); }
  IncidentAngle angle() const { return denormalize_state(state).second; }
};

struct RolloutResult {
  std::string sequence_id;
  std::string split;
  Bootstrap bootstrap = Bootstrap::ground_truth_first;
  std::vector<FrameState> predictions;
  std::vector<FrameState> targets;
};

// Autoregressive evaluation: the first window takes its prior from the
// bootstrap mode, every later window takes the model's previous output.
// Ground truth is never read after bootstrap.
inline RolloutResult rollout(Predictor& predictor, const SequenceRecord& seq, FrameCache& cache,
                             int n, Bootstrap mode) {
  const int len = int(seq.frames.size());
  if (len < n + 1)
    throw TooShort("sequence '" + seq.id + "' has " + std::to_string(len) +
                   " frames; rollout needs at least " + std::to_string(n + 1));

  RolloutResult out;
  out.sequence_id = seq.id;
  out.split = seq.split;
  out.bootstrap = mode;

  Vec6 prior = Vec6::Zero();
  if (mode == Bootstrap::ground_truth_first) {
    const auto& boot = seq.frames[std::size_t(n - 2)].annotation;
    if (boot.visible) prior = normalize_state(boot.box, boot.angle);
  }

  for (int s = 0; s + n <= len; ++s) {
    WindowTensors w;
    w.sequence_id = seq.id;
    w.target_frame_index = seq.frames[std::size_t(s + n - 1)].frame_index;
    for (int k = 0; k < n; ++k) w.images.push_back(cache.get(seq.frames[std::size_t(s + k)].image_path));
    w.prior = prior;
    const auto& gt = seq.frames[std::size_t(s + n - 1)].annotation;
    if (gt.visible) w.target = normalize_state(gt.box, gt.angle);

    const Vec6 pred = predictor.predict(w);
    out.predictions.push_back({w.target_frame_index, pred, true});
    out.targets.push_back({w.target_frame_index, w.target, gt.visible});
    prior = clamp_state(pred);
  }
  return out;
}

struct SequenceMetrics {
  std::string sequence_id;
  int n_frames = 0;
  double entry_err_mean = 0.0;
  double rot_err_mean = 0.0;
  double iou_mean = 0.0;
};

struct MetricsReport {
  double entry_err_mean = 0.0, entry_err_std = 0.0;
  double rot_err_mean = 0.0, rot_err_std = 0.0;
  double iou_mean = 0.0;
  int n_frames = 0;
  std::vector<SequenceMetrics> per_sequence;
  double throughput_hz = 0.0;  // filled by the bench path when run
  std::string config_hash;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["entry_err_mean"] = entry_err_mean;
    j["entry_err_std"] = entry_err_std;
    j["rot_err_mean"] = rot_err_mean;
    j["rot_err_std"] = rot_err_std;
    j["iou_mean"] = iou_mean;
    j["n_frames"] = n_frames;
    j["throughput_hz"] = throughput_hz;
    j["config_hash"] = config_hash;
    j["per_sequence"] = nlohmann::json::array();
    for (const auto& s : per_sequence)
      j["per_sequence"].push_back({{"sequence_id", s.sequence_id},
                                   {"n_frames", s.n_frames},
                                   {"entry_err_mean", s.entry_err_mean},
                                   {"rot_err_mean", s.rot_err_mean},
                                   {"iou_mean", s.iou_mean}});
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.entry_err_mean = j.at("entry_err_mean").get<double>();
    r.entry_err_std = j.at("entry_err_std").get<double>();
    r.rot_err_mean = j.at("rot_err_mean").get<double>();
    r.rot_err_std = j.at("rot_err_std").get<double>();
    r.iou_mean = j.at("iou_mean").get<double>();
    r.n_frames = j.at("n_frames").get<int>();
    r.throughput_hz = j.value("throughput_hz", 0.0);
    r.config_hash = j.value("config_hash", "");
    for (const auto& js : j.at("per_sequence"))
      r.per_sequence.push_back({js.at("sequence_id").get<std::string>(),
                                js.at("n_frames").get<int>(),
                                js.at("entry_err_mean").get<double>(),
                                js.at("rot_err_mean").get<double>(),
                                js.at("iou_mean").get<double>()});
    return r;
  }
};

// Frame-level pooling over every evaluable frame, plus a per-sequence
// breakdown. Angle errors are circular; IoU uses sanitized predicted boxes.
inline MetricsReport metrics(const std::vector<RolloutResult>& results) {
  if (results.empty()) throw EmptyInput("no rollout results");
  MetricsReport rep;
  std::vector<double> entry_errs, rot_errs, ious;
  for (const auto& r : results) {
    SequenceMetrics sm;
    sm.sequence_id = r.sequence_id;
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
      if (!r.targets[i].visible) continue;
      const auto [pbox, pang] = denormalize_state(r.predictions[i].state);
      const auto [tbox, tang] = denormalize_state(r.targets[i].state);
      const double ee = angular_error_deg(pang.entry_deg, tang.entry_deg);
      const double re = angular_error_deg(pang.rot_deg, tang.rot_deg);
      const double ii = iou(pbox.sanitized(), tbox);
      entry_errs.push_back(ee);
      rot_errs.push_back(re);
      ious.push_back(ii);
      sm.entry_err_mean += ee;
      sm.rot_err_mean += re;
      sm.iou_mean += ii;
      ++sm.n_frames;
    }
    if (sm.n_frames > 0) {
      sm.entry_err_mean /= sm.n_frames;
      sm.rot_err_mean /= sm.n_frames;
      sm.iou_mean /= sm.n_frames;
    }
    rep.per_sequence.push_back(sm);
  }
  if (entry_errs.empty()) throw EmptyInput("no evaluable frames (all targets invisible)");

  const auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  const auto std_of = [&](const std::vector<double>& v, double mu) {
    double s = 0.0;
    for (double x : v) s += (x - mu) * (x - mu);
    return std::sqrt(s / double(v.size()));
  };
  rep.n_frames = int(entry_errs.size());
  rep.entry_err_mean = mean_of(entry_errs);
  rep.entry_err_std = std_of(entry_errs, rep.entry_err_mean);
  rep.rot_err_mean = mean_of(rot_errs);
  rep.rot_err_std = std_of(rot_errs, rep.rot_err_mean);
  rep.iou_mean = mean_of(ious);
  return rep;
}

struct ThroughputStats {
  double hz = 0.0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  int n_iters = 0;
};

// Deterministic synthetic window for benchmarking.
inline WindowTensors synthetic_window(const ModelConfig& mc) {
  WindowTensors w;
  w.sequence_id = "bench";
  const int s = mc.encoder.input_size;
  for (int k = 0; k < mc.n_frames; ++k) {
    Eigen::MatrixXd img(s, s);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        img(y, x) = 0.5 + 0.5 * std::sin(0.37 * x + 0.19 * y + 0.11 * k);
    w.images.push_back(img);
  }
  w.prior.setConstant(0.1);
  return w;
}

// Steady-state single-window latency; warmup iterations are excluded.
inline ThroughputStats throughput(Predictor& predictor, const ModelConfig& mc, int n_warmup,
                                  int n_iters) {
  if (n_iters < 30) throw ConfigError("throughput needs n_iters >= 30");
  const WindowTensors w = synthetic_window(mc);
  for (int i = 0; i < n_warmup; ++i) (void)predictor.predict(w);

  std::vector<double> ms(static_cast<std::size_t>(n_iters));
  const auto t_all0 = std::chrono::steady_clock::now();
  for (int i = 0; i < n_iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)predictor.predict(w);
    ms[std::size_t(i)] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  const double total_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_all0).count();

  std::sort(ms.begin(), ms.end());
  ThroughputStats st;
  st.n_iters = n_iters;
  st.hz = double(n_iters) / total_s;
  double sum = 0.0;
  for (double m : ms) sum += m;
  st.mean_ms = sum / double(n_iters);
  st.p50_ms = ms[std::size_t(n_iters / 2)];
  st.p95_ms = ms[std::size_t((n_iters * 95) / 100)];
  return st;
}

// report.json: aggregate metrics plus per-frame states so overlays can be
// re-rendered later from the saved file.
inline void write_report(const MetricsReport& rep, const std::vector<RolloutResult>& results,
                         const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  nlohmann::json j;
  j["schema_version"] = 1;
  j["aggregate"] = rep.to_json();
  j["sequences"] = nlohmann::json::array();
  for (const auto& r : results) {
    nlohmann::json js;
    js["sequence_id"] = r.sequence_id;
    js["split"] = r.split;
    js["bootstrap"] = r.bootstrap == Bootstrap::ground_truth_first ? "ground_truth_first" : "zeros";
    js["frames"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.predictions.size(); ++i) {
      nlohmann::json jf;
      jf["frame_index"] = r.predictions[i].frame_index;
      jf["pred"] = std::vector<double>(r.predictions[i].state.data(),
                                       r.predictions[i].state.data() + 6);
      jf["target"] =
          std::vector<double>(r.targets[i].state.data(), r.targets[i].state.data() + 6);
      jf["target_visible"] = r.targets[i].visible;
      js["frames"].push_back(jf);
    }
    j["sequences"].push_back(js);
  }
  const auto path = out_dir / "report.json";
  std::ofstream out(path);
  if (!out) throw IOFailure("cannot write report: " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFile("missing report: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ShapeMismatch("report parse error: " + std::string(e.what()));
  }
  if (j.value("schema_version", 0) != 1) throw ShapeMismatch("unsupported report schema");
  return j;
}

inline std::vector<RolloutResult> results_from_report(const nlohmann::json& j) {
  std::vector<RolloutResult> out;
  for (const auto& js : j.at("sequences")) {
    RolloutResult r;
    r.sequence_id = js.at("sequence_id").get<std::string>();
    r.split = js.at("split").get<std::string>();
    r.bootstrap = js.at("bootstrap").get<std::string>() == "zeros"
                      ? Bootstrap::zeros
                      : Bootstrap::ground_truth_first;
    for (const auto& jf : js.at("frames")) {
      FrameState pred, target;
      pred.frame_index = target.frame_index = jf.at("frame_index").get<int>();
      for (int d = 0; d < 6; ++d) {
        pred.state[d] = jf.at("pred").at(d).get<double>();
        target.state[d] = jf.at("target").at(d).get<double>();
      }
      target.visible = jf.at("target_visible").get<bool>();
      r.predictions.push_back(pred);
      r.targets.push_back(target);
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace detail {

inline void draw_state(ImageRgb8& img, const FrameState& fs,
                       const std::array<std::uint8_t, 3>& color) {
  const auto box = fs.box();
  const double x0 = box.x_min * img.width, x1 = box.x_max * img.width;
  const double y0 = box.y_min * img.height, y1 = box.y_max * img.height;
  draw_rect(img, x0, y0, x1, y1, color);
  const auto angle = fs.angle();
  // in-plane heading (x, z) maps to image (v, u)
  const double rot = deg_to_rad(angle.rot_deg);
  const double image_angle = std::atan2(std::cos(rot), std::sin(rot));
  draw_arrow(img, 0.5 * (x0 + x1), 0.5 * (y0 + y1), image_angle,
             0.5 * std::hypot(x1 - x0, y1 - y0) + 4.0, color);
}

}  // namespace detail

// One overlay image per evaluated sequence (its last evaluated frame):
// target state in kTargetColor, prediction in kPredictedColor.
inline int render_overlays(const std::filesystem::path& dataset_root,
                           const std::vector<RolloutResult>& results,
                           const std::filesystem::path& out_dir, int max_sequences = -1) {
  std::filesystem::create_directories(out_dir);
  int rendered = 0;
  for (const auto& r : results) {
    if (max_sequences >= 0 && rendered >= max_sequences) break;
    if (r.predictions.empty()) continue;
    const std::size_t last = r.predictions.size() - 1;
    const auto frame_path = dataset_root / r.split / r.sequence_id /
                            ("frame_" + std::to_string(r.predictions[last].frame_index) + ".png");
    ImageRgb8 img = ImageRgb8::from_gray(read_png_gray8(frame_path.string()));
    if (r.targets[last].visible) detail::draw_state(img, r.targets[last], kTargetColor);
    detail::draw_state(img, r.predictions[last], kPredictedColor);
    write_png_rgb8((out_dir / (r.sequence_id + "_overlay.png")).string(), img);
    ++rendered;
  }
  return rendered;
}

}  // namespace icetrack
