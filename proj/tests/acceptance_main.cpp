// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Thresholds are fixed here, not tuned at run time.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <vector>

#include "icetrack/config.hpp"
#include "icetrack/dataset.hpp"
#include "icetrack/evaluation.hpp"
#include "icetrack/model.hpp"
#include "icetrack/simulator.hpp"
#include "icetrack/training.hpp"
#include "support/oracles.hpp"

using namespace icetrack;
namespace fs = std::filesystem;

#ifndef ICETRACK_CONFIG_DIR
#define ICETRACK_CONFIG_DIR "configs"
#endif

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Config desk_config() {
  return Config::parse_file(std::string(ICETRACK_CONFIG_DIR) + "/desk.cfg");
}

// ---------------------------------------------------------------------- 1
void criterion_geometry_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2024);

  // transform round-trips
  for (int i = 0; i < 1000; ++i) {
    const RigidTransform t = oracles::random_rigid(rng);
    const RigidTransform round = compose(t, invert(t));
    const double dev = std::max((round.rotation - Mat3::Identity()).norm(),
                                round.translation_mm.norm());
    require(dev < 1e-9, "transform round-trip drift " + std::to_string(dev));
  }

  // angles vs the rasterization oracle (mask -> tight box -> diagonal)
  Config cfg = desk_config();
  const SimConfig sc = SimConfig::from_config(cfg);
  const FanGeometry fan = sc.fan;
  const TipAppearanceModel tip = sc.tip;
  const double radius = 0.5 * tip.diameter_mm;

  int compared = 0;
  for (int i = 0; i < 1000; ++i) {
    AnnotationRecord rec;
    const RigidTransform pose =
        oracles::sample_visible_pose(fan, tip, mix_seed(0xacce, i), &rec);
    if (rec.near_disc || rec.clipped) continue;
    const double aspect =
        std::max(rec.box.width() / rec.box.height(), rec.box.height() / rec.box.width());
    if (aspect < 2.0) continue;

    const auto mask = oracles::measure_rendered_mask(fan, tip, pose, 4);
    require(mask.any, "oracle mask empty for a visible pose");
    const Vec3 h = pose.heading();
    const double rot_oracle =
        rotation_angle_from_diagonal_deg(fan, mask.box, Vec2(h.x(), h.z()), radius);
    const double rot_err = angular_error_deg(rot_oracle, rec.angle.rot_deg);
    require(rot_err < 5.0, "rotation angle vs raster oracle off by " + std::to_string(rot_err));

    const double entry_oracle = oracles::entry_magnitude_from_area(mask, tip);
    const double entry_err = std::abs(entry_oracle - std::abs(rec.angle.entry_deg));
    require(entry_err < 5.0, "entry angle vs raster oracle off by " + std::to_string(entry_err));
    ++compared;
  }
  require(compared >= 300, "too few aspect>=2 poses compared: " + std::to_string(compared));

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(secs < 60.0, "geometry oracle suite took " + std::to_string(secs) + " s (>60)");
}

// ---------------------------------------------------------------------- 2
void criterion_iou_and_angular_error() {
  Rng rng(55);
  for (int i = 0; i < 100; ++i) {
    // grid-aligned coordinates keep the counting oracle free of edge
    // quantization; the analytic path sees ordinary doubles either way
    auto rand_box = [&] {
      BoundingBox b;
      b.x_min = double(rng.below(800)) / 1000.0;
      b.y_min = double(rng.below(800)) / 1000.0;
      b.x_max = b.x_min + double(50 + rng.below(1000 - 50 - std::uint64_t(b.x_min * 1000))) / 1000.0;
      b.y_max = b.y_min + double(50 + rng.below(1000 - 50 - std::uint64_t(b.y_min * 1000))) / 1000.0;
      return b;
    };
    const BoundingBox a = rand_box(), b = rand_box();
    const double diff = std::abs(iou(a, b) - oracles::pixel_count_iou(a, b, 1000));
    require(diff < 2e-3, "iou vs pixel-count oracle differ by " + std::to_string(diff));
  }
  require(angular_error_deg(350, 10) == 20.0, "angular_error(350,10) != 20");
  require(angular_error_deg(-170, 175) == 15.0, "angular_error(-170,175) != 15");
}

// ---------------------------------------------------------------------- 3
void criterion_gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig mc;
  mc.n_frames = 3;
  mc.encoder.input_size = 16;
  mc.encoder.patch_size = 8;
  mc.encoder.embed_dim = 16;
  mc.n_layers = 2;
  mc.n_heads = 2;
  TipStateModel model(mc, 321);

  std::vector<WindowTensors> batch;
  Rng rng(77);
  for (int b = 0; b < 3; ++b) {
    WindowTensors w;
    for (int k = 0; k < mc.n_frames; ++k) {
      Eigen::MatrixXd img(16, 16);
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) img(y, x) = rng.uniform();
      w.images.push_back(img);
    }
    for (int d = 0; d < 6; ++d) w.prior[d] = rng.uniform(-0.8, 0.8);
    for (int d = 0; d < 6; ++d) w.target[d] = rng.uniform(-0.8, 0.8);
    batch.push_back(std::move(w));
  }

  const auto errors =
      oracles::fd_gradient_errors(model, [&] { return model.batch_loss(batch); });
  for (const auto& e : errors)
    require(e.rel_err < 1e-3,
            "gradient group '" + e.name + "' rel err " + std::to_string(e.rel_err));

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  require(secs < 300.0, "gradient check took " + std::to_string(secs) + " s (>300)");
  std::printf("    (%zu parameter groups, worst rel err %.2e, %.1f s)\n", errors.size(),
              std::max_element(errors.begin(), errors.end(),
                               [](auto& a, auto& b) { return a.rel_err < b.rel_err; })
                  ->rel_err,
              secs);
}

// ---------------------------------------------------------------------- 4
void criterion_overfit() {
  // 6 windows from one sequence
  Config cfg = desk_config();
  cfg.set("sim.train.sequences", "1");
  cfg.set("sim.train.frames", "10");  // 10 frames -> 6 windows of N=5
  cfg.set("sim.val.sequences", "1");
  cfg.set("sim.val.frames", "10");
  cfg.set("sim.test.sequences", "1");
  cfg.set("sim.test.frames", "10");
  const auto root = fresh_dir("icetrack_acc_overfit");
  generate_dataset(SimConfig::from_config(cfg), cfg, root, 91);

  ModelConfig mc = ModelConfig::from_config(cfg);
  mc.encoder.input_size = 32;
  mc.encoder.patch_size = 8;
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 6;
  tc.lr = 3e-3;
  tc.seed = 4;
  tc.prior_noise_std = 0.0;

  const TrainResult res = train(DatasetView(root), mc, tc, fresh_dir("icetrack_acc_overfit_out"));
  const double final_train = res.log.epochs.back().train_loss;
  require(final_train < 1e-3,
          "overfit train loss " + std::to_string(final_train) + " (>= 1e-3)");
  std::printf("    (train l_total %.2e after %d epochs)\n", final_train,
              int(res.log.epochs.size()));
  fs::remove_all(root);
}

// ---------------------------------------------------------------------- 5
void criterion_desk_benchmark() {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    Config cfg = desk_config();
    const SimConfig sc = SimConfig::from_config(cfg);
    const auto root = fresh_dir("icetrack_acc_desk_" + std::to_string(seed));
    generate_dataset(sc, cfg, root, 100 + seed, 1);

    ModelConfig mc = ModelConfig::from_config(cfg);
    TrainConfig tc = TrainConfig::from_config(cfg);
    tc.seed = seed;

    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult res =
        train(DatasetView(root), mc, tc, fresh_dir("icetrack_acc_desk_out_" + std::to_string(seed)),
              cfg.hash());
    const double train_secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    require(train_secs < 900.0,
            "training took " + std::to_string(train_secs) + " s (>15 min), seed " +
                std::to_string(seed));

    // (a) best-val loss halves from the first epoch
    const double val0 = res.log.epochs.front().val_loss;
    require(res.log.best_val_loss <= 0.5 * val0,
            "best val " + std::to_string(res.log.best_val_loss) + " vs epoch-0 val " +
                std::to_string(val0) + ", seed " + std::to_string(seed));

    // (b) autoregressive rollout beats the prior-copy baseline
    const TipStateModel model = TipStateModel::load_checkpoint(res.best_checkpoint);
    DatasetView data(root);
    FrameCache cache(mc.encoder.input_size);
    ModelPredictor model_pred(model);
    PriorCopyPredictor base_pred;

    std::vector<RolloutResult> model_results, base_results, forced_results;
    for (const auto& seq : data.load_split("test")) {
      model_results.push_back(
          rollout(model_pred, seq, cache, mc.n_frames, Bootstrap::ground_truth_first));
      base_results.push_back(
          rollout(base_pred, seq, cache, mc.n_frames, Bootstrap::ground_truth_first));

      // teacher-forced diagnostic: prior always ground truth
      RolloutResult forced;
      forced.sequence_id = seq.id;
      forced.split = seq.split;
      for (const auto& w : window(seq, mc.n_frames)) {
        WindowTensors wt = materialize(w, cache);
        FrameState pred, target;
        pred.frame_index = target.frame_index = wt.target_frame_index;
        pred.state = model.predict(wt);
        target.state = wt.target;
        forced.predictions.push_back(pred);
        forced.targets.push_back(target);
      }
      if (!forced.predictions.empty()) forced_results.push_back(std::move(forced));
    }
    const MetricsReport mm = metrics(model_results);
    const MetricsReport bm = metrics(base_results);
    std::printf(
        "    seed %llu: train %.0f s, val %.4f -> %.4f | model iou %.3f entry %.2f deg | "
        "baseline iou %.3f entry %.2f deg\n",
        (unsigned long long)seed, train_secs, val0, res.log.best_val_loss, mm.iou_mean,
        mm.entry_err_mean, bm.iou_mean, bm.entry_err_mean);

    require(mm.iou_mean >= bm.iou_mean + 0.05,
            "iou gap " + std::to_string(mm.iou_mean - bm.iou_mean) + " < 0.05, seed " +
                std::to_string(seed));
    require(mm.entry_err_mean <= bm.entry_err_mean - 5.0,
            "entry gap " + std::to_string(bm.entry_err_mean - mm.entry_err_mean) +
                " < 5 deg, seed " + std::to_string(seed));

    if (!forced_results.empty()) {
      const MetricsReport fm = metrics(forced_results);
      if (fm.entry_err_mean > mm.entry_err_mean || fm.iou_mean < mm.iou_mean)
        std::printf("    [diagnostic] teacher-forced not uniformly better (iou %.3f vs %.3f, "
                    "entry %.2f vs %.2f)\n",
                    fm.iou_mean, mm.iou_mean, fm.entry_err_mean, mm.entry_err_mean);
    }
    fs::remove_all(root);
  }
}

// ---------------------------------------------------------------------- 6
void criterion_pipeline_identities() {
  // tiny dataset for the identity checks
  Config cfg = desk_config();
  cfg.set("sim.train.sequences", "3");
  cfg.set("sim.val.sequences", "1");
  cfg.set("sim.test.sequences", "2");
  cfg.set("sim.train.frames", "8");
  cfg.set("sim.val.frames", "8");
  cfg.set("sim.test.frames", "8");
  cfg.set("fan.image_width", "64");
  cfg.set("fan.image_height", "64");
  const SimConfig sc = SimConfig::from_config(cfg);

  // oracle double yields perfect metrics through rollout+metrics
  const auto root = fresh_dir("icetrack_acc_ident");
  generate_dataset(sc, cfg, root, 5);
  DatasetView data(root);
  FrameCache cache(16);
  OraclePredictor oracle;
  std::vector<RolloutResult> results;
  for (const auto& seq : data.load_split("test"))
    results.push_back(rollout(oracle, seq, cache, 5, Bootstrap::ground_truth_first));
  const MetricsReport rep = metrics(results);
  require(rep.iou_mean == 1.0, "oracle rollout iou " + std::to_string(rep.iou_mean));
  require(rep.entry_err_mean == 0.0 && rep.rot_err_mean == 0.0,
          "oracle rollout errors nonzero");

  // byte-identical regeneration
  const auto r2 = fresh_dir("icetrack_acc_ident2");
  generate_dataset(sc, cfg, r2, 5);
  std::size_t files = 0;
  for (auto it = fs::recursive_directory_iterator(root);
       it != fs::recursive_directory_iterator(); ++it) {
    if (!it->is_regular_file()) continue;
    const auto rel = fs::relative(it->path(), root);
    require(fs::exists(r2 / rel), "regeneration missing " + rel.string());
    require(sha256_file_hex(it->path().string()) == sha256_file_hex((r2 / rel).string()),
            "regeneration differs at " + rel.string());
    ++files;
  }
  require(files > 10, "suspiciously few files compared");

  // integrity rejects an injected split overlap
  nlohmann::json manifest;
  {
    std::ifstream in(root / "manifest");
    in >> manifest;
  }
  for (auto& split : manifest["splits"])
    if (split["name"] == "test") {
      split["sequence_ids"].push_back("train-0000");
      split["count"] = int(split["count"]) + 1;
    }
  {
    std::ofstream out(root / "manifest");
    out << manifest.dump(2);
  }
  bool rejected = false;
  try {
    verify_integrity(root);
  } catch (const SplitOverlap&) {
    rejected = true;
  }
  require(rejected, "verify_integrity accepted an injected split overlap");
  fs::remove_all(root);
  fs::remove_all(r2);
}

// ---------------------------------------------------------------------- 7
void criterion_throughput() {
  Config cfg = desk_config();
  const ModelConfig mc = ModelConfig::from_config(cfg);
  const TipStateModel model(mc, 1);
  ModelPredictor predictor(model);

  std::vector<double> hz;
  for (int run = 0; run < 5; ++run) {
    const ThroughputStats st = throughput(predictor, mc, 10, 100);
    hz.push_back(st.hz);
  }
  double mean = 0.0;
  for (double h : hz) mean += h;
  mean /= hz.size();
  double var = 0.0;
  for (double h : hz) var += (h - mean) * (h - mean);
  const double cov = std::sqrt(var / hz.size()) / mean;

  std::printf("    (mean %.0f Hz, CoV %.1f%%)\n", mean, 100.0 * cov);
  require(mean >= 25.0, "throughput " + std::to_string(mean) + " Hz < 25");
  require(cov < 0.20, "throughput CoV " + std::to_string(cov) + " >= 0.20");
}

// ---------------------------------------------------------------------- 8
void criterion_motion_realism() {
  const FanGeometry fan = SimConfig::from_config(desk_config()).fan;
  for (double speed : {10.0, 12.5, 15.0, 17.5, 20.0}) {
    MotionProfile p;
    p.speed_mm_s = speed;
    p.frame_rate_hz = 25.0;
    p.n_frames = 20;
    p.heading_drift_deg_s = 5.0;
    p.kind = MotionKind::mixed;
    const Trajectory t = generate_trajectory(p, fan, std::uint64_t(speed * 10));
    const double expected = speed / 25.0;
    for (std::size_t k = 1; k < t.e_world_tip.size(); ++k) {
      const double step =
          (t.e_world_tip[k].translation_mm - t.e_world_tip[k - 1].translation_mm).norm();
      require(std::abs(step - expected) <= 0.01 * expected,
              "step " + std::to_string(step) + " vs " + std::to_string(expected));
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* label;
    std::function<void()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "geometry oracle suite (angles vs raster oracle, transform round-trips, <60 s)",
       criterion_geometry_oracle},
      {2, "iou pixel-count oracle within 2e-3; angular error wrap-around fixtures",
       criterion_iou_and_angular_error},
      {3, "analytic gradients vs central differences, every parameter group, <5 min",
       criterion_gradient_check},
      {4, "overfit sanity: 6 windows, 200 epochs, train loss < 1e-3", criterion_overfit},
      {5, "desk-scale benchmark: train <=15 min, val halved, beats prior-copy (3 seeds)",
       criterion_desk_benchmark},
      {6, "pipeline identities: oracle rollout, byte-identical regen, overlap rejection",
       criterion_pipeline_identities},
      {7, "throughput: stable Hz (CoV<20%) and >=25 Hz single-window inference",
       criterion_throughput},
      {8, "motion realism: per-frame displacement within 1% of speed/frame_rate",
       criterion_motion_realism},
  };

  // optional criterion ids on the command line restrict the run
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end())
      continue;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run();
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("[PASS] criterion %d: %s (%.1f s)\n", c.id, c.label, secs);
    } catch (const std::exception& e) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("[FAIL] criterion %d: %s (%.1f s)\n       %s\n", c.id, c.label, secs, e.what());
      ++failures;
    }
    std::fflush(stdout);
  }
  if (failures > 0) std::printf("%d criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
