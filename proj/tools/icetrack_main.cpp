// Command-line front end for the ICE tip-tracking pipeline: dataset
// simulation, integrity checks, training, autoregressive evaluation,
// single-sequence inference, throughput benchmarking and overlay plots.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "icetrack/config.hpp"
#include "icetrack/dataset.hpp"
#include "icetrack/errors.hpp"
#include "icetrack/evaluation.hpp"
#include "icetrack/model.hpp"
#include "icetrack/simulator.hpp"
#include "icetrack/training.hpp"

namespace fs = std::filesystem;
using namespace icetrack;

namespace {

Config load_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (path.empty()) throw ConfigError("no config file given (flag --config or ICETRACK_CONFIG)");
  Config cfg = Config::parse_file(path);
  for (const auto& kv : overrides) cfg.apply_override(kv);
  return cfg;
}

SequenceRecord load_bare_sequence(const fs::path& dir) {
  if (fs::exists(dir / "annotations.jsonl"))
    return load_sequence(dir.parent_path().parent_path(), dir.parent_path().filename().string(),
                         dir.filename().string());
  // frames only: synthesize records with unknown (invisible) ground truth
  SequenceRecord seq;
  seq.id = dir.filename().string();
  seq.split = dir.parent_path().filename().string();
  for (int k = 0;; ++k) {
    const fs::path p = dir / ("frame_" + std::to_string(k) + ".png");
    if (!fs::exists(p)) break;
    FrameRecord fr;
    fr.sequence_id = seq.id;
    fr.frame_index = k;
    fr.image_path = p;
    fr.annotation.frame_index = k;
    fr.annotation.visible = false;
    seq.frames.push_back(fr);
  }
  if (seq.frames.empty()) throw MissingFile("no frame_<k>.png files in " + dir.string());
  return seq;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icetrack: device-tip passing point and incident angle pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int verbosity = 0;
  app.add_option("--config", config_path, "key-value config file")
      ->envname("ICETRACK_CONFIG");
  app.add_option("--set", overrides, "override a config key, key=value (repeatable)");
  app.add_flag("-v,--verbose", verbosity, "more output");

  // simulate
  auto* sim = app.add_subcommand("simulate", "generate a synthetic annotated dataset");
  sim->fallthrough();
  std::string sim_out;
  std::uint64_t sim_seed = 0;
  bool sim_seed_given = false;
  int sim_jobs = 1;
  sim->add_option("--out", sim_out, "dataset output directory")->required();
  sim->add_option("--seed", sim_seed, "global dataset seed")->each([&](const std::string&) {
    sim_seed_given = true;
  });
  sim->add_option("--jobs", sim_jobs, "parallel sequence workers");

  // check
  auto* chk = app.add_subcommand("check", "verify dataset integrity");
  chk->fallthrough();
  std::string chk_data;
  chk->add_option("--data", chk_data, "dataset root")->required();

  // train
  auto* trn = app.add_subcommand("train", "train the sequence regression model");
  trn->fallthrough();
  std::string trn_data, trn_out;
  std::uint64_t trn_seed = 0;
  bool trn_seed_given = false;
  trn->add_option("--data", trn_data, "dataset root")->required();
  trn->add_option("--out", trn_out, "output directory for checkpoints and logs")->required();
  trn->add_option("--seed", trn_seed, "training seed override")->each([&](const std::string&) {
    trn_seed_given = true;
  });

  // eval
  auto* evl = app.add_subcommand("eval", "autoregressive rollout evaluation");
  evl->fallthrough();
  std::string evl_ckpt, evl_data, evl_split = "test", evl_out, evl_boot = "ground_truth_first";
  int evl_overlays = 0;
  bool evl_baseline = false;
  evl->add_option("--checkpoint", evl_ckpt, "model checkpoint")->required();
  evl->add_option("--data", evl_data, "dataset root")->required();
  evl->add_option("--split", evl_split, "dataset split to evaluate");
  evl->add_option("--out", evl_out, "report output directory")->required();
  evl->add_option("--bootstrap", evl_boot, "first-window prior: ground_truth_first|zeros");
  evl->add_option("--overlays", evl_overlays, "also render up to N overlay images");
  evl->add_flag("--baseline", evl_baseline, "also report the prior-copy baseline");

  // infer
  auto* inf = app.add_subcommand("infer", "per-frame predictions for one sequence directory");
  inf->fallthrough();
  std::string inf_ckpt, inf_seq, inf_out, inf_boot = "ground_truth_first";
  inf->add_option("--checkpoint", inf_ckpt, "model checkpoint")->required();
  inf->add_option("--sequence", inf_seq, "sequence directory (frame_<k>.png [+ annotations])")
      ->required();
  inf->add_option("--out", inf_out, "output predictions.jsonl (default: stdout)");
  inf->add_option("--bootstrap", inf_boot, "first-window prior: ground_truth_first|zeros");

  // bench
  auto* bch = app.add_subcommand("bench", "single-window inference throughput");
  bch->fallthrough();
  std::string bch_ckpt;
  int bch_warmup = 20, bch_iters = 200;
  bch->add_option("--checkpoint", bch_ckpt, "model checkpoint")->required();
  bch->add_option("--warmup", bch_warmup, "warmup iterations (excluded from stats)");
  bch->add_option("--iters", bch_iters, "measured iterations (>= 30)");

  // plot
  auto* plt = app.add_subcommand("plot", "render overlays from a saved report");
  plt->fallthrough();
  std::string plt_report, plt_data, plt_out;
  int plt_max = -1;
  plt->add_option("--report", plt_report, "report.json from eval")->required();
  plt->add_option("--data", plt_data, "dataset root the report refers to")->required();
  plt->add_option("--out", plt_out, "overlay output directory")->required();
  plt->add_option("--max", plt_max, "render at most N sequences");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (sim->parsed()) {
      Config cfg = load_config(config_path, overrides);
      const std::uint64_t seed = sim_seed_given ? sim_seed : cfg.get_u64("sim.seed", 0);
      const SimConfig sc = SimConfig::from_config(cfg);
      const GeneratedDataset ds = generate_dataset(sc, cfg, sim_out, seed, sim_jobs);
      std::cout << "dataset " << ds.root.string() << "\nmanifest_hash " << ds.manifest_hash
                << "\nconfig_hash " << cfg.hash() << "\n";
      return 0;
    }

    if (chk->parsed()) {
      const SplitManifest m = verify_integrity(chk_data);
      std::cout << "ok";
      for (const auto& s : m.splits) std::cout << " " << s.name << "=" << s.count;
      std::cout << "\n";
      return 0;
    }

    if (trn->parsed()) {
      Config cfg = load_config(config_path, overrides);
      if (trn_seed_given) cfg.set("train.seed", std::to_string(trn_seed));
      const ModelConfig mc = ModelConfig::from_config(cfg);
      const TrainConfig tc = TrainConfig::from_config(cfg);
      const DatasetView data{fs::path(trn_data)};
      const TrainResult res = train(data, mc, tc, trn_out, cfg.hash());
      if (verbosity > 0)
        for (const auto& e : res.log.epochs)
          std::cout << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss
                    << "\n";
      std::cout << "best_epoch " << res.log.best_epoch << "\nbest_val_loss "
                << res.log.best_val_loss << "\ncheckpoint " << res.best_checkpoint.string()
                << "\n";
      return 0;
    }

    if (evl->parsed()) {
      const TipStateModel model = TipStateModel::load_checkpoint(evl_ckpt);
      const DatasetView data{fs::path(evl_data)};
      const Bootstrap boot =
          evl_boot == "zeros" ? Bootstrap::zeros : Bootstrap::ground_truth_first;
      const int n = model.config().n_frames;
      FrameCache cache(model.config().encoder.input_size);
      ModelPredictor predictor(model);

      std::vector<RolloutResult> results;
      for (const auto& seq : data.load_split(evl_split))
        results.push_back(rollout(predictor, seq, cache, n, boot));
      MetricsReport rep = metrics(results);
      write_report(rep, results, evl_out);
      if (evl_overlays > 0) render_overlays(data.root(), results, evl_out, evl_overlays);
      std::cout << "entry_err " << rep.entry_err_mean << " +- " << rep.entry_err_std
                << "\nrot_err " << rep.rot_err_mean << " +- " << rep.rot_err_std << "\niou "
                << rep.iou_mean << "\nframes " << rep.n_frames << "\nreport "
                << (fs::path(evl_out) / "report.json").string() << "\n";
      if (evl_baseline) {
        PriorCopyPredictor base;
        std::vector<RolloutResult> base_results;
        for (const auto& seq : data.load_split(evl_split))
          base_results.push_back(rollout(base, seq, cache, n, boot));
        const MetricsReport brep = metrics(base_results);
        std::cout << "baseline_entry_err " << brep.entry_err_mean << "\nbaseline_rot_err "
                  << brep.rot_err_mean << "\nbaseline_iou " << brep.iou_mean << "\n";
      }
      return 0;
    }

    if (inf->parsed()) {
      const TipStateModel model = TipStateModel::load_checkpoint(inf_ckpt);
      const SequenceRecord seq = load_bare_sequence(inf_seq);
      const Bootstrap boot =
          inf_boot == "zeros" ? Bootstrap::zeros : Bootstrap::ground_truth_first;
      FrameCache cache(model.config().encoder.input_size);
      ModelPredictor predictor(model);
      const RolloutResult res = rollout(predictor, seq, cache, model.config().n_frames, boot);

      std::ostream* out = &std::cout;
      std::ofstream file;
      if (!inf_out.empty()) {
        file.open(inf_out);
        if (!file) throw IOFailure("cannot write " + inf_out);
        out = &file;
      }
      for (const auto& p : res.predictions) {
        const auto box = p.box();
        const auto angle = p.angle();
        nlohmann::json j{{"frame_index", p.frame_index},
                         {"box", {box.x_min, box.y_min, box.x_max, box.y_max}},
                         {"entry_deg", angle.entry_deg},
                         {"rot_deg", wrap_deg(angle.rot_deg)}};
        *out << j.dump() << '\n';
      }
      return 0;
    }

    if (bch->parsed()) {
      const TipStateModel model = TipStateModel::load_checkpoint(bch_ckpt);
      ModelPredictor predictor(model);
      const ThroughputStats st = throughput(predictor, model.config(), bch_warmup, bch_iters);
      std::cout << "hz " << st.hz << "\nmean_ms " << st.mean_ms << "\np50_ms " << st.p50_ms
                << "\np95_ms " << st.p95_ms << "\niters " << st.n_iters << "\n";
      return 0;
    }

    if (plt->parsed()) {
      const nlohmann::json report = read_report(plt_report);
      const auto results = results_from_report(report);
      const int n = render_overlays(plt_data, results, plt_out, plt_max);
      std::cout << "overlays " << n << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
