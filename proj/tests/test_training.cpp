#include <doctest.h>

#include <filesystem>

#include "icetrack/training.hpp"
#include "support/oracles.hpp"

using namespace icetrack;
namespace fs = std::filesystem;

namespace {

// Tiny on-disk dataset shared by the training tests.
struct Fixture {
  fs::path root;

  Fixture() {
    root = fs::temp_directory_path() / "icetrack_train_fixture";
    static bool generated_this_run = false;
    if (generated_this_run) return;
    generated_this_run = true;
    fs::remove_all(root);
    Config cfg = Config::parse_string(
        "fan.image_width = 64\n"
        "fan.image_height = 64\n"
        "fan.angular_span_deg = 75\n"
        "fan.max_depth_mm = 55\n"
        "sim.train.sequences = 4\n"
        "sim.val.sequences = 2\n"
        "sim.test.sequences = 2\n"
        "sim.train.frames = 10\n"
        "sim.val.frames = 10\n"
        "sim.test.frames = 10\n"
        "sim.drift_max_deg_s = 3\n");
    generate_dataset(SimConfig::from_config(cfg), cfg, root, 21);
  }
};

ModelConfig trainer_model() {
  ModelConfig mc;
  mc.n_frames = 5;
  mc.encoder.input_size = 16;
  mc.encoder.patch_size = 8;
  mc.encoder.embed_dim = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  return mc;
}

}  // namespace

TEST_CASE("paper hyperparameters are accepted") {
  TrainConfig tc;
  tc.epochs = 117;
  tc.batch_size = 6;
  CHECK_NOTHROW(tc.validate());
  TrainConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("training reduces the loss and writes checkpoints and logs") {
  Fixture fx;
  DatasetView data(fx.root);
  TrainConfig tc;
  tc.epochs = 12;
  tc.batch_size = 6;
  tc.lr = 2e-3;
  tc.seed = 5;
  const auto out = fs::temp_directory_path() / "icetrack_train_out";
  fs::remove_all(out);

  const TrainResult res = train(data, trainer_model(), tc, out, "testhash");
  REQUIRE(res.log.epochs.size() == 12);
  CHECK(res.log.epochs.back().train_loss < res.log.epochs.front().train_loss);
  CHECK(res.log.best_epoch >= 0);
  CHECK(fs::exists(res.best_checkpoint));
  CHECK(fs::exists(res.last_checkpoint));
  CHECK(fs::exists(out / "train_log.jsonl"));
  for (const auto& e : res.log.epochs) {
    CHECK(std::isfinite(e.train_loss));
    CHECK(std::isfinite(e.val_loss));
  }

  // validate() reloads the checkpoint and reproduces the best val loss
  const double revalidated = validate(res.best_checkpoint, data, "val");
  CHECK(revalidated == doctest::Approx(res.log.best_val_loss).epsilon(1e-12));
  fs::remove_all(out);
}

TEST_CASE("fixed seed reproduces the loss curve") {
  Fixture fx;
  DatasetView data(fx.root);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 9;
  tc.prior_noise_std = 0.03;

  const auto out1 = fs::temp_directory_path() / "icetrack_train_det1";
  const auto out2 = fs::temp_directory_path() / "icetrack_train_det2";
  fs::remove_all(out1);
  fs::remove_all(out2);
  const TrainResult r1 = train(data, trainer_model(), tc, out1);
  const TrainResult r2 = train(data, trainer_model(), tc, out2);
  REQUIRE(r1.log.epochs.size() == r2.log.epochs.size());
  for (std::size_t i = 0; i < r1.log.epochs.size(); ++i) {
    CHECK(std::abs(r1.log.epochs[i].train_loss - r2.log.epochs[i].train_loss) < 1e-6);
    CHECK(std::abs(r1.log.epochs[i].val_loss - r2.log.epochs[i].val_loss) < 1e-6);
  }
  // different seed diverges
  tc.seed = 10;
  const auto out3 = fs::temp_directory_path() / "icetrack_train_det3";
  fs::remove_all(out3);
  const TrainResult r3 = train(data, trainer_model(), tc, out3);
  CHECK(r1.log.epochs.back().train_loss != r3.log.epochs.back().train_loss);
  fs::remove_all(out1);
  fs::remove_all(out2);
  fs::remove_all(out3);
}

TEST_CASE("checkpoint round trip preserves validation bit for bit") {
  Fixture fx;
  DatasetView data(fx.root);
  const ModelConfig mc = trainer_model();
  TipStateModel model(mc, 77);

  const auto val_seqs = data.load_split("val");
  const auto windows = collect_windows(val_seqs, mc.n_frames);
  FrameCache cache(mc.encoder.input_size);
  std::vector<WindowTensors> tensors;
  for (const auto& w : windows) tensors.push_back(materialize(w, cache));

  const double before = validate_loss(model, tensors);
  const auto path = fs::temp_directory_path() / "icetrack_train_rt.ckpt";
  model.save_checkpoint(path, 0);
  const TipStateModel loaded = TipStateModel::load_checkpoint(path);
  const double after = validate_loss(loaded, tensors);
  CHECK(before == after);
  fs::remove(path);
}

TEST_CASE("oracle double validates to zero loss") {
  Fixture fx;
  DatasetView data(fx.root);
  const ModelConfig mc = trainer_model();
  const TipStateModel model(mc, 3);
  const auto seqs = data.load_split("val");
  const auto windows = collect_windows(seqs, mc.n_frames);
  FrameCache cache(mc.encoder.input_size);
  std::vector<WindowTensors> tensors;
  for (const auto& w : windows) tensors.push_back(materialize(w, cache));

  const double oracle_loss = validate_loss_with(
      [](const WindowTensors& w) { return w.target; }, model, tensors);
  CHECK(oracle_loss == doctest::Approx(0.0));

  const double l1 = validate_loss(model, tensors);
  const double l2 = validate_loss(model, tensors);
  CHECK(l1 == l2);
}

TEST_CASE("non-finite loss aborts with the batch identifier") {
  Fixture fx;
  DatasetView data(fx.root);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 1;
  // Adam steps are ~lr in magnitude, so this overflows the squared loss
  tc.lr = 1e200;
  tc.grad_clip_norm = 0.0;

  const auto out = fs::temp_directory_path() / "icetrack_train_nan";
  fs::remove_all(out);
  try {
    train(data, trainer_model(), tc, out);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
  fs::remove_all(out);
}

TEST_CASE("frozen encoder leaves encoder parameters untouched") {
  Fixture fx;
  DatasetView data(fx.root);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 2;
  tc.encoder_frozen = true;

  const auto out = fs::temp_directory_path() / "icetrack_train_frozen";
  fs::remove_all(out);
  const TrainResult res = train(data, trainer_model(), tc, out);
  const TipStateModel trained = TipStateModel::load_checkpoint(res.last_checkpoint);
  const TipStateModel reference(trainer_model(), tc.seed);
  CHECK(trained.params().find("encoder.patch_w").value() ==
        reference.params().find("encoder.patch_w").value());
  CHECK(trained.params().find("head_box.w").value() !=
        reference.params().find("head_box.w").value());
  fs::remove_all(out);
}

TEST_CASE("early stopping respects patience") {
  Fixture fx;
  DatasetView data(fx.root);
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 6;
  tc.lr = 0.3;  // unstable on purpose: validation stops improving quickly
  tc.seed = 3;
  tc.early_stop_patience = 3;

  const auto out = fs::temp_directory_path() / "icetrack_train_early";
  fs::remove_all(out);
  const TrainResult res = train(data, trainer_model(), tc, out);
  CHECK(res.log.epochs.size() < 40);
  fs::remove_all(out);
}
