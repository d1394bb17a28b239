#include <gtest/gtest.h>

#include <filesystem>

#include "bayesseg/checkpoint.hpp"
#include "bayesseg/trainer.hpp"

using namespace bayesseg;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> synth(std::size_t n, std::uint64_t seed) {
  SyntheticSpec s;
  s.count = n;
  s.image_size = 16;
  s.radius_min = 2;
  s.radius_max = 5;
  s.seed = seed;
  return generate_synthetic(s);
}

ArchitectureConfig small(StochasticKind kind) {
  ArchitectureConfig c;
  c.decoder_style = DecoderStyle::unet_concat;
  c.stochastic_kind = kind;
  c.placement = Placement::per_decoder;
  c.depth = 2;
  c.base_channels = 4;
  c.input_size = 16;
  return c;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 4;
  t.adam.learning_rate = 1e-2;
  t.seed = 5;
  return t;
}

std::vector<std::vector<double>> values_of(const SegModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.push_back(p.value.values());
  return out;
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() /
         ("bayesseg_trainer_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()) + "_" + name);
}

}  // namespace

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor w({4}, {0.5, -1.0, 2.0, 0.0}, true);
  const Tensor c({4}, {3.0, -0.2, 0.05, 40.0});
  Adam adam({w}, AdamConfig{});
  backward(sum(w * c));
  const std::vector<double> before = w.values();
  adam.step();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(std::abs(w[i] - before[i]), 1e-3, 1e-9);
    EXPECT_LT((w[i] - before[i]) * c[i], 0.0);
  }
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, MatchesHandWrittenRecurrence) {
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  Tensor w({3}, {1.0, -2.0, 0.5}, true);
  Adam adam({w}, cfg);
  std::vector<double> x = w.values(), m(3, 0.0), v(3, 0.0);
  for (int t = 1; t <= 6; ++t) {
    adam.zero_grad();
    backward(sum(square(w)));  // grad 2w
    adam.step();
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = 2.0 * x[i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      const double mh = m[i] / (1.0 - std::pow(0.9, t)), vh = v[i] / (1.0 - std::pow(0.999, t));
      x[i] -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
      EXPECT_NEAR(w[i], x[i], 1e-14);
    }
  }
}

TEST(ClipGradNorm, RescalesToMaximum) {
  Tensor a({2}, {0.0, 0.0}, true), b({1}, {0.0}, true);
  backward(sum(a * Tensor({2}, {3.0, 4.0})) + 12.0 * sum(b));
  std::vector<Tensor> ps = {a, b};
  EXPECT_NEAR(clip_grad_norm(ps, 6.5), 13.0, 1e-12);
  EXPECT_NEAR(a.grad()[0], 1.5, 1e-12);
  EXPECT_NEAR(a.grad()[1], 2.0, 1e-12);
  EXPECT_NEAR(b.grad()[0], 6.0, 1e-12);
  EXPECT_NEAR(clip_grad_norm(ps, 100.0), 6.5, 1e-12);
  EXPECT_NEAR(b.grad()[0], 6.0, 1e-12);
}

TEST(DataLoss, KindsMatchTheLossFunctions) {
  Rng rng(1);
  std::vector<double> p(2 * 16), y(2 * 16);
  for (auto& v : p) v = rng.uniform(0.05, 0.95);
  for (auto& v : y) v = rng.bernoulli(0.4);
  const Tensor P({2, 1, 4, 4}, p), Y({2, 1, 4, 4}, y);
  EXPECT_EQ(data_loss(LossKind::dice, P, Y).item(), dice_loss(P, Y).item());
  EXPECT_EQ(data_loss(LossKind::jaccard, P, Y).item(), jaccard_loss(P, Y).item());
  EXPECT_EQ(data_loss(LossKind::bce, P, Y).item(), bce_loss(P, Y).item());
  EXPECT_EQ(data_loss(LossKind::total, P, Y).item(), total_loss(P, Y).item());
  EXPECT_NEAR(data_loss(LossKind::nll, P, Y).item(), nll_loss(P, Y).item() / 2.0, 1e-13);
}

TEST(Train, LossDecreases) {
  const auto data = synth(40, 1);
  auto splits = split_dataset(data, 2);
  Rng init(3);
  SegModel model = build_model(small(StochasticKind::deterministic), init);
  auto cfg = quick(6);
  cfg.loss = LossKind::dice;
  cfg.patience = 10;
  const auto r = train(model, splits.train, splits.val, cfg);
  ASSERT_EQ(r.history.size(), 6u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_DOUBLE_EQ(r.kl_scale, 1.0 / static_cast<double>(splits.train.size()));
}

TEST(Train, ZeroLearningRateLeavesParametersAlone) {
  const auto data = synth(20, 4);
  auto splits = split_dataset(data, 2);
  Rng init(3);
  SegModel model = build_model(small(StochasticKind::reparam), init);
  const auto before = values_of(model);
  auto cfg = quick(4);
  cfg.adam.learning_rate = 0.0;
  cfg.patience = 2;
  const auto r = train(model, splits.train, splits.val, cfg);
  EXPECT_EQ(values_of(model), before);
  // constant validation loss never improves after the first epoch
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.best_epoch, 1u);
}

TEST(Train, EarlyStopAndBestRestoreInvariants) {
  const auto data = synth(30, 6);
  auto splits = split_dataset(data, 1);
  for (auto kind : {StochasticKind::deterministic, StochasticKind::reparam}) {
    Rng init(8);
    SegModel model = build_model(small(kind), init);
    auto cfg = quick(12);
    cfg.adam.learning_rate = 0.05;
    cfg.patience = 2;
    const auto r = train(model, splits.train, splits.val, cfg);
    ASSERT_FALSE(r.history.empty());
    EXPECT_LE(r.history.size(), cfg.max_epochs);
    double best = std::numeric_limits<double>::infinity();
    std::size_t since = 0;
    for (const auto& row : r.history) {
      if (row.val_loss < best) best = row.val_loss, since = 0;
      else ++since;
      EXPECT_EQ(row.best_val_loss, best);
      if (&row != &r.history.back()) {
        EXPECT_LT(since, cfg.patience);
      }
    }
    EXPECT_EQ(r.stopped_early, since >= cfg.patience);
    EXPECT_EQ(r.best_val_loss, best);
    EXPECT_EQ(r.history[r.best_epoch - 1].val_loss, best);
    // the restored parameters reproduce the best validation loss
    EXPECT_EQ(validation_loss(model, splits.val, cfg, r.kl_scale), r.best_val_loss);
  }
}

TEST(Train, SameSeedSameRun) {
  const auto data = synth(20, 7);
  auto splits = split_dataset(data, 2);
  auto run = [&](std::uint64_t seed) {
    Rng init(3);
    SegModel model = build_model(small(StochasticKind::mnf), init);
    auto cfg = quick(3);
    cfg.seed = seed;
    const auto r = train(model, splits.train, splits.val, cfg);
    return std::make_pair(history_csv(r.history), values_of(model));
  };
  const auto a = run(1), b = run(1), c = run(2);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first, c.first);
}

TEST(Train, KlScaleEntersLinearly) {
  const auto val = synth(6, 9);
  Rng init(10);
  auto arch = small(StochasticKind::reparam);
  SegModel model = build_model(arch, init);
  TrainConfig cfg;
  cfg.batch_size = 4;
  const double kl = model.forward_stochastic(detail::as_batch(val[0].image), init).kl.item();
  const double v0 = validation_loss(model, val, cfg, 0.0);
  const double v1 = validation_loss(model, val, cfg, 0.01);
  EXPECT_GT(kl, 0.0);
  EXPECT_NEAR(v1 - v0, 0.01 * kl, 1e-12 * kl);

  SegModel det = build_model(small(StochasticKind::deterministic), init);
  EXPECT_EQ(validation_loss(det, val, cfg, 0.0), validation_loss(det, val, cfg, 5.0));
}

TEST(Train, NonFiniteLossIsReported) {
  const auto data = synth(20, 4);
  auto splits = split_dataset(data, 2);
  Rng init(3);
  SegModel model = build_model(small(StochasticKind::deterministic), init);
  // after the last relu, so nothing can mask it
  NamedParameter p = model.parameters().back();
  ASSERT_EQ(p.name, "head.bias");
  p.value.mutable_data()[0] = std::nan("");
  try {
    train(model, splits.train, splits.val, quick(2));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos);
    EXPECT_NE(msg.find("batch 0"), std::string::npos);
    EXPECT_NE(msg.find(p.name), std::string::npos);
  }
}

TEST(Train, InvalidConfig) {
  const auto data = synth(20, 4);
  auto splits = split_dataset(data, 2);
  Rng init(3);
  SegModel model = build_model(small(StochasticKind::deterministic), init);
  auto cfg = quick(2);
  cfg.batch_size = 0;
  EXPECT_THROW(train(model, splits.train, splits.val, cfg), ConfigError);
  cfg = quick(2);
  cfg.adam.beta1 = 1.0;
  EXPECT_THROW(train(model, splits.train, splits.val, cfg), ConfigError);
  EXPECT_THROW(train(model, {}, splits.val, quick(2)), DataError);
}

TEST(Evaluate, OracleModelIsPerfect) {
  const auto data = synth(5, 11);
  std::vector<ImagePrediction> preds;
  for (const auto& s : data) preds.push_back({s.id, s.mask, s.mask});
  McConfig cfg;
  const auto m = evaluate_predictions(preds, cfg);
  EXPECT_EQ(m.iou, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.counts.fp, 0u);
  EXPECT_EQ(m.counts.fn, 0u);
  EXPECT_LT(m.ece, 1e-12);
}

TEST(Evaluate, ConstantJustBelowHalfPredictsNothing) {
  const auto data = synth(5, 12);
  const double p = 0.5 - 1e-9;
  std::vector<ImagePrediction> preds;
  std::size_t positives = 0;
  double expected_ece = 0.0;
  for (const auto& s : data) {
    preds.push_back({s.id, Tensor::full(s.mask.shape(), p), s.mask});
    double pos = 0.0;
    for (double v : s.mask.data()) pos += v;
    positives += static_cast<std::size_t>(pos);
    // single bin; accuracy = share of negatives, confidence = 1 - p
    const double acc = 1.0 - pos / static_cast<double>(s.mask.size());
    expected_ece += std::abs(acc - (1.0 - p)) / 5.0;
  }
  McConfig cfg;
  const auto m = evaluate_predictions(preds, cfg);
  EXPECT_EQ(m.iou, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.counts.tp, 0u);
  EXPECT_EQ(m.counts.fp, 0u);
  EXPECT_EQ(m.counts.fn, positives);
  EXPECT_NEAR(m.ece, expected_ece, 1e-12);
  std::size_t pooled = 0;
  for (const auto& b : m.bins) pooled += b.count;
  EXPECT_EQ(pooled, 5u * 16u * 16u);
}

TEST(Evaluate, DumpedPredictionsReproduceMetrics) {
  const auto data = synth(6, 13);
  Rng init(14);
  SegModel model = build_model(small(StochasticKind::mnf), init);
  McConfig cfg;
  cfg.num_samples = 4;
  cfg.seed = 99;
  const auto report = evaluate(model, data, cfg);
  const fs::path path = temp_file("preds.bin");
  save_predictions(path, report.predictions, cfg);
  McConfig loaded_cfg;
  const auto loaded = load_predictions(path, &loaded_cfg);
  fs::remove(path);
  EXPECT_EQ(loaded_cfg.num_samples, 4u);
  const auto again = evaluate_predictions(loaded, loaded_cfg);
  EXPECT_NEAR(again.iou, report.metrics.iou, 1e-12);
  EXPECT_NEAR(again.recall, report.metrics.recall, 1e-12);
  EXPECT_NEAR(again.ece, report.metrics.ece, 1e-12);
  EXPECT_EQ(again.counts.tp, report.metrics.counts.tp);
  EXPECT_EQ(again.counts.fp, report.metrics.counts.fp);
  // independent recomputation of per-image IoU from the dumped maps
  double iou = 0.0;
  for (const auto& p : loaded) {
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < p.mask.size(); ++i) {
      const bool a = p.mean_probs[i] > 0.5, b = p.mask[i] == 1.0;
      inter += a && b, uni += a || b;
    }
    iou += (uni == 0.0 ? 1.0 : inter / uni) / static_cast<double>(loaded.size());
  }
  EXPECT_NEAR(report.metrics.iou, iou, 1e-12);
}

TEST(Evaluate, OrderIndependentAndDeterministic) {
  auto data = synth(4, 15);
  Rng init(16);
  SegModel model = build_model(small(StochasticKind::reparam), init);
  McConfig cfg;
  cfg.num_samples = 3;
  const auto a = evaluate(model, data, cfg);
  std::reverse(data.begin(), data.end());
  const auto b = evaluate(model, data, cfg);
  EXPECT_EQ(a.predictions.front().mean_probs.values(), b.predictions.back().mean_probs.values());
  EXPECT_EQ(a.metrics.ece, evaluate(model, std::vector<Sample>(data.rbegin(), data.rend()), cfg).metrics.ece);
  EXPECT_THROW(evaluate(model, {}, cfg), DataError);
}

TEST(Checkpoint, RoundTripPreservesPredictions) {
  for (auto kind : {StochasticKind::deterministic, StochasticKind::reparam, StochasticKind::mnf}) {
    Rng init(17);
    RunConfig run;
    run.architecture = small(kind);
    run.architecture.decoder_style = DecoderStyle::fpn_pyramid;
    run.data.synthetic = SyntheticSpec{};
    run.data.synthetic->image_size = 16;
    SegModel model = build_model(run.architecture, init);
    const fs::path path = temp_file("model.ckpt");
    save_checkpoint(path, model, run);
    const auto loaded = load_checkpoint(path);
    fs::remove(path);
    const auto x = detail::as_batch(synth(1, 18)[0].image);
    EXPECT_EQ(loaded.model.forward_mean(x).values(), model.forward_mean(x).values());
    Rng a(1), b(1);
    EXPECT_EQ(loaded.model.forward_stochastic(x, a).probs.values(), model.forward_stochastic(x, b).probs.values());
    EXPECT_EQ(loaded.model.parameter_count(), model.parameter_count());
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const fs::path path = temp_file("bad.ckpt");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOTACKPT";
  }
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  Container c;
  c.header = Json{{"format", "something-else"}};
  write_container(path, c);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  // truncated body
  Rng init(1);
  RunConfig run;
  run.architecture = small(StochasticKind::deterministic);
  run.data.synthetic = SyntheticSpec{};
  run.data.synthetic->image_size = 16;
  SegModel model = build_model(run.architecture, init);
  save_checkpoint(path, model, run);
  fs::resize_file(path, fs::file_size(path) - 16);
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  fs::remove(path);
}

TEST(History, CsvHasHeaderAndFullPrecision) {
  std::vector<HistoryRow> rows = {{1, 0.1, 0.2, 0.3, 0.2}, {2, 1.0 / 3.0, 0.25, 0.5, 0.2}};
  const std::string csv = history_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,val_iou,best_val_loss");
  EXPECT_NE(csv.find("2,0.33333333333333331,"), std::string::npos);
}
