#include <filesystem>
#include <random>

#include "gtest/gtest.h"
#include "sdflow/train.hpp"

using namespace sdflow;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.stage_depths = {2, 2};
  cfg.stage_heads = {1, 2};
  cfg.base_dim = 8;
  cfg.patch = 2;
  cfg.window_t = 2;
  cfg.window_h = 4;
  cfg.window_w = 4;
  cfg.neuron = NeuronKind::Psn;
  cfg.attention = AttentionKind::Qk;
  cfg.encoders = 2;
  cfg.time_steps = 5;
  cfg.in_channels = 4;
  cfg.mlp_ratio = 2;
  cfg.init_seed = 11;
  return cfg;
}

Tensor constant_pred(float u, float v, int64_t h, int64_t w) {
  std::vector<float> d(static_cast<size_t>(2 * h * w));
  for (int64_t i = 0; i < h * w; ++i) {
    d[static_cast<size_t>(i)] = u;
    d[static_cast<size_t>(h * w + i)] = v;
  }
  return Tensor::from_data({1, 2, h, w}, std::move(d));
}

}  // namespace

TEST(L1FlowLoss, PerfectPredictionIsZero) {
  FlowField gt = FlowField::constant(4, 4, 1.5f, -0.5f);
  Tensor pred = constant_pred(1.5f, -0.5f, 4, 4);
  EXPECT_FLOAT_EQ(l1_flow_loss(pred, gt).item(), 0.0f);
}

TEST(L1FlowLoss, SingleValidPixelHandValue) {
  FlowField gt = FlowField::constant(2, 2, 0.0f, 0.0f);
  std::fill(gt.valid.begin(), gt.valid.end(), 0);
  gt.valid[1] = 1;
  Tensor pred = Tensor::zeros({1, 2, 2, 2});
  pred.data()[1] = 1.0f;  // u = 1 at the valid pixel
  EXPECT_FLOAT_EQ(l1_flow_loss(pred, gt).item(), 1.0f);
}

TEST(L1FlowLoss, InvalidPixelsDoNotChangeLoss) {
  FlowField gt = FlowField::constant(4, 4, 0.0f, 0.0f);
  Tensor pred = constant_pred(1.0f, 0.0f, 4, 4);
  float base = l1_flow_loss(pred, gt).item();

  // Invalidate half the pixels but keep prediction error identical on the
  // remainder: the masked mean must not move.
  FlowField gt2 = gt;
  for (size_t i = 0; i < 8; ++i) {
    gt2.valid[i] = 0;
    // Also corrupt pred on the now-invalid pixels.
    pred.data()[i] = 42.0f;
  }
  EXPECT_FLOAT_EQ(l1_flow_loss(pred, gt2).item(), base);
}

TEST(L1FlowLoss, ZeroValidPixelsRejected) {
  FlowField gt = FlowField::constant(2, 2, 0.0f, 0.0f);
  std::fill(gt.valid.begin(), gt.valid.end(), 0);
  Tensor pred = Tensor::zeros({1, 2, 2, 2});
  EXPECT_THROW(l1_flow_loss(pred, gt), std::invalid_argument);
}

TEST(L1FlowLoss, NonNegativeAndZeroOnlyAtEquality) {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
  for (int trial = 0; trial < 10; ++trial) {
    FlowField gt = FlowField::constant(3, 3, dist(rng), dist(rng));
    Tensor pred = constant_pred(dist(rng), dist(rng), 3, 3);
    float l = l1_flow_loss(pred, gt).item();
    EXPECT_GE(l, 0.0f);
    bool equal = pred.data()[0] == gt.u[0] && pred.data()[9] == gt.v[0];
    EXPECT_EQ(l == 0.0f, equal);
  }
}

TEST(L1FlowLoss, GradientMatchesFiniteDifferences) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  FlowField gt = FlowField::constant(3, 3, 0.4f, -0.6f);
  std::vector<float> pd(18);
  for (auto& v : pd) v = dist(rng);
  Tensor pred = Tensor::from_data({1, 2, 3, 3}, pd, true);
  Tensor loss = l1_flow_loss(pred, gt);
  backward(loss);
  const float eps = 1e-3f;
  for (size_t i : {size_t{0}, size_t{4}, size_t{13}, size_t{17}}) {
    float saved = pred.data()[i];
    pred.data()[i] = saved + eps;
    float fp = l1_flow_loss(pred, gt).item();
    pred.data()[i] = saved - eps;
    float fm = l1_flow_loss(pred, gt).item();
    pred.data()[i] = saved;
    float fd = (fp - fm) / (2 * eps);
    EXPECT_NEAR(pred.grad()[i], fd, 1e-3f);
  }
}

TEST(MetricsSuite, PerfectPredictionAllZero) {
  FlowField gt = FlowField::constant(4, 4, 2.0f, -1.0f);
  MetricAccumulator acc;
  acc.add(constant_pred(2.0f, -1.0f, 4, 4), gt);
  Metrics m = acc.finalize();
  EXPECT_DOUBLE_EQ(m.aee, 0.0);
  EXPECT_DOUBLE_EQ(m.outlier_pct, 0.0);
  EXPECT_DOUBLE_EQ(m.aae, 0.0);
}

TEST(MetricsSuite, OutlierAndAeeHandValues) {
  FlowField gt = FlowField::constant(1, 1, 0.0f, 0.0f);
  MetricAccumulator acc;
  acc.add(constant_pred(3.1f, 0.0f, 1, 1), gt);
  Metrics m = acc.finalize();
  EXPECT_NEAR(m.aee, 3.1, 1e-5);
  EXPECT_DOUBLE_EQ(m.outlier_pct, 100.0);
}

TEST(MetricsSuite, AngleConvention) {
  // pred (1,0) vs gt (0,1): arccos(1/2) = 60 degrees under (u,v,1).
  FlowField gt = FlowField::constant(1, 1, 0.0f, 1.0f);
  MetricAccumulator acc;
  acc.add(constant_pred(1.0f, 0.0f, 1, 1), gt);
  EXPECT_NEAR(acc.finalize().aae, 60.0, 1e-4);
}

TEST(MetricsSuite, OrderInvariance) {
  std::mt19937 rng(9);
  std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
  FlowField g1 = FlowField::constant(4, 4, dist(rng), dist(rng));
  FlowField g2 = FlowField::constant(4, 4, dist(rng), dist(rng));
  Tensor p1 = constant_pred(dist(rng), dist(rng), 4, 4);
  Tensor p2 = constant_pred(dist(rng), dist(rng), 4, 4);
  MetricAccumulator a, b;
  a.add(p1, g1);
  a.add(p2, g2);
  b.add(p2, g2);
  b.add(p1, g1);
  Metrics ma = a.finalize(), mb = b.finalize();
  EXPECT_DOUBLE_EQ(ma.aee, mb.aee);
  EXPECT_DOUBLE_EQ(ma.aae, mb.aae);
  EXPECT_DOUBLE_EQ(ma.outlier_pct, mb.outlier_pct);
}

TEST(MetricsSuite, EmptySetRejected) {
  MetricAccumulator acc;
  EXPECT_THROW(acc.finalize(), std::invalid_argument);
}

TEST(Scheduler, HalvesEveryTenEpochs) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.lr_halve_every = 10;
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 9), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 10), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 20), 2.5e-4);
}

TEST(AdamWOptimizer, ZeroLrLeavesParametersBitwise) {
  ModelConfig cfg = tiny_config();
  SdformerFlow model = SdformerFlow::make(cfg);
  ParamMap params = model.params();
  std::vector<std::vector<float>> before;
  for (auto& [n, t] : params.items) before.push_back(t.data());

  std::mt19937 rng(3);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> xd(5 * 4 * 32 * 32);
  for (auto& v : xd) v = dist(rng);
  Sample s;
  s.input = Tensor::from_data({5, 4, 32, 32}, xd);
  s.gt = FlowField::constant(32, 32, 1.0f, 0.0f);

  AdamW opt;
  double loss = train_step(model, opt, params, {&s}, /*lr=*/0.0, true);
  EXPECT_TRUE(std::isfinite(loss));
  size_t i = 0;
  for (auto& [n, t] : params.items) {
    ASSERT_EQ(t.data(), before[i]) << "parameter " << n << " changed under zero lr";
    ++i;
  }
}

TEST(AdamWOptimizer, NonzeroLrMovesParameters) {
  ModelConfig cfg = tiny_config();
  SdformerFlow model = SdformerFlow::make(cfg);
  ParamMap params = model.params();
  auto before = params.items[0].second.data();

  std::mt19937 rng(4);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> xd(5 * 4 * 32 * 32);
  for (auto& v : xd) v = dist(rng);
  Sample s;
  s.input = Tensor::from_data({5, 4, 32, 32}, xd);
  s.gt = FlowField::constant(32, 32, 1.0f, 0.0f);

  AdamW opt;
  train_step(model, opt, params, {&s}, 1e-3, true);
  bool moved = false;
  for (auto& [n, t] : params.items)
    for (size_t j = 0; j < t.data().size(); ++j)
      if (t.has_grad() && t.grad()[j] != 0.0f) moved = true;
  EXPECT_TRUE(moved);
}

TEST(FloFormat, RoundTripWithInvalidPixels) {
  FlowField f = FlowField::constant(5, 3, 1.25f, -2.5f);
  f.valid[7] = 0;
  std::string path = (fs::temp_directory_path() / "test_roundtrip.flo").string();
  write_flo(path, f);
  FlowField r = read_flo(path);
  EXPECT_EQ(r.width, 5);
  EXPECT_EQ(r.height, 3);
  for (size_t i = 0; i < r.valid.size(); ++i) {
    EXPECT_EQ(r.valid[i], f.valid[i]);
    if (r.valid[i]) {
      EXPECT_FLOAT_EQ(r.u[i], 1.25f);
      EXPECT_FLOAT_EQ(r.v[i], -2.5f);
    }
  }
  fs::remove(path);
}

TEST(FloFormat, BadMagicRejected) {
  std::string path = (fs::temp_directory_path() / "bad.flo").string();
  std::ofstream(path) << "not a flo file at all";
  EXPECT_THROW(read_flo(path), DataError);
  fs::remove(path);
}

TEST(FlowViz, ConstantFieldRendersUniform) {
  FlowField f = FlowField::constant(8, 8, 1.0f, 0.0f);
  std::vector<uint8_t> rgb;
  flow_to_rgb(f, rgb);
  for (size_t i = 3; i < rgb.size(); i += 3) {
    EXPECT_EQ(rgb[i], rgb[0]);
    EXPECT_EQ(rgb[i + 1], rgb[1]);
    EXPECT_EQ(rgb[i + 2], rgb[2]);
  }
}

TEST(SynthScenes, FixedFlowGivesConstantGt) {
  SynthConfig cfg;
  cfg.size = 32;
  cfg.fixed_flow = true;
  cfg.flow_u = 2.0f;
  cfg.flow_v = 0.0f;
  SynthScene s = synthesize_scene(cfg, 0);
  for (size_t i = 0; i < s.flow.u.size(); ++i) {
    EXPECT_FLOAT_EQ(s.flow.u[i], 2.0f);
    EXPECT_FLOAT_EQ(s.flow.v[i], 0.0f);
  }
  EXPECT_GT(s.events.events.size(), 100u);  // moving pattern must fire
}

TEST(SynthScenes, DeterministicForFixedSeed) {
  SynthConfig cfg;
  cfg.seed = 99;
  SynthScene a = synthesize_scene(cfg, 3);
  SynthScene b = synthesize_scene(cfg, 3);
  ASSERT_EQ(a.events.events.size(), b.events.events.size());
  for (size_t i = 0; i < a.events.events.size(); ++i) {
    EXPECT_EQ(a.events.events[i].x, b.events.events[i].x);
    EXPECT_EQ(a.events.events[i].t_us, b.events.events[i].t_us);
    EXPECT_EQ(a.events.events[i].p, b.events.events[i].p);
  }
}

TEST(SynthScenes, ZeroFlowProducesNoEvents) {
  SynthConfig cfg;
  cfg.fixed_flow = true;
  cfg.flow_u = 0.0f;
  cfg.flow_v = 0.0f;
  SynthScene s = synthesize_scene(cfg, 0);
  EXPECT_EQ(s.events.events.size(), 0u);
}

TEST(SynthScenes, TimestampsNonDecreasing) {
  SynthConfig cfg;
  SynthScene s = synthesize_scene(cfg, 1);
  int64_t prev = 0;
  for (const Event& e : s.events.events) {
    EXPECT_GE(e.t_us, prev);
    prev = e.t_us;
  }
}

TEST(DatasetIo, SynthesizeAndReload) {
  std::string dir = (fs::temp_directory_path() / "sdflow_synth_test").string();
  fs::remove_all(dir);
  SynthConfig cfg;
  cfg.count = 3;
  cfg.size = 32;
  synthesize_dataset(dir, cfg);
  // Refuses to overwrite without force.
  EXPECT_THROW(synthesize_dataset(dir, cfg), DataError);
  synthesize_dataset(dir, cfg, /*force=*/true);

  auto scenes = load_dataset_dir(dir);
  ASSERT_EQ(scenes.size(), 3u);
  Sample s = load_sample(scenes[0], 10, 2);
  EXPECT_EQ(s.input.shape(), (Shape{5, 4, 32, 32}));
  EXPECT_EQ(s.gt.width, 32);
  fs::remove_all(dir);
}

TEST(Training, FixedSeedReproducesLossesBitwise) {
  SynthConfig scfg;
  scfg.count = 4;
  scfg.size = 32;
  scfg.seed = 5;
  std::vector<Sample> data;
  for (int64_t i = 0; i < scfg.count; ++i) {
    SynthScene scene = synthesize_scene(scfg, static_cast<uint64_t>(i));
    VoxelGrid grid = voxelize(scene.events, 10, 0, scfg.duration_us);
    Sample s;
    s.input = chunk_to_spike_input(grid, 2).data;
    s.gt = scene.flow;
    data.push_back(std::move(s));
  }
  auto run = [&]() {
    ModelConfig mc = tiny_config();
    SdformerFlow model = SdformerFlow::make(mc);
    ParamMap params = model.params();
    AdamW opt;
    TrainConfig tc;
    tc.batch = 2;
    tc.seed = 123;
    std::mt19937 shuffle_rng(static_cast<uint32_t>(tc.seed));
    std::vector<double> losses;
    for (int64_t e = 0; e < 2; ++e) {
      EpochStats st = train_epoch(model, opt, params, data, tc, e, shuffle_rng);
      losses.push_back(st.mean_loss);
    }
    return losses;
  };
  auto a = run();
  auto b = run();
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Training, NanLossAbortsWithDiagnostics) {
  ModelConfig cfg = tiny_config();
  SdformerFlow model = SdformerFlow::make(cfg);
  ParamMap params = model.params();
  // Poison a flow-head weight: it sits on the real-valued output path, so the
  // NaN reaches the loss (spike thresholds would squash NaN to zero).
  for (auto& [name, t] : params.items)
    if (name.find("head0") != std::string::npos) t.data()[0] =
        std::numeric_limits<float>::quiet_NaN();

  std::mt19937 rng(13);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> xd(5 * 4 * 32 * 32);
  for (auto& v : xd) v = dist(rng);
  Sample s;
  s.input = Tensor::from_data({5, 4, 32, 32}, xd);
  s.gt = FlowField::constant(32, 32, 1.0f, 0.0f);

  AdamW opt;
  try {
    train_step(model, opt, params, {&s}, 1e-3, true);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("grad norms"), std::string::npos) << msg;
  }
}
