#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "sdflow/events.hpp"
#include "sdflow/flowio.hpp"
#include "sdflow/model.hpp"

namespace sdflow {

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

// L = (1/n) sum_valid (|u_p - u_g| + |v_p - v_g|), n = valid pixel count.
// Gradient flows to pred only.
inline Tensor l1_flow_loss(const Tensor& pred, const FlowField& gt) {
  SDFLOW_CHECK(pred.ndim() == 4 && pred.dim(0) == 1 && pred.dim(1) == 2,
               "flow prediction must be (1,2,H,W), got " << shape_str(pred.shape()));
  SDFLOW_CHECK(pred.dim(2) == gt.height && pred.dim(3) == gt.width,
               "prediction " << pred.dim(3) << "x" << pred.dim(2) << " vs ground truth "
                             << gt.width << "x" << gt.height);
  int64_t n_valid = gt.valid_count();
  SDFLOW_CHECK(n_valid > 0, "flow loss over zero valid pixels");
  size_t n = static_cast<size_t>(gt.width * gt.height);
  std::vector<float> gt_data(2 * n), mask_data(2 * n);
  for (size_t i = 0; i < n; ++i) {
    gt_data[i] = gt.u[i];
    gt_data[n + i] = gt.v[i];
    float m = gt.valid[i] ? 1.0f : 0.0f;
    mask_data[i] = m;
    mask_data[n + i] = m;
  }
  Tensor gt_t = Tensor::from_data(pred.shape(), std::move(gt_data));
  Tensor mask = Tensor::from_data(pred.shape(), std::move(mask_data));
  Tensor err = op_hadamard(op_abs(op_sub(pred, gt_t)), mask);
  return op_scalar_mul(op_sum_all(err), 1.0f / static_cast<float>(n_valid));
}

struct Metrics {
  double aee = 0.0;
  double outlier_pct = 0.0;
  double aae = 0.0;
};

// Pixel-level accumulator. Per-sample partial sums are combined in sorted
// order at finalize time, so dataset metrics do not depend on the order the
// samples were added in.
struct MetricAccumulator {
  struct Partial {
    double ee_sum = 0.0, angle_sum = 0.0;
    int64_t outliers = 0, pixels = 0;
    bool operator<(const Partial& o) const {
      return std::tie(pixels, ee_sum, angle_sum, outliers) <
             std::tie(o.pixels, o.ee_sum, o.angle_sum, o.outliers);
    }
  };
  std::vector<Partial> partials;

  void add(const Tensor& pred, const FlowField& gt) {
    SDFLOW_CHECK(pred.ndim() == 4 && pred.dim(1) == 2 && pred.dim(2) == gt.height &&
                     pred.dim(3) == gt.width,
                 "metric shapes mismatch");
    size_t n = static_cast<size_t>(gt.width * gt.height);
    const float* up = pred.data().data();
    const float* vp = pred.data().data() + n;
    Partial part;
    for (size_t i = 0; i < n; ++i) {
      if (!gt.valid[i]) continue;
      double du = static_cast<double>(up[i]) - gt.u[i];
      double dv = static_cast<double>(vp[i]) - gt.v[i];
      double ee = std::sqrt(du * du + dv * dv);
      part.ee_sum += ee;
      part.outliers += ee > 3.0;
      double dot = static_cast<double>(up[i]) * gt.u[i] + static_cast<double>(vp[i]) * gt.v[i] +
                   1.0;
      double na = std::sqrt(static_cast<double>(up[i]) * up[i] +
                            static_cast<double>(vp[i]) * vp[i] + 1.0);
      double nb = std::sqrt(static_cast<double>(gt.u[i]) * gt.u[i] +
                            static_cast<double>(gt.v[i]) * gt.v[i] + 1.0);
      double c = std::clamp(dot / (na * nb), -1.0, 1.0);
      part.angle_sum += std::acos(c) * 180.0 / 3.14159265358979323846;
      ++part.pixels;
    }
    partials.push_back(part);
  }

  Metrics finalize() const {
    std::vector<Partial> sorted = partials;
    std::sort(sorted.begin(), sorted.end());
    double ee_sum = 0.0, angle_sum = 0.0;
    int64_t outliers = 0, pixels = 0;
    for (const Partial& p : sorted) {
      ee_sum += p.ee_sum;
      angle_sum += p.angle_sum;
      outliers += p.outliers;
      pixels += p.pixels;
    }
    SDFLOW_CHECK(pixels > 0, "metrics over an empty evaluation set");
    Metrics m;
    m.aee = ee_sum / static_cast<double>(pixels);
    m.outlier_pct = 100.0 * static_cast<double>(outliers) / static_cast<double>(pixels);
    m.aae = angle_sum / static_cast<double>(pixels);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Decoupled-weight-decay Adam
// ---------------------------------------------------------------------------

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-2;
  int64_t steps = 0;
  std::vector<std::vector<float>> m_, v_;

  void step(ParamMap& params, double lr) {
    if (m_.empty()) {
      m_.resize(params.items.size());
      v_.resize(params.items.size());
      for (size_t i = 0; i < params.items.size(); ++i) {
        m_[i].assign(params.items[i].second.data().size(), 0.0f);
        v_[i].assign(params.items[i].second.data().size(), 0.0f);
      }
    }
    SDFLOW_CHECK(m_.size() == params.items.size(), "optimizer state does not match parameters");
    ++steps;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (size_t i = 0; i < params.items.size(); ++i) {
      Tensor& p = params.items[i].second;
      if (!p.has_grad()) continue;
      auto& pd = p.data();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (size_t j = 0; j < pd.size(); ++j) {
        double gj = g[j];
        m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * gj);
        v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * gj * gj);
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        double update = mhat / (std::sqrt(vhat) + eps) + weight_decay * pd[j];
        pd[j] = static_cast<float>(pd[j] - lr * update);
      }
    }
  }
};

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-2;
  int64_t lr_halve_every = 10;  // epochs
  int64_t epochs = 1;
  int64_t batch = 4;
  uint64_t seed = 0;
  bool intermediate_supervision = true;
};

inline double lr_at_epoch(const TrainConfig& cfg, int64_t epoch) {
  SDFLOW_CHECK(cfg.lr > 0.0 || cfg.lr == 0.0, "negative learning rate");
  int64_t halvings = cfg.lr_halve_every > 0 ? epoch / cfg.lr_halve_every : 0;
  return cfg.lr * std::pow(0.5, static_cast<double>(halvings));
}

// ---------------------------------------------------------------------------
// Synthetic translating-pattern scenes
// ---------------------------------------------------------------------------

struct SynthConfig {
  int64_t count = 64;
  int64_t size = 32;
  uint64_t seed = 1;
  int64_t dots = 40;
  float flow_min = 1.0f, flow_max = 3.0f;
  bool fixed_flow = false;
  float flow_u = 0.0f, flow_v = 0.0f;
  int64_t duration_us = 100000;
  int64_t substeps = 24;
  float threshold = 0.15f;  // brightness-change contrast threshold
  bool bars = false;        // bar pattern instead of random dots
};

namespace detail {

// Toroidal pattern of soft dots (or bars) in [0,1].
inline std::vector<float> make_pattern(const SynthConfig& cfg, std::mt19937& rng) {
  int64_t n = cfg.size;
  std::vector<float> img(static_cast<size_t>(n * n), 0.0f);
  std::uniform_real_distribution<float> pos(0.0f, static_cast<float>(n));
  std::uniform_real_distribution<float> rad(1.0f, 2.0f);
  if (cfg.bars) {
    // A few axis-aligned bright bars.
    std::uniform_int_distribution<int64_t> which(0, n - 1);
    for (int64_t b = 0; b < std::max<int64_t>(2, cfg.dots / 10); ++b) {
      bool horizontal = rng() & 1;
      int64_t c = which(rng);
      for (int64_t i = 0; i < n; ++i) {
        if (horizontal)
          img[static_cast<size_t>(c * n + i)] = 1.0f;
        else
          img[static_cast<size_t>(i * n + c)] = 1.0f;
      }
    }
    return img;
  }
  for (int64_t d = 0; d < cfg.dots; ++d) {
    float cx = pos(rng), cy = pos(rng), r = rad(rng);
    int64_t span = static_cast<int64_t>(std::ceil(r)) + 1;
    int64_t icx = static_cast<int64_t>(cx), icy = static_cast<int64_t>(cy);
    for (int64_t dy = -span; dy <= span; ++dy)
      for (int64_t dx = -span; dx <= span; ++dx) {
        int64_t px = ((icx + dx) % n + n) % n;
        int64_t py = ((icy + dy) % n + n) % n;
        float ddx = static_cast<float>(icx + dx) - cx;
        float ddy = static_cast<float>(icy + dy) - cy;
        float val = std::exp(-(ddx * ddx + ddy * ddy) / (0.5f * r * r));
        float& cell = img[static_cast<size_t>(py * n + px)];
        cell = std::max(cell, val);
      }
  }
  return img;
}

// Bilinear sample with toroidal wrap.
inline float sample_wrap(const std::vector<float>& img, int64_t n, float x, float y) {
  float fx = std::floor(x), fy = std::floor(y);
  int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
  float ax = x - fx, ay = y - fy;
  auto at = [&](int64_t yy, int64_t xx) {
    xx = (xx % n + n) % n;
    yy = (yy % n + n) % n;
    return img[static_cast<size_t>(yy * n + xx)];
  };
  return at(y0, x0) * (1 - ay) * (1 - ax) + at(y0, x0 + 1) * (1 - ay) * ax +
         at(y0 + 1, x0) * ay * (1 - ax) + at(y0 + 1, x0 + 1) * ay * ax;
}

}  // namespace detail

struct SynthScene {
  EventStream events;
  FlowField flow;
};

// Brightness-change thresholding of a translating pattern: each pixel keeps a
// reference level and emits one signed event per threshold crossing.
inline SynthScene synthesize_scene(const SynthConfig& cfg, uint64_t scene_index) {
  std::mt19937 rng(static_cast<uint32_t>(cfg.seed * 1000003ull + scene_index));
  float fu, fv;
  if (cfg.fixed_flow) {
    fu = cfg.flow_u;
    fv = cfg.flow_v;
  } else {
    std::uniform_real_distribution<float> ang(0.0f, 2.0f * 3.14159265358979323846f);
    std::uniform_real_distribution<float> mag(cfg.flow_min, cfg.flow_max);
    float a = ang(rng), m = mag(rng);
    fu = m * std::cos(a);
    fv = m * std::sin(a);
  }
  auto pattern = detail::make_pattern(cfg, rng);
  int64_t n = cfg.size;
  std::vector<float> ref(static_cast<size_t>(n * n));
  for (int64_t i = 0; i < n * n; ++i) ref[static_cast<size_t>(i)] = pattern[static_cast<size_t>(i)];

  SynthScene scene;
  scene.events.width = static_cast<int32_t>(n);
  scene.events.height = static_cast<int32_t>(n);
  for (int64_t s = 1; s <= cfg.substeps; ++s) {
    float frac = static_cast<float>(s) / static_cast<float>(cfg.substeps);
    float ox = fu * frac, oy = fv * frac;
    int64_t ts = cfg.duration_us * s / cfg.substeps;
    for (int64_t y = 0; y < n; ++y)
      for (int64_t x = 0; x < n; ++x) {
        float cur = detail::sample_wrap(pattern, n, static_cast<float>(x) - ox,
                                        static_cast<float>(y) - oy);
        float& level = ref[static_cast<size_t>(y * n + x)];
        while (cur - level >= cfg.threshold) {
          scene.events.events.push_back(
              {static_cast<int32_t>(x), static_cast<int32_t>(y), ts, 1});
          level += cfg.threshold;
        }
        while (level - cur >= cfg.threshold) {
          scene.events.events.push_back(
              {static_cast<int32_t>(x), static_cast<int32_t>(y), ts, -1});
          level -= cfg.threshold;
        }
      }
  }
  scene.flow = FlowField::constant(n, n, fu, fv);
  return scene;
}

// ---------------------------------------------------------------------------
// On-disk datasets: manifest.txt lines "events.bin flow.flo"
// ---------------------------------------------------------------------------

struct SceneFiles {
  std::string events_path;
  std::string flow_path;
};

inline void synthesize_dataset(const std::string& dir, const SynthConfig& cfg,
                               bool force = false) {
  namespace fs = std::filesystem;
  fs::path root(dir);
  if (fs::exists(root) && !fs::is_empty(root) && !force)
    throw DataError("output directory not empty (use force): " + dir);
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.txt");
  if (!manifest) throw DataError("cannot write manifest in " + dir);
  for (int64_t i = 0; i < cfg.count; ++i) {
    SynthScene scene = synthesize_scene(cfg, static_cast<uint64_t>(i));
    char ev_name[64], fl_name[64];
    std::snprintf(ev_name, sizeof(ev_name), "scene_%04lld.bin", static_cast<long long>(i));
    std::snprintf(fl_name, sizeof(fl_name), "scene_%04lld.flo", static_cast<long long>(i));
    write_events_bin((root / ev_name).string(), scene.events);
    write_flo((root / fl_name).string(), scene.flow);
    manifest << ev_name << " " << fl_name << "\n";
  }
}

inline std::vector<SceneFiles> load_dataset_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::path manifest = fs::path(dir) / "manifest.txt";
  std::ifstream in(manifest);
  if (!in) throw DataError("no manifest.txt in " + dir);
  std::vector<SceneFiles> scenes;
  std::string ev, fl;
  while (in >> ev >> fl)
    scenes.push_back({(fs::path(dir) / ev).string(), (fs::path(dir) / fl).string()});
  if (scenes.empty()) throw DataError("empty dataset manifest in " + dir);
  return scenes;
}

struct Sample {
  Tensor input;   // (T, C, H, W)
  FlowField gt;
};

inline Sample load_sample(const SceneFiles& files, int64_t bins, int64_t blocks) {
  EventStream stream = parse_events(files.events_path, EventFormat::BinV1);
  VoxelGrid grid = voxelize(stream, bins, stream.t_first(), stream.t_last());
  SpikeInput si = chunk_to_spike_input(grid, blocks);
  Sample s;
  s.input = si.data;
  s.gt = read_flo(files.flow_path);
  return s;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

// Stacks per-sample (T,C,H,W) inputs into the model's time-major
// (T*B, C, H, W) layout: row t*B + b holds sample b at step t.
inline Tensor stack_time_major(const std::vector<const Sample*>& batch) {
  SDFLOW_CHECK(!batch.empty(), "empty batch");
  const Shape& s0 = batch[0]->input.shape();
  int64_t T = s0[0], C = s0[1], H = s0[2], W = s0[3];
  int64_t B = static_cast<int64_t>(batch.size());
  int64_t plane = C * H * W;
  std::vector<float> out(static_cast<size_t>(T * B * plane));
  for (int64_t b = 0; b < B; ++b) {
    SDFLOW_CHECK(batch[static_cast<size_t>(b)]->input.shape() == s0,
                 "batch samples disagree on input shape");
    const auto& src = batch[static_cast<size_t>(b)]->input.data();
    for (int64_t t = 0; t < T; ++t)
      std::copy(src.begin() + t * plane, src.begin() + (t + 1) * plane,
                out.begin() + (t * B + b) * plane);
  }
  return Tensor::from_data({T * B, C, H, W}, std::move(out));
}

// Mean over the batch of the per-sample supervision losses; each scale is
// upsampled to full resolution and weighted equally when intermediate
// supervision is on.
inline Tensor batched_supervision_loss(const FlowPrediction& pred,
                                       const std::vector<const Sample*>& batch,
                                       bool intermediate) {
  int64_t B = static_cast<int64_t>(batch.size());
  int64_t H = batch[0]->gt.height, W = batch[0]->gt.width;
  Tensor total;
  auto add_term = [&](const Tensor& t) { total = total.defined() ? op_add(total, t) : t; };
  for (int64_t b = 0; b < B; ++b) {
    const FlowField& gt = batch[static_cast<size_t>(b)]->gt;
    if (intermediate) {
      for (const Tensor& scale : pred.scale_flows) {
        Tensor one = op_slice(scale, 0, b, 1);
        Tensor up = (one.dim(2) == H && one.dim(3) == W) ? one
                                                         : op_upsample_bilinear(one, H, W);
        add_term(l1_flow_loss(up, gt));
      }
    } else {
      add_term(l1_flow_loss(op_slice(pred.final_flow, 0, b, 1), gt));
    }
  }
  return op_scalar_mul(total, 1.0f / static_cast<float>(B));
}

inline std::string nan_diagnostics(SdformerFlow& model, const Tensor& input, int64_t batch) {
  std::ostringstream os;
  os << "grad norms:";
  ParamMap pm = model.params();
  int listed = 0;
  for (auto& [name, t] : pm.items) {
    if (!t.has_grad()) continue;
    double norm = 0.0;
    for (float g : t.grad()) norm += static_cast<double>(g) * g;
    if (listed++ < 8) os << " " << name << "=" << std::sqrt(norm);
  }
  EnergyTracker tracker;
  try {
    model.forward(input, &tracker, batch);
    os << "; spike rates:";
    int shown = 0;
    for (const auto& st : tracker.layers()) {
      if (st.kind != CostKind::SpikeGated) continue;
      if (shown++ < 8) os << " " << st.name << "=" << st.spike_rate();
    }
  } catch (...) {
    os << "; (probe forward failed)";
  }
  return os.str();
}

// One optimizer step over a jointly-normalized batch. Returns the mean loss.
// Throws NumericError on NaN loss.
inline double train_step(SdformerFlow& model, AdamW& opt, ParamMap& params,
                         const std::vector<const Sample*>& batch, double lr,
                         bool intermediate_supervision) {
  SDFLOW_CHECK(!batch.empty(), "training step over an empty batch");
  for (auto& [name, t] : params.items) t.zero_grad();
  int64_t B = static_cast<int64_t>(batch.size());
  Tensor input = stack_time_major(batch);
  FlowPrediction pred = model.forward(input, nullptr, B);
  Tensor loss = batched_supervision_loss(pred, batch, intermediate_supervision);
  double lv = loss.item();
  if (!std::isfinite(lv))
    throw NumericError("loss is not finite; " + nan_diagnostics(model, input, B));
  backward(loss);
  opt.step(params, lr);
  return lv;
}

struct EpochStats {
  double mean_loss = 0.0;
  int64_t steps = 0;
};

inline EpochStats train_epoch(SdformerFlow& model, AdamW& opt, ParamMap& params,
                              const std::vector<Sample>& dataset, const TrainConfig& cfg,
                              int64_t epoch, std::mt19937& shuffle_rng,
                              int64_t max_steps = -1) {
  SDFLOW_CHECK(!dataset.empty(), "training over an empty dataset");
  std::vector<size_t> order(dataset.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  double lr = lr_at_epoch(cfg, epoch);
  EpochStats stats;
  double loss_sum = 0.0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
    if (max_steps >= 0 && stats.steps >= max_steps) break;
    std::vector<const Sample*> batch;
    for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(cfg.batch)); ++i)
      batch.push_back(&dataset[order[i]]);
    loss_sum += train_step(model, opt, params, batch, lr, cfg.intermediate_supervision);
    ++stats.steps;
  }
  stats.mean_loss = stats.steps > 0 ? loss_sum / static_cast<double>(stats.steps) : 0.0;
  return stats;
}

// Evaluation uses the statistics of each evaluation batch, matching training
// normalization.
inline Metrics evaluate(const SdformerFlow& model, const std::vector<Sample>& dataset,
                        int64_t eval_batch = 8) {
  SDFLOW_CHECK(!dataset.empty(), "evaluation over an empty dataset");
  SDFLOW_CHECK(eval_batch >= 1, "evaluation batch must be positive");
  MetricAccumulator acc;
  for (size_t start = 0; start < dataset.size(); start += static_cast<size_t>(eval_batch)) {
    std::vector<const Sample*> batch;
    for (size_t i = start; i < std::min(dataset.size(), start + static_cast<size_t>(eval_batch));
         ++i)
      batch.push_back(&dataset[i]);
    Tensor input = stack_time_major(batch);
    FlowPrediction pred = model.forward(input, nullptr, static_cast<int64_t>(batch.size()));
    for (size_t b = 0; b < batch.size(); ++b)
      acc.add(op_slice(pred.final_flow, 0, static_cast<int64_t>(b), 1), batch[b]->gt);
  }
  return acc.finalize();
}

// Runs single inference streams over the probe set with spike-rate hooks
// attached and prices the observed work under the chosen execution model.
inline EnergyReport estimate_energy(const SdformerFlow& model, const std::vector<Sample>& probe,
                                    EnergyMode mode) {
  SDFLOW_CHECK(!probe.empty(), "energy estimate over an empty probe set");
  EnergyTracker tracker;
  for (const Sample& s : probe) model.forward(s.input, &tracker);
  return build_energy_report(tracker, mode);
}

// Line-delimited structured metrics record.
inline std::string metrics_record(int64_t epoch, const std::string& split, double loss,
                                  const Metrics* m) {
  std::ostringstream os;
  os << "epoch=" << epoch << " split=" << split << " loss=" << loss;
  if (m) os << " aee=" << m->aee << " outlier_pct=" << m->outlier_pct << " aae=" << m->aae;
  return os.str();
}

}  // namespace sdflow
