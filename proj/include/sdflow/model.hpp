#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdflow/attention.hpp"
#include "sdflow/layers.hpp"

namespace sdflow {

enum class AttentionKind { Dot, Qk };
enum class ShortcutKind { Ms, Sew };

struct ModelConfig {
  std::vector<int64_t> stage_depths{2, 2, 6, 2};
  std::vector<int64_t> stage_heads{3, 6, 12, 24};
  int64_t base_dim = 96;
  int64_t patch = 2;
  int64_t window_t = 2, window_h = 9, window_w = 9;
  NeuronKind neuron = NeuronKind::Lif;
  AttentionKind attention = AttentionKind::Dot;
  ShortcutKind shortcut = ShortcutKind::Ms;
  bool use_spe_shortcut = true;
  int64_t encoders = 4;
  int64_t time_steps = 5;
  int64_t in_channels = 4;
  int64_t mlp_ratio = 4;
  float tau = 2.0f;
  float v_threshold = 0.1f;
  float v_reset = 0.0f;
  float surrogate_width = 2.0f;
  bool detach_reset = false;
  uint64_t init_seed = 42;

  int64_t stage_dim(int64_t l) const { return base_dim << l; }
  int64_t spatial_divisor() const { return 2 * patch * (int64_t{1} << (encoders - 1)); }

  LifParams lif_params() const {
    LifParams p;
    p.tau = tau;
    p.v_threshold = v_threshold;
    p.v_reset = v_reset;
    p.surrogate.width = surrogate_width;
    p.detach_reset = detach_reset;
    return p;
  }

  void validate() const {
    SDFLOW_CHECK(encoders >= 2 && encoders <= 4, "encoders must be 2..4, got " << encoders);
    SDFLOW_CHECK(static_cast<int64_t>(stage_depths.size()) == encoders &&
                     static_cast<int64_t>(stage_heads.size()) == encoders,
                 "stage_depths/stage_heads must list one entry per encoder");
    for (int64_t l = 0; l < encoders; ++l) {
      SDFLOW_CHECK(stage_depths[l] >= 2 && stage_depths[l] % 2 == 0,
                   "stage depth must be even and >= 2, got " << stage_depths[l]);
      SDFLOW_CHECK(stage_dim(l) % stage_heads[l] == 0,
                   "stage " << l << " dim " << stage_dim(l) << " not divisible by "
                            << stage_heads[l] << " heads");
    }
    SDFLOW_CHECK(base_dim >= 1 && patch >= 1 && time_steps >= 1 && in_channels >= 1 &&
                     mlp_ratio >= 1,
                 "model dims must be positive");
    SDFLOW_CHECK(window_t >= 1 && window_h >= 1 && window_w >= 1, "window extents must be >= 1");
    SDFLOW_CHECK(tau > 1.0f, "tau must be > 1");
    SDFLOW_CHECK(v_threshold > v_reset, "v_threshold must exceed v_reset");
  }

  std::string serialize() const {
    auto join = [](const std::vector<int64_t>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    auto fstr = [](float v) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
      return std::string(buf);
    };
    std::ostringstream os;
    os << "stage_depths=" << join(stage_depths) << "\n";
    os << "stage_heads=" << join(stage_heads) << "\n";
    os << "base_dim=" << base_dim << "\n";
    os << "patch=" << patch << "\n";
    os << "window=" << window_t << "," << window_h << "," << window_w << "\n";
    os << "neuron=" << (neuron == NeuronKind::Lif ? "lif" : "psn") << "\n";
    os << "attention=" << (attention == AttentionKind::Dot ? "dot" : "qk") << "\n";
    os << "shortcut=" << (shortcut == ShortcutKind::Ms ? "ms" : "sew") << "\n";
    os << "use_spe_shortcut=" << (use_spe_shortcut ? 1 : 0) << "\n";
    os << "encoders=" << encoders << "\n";
    os << "time_steps=" << time_steps << "\n";
    os << "in_channels=" << in_channels << "\n";
    os << "mlp_ratio=" << mlp_ratio << "\n";
    os << "tau=" << fstr(tau) << "\n";
    os << "v_threshold=" << fstr(v_threshold) << "\n";
    os << "v_reset=" << fstr(v_reset) << "\n";
    os << "surrogate_width=" << fstr(surrogate_width) << "\n";
    os << "detach_reset=" << (detach_reset ? 1 : 0) << "\n";
    os << "init_seed=" << init_seed << "\n";
    return os.str();
  }

  static ModelConfig deserialize(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    auto parse_list = [](const std::string& v) {
      std::vector<int64_t> out;
      std::istringstream ls(v);
      std::string item;
      while (std::getline(ls, item, ',')) out.push_back(std::stoll(item));
      return out;
    };
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("bad model config line: " + line);
      std::string key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "stage_depths") cfg.stage_depths = parse_list(val);
      else if (key == "stage_heads") cfg.stage_heads = parse_list(val);
      else if (key == "base_dim") cfg.base_dim = std::stoll(val);
      else if (key == "patch") cfg.patch = std::stoll(val);
      else if (key == "window") {
        auto w = parse_list(val);
        if (w.size() != 3) throw DataError("window needs three extents");
        cfg.window_t = w[0];
        cfg.window_h = w[1];
        cfg.window_w = w[2];
      } else if (key == "neuron") cfg.neuron = val == "psn" ? NeuronKind::Psn : NeuronKind::Lif;
      else if (key == "attention")
        cfg.attention = val == "qk" ? AttentionKind::Qk : AttentionKind::Dot;
      else if (key == "shortcut") cfg.shortcut = val == "sew" ? ShortcutKind::Sew : ShortcutKind::Ms;
      else if (key == "use_spe_shortcut") cfg.use_spe_shortcut = val != "0";
      else if (key == "encoders") cfg.encoders = std::stoll(val);
      else if (key == "time_steps") cfg.time_steps = std::stoll(val);
      else if (key == "in_channels") cfg.in_channels = std::stoll(val);
      else if (key == "mlp_ratio") cfg.mlp_ratio = std::stoll(val);
      else if (key == "tau") cfg.tau = std::stof(val);
      else if (key == "v_threshold") cfg.v_threshold = std::stof(val);
      else if (key == "v_reset") cfg.v_reset = std::stof(val);
      else if (key == "surrogate_width") cfg.surrogate_width = std::stof(val);
      else if (key == "detach_reset") cfg.detach_reset = val != "0";
      else if (key == "init_seed") cfg.init_seed = std::stoull(val);
      else throw DataError("unknown model config key: " + key);
    }
    cfg.validate();
    return cfg;
  }
};

// FNV-1a over the serialized config, used to detect checkpoint mismatches.
inline uint64_t config_hash(const ModelConfig& cfg) {
  uint64_t h = 1469598103934665603ull;
  for (char c : cfg.serialize()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// (T,D,H,W) -> (T,4D,H/2,W/2); channel order (d, dy, dx).
inline Tensor space_to_depth_2x2(const Tensor& x) {
  SDFLOW_CHECK(x.ndim() == 4, "patch merge expects (T,D,H,W)");
  int64_t T = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  SDFLOW_CHECK(H % 2 == 0 && W % 2 == 0,
               "patch merge needs even spatial dims, got " << shape_str(x.shape()));
  Tensor y = op_reshape(x, {T, D, H / 2, 2, W / 2, 2});
  y = op_permute(y, {0, 1, 3, 5, 2, 4});
  return op_reshape(y, {T, D * 4, H / 2, W / 2});
}

namespace nets {

inline NeuronLayer make_neuron(const ModelConfig& cfg) {
  if (cfg.neuron == NeuronKind::Lif) return NeuronLayer::make_lif(cfg.lif_params());
  LifParams p = cfg.lif_params();
  return NeuronLayer::make_psn(p.tau, cfg.time_steps, p.v_threshold, p.surrogate);
}

// x + BN2(Conv2(SN2(BN1(Conv1(SN1(x)))))), residual in the membrane domain.
struct MsResBlock {
  NeuronLayer sn1, sn2;
  Conv2dLayer conv1, conv2;
  BatchNormLayer bn1, bn2;

  static MsResBlock make(const std::string& name, int64_t dim, const ModelConfig& cfg,
                         std::mt19937& rng) {
    MsResBlock b;
    b.sn1 = make_neuron(cfg);
    b.sn2 = make_neuron(cfg);
    b.conv1 = Conv2dLayer::make(name + ".conv1", dim, dim, 3, 1, 1, false, rng);
    b.conv2 = Conv2dLayer::make(name + ".conv2", dim, dim, 3, 1, 1, false, rng);
    b.bn1 = BatchNormLayer::make(name + ".bn1", dim);
    b.bn2 = BatchNormLayer::make(name + ".bn2", dim);
    b.name_ = name;
    return b;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    Tensor h = bn1.forward(conv1.forward(sn1.forward(x, batch), prof));
    h = bn2.forward(conv2.forward(sn2.forward(h, batch), prof));
    return op_add(x, h);
  }

  void collect(ParamMap& out) const {
    conv1.collect(out);
    conv2.collect(out);
    bn1.collect(out);
    bn2.collect(out);
    collect_neuron_params(sn1, name_ + ".sn1", out);
    collect_neuron_params(sn2, name_ + ".sn2", out);
  }

  std::string name_;
};

// Feature generator: strided spiking conv stem plus two residual blocks.
struct SfgModule {
  Conv2dLayer head;  // real-valued input
  NeuronLayer sn;
  Conv2dLayer down;
  BatchNormLayer bn;
  MsResBlock res1, res2;

  static SfgModule make(const ModelConfig& cfg, std::mt19937& rng) {
    SfgModule m;
    int64_t d = cfg.base_dim;
    m.head = Conv2dLayer::make("sfg.head", cfg.in_channels, d, 3, 1, 1, true, rng,
                               /*spike_input=*/false);
    m.sn = make_neuron(cfg);
    m.down = Conv2dLayer::make("sfg.down", d, d, 3, 2, 1, false, rng);
    m.bn = BatchNormLayer::make("sfg.bn", d);
    m.res1 = MsResBlock::make("sfg.res1", d, cfg, rng);
    m.res2 = MsResBlock::make("sfg.res2", d, cfg, rng);
    return m;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    Tensor z = bn.forward(down.forward(sn.forward(head.forward(x, prof), batch), prof));
    return res2.forward(res1.forward(z, prof, batch), prof, batch);
  }

  void collect(ParamMap& out) const {
    head.collect(out);
    down.collect(out);
    bn.collect(out);
    res1.collect(out);
    res2.collect(out);
    collect_neuron_params(sn, "sfg.sn", out);
  }
};

// Patch embedding with an optional strided 1x1 shortcut.
struct SpeModule {
  NeuronLayer sn;
  Conv2dLayer conv;      // PxP stride P
  BatchNormLayer bn;
  Conv2dLayer deformed;  // 1x1 stride P on the raw input
  bool use_shortcut = true;

  static SpeModule make(const ModelConfig& cfg, std::mt19937& rng) {
    SpeModule m;
    int64_t d = cfg.base_dim;
    int p = static_cast<int>(cfg.patch);
    m.sn = make_neuron(cfg);
    m.conv = Conv2dLayer::make("spe.conv", d, d, p, p, 0, false, rng);
    m.bn = BatchNormLayer::make("spe.bn", d);
    m.deformed = Conv2dLayer::make("spe.deformed", d, d, 1, p, 0, false, rng,
                                   /*spike_input=*/false);
    m.use_shortcut = cfg.use_spe_shortcut;
    return m;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    SDFLOW_CHECK(x.dim(2) % conv.stride == 0 && x.dim(3) % conv.stride == 0,
                 "patch embedding needs dims divisible by " << conv.stride << ", got "
                                                            << shape_str(x.shape()));
    Tensor main = bn.forward(conv.forward(sn.forward(x, batch), prof));
    if (!use_shortcut) return main;
    return op_add(main, deformed.forward(x, prof));
  }

  void collect(ParamMap& out) const {
    conv.collect(out);
    bn.collect(out);
    if (use_shortcut) deformed.collect(out);
    collect_neuron_params(sn, "spe.sn", out);
  }
};

// BN2(Linear2(SN2(BN1(Linear1(SN1(x))))))
struct SmlpBlock {
  NeuronLayer sn1, sn2;
  Linear lin1, lin2;
  BatchNormLayer bn1, bn2;
  std::string name_;

  static SmlpBlock make(const std::string& name, int64_t dim, const ModelConfig& cfg,
                        std::mt19937& rng) {
    SmlpBlock b;
    int64_t hidden = dim * cfg.mlp_ratio;
    b.sn1 = make_neuron(cfg);
    b.sn2 = make_neuron(cfg);
    b.lin1 = Linear::make(name + ".lin1", dim, hidden, false, rng);
    b.lin2 = Linear::make(name + ".lin2", hidden, dim, false, rng);
    b.bn1 = BatchNormLayer::make(name + ".bn1", hidden);
    b.bn2 = BatchNormLayer::make(name + ".bn2", dim);
    b.name_ = name;
    return b;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    Tensor h = bn1.forward(lin1.forward_tchw(sn1.forward(x, batch), prof));
    return bn2.forward(lin2.forward_tchw(sn2.forward(h, batch), prof));
  }

  void collect(ParamMap& out) const {
    lin1.collect(out);
    lin2.collect(out);
    bn1.collect(out);
    bn2.collect(out);
    collect_neuron_params(sn1, name_ + ".sn1", out);
    collect_neuron_params(sn2, name_ + ".sn2", out);
  }
};

// One attention + MLP block with the configured shortcut family.
struct StsfBlock {
  ShortcutKind shortcut = ShortcutKind::Ms;
  std::optional<SdsaDotBlock> dot;
  std::optional<SdsaQkBlock> qk;
  SmlpBlock mlp;
  NeuronLayer sew_sn_attn, sew_sn_mlp;
  std::string name_;

  static StsfBlock make(const std::string& name, int64_t dim, int64_t heads, bool shifted,
                        const ModelConfig& cfg, std::mt19937& rng) {
    StsfBlock b;
    b.name_ = name;
    b.shortcut = cfg.shortcut;
    WindowConfig win;
    win.t_w = cfg.window_t;
    win.h_w = cfg.window_h;
    win.w_w = cfg.window_w;
    win.heads = heads;
    win = shifted ? win.with_half_shift() : win.without_shift();
    if (cfg.attention == AttentionKind::Dot)
      b.dot = SdsaDotBlock::make(name + ".attn", dim, win, cfg.neuron, cfg.lif_params(),
                                 cfg.time_steps, rng);
    else
      b.qk = SdsaQkBlock::make(name + ".attn", dim, win, cfg.neuron, cfg.lif_params(),
                               cfg.time_steps, rng);
    b.mlp = SmlpBlock::make(name + ".mlp", dim, cfg, rng);
    if (cfg.shortcut == ShortcutKind::Sew) {
      b.sew_sn_attn = make_neuron(cfg);
      b.sew_sn_mlp = make_neuron(cfg);
    }
    return b;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    Tensor a = dot ? dot->forward(x, prof, batch) : qk->forward(x, prof, batch);
    Tensor y = shortcut == ShortcutKind::Ms ? op_add(x, a)
                                            : op_add(x, sew_sn_attn.forward(a, batch));
    Tensor m = mlp.forward(y, prof, batch);
    return shortcut == ShortcutKind::Ms ? op_add(y, m)
                                        : op_add(y, sew_sn_mlp.forward(m, batch));
  }

  void collect(ParamMap& out) const {
    if (dot) dot->collect(out);
    if (qk) qk->collect(out);
    mlp.collect(out);
    if (shortcut == ShortcutKind::Sew) {
      collect_neuron_params(sew_sn_attn, name_ + ".sew_sn_attn", out);
      collect_neuron_params(sew_sn_mlp, name_ + ".sew_sn_mlp", out);
    }
  }
};

// Alternating regular / shifted window blocks.
struct StageModule {
  std::vector<StsfBlock> blocks;

  static StageModule make(const std::string& name, int64_t dim, int64_t heads, int64_t depth,
                          const ModelConfig& cfg, std::mt19937& rng) {
    SDFLOW_CHECK(depth % 2 == 0, "stage depth must be even, got " << depth);
    StageModule s;
    for (int64_t m = 0; m < depth; ++m)
      s.blocks.push_back(StsfBlock::make(name + ".block" + std::to_string(m), dim, heads,
                                         /*shifted=*/m % 2 == 1, cfg, rng));
    return s;
  }

  Tensor forward(Tensor x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    for (const auto& b : blocks) x = b.forward(x, prof, batch);
    return x;
  }

  void collect(ParamMap& out) const {
    for (const auto& b : blocks) b.collect(out);
  }
};

// Spatial 2x downsampling: neighborhood concat + linear, time preserved.
struct SpmModule {
  NeuronLayer sn;
  Linear lin;
  BatchNormLayer bn;
  std::string name_;

  static SpmModule make(const std::string& name, int64_t dim, const ModelConfig& cfg,
                        std::mt19937& rng) {
    SpmModule m;
    m.name_ = name;
    m.sn = make_neuron(cfg);
    m.lin = Linear::make(name + ".lin", 4 * dim, 2 * dim, false, rng);
    m.bn = BatchNormLayer::make(name + ".bn", 2 * dim);
    return m;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    SDFLOW_CHECK(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                 "patch merge needs even spatial dims, got " << shape_str(x.shape()));
    Tensor merged = space_to_depth_2x2(sn.forward(x, batch));
    return bn.forward(lin.forward_tchw(merged, prof));
  }

  void collect(ParamMap& out) const {
    lin.collect(out);
    bn.collect(out);
    collect_neuron_params(sn, name_ + ".sn", out);
  }
};

// BN(ConvTrans(SN(skip ⊕ previous flow prediction)))
struct DecoderModule {
  NeuronLayer sn;
  ConvTranspose2dLayer deconv;
  BatchNormLayer bn;
  std::string name_;

  static DecoderModule make(const std::string& name, int64_t cin, int64_t cout,
                            const ModelConfig& cfg, std::mt19937& rng) {
    DecoderModule d;
    d.name_ = name;
    d.sn = make_neuron(cfg);
    d.deconv = ConvTranspose2dLayer::make(name + ".deconv", cin, cout, 4, 2, 1, false, rng);
    d.bn = BatchNormLayer::make(name + ".bn", cout);
    return d;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    return bn.forward(deconv.forward(sn.forward(x, batch), prof));
  }

  void collect(ParamMap& out) const {
    deconv.collect(out);
    bn.collect(out);
    collect_neuron_params(sn, name_ + ".sn", out);
  }
};

struct FlowHeadModule {
  Conv2dLayer conv;

  static FlowHeadModule make(const std::string& name, int64_t cin, std::mt19937& rng) {
    FlowHeadModule h;
    h.conv = Conv2dLayer::make(name + ".conv", cin, 2, 3, 1, 1, true, rng, /*spike_input=*/false);
    return h;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr) const {
    return conv.forward(x, prof);
  }

  void collect(ParamMap& out) const { conv.collect(out); }
};

}  // namespace nets

struct FlowPrediction {
  std::vector<Tensor> scale_flows;  // coarse to fine, (1,2,h,w) each
  Tensor final_flow;                // (1,2,H,W), bilinearly upsampled last scale
};

struct SdformerFlow {
  ModelConfig cfg;
  nets::SfgModule sfg;
  nets::SpeModule spe;
  std::vector<nets::StageModule> stages;
  std::vector<nets::SpmModule> spms;
  nets::MsResBlock bott1, bott2;
  std::vector<nets::DecoderModule> decoders;
  std::vector<nets::FlowHeadModule> heads;

  static SdformerFlow make(const ModelConfig& cfg) {
    cfg.validate();
    SdformerFlow m;
    m.cfg = cfg;
    std::mt19937 rng(static_cast<uint32_t>(cfg.init_seed));
    m.sfg = nets::SfgModule::make(cfg, rng);
    m.spe = nets::SpeModule::make(cfg, rng);
    int64_t L = cfg.encoders;
    for (int64_t l = 0; l < L; ++l) {
      m.stages.push_back(nets::StageModule::make("enc" + std::to_string(l), cfg.stage_dim(l),
                                                 cfg.stage_heads[l], cfg.stage_depths[l], cfg,
                                                 rng));
      if (l + 1 < L)
        m.spms.push_back(
            nets::SpmModule::make("spm" + std::to_string(l), cfg.stage_dim(l), cfg, rng));
    }
    m.bott1 = nets::MsResBlock::make("bott1", cfg.stage_dim(L - 1), cfg, rng);
    m.bott2 = nets::MsResBlock::make("bott2", cfg.stage_dim(L - 1), cfg, rng);
    for (int64_t i = 0; i + 1 < L; ++i) {
      int64_t cin = cfg.stage_dim(L - 1 - i) + 2;
      int64_t cout = cfg.stage_dim(L - 2 - i);
      m.decoders.push_back(
          nets::DecoderModule::make("dec" + std::to_string(i), cin, cout, cfg, rng));
      m.heads.push_back(nets::FlowHeadModule::make("head" + std::to_string(i), cout, rng));
    }
    return m;
  }

  // x: (T*batch, C, H, W), time-major (row t*batch + b holds sample b at
  // step t); T == cfg.time_steps; H,W divisible by 2 * patch * 2^(encoders-1).
  // Flow outputs carry the batch on their leading axis.
  FlowPrediction forward(const Tensor& x, EnergyTracker* prof = nullptr,
                         int64_t batch = 1) const {
    SDFLOW_CHECK(x.ndim() == 4, "model input must be (T,C,H,W)");
    SDFLOW_CHECK(batch >= 1 && x.dim(0) == cfg.time_steps * batch,
                 "input has " << x.dim(0) << " rows, model expects " << cfg.time_steps << " x "
                              << batch);
    SDFLOW_CHECK(x.dim(1) == cfg.in_channels,
                 "input has " << x.dim(1) << " channels, model expects " << cfg.in_channels);
    int64_t div = cfg.spatial_divisor();
    SDFLOW_CHECK(x.dim(2) % div == 0 && x.dim(3) % div == 0,
                 "input " << x.dim(2) << "x" << x.dim(3) << " must be divisible by " << div);
    int64_t T = cfg.time_steps, H = x.dim(2), W = x.dim(3), L = cfg.encoders;

    Tensor z = spe.forward(sfg.forward(x, prof, batch), prof, batch);
    std::vector<Tensor> skips;
    for (int64_t l = 0; l < L; ++l) {
      z = stages[l].forward(z, prof, batch);
      skips.push_back(z);
      if (l + 1 < L) z = spms[l].forward(z, prof, batch);
    }
    Tensor bott = bott2.forward(bott1.forward(skips[L - 1], prof, batch), prof, batch);

    FlowPrediction out;
    for (int64_t i = 0; i + 1 < L; ++i) {
      Tensor skip = i == 0 ? bott : skips[L - 1 - i];
      int64_t sh = skip.dim(2), sw = skip.dim(3);
      Tensor prev_flow = i == 0 ? Tensor::zeros({batch, 2, sh, sw}) : out.scale_flows.back();
      // Repeat the per-sample flow across the time-major leading axis.
      Tensor tiled = T == 1 ? prev_flow
                            : op_concat(std::vector<Tensor>(static_cast<size_t>(T), prev_flow), 0);
      Tensor dec_in = op_concat({skip, tiled}, 1);
      Tensor dec_out = decoders[i].forward(dec_in, prof, batch);
      int64_t dh = dec_out.dim(2), dw = dec_out.dim(3), dc = dec_out.dim(1);
      Tensor feat = op_mean_axis(op_reshape(dec_out, {T, batch * dc * dh * dw}), 0);
      feat = op_reshape(feat, {batch, dc, dh, dw});
      out.scale_flows.push_back(heads[i].forward(feat, prof));
    }
    out.final_flow = op_upsample_bilinear(out.scale_flows.back(), H, W);
    return out;
  }

  ParamMap params() const {
    ParamMap out;
    sfg.collect(out);
    spe.collect(out);
    for (const auto& s : stages) s.collect(out);
    for (const auto& s : spms) s.collect(out);
    bott1.collect(out);
    bott2.collect(out);
    for (const auto& d : decoders) d.collect(out);
    for (const auto& h : heads) h.collect(out);
    return out;
  }

  int64_t param_count() const { return params().total_count(); }
};

// ---------------------------------------------------------------------------
// Checkpoint: magic "SDFF", u32 version, length-prefixed config text, then
// named blobs (u32 name len, name, u8 dtype tag, u32 ndim, u32 dims...,
// little-endian f32 data).
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void ck_write_le(std::ostream& out, T value) {
  uint64_t v = 0;
  std::memcpy(&v, &value, sizeof(T));
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
void ck_read_le(std::istream& in, T& out) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  std::memcpy(&out, &v, sizeof(T));
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SdformerFlow& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  out.write("SDFF", 4);
  detail::ck_write_le(out, static_cast<uint32_t>(1));
  std::string cfg_text = model.cfg.serialize();
  detail::ck_write_le(out, static_cast<uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  ParamMap pm = model.params();
  detail::ck_write_le(out, static_cast<uint32_t>(pm.items.size()));
  for (const auto& [name, t] : pm.items) {
    detail::ck_write_le(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    out.put(0);  // dtype tag: f32
    detail::ck_write_le(out, static_cast<uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) detail::ck_write_le(out, static_cast<uint32_t>(t.dim(d)));
    for (float v : t.data()) detail::ck_write_le(out, v);
  }
}

inline SdformerFlow load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "SDFF", 4) != 0)
    throw DataError(path + ": bad magic, not a model checkpoint");
  uint32_t version;
  detail::ck_read_le(in, version);
  if (version != 1) throw DataError(path + ": unsupported checkpoint version");
  uint32_t cfg_len;
  detail::ck_read_le(in, cfg_len);
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw DataError(path + ": truncated config");
  ModelConfig cfg = ModelConfig::deserialize(cfg_text);
  SdformerFlow model = SdformerFlow::make(cfg);
  ParamMap pm = model.params();
  std::unordered_map<std::string, Tensor*> by_name;
  for (auto& [name, t] : pm.items) by_name.emplace(name, &t);
  uint32_t count;
  detail::ck_read_le(in, count);
  if (count != pm.items.size())
    throw DataError(path + ": checkpoint holds " + std::to_string(count) + " parameters, model has " +
                    std::to_string(pm.items.size()));
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len;
    detail::ck_read_le(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    char tag;
    in.get(tag);
    if (tag != 0) throw DataError(path + ": unsupported dtype tag for " + name);
    uint32_t ndim;
    detail::ck_read_le(in, ndim);
    Shape shape(ndim);
    int64_t n = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      uint32_t v;
      detail::ck_read_le(in, v);
      shape[d] = v;
      n *= v;
    }
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError(path + ": unexpected parameter " + name);
    Tensor* t = it->second;
    if (t->shape() != shape)
      throw DataError(path + ": shape mismatch for " + name + ": checkpoint " + shape_str(shape) +
                      " vs model " + shape_str(t->shape()));
    for (int64_t j = 0; j < n; ++j) detail::ck_read_le(in, t->data()[j]);
    if (!in) throw DataError(path + ": truncated data for " + name);
  }
  return model;
}

}  // namespace sdflow
