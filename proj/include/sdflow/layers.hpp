#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sdflow/energy.hpp"
#include "sdflow/neuron.hpp"
#include "sdflow/ops.hpp"

namespace sdflow {

struct ParamMap {
  std::vector<std::pair<std::string, Tensor>> items;

  void add(const std::string& name, const Tensor& t) {
    if (t.defined()) items.emplace_back(name, t);
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }
};

inline void collect_neuron_params(const NeuronLayer& n, const std::string& prefix,
                                  ParamMap& out) {
  if (n.kind == NeuronKind::Psn) {
    out.add(prefix + ".weight", n.psn.weight);
    out.add(prefix + ".threshold", n.psn.threshold);
  }
}

// ---------------------------------------------------------------------------
// Synaptic layers. Each records its dense-equivalent per-step cost and the
// spike rate of its input when a tracker is attached. `spike_input` is fixed
// by the layer's position in the architecture.
// ---------------------------------------------------------------------------

struct Linear {
  std::string name;
  Tensor weight;  // (Cout, Cin)
  Tensor bias;    // optional (Cout)
  bool spike_input = true;

  static Linear make(std::string name, int64_t cin, int64_t cout, bool with_bias,
                     std::mt19937& rng, bool spike_input = true) {
    Linear l;
    l.name = std::move(name);
    l.weight = Tensor::zeros({cout, cin}, true);
    kaiming_uniform_(l.weight, cin, rng);
    if (with_bias) l.bias = Tensor::zeros({cout}, true);
    l.spike_input = spike_input;
    return l;
  }

  int64_t in_features() const { return weight.dim(1); }
  int64_t out_features() const { return weight.dim(0); }

  // x: (N, Cin)
  Tensor forward2d(const Tensor& x, EnergyTracker* prof = nullptr, int64_t timesteps = 1) const {
    if (prof)
      prof->record_input(name, spike_input ? CostKind::SpikeGated : CostKind::Dense,
                         linear_flops(in_features(), out_features(), x.dim(0)) /
                             static_cast<double>(timesteps),
                         x, timesteps);
    return op_linear(x, weight, bias);
  }

  // x: (T, C, H, W), applied per token.
  Tensor forward_tchw(const Tensor& x, EnergyTracker* prof = nullptr) const {
    SDFLOW_CHECK(x.ndim() == 4, "pointwise linear expects (T,C,H,W)");
    int64_t T = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (prof)
      prof->record_input(name, spike_input ? CostKind::SpikeGated : CostKind::Dense,
                         linear_flops(in_features(), out_features(), H * W), x, T);
    Tensor y = op_permute(x, {0, 2, 3, 1});
    y = op_reshape(y, {T * H * W, C});
    y = op_linear(y, weight, bias);
    y = op_reshape(y, {T, H, W, out_features()});
    return op_permute(y, {0, 3, 1, 2});
  }

  void collect(ParamMap& out) const {
    out.add(name + ".weight", weight);
    out.add(name + ".bias", bias);
  }
};

struct Conv2dLayer {
  std::string name;
  Tensor weight;  // (Cout, Cin, kh, kw)
  Tensor bias;    // optional
  int stride = 1, pad = 0;
  bool spike_input = true;

  static Conv2dLayer make(std::string name, int64_t cin, int64_t cout, int k, int stride, int pad,
                          bool with_bias, std::mt19937& rng, bool spike_input = true) {
    Conv2dLayer l;
    l.name = std::move(name);
    l.weight = Tensor::zeros({cout, cin, k, k}, true);
    kaiming_uniform_(l.weight, cin * k * k, rng);
    if (with_bias) l.bias = Tensor::zeros({cout}, true);
    l.stride = stride;
    l.pad = pad;
    l.spike_input = spike_input;
    return l;
  }

  // x: (T, Cin, H, W); T acts as the conv batch.
  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr) const {
    Tensor y = op_conv2d(x, weight, bias, stride, pad);
    if (prof)
      prof->record_input(name, spike_input ? CostKind::SpikeGated : CostKind::Dense,
                         conv_flops(weight.dim(2), weight.dim(3), weight.dim(1), weight.dim(0),
                                    y.dim(2), y.dim(3)),
                         x, x.dim(0));
    return y;
  }

  void collect(ParamMap& out) const {
    out.add(name + ".weight", weight);
    out.add(name + ".bias", bias);
  }
};

struct ConvTranspose2dLayer {
  std::string name;
  Tensor weight;  // (Cin, Cout, kh, kw)
  Tensor bias;
  int stride = 2, pad = 1;
  bool spike_input = true;

  static ConvTranspose2dLayer make(std::string name, int64_t cin, int64_t cout, int k, int stride,
                                   int pad, bool with_bias, std::mt19937& rng,
                                   bool spike_input = true) {
    ConvTranspose2dLayer l;
    l.name = std::move(name);
    l.weight = Tensor::zeros({cin, cout, k, k}, true);
    kaiming_uniform_(l.weight, cin * k * k, rng);
    if (with_bias) l.bias = Tensor::zeros({cout}, true);
    l.stride = stride;
    l.pad = pad;
    l.spike_input = spike_input;
    return l;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr) const {
    Tensor y = op_conv_transpose2d(x, weight, bias, stride, pad);
    if (prof)
      prof->record_input(name, spike_input ? CostKind::SpikeGated : CostKind::Dense,
                         conv_flops(weight.dim(2), weight.dim(3), weight.dim(0), weight.dim(1),
                                    y.dim(2), y.dim(3)),
                         x, x.dim(0));
    return y;
  }

  void collect(ParamMap& out) const {
    out.add(name + ".weight", weight);
    out.add(name + ".bias", bias);
  }
};

// Always uses the statistics of the tensor at hand (no running state).
struct BatchNormLayer {
  std::string name;
  Tensor gamma, beta;
  float eps = 1e-5f;

  static BatchNormLayer make(std::string name, int64_t channels) {
    BatchNormLayer l;
    l.name = std::move(name);
    l.gamma = Tensor::filled({channels}, 1.0f, true);
    l.beta = Tensor::zeros({channels}, true);
    return l;
  }

  Tensor forward(const Tensor& x) const { return op_batchnorm(x, gamma, beta, eps); }

  void collect(ParamMap& out) const {
    out.add(name + ".gamma", gamma);
    out.add(name + ".beta", beta);
  }
};

}  // namespace sdflow
