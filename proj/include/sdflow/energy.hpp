#pragma once

#include <cmath>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdflow/tensor.hpp"

namespace sdflow {

// 45 nm energy-per-operation constants, joules.
constexpr double kEnergyMac = 4.6e-12;
constexpr double kEnergyAc = 0.9e-12;

// ---------------------------------------------------------------------------
// Dense-equivalent FLOP counting (multiply-accumulate ops per time step)
// ---------------------------------------------------------------------------

inline double conv_flops(int64_t kh, int64_t kw, int64_t cin, int64_t cout, int64_t h_out,
                         int64_t w_out) {
  return static_cast<double>(kh * kw * cin * cout) * static_cast<double>(h_out * w_out);
}

inline double linear_flops(int64_t n_in, int64_t n_out, int64_t tokens) {
  return static_cast<double>(n_in * n_out) * static_cast<double>(tokens);
}

struct LayerSpec {
  enum class Kind { Linear, Conv, ConvTranspose, BatchNorm, AttentionDot, AttentionQk };
  Kind kind = Kind::Linear;
  // linear: n_in, n_out, tokens. conv / conv_transpose: kh, kw, cin, cout,
  // h_out, w_out. attention: n_windows, n_tokens, dim, heads.
  int64_t a = 0, b = 0, c = 0, d = 0, e = 0, f = 0;
};

// Static MAC count for one layer spec. BatchNorm counts zero. Attention
// counts the window products only (projections are separate linear layers):
// dot: N_w*N_t^2*D (QK^T) + N_w*N_t^2*heads (bias add) + N_w*N_t^2*D (AV);
// qk: N_w*N_t*(D-heads) (per-head channel reduction) + N_w*N_t*D (gating).
inline double count_flops(const LayerSpec& s) {
  using Kind = LayerSpec::Kind;
  switch (s.kind) {
    case Kind::Linear: return linear_flops(s.a, s.b, s.c);
    case Kind::Conv:
    case Kind::ConvTranspose: return conv_flops(s.a, s.b, s.c, s.d, s.e, s.f);
    case Kind::BatchNorm: return 0.0;
    case Kind::AttentionDot: {
      double nw = static_cast<double>(s.a), nt = static_cast<double>(s.b);
      double dim = static_cast<double>(s.c), heads = static_cast<double>(s.d);
      return nw * nt * nt * (2.0 * dim + heads);
    }
    case Kind::AttentionQk: {
      double nw = static_cast<double>(s.a), nt = static_cast<double>(s.b);
      double dim = static_cast<double>(s.c), heads = static_cast<double>(s.d);
      return nw * nt * (dim - heads) + nw * nt * dim;
    }
  }
  fail("unknown layer kind");
}

// ---------------------------------------------------------------------------
// Runtime accounting
// ---------------------------------------------------------------------------

enum class CostKind {
  SpikeGated,  // accumulations gated by binary inputs: AC-eligible
  Dense        // real-valued inputs: always MAC
};

struct LayerStats {
  std::string name;
  CostKind kind = CostKind::Dense;
  double flops = 0.0;        // dense-equivalent MACs per time step
  double spike_ones = 0.0;   // accumulated ones at the gating input
  double spike_total = 0.0;  // accumulated element count at the gating input
  int64_t timesteps = 1;
  int calls = 0;

  double spike_rate() const { return spike_total > 0.0 ? spike_ones / spike_total : 0.0; }
};

class EnergyTracker {
 public:
  void record(const std::string& name, CostKind kind, double flops_per_step, double ones,
              double total, int64_t timesteps) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      index_.emplace(name, layers_.size());
      LayerStats st;
      st.name = name;
      st.kind = kind;
      st.flops = flops_per_step;
      st.timesteps = timesteps;
      layers_.push_back(st);
      it = index_.find(name);
    }
    LayerStats& st = layers_[it->second];
    st.flops = flops_per_step;
    st.timesteps = timesteps;
    st.spike_ones += ones;
    st.spike_total += total;
    st.calls += 1;
  }

  void record_input(const std::string& name, CostKind kind, double flops_per_step,
                    const Tensor& input, int64_t timesteps) {
    double ones = 0.0;
    for (float v : input.data())
      if (v != 0.0f) ones += 1.0;
    record(name, kind, flops_per_step, ones, static_cast<double>(input.numel()), timesteps);
  }

  const std::vector<LayerStats>& layers() const { return layers_; }
  void clear() {
    layers_.clear();
    index_.clear();
  }

 private:
  std::vector<LayerStats> layers_;
  std::unordered_map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Energy model
// ---------------------------------------------------------------------------

enum class EnergyMode { Ann, Snn };

struct LayerEnergy {
  std::string name;
  double flops = 0.0;
  double spike_rate = 0.0;
  int64_t timesteps = 1;
  CostKind kind = CostKind::Dense;
  double energy_j = 0.0;
};

struct EnergyReport {
  EnergyMode mode = EnergyMode::Snn;
  std::vector<LayerEnergy> layers;
  double total_j = 0.0;
  double total_flops = 0.0;     // per-step dense-equivalent
  double avg_spike_rate = 0.0;  // flops-weighted over spike-gated layers
};

// ann: FLOPS * E_MAC (single dense pass).
// snn: FLOPS * R_s * T * E_AC for spike-gated layers; real-valued-input
// layers run T dense passes and are charged FLOPS * T * E_MAC.
inline EnergyReport build_energy_report(const EnergyTracker& tracker, EnergyMode mode) {
  SDFLOW_CHECK(!tracker.layers().empty(), "energy report over an empty probe set");
  EnergyReport rep;
  rep.mode = mode;
  double gated_flops = 0.0, gated_rate_weighted = 0.0;
  for (const LayerStats& st : tracker.layers()) {
    LayerEnergy le;
    le.name = st.name;
    le.flops = st.flops;
    le.spike_rate = st.spike_rate();
    le.timesteps = st.timesteps;
    le.kind = st.kind;
    if (mode == EnergyMode::Ann) {
      le.energy_j = st.flops * kEnergyMac;
    } else if (st.kind == CostKind::SpikeGated) {
      le.energy_j = st.flops * le.spike_rate * static_cast<double>(st.timesteps) * kEnergyAc;
    } else {
      le.energy_j = st.flops * static_cast<double>(st.timesteps) * kEnergyMac;
    }
    rep.total_j += le.energy_j;
    rep.total_flops += le.flops;
    if (st.kind == CostKind::SpikeGated) {
      gated_flops += st.flops;
      gated_rate_weighted += st.flops * le.spike_rate;
    }
    rep.layers.push_back(le);
  }
  rep.avg_spike_rate = gated_flops > 0.0 ? gated_rate_weighted / gated_flops : 0.0;
  return rep;
}

}  // namespace sdflow
