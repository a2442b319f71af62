#pragma once

#include <cmath>
#include <utility>

#include "sdflow/ops.hpp"

namespace sdflow {

// ---------------------------------------------------------------------------
// Leaky integrate-and-fire
// ---------------------------------------------------------------------------

struct LifParams {
  float tau = 2.0f;
  float v_threshold = 0.1f;
  float v_reset = 0.0f;
  SurrogateSpec surrogate{};
  // When true the reset factor (1 - S) uses a detached copy of the spike,
  // cutting the surrogate path through the reset.
  bool detach_reset = false;

  void validate() const {
    SDFLOW_CHECK(tau > 1.0f, "LIF tau must be > 1, got " << tau);
    SDFLOW_CHECK(v_threshold > v_reset,
                 "LIF requires v_threshold > v_reset, got " << v_threshold << " <= " << v_reset);
  }
};

struct LifState {
  Tensor v;  // membrane potential after firing
};

inline LifState lif_initial_state(const Shape& shape, const LifParams& p) {
  return LifState{Tensor::filled(shape, p.v_reset)};
}

// One integrate/fire/reset step:
//   H = V + (x - (V - v_reset)) / tau
//   S = step(H - v_threshold)         (fires at exact threshold)
//   V' = H * (1 - S) + v_reset * S    (hard reset)
inline std::pair<Tensor, LifState> lif_step(const Tensor& x, const LifState& state,
                                            const LifParams& p) {
  p.validate();
  SDFLOW_CHECK(x.shape() == state.v.shape(),
               "lif_step shape mismatch: input " << shape_str(x.shape()) << " vs state "
                                                 << shape_str(state.v.shape()));
  float inv_tau = 1.0f / p.tau;
  Tensor h = op_scalar_add(
      op_add(op_scalar_mul(state.v, 1.0f - inv_tau), op_scalar_mul(x, inv_tau)),
      p.v_reset * inv_tau);
  Tensor s = op_heaviside(h, p.v_threshold, p.surrogate);
  Tensor s_reset = p.detach_reset ? s.detach_copy() : s;
  Tensor one_minus_s = op_scalar_add(op_scalar_mul(s_reset, -1.0f), 1.0f);
  Tensor v_next = op_hadamard(h, one_minus_s);
  if (p.v_reset != 0.0f) v_next = op_add(v_next, op_scalar_mul(s_reset, p.v_reset));
  return {s, LifState{v_next}};
}

// Iterates lif_step over the leading (time) axis with V[-1] = v_reset.
// The leading axis may pack several batch elements time-major: its extent is
// T * batch and step t covers rows [t*batch, (t+1)*batch).
// reset_enabled = false gives the reset-free recurrence H[t] = V[t-1] +
// (x[t] - V[t-1]) / tau (with v_reset folded in), used as the oracle for the
// parallel neuron.
inline Tensor lif_sequence(const Tensor& x, const LifParams& p, bool reset_enabled = true,
                           int64_t batch = 1) {
  p.validate();
  SDFLOW_CHECK(x.ndim() >= 1 && x.dim(0) >= 1, "lif_sequence needs a non-empty time axis, got "
                                                   << shape_str(x.shape()));
  SDFLOW_CHECK(batch >= 1 && x.dim(0) % batch == 0,
               "leading axis " << x.dim(0) << " does not pack batch " << batch);
  int64_t T = x.dim(0) / batch;
  Shape step_shape = x.shape();
  step_shape[0] = batch;
  LifState state = lif_initial_state(step_shape, p);
  std::vector<Tensor> spikes;
  spikes.reserve(static_cast<size_t>(T));
  float inv_tau = 1.0f / p.tau;
  for (int64_t t = 0; t < T; ++t) {
    Tensor xt = op_slice(x, 0, t * batch, batch);
    if (reset_enabled) {
      auto [s, next] = lif_step(xt, state, p);
      spikes.push_back(s);
      state = next;
    } else {
      Tensor h = op_scalar_add(
          op_add(op_scalar_mul(state.v, 1.0f - inv_tau), op_scalar_mul(xt, inv_tau)),
          p.v_reset * inv_tau);
      spikes.push_back(op_heaviside(h, p.v_threshold, p.surrogate));
      state.v = h;
    }
  }
  return spikes.size() == 1 ? spikes[0] : op_concat(spikes, 0);
}

// ---------------------------------------------------------------------------
// Parallel spiking neuron: H = W X, S = step(H - B)
// ---------------------------------------------------------------------------

struct PsnParams {
  Tensor weight;     // (T, T), learnable
  Tensor threshold;  // (T), learnable
  SurrogateSpec surrogate{};

  int64_t time_steps() const { return weight.defined() ? weight.dim(0) : 0; }
};

// W[t][i] = (1/tau) * (1 - 1/tau)^(t-i) for i <= t, else 0; B[t] = v_threshold.
inline PsnParams psn_init_from_lif(float tau, int64_t T, float v_threshold,
                                   SurrogateSpec sg = {}) {
  SDFLOW_CHECK(tau > 1.0f, "PSN init requires tau > 1, got " << tau);
  SDFLOW_CHECK(T >= 1, "PSN init requires T >= 1");
  std::vector<float> w(static_cast<size_t>(T * T), 0.0f);
  float inv_tau = 1.0f / tau;
  float decay = 1.0f - inv_tau;
  for (int64_t t = 0; t < T; ++t) {
    float coef = inv_tau;
    for (int64_t i = t; i >= 0; --i) {
      w[static_cast<size_t>(t * T + i)] = coef;
      coef *= decay;
    }
  }
  PsnParams p;
  p.weight = Tensor::from_data({T, T}, std::move(w), true);
  p.threshold = Tensor::filled({T}, v_threshold, true);
  p.surrogate = sg;
  return p;
}

// x: (T, ...) with the leading axis matched against the weight side; the
// leading axis may pack batch elements time-major (extent T * batch). All
// non-time axes are flattened for the matrix product. Gradients flow into
// weight, threshold, and x.
inline Tensor psn_forward(const Tensor& x, const PsnParams& p, int64_t batch = 1) {
  SDFLOW_CHECK(p.weight.defined() && p.weight.ndim() == 2 && p.weight.dim(0) == p.weight.dim(1),
               "PSN weight must be square");
  int64_t T = p.weight.dim(0);
  SDFLOW_CHECK(x.ndim() >= 1 && x.dim(0) == T * batch,
               "PSN time-axis mismatch: input leading dim " << (x.ndim() ? x.dim(0) : 0)
                                                            << " vs weight side " << T
                                                            << " and batch " << batch);
  SDFLOW_CHECK(p.threshold.numel() == T, "PSN threshold must have length T");
  Shape orig = x.shape();
  int64_t n = x.numel() / T;
  Tensor flat = op_reshape(x, {T, n});
  Tensor h = op_matmul(p.weight, flat);
  Tensor s = op_heaviside(h, p.threshold, p.surrogate);
  return op_reshape(s, orig);
}

// ---------------------------------------------------------------------------
// Uniform activation site used by the network: SN(x) over a (T, ...) tensor.
// ---------------------------------------------------------------------------

enum class NeuronKind { Lif, Psn };

struct NeuronLayer {
  NeuronKind kind = NeuronKind::Lif;
  LifParams lif{};
  PsnParams psn{};

  static NeuronLayer make_lif(const LifParams& p) {
    NeuronLayer n;
    n.kind = NeuronKind::Lif;
    n.lif = p;
    return n;
  }

  static NeuronLayer make_psn(float tau, int64_t T, float v_threshold, SurrogateSpec sg = {}) {
    NeuronLayer n;
    n.kind = NeuronKind::Psn;
    n.psn = psn_init_from_lif(tau, T, v_threshold, sg);
    return n;
  }

  Tensor forward(const Tensor& x, int64_t batch = 1) const {
    if (kind == NeuronKind::Lif) return lif_sequence(x, lif, /*reset_enabled=*/true, batch);
    return psn_forward(x, psn, batch);
  }
};

}  // namespace sdflow
