#pragma once

#include <random>
#include <string>

#include "sdflow/layers.hpp"
#include "sdflow/window.hpp"

namespace sdflow {

// Binary-input validation for the attention cores. On by default in debug
// builds; tests may force it.
inline bool& strict_binary_checks() {
#ifdef NDEBUG
  static bool v = false;
#else
  static bool v = true;
#endif
  return v;
}

inline void check_binary(const Tensor& t, const char* what) {
  if (!strict_binary_checks()) return;
  for (float v : t.data())
    SDFLOW_CHECK(v == 0.0f || v == 1.0f, what << " must be binary, found " << v);
}

// ---------------------------------------------------------------------------
// Window-level attention cores
// ---------------------------------------------------------------------------

// Spike dot-product attention inside windows, one head:
//   out = ((q k^T + bias) * mask) v * scale
// q,k,v: (N_w,N_t,D_h) binary. bias: (N_t,N_t), shared across windows, or
// undefined. mask: (N_w,N_t,N_t) of {0,1} or undefined. Attention logits are
// non-negative, so zeroing masked entries is exact suppression.
inline Tensor sdsa_dot_window(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& bias, const Tensor& mask, float scale) {
  SDFLOW_CHECK(q.ndim() == 3 && k.shape() == q.shape() && v.shape() == q.shape(),
               "sdsa_dot expects matching (N_w,N_t,D_h) operands");
  check_binary(q, "attention query");
  check_binary(k, "attention key");
  check_binary(v, "attention value");
  Tensor attn = op_bmm_nt(q, k);  // integer-valued, in [0, D_h]
  if (bias.defined()) attn = op_add(attn, bias);
  if (mask.defined()) attn = op_hadamard(attn, mask);
  Tensor out = op_bmm(attn, v);
  if (scale != 1.0f) out = op_scalar_mul(out, scale);
  return out;
}

// QK linear attention inside windows, one head: z' = a ⊗ k (token gating).
// a: (N_w,N_t,1) binary token-attention vector; k: (N_w,N_t,D_h) binary;
// token_mask: (N_w,N_t,1) of {0,1} or undefined — masked tokens have their
// gate forced to zero.
inline Tensor sdsa_qk_window(const Tensor& a, const Tensor& k, const Tensor& token_mask) {
  SDFLOW_CHECK(a.ndim() == 3 && k.ndim() == 3 && a.dim(0) == k.dim(0) && a.dim(1) == k.dim(1) &&
                   a.dim(2) == 1,
               "sdsa_qk expects a (N_w,N_t,1) gate and (N_w,N_t,D) keys, got "
                   << shape_str(a.shape()) << " and " << shape_str(k.shape()));
  check_binary(a, "token attention vector");
  check_binary(k, "attention key");
  Tensor gate = token_mask.defined() ? op_hadamard(a, token_mask) : a;
  return op_hadamard(k, gate);  // broadcast over the channel axis
}

// ---------------------------------------------------------------------------
// Shared window plumbing for the block variants
// ---------------------------------------------------------------------------

namespace detail {

struct WindowedTensor {
  Tensor windows;      // (B * N_w, N_t, C), batch-major
  int64_t batch = 1;
  int64_t T, H, W;     // per-sample unpadded grid
  int64_t Tp, Hp, Wp;  // padded grid
};

// (T*B,C,H,W) time-major -> channels-last, padded, shifted, partitioned.
inline WindowedTensor to_windows(const Tensor& x, const WindowConfig& cfg, int64_t batch = 1) {
  WindowedTensor out;
  out.batch = batch;
  SDFLOW_CHECK(x.dim(0) % batch == 0, "leading axis does not pack batch " << batch);
  out.T = x.dim(0) / batch;
  out.H = x.dim(2);
  out.W = x.dim(3);
  int64_t C = x.dim(1);
  padded_dims(out.T, out.H, out.W, cfg, out.Tp, out.Hp, out.Wp);
  Tensor y = op_permute(x, {0, 2, 3, 1});  // (T*B,H,W,C)
  y = op_reshape(y, {out.T, batch, out.H, out.W, C});
  y = op_pad_end(y, {out.Tp - out.T, 0, out.Hp - out.H, out.Wp - out.W, 0});
  if (cfg.shifted()) y = op_roll(y, {-cfg.shift_t, 0, -cfg.shift_h, -cfg.shift_w, 0});
  int64_t nt = out.Tp / cfg.t_w, nh = out.Hp / cfg.h_w, nw = out.Wp / cfg.w_w;
  y = op_reshape(y, {nt, cfg.t_w, batch, nh, cfg.h_w, nw, cfg.w_w, C});
  y = op_permute(y, {2, 0, 3, 5, 1, 4, 6, 7});  // (B,nt,nh,nw,tw,hw,ww,C)
  out.windows = op_reshape(y, {batch * nt * nh * nw, cfg.tokens(), C});
  return out;
}

// Inverse of to_windows.
inline Tensor from_windows(const Tensor& windows, const WindowedTensor& ctx,
                           const WindowConfig& cfg) {
  int64_t C = windows.dim(2);
  int64_t nt = ctx.Tp / cfg.t_w, nh = ctx.Hp / cfg.h_w, nw = ctx.Wp / cfg.w_w;
  Tensor y = op_reshape(windows, {ctx.batch, nt, nh, nw, cfg.t_w, cfg.h_w, cfg.w_w, C});
  y = op_permute(y, {1, 4, 0, 2, 5, 3, 6, 7});  // (nt,tw,B,nh,hw,nw,ww,C)
  y = op_reshape(y, {ctx.Tp, ctx.batch, ctx.Hp, ctx.Wp, C});
  if (cfg.shifted()) y = op_roll(y, {cfg.shift_t, 0, cfg.shift_h, cfg.shift_w, 0});
  y = op_crop_to(y, {ctx.T, ctx.batch, ctx.H, ctx.W, C});
  y = op_reshape(y, {ctx.T * ctx.batch, ctx.H, ctx.W, C});
  return op_permute(y, {0, 3, 1, 2});
}

// Repeats a per-sample window mask across the batch (batch-major windows).
inline Tensor tile_axis0(const Tensor& t, int64_t times) {
  if (times == 1) return t;
  return op_concat(std::vector<Tensor>(static_cast<size_t>(times), t), 0);
}

inline double count_ones(const Tensor& t) {
  double ones = 0.0;
  for (float v : t.data())
    if (v != 0.0f) ones += 1.0;
  return ones;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dot-product SDSA block: BN(Linear((Q K^T + PE) V)) with spiking Q,K,V
// ---------------------------------------------------------------------------

struct SdsaDotBlock {
  std::string name;
  WindowConfig win;  // including this block's shift
  int64_t heads = 1;
  NeuronKind neuron_kind = NeuronKind::Lif;
  Linear q_proj, k_proj, v_proj, out_proj;
  BatchNormLayer q_bn, k_bn, v_bn, out_bn;
  NeuronLayer in_sn, q_sn, k_sn, v_sn;
  Tensor bias_table;  // (relative offsets, heads)
  std::vector<int64_t> rel_idx;

  static SdsaDotBlock make(const std::string& name, int64_t dim, const WindowConfig& win,
                           NeuronKind nk, const LifParams& lif, int64_t time_steps,
                           std::mt19937& rng) {
    SDFLOW_CHECK(dim % win.heads == 0,
                 "attention dim " << dim << " not divisible by " << win.heads << " heads");
    SdsaDotBlock b;
    b.name = name;
    b.win = win;
    b.heads = win.heads;
    b.neuron_kind = nk;
    auto mk_sn = [&]() {
      return nk == NeuronKind::Lif
                 ? NeuronLayer::make_lif(lif)
                 : NeuronLayer::make_psn(lif.tau, time_steps, lif.v_threshold, lif.surrogate);
    };
    b.q_proj = Linear::make(name + ".q_proj", dim, dim, false, rng, true);
    b.k_proj = Linear::make(name + ".k_proj", dim, dim, false, rng, true);
    b.v_proj = Linear::make(name + ".v_proj", dim, dim, false, rng, true);
    b.out_proj = Linear::make(name + ".out_proj", dim, dim, false, rng, false);
    b.q_bn = BatchNormLayer::make(name + ".q_bn", dim);
    b.k_bn = BatchNormLayer::make(name + ".k_bn", dim);
    b.v_bn = BatchNormLayer::make(name + ".v_bn", dim);
    b.out_bn = BatchNormLayer::make(name + ".out_bn", dim);
    b.in_sn = mk_sn();
    b.q_sn = mk_sn();
    b.k_sn = mk_sn();
    b.v_sn = mk_sn();
    b.bias_table = Tensor::zeros({relative_position_table_size(win), win.heads}, true);
    {
      std::normal_distribution<float> dist(0.0f, 0.02f);
      for (auto& v : b.bias_table.data()) v = dist(rng);
    }
    b.rel_idx = relative_position_index(win);
    return b;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    int64_t C = x.dim(1);
    int64_t T = x.dim(0) / batch;
    int64_t dh = C / heads;
    WindowConfig eff = effective_window(win, T, x.dim(2), x.dim(3));
    Tensor i_s = in_sn.forward(x, batch);  // projections consume spikes
    Tensor q = q_sn.forward(q_bn.forward(q_proj.forward_tchw(i_s, prof)), batch);
    Tensor k = k_sn.forward(k_bn.forward(k_proj.forward_tchw(i_s, prof)), batch);
    Tensor v = v_sn.forward(v_bn.forward(v_proj.forward_tchw(i_s, prof)), batch);

    auto qw = detail::to_windows(q, eff, batch);
    auto kw = detail::to_windows(k, eff, batch);
    auto vw = detail::to_windows(v, eff, batch);
    int64_t n_win = qw.windows.dim(0), n_tok = qw.windows.dim(1);

    Tensor mask;
    if (eff.shifted() || qw.Tp != T || qw.Hp != qw.H || qw.Wp != qw.W)
      mask = detail::tile_axis0(make_pair_mask(qw.Tp, qw.Hp, qw.Wp, eff, qw.T, qw.H, qw.W),
                                batch);

    // Bias per head: table rows gathered by relative offset.
    Tensor bias_all = op_gather_rows(bias_table, rel_idx);          // (N_t*N_t, heads)
    bias_all = op_permute(op_reshape(bias_all, {n_tok, n_tok, heads}), {2, 0, 1});

    float scale = neuron_kind == NeuronKind::Lif ? 1.0f / static_cast<float>(dh) : 1.0f;
    std::vector<Tensor> head_outs;
    for (int64_t h = 0; h < heads; ++h) {
      Tensor qh = op_slice(qw.windows, 2, h * dh, dh);
      Tensor kh = op_slice(kw.windows, 2, h * dh, dh);
      Tensor vh = op_slice(vw.windows, 2, h * dh, dh);
      Tensor bias_h = op_reshape(op_slice(bias_all, 0, h, 1), {n_tok, n_tok});
      head_outs.push_back(sdsa_dot_window(qh, kh, vh, bias_h, mask, scale));
    }
    Tensor attn_out = heads == 1 ? head_outs[0] : op_concat(head_outs, 2);

    if (prof) {
      double per_step = static_cast<double>(n_win / batch) * static_cast<double>(n_tok) *
                        static_cast<double>(n_tok) / static_cast<double>(T);
      double ones = detail::count_ones(qw.windows) + detail::count_ones(kw.windows);
      double total = static_cast<double>(qw.windows.numel() + kw.windows.numel());
      prof->record(name + ".attn_qk", CostKind::SpikeGated, per_step * C, ones, total, T);
      prof->record(name + ".attn_pe_av", CostKind::Dense, per_step * (C + heads), 0, 0, T);
    }

    Tensor y = detail::from_windows(attn_out, qw, eff);
    return out_bn.forward(out_proj.forward_tchw(y, prof));
  }

  void collect(ParamMap& out) const {
    q_proj.collect(out);
    k_proj.collect(out);
    v_proj.collect(out);
    out_proj.collect(out);
    q_bn.collect(out);
    k_bn.collect(out);
    v_bn.collect(out);
    out_bn.collect(out);
    out.add(name + ".bias_table", bias_table);
    collect_neuron_params(in_sn, name + ".in_sn", out);
    collect_neuron_params(q_sn, name + ".q_sn", out);
    collect_neuron_params(k_sn, name + ".k_sn", out);
    collect_neuron_params(v_sn, name + ".v_sn", out);
  }
};

// ---------------------------------------------------------------------------
// QK linear attention block: token gate from Q, additive PE on K, z' = A_t⊗K
// ---------------------------------------------------------------------------

struct SdsaQkBlock {
  std::string name;
  WindowConfig win;
  int64_t heads = 1;
  Linear q_proj, k_proj, out_proj;
  BatchNormLayer q_bn, k_bn, out_bn;
  NeuronLayer in_sn, q_sn, k_sn, a_sn, z_sn;
  Tensor pe;  // (N_t, C), added to the key state before its activation

  static SdsaQkBlock make(const std::string& name, int64_t dim, const WindowConfig& win,
                          NeuronKind nk, const LifParams& lif, int64_t time_steps,
                          std::mt19937& rng) {
    SDFLOW_CHECK(dim % win.heads == 0,
                 "attention dim " << dim << " not divisible by " << win.heads << " heads");
    SdsaQkBlock b;
    b.name = name;
    b.win = win;
    b.heads = win.heads;
    auto mk_sn = [&]() {
      return nk == NeuronKind::Lif
                 ? NeuronLayer::make_lif(lif)
                 : NeuronLayer::make_psn(lif.tau, time_steps, lif.v_threshold, lif.surrogate);
    };
    b.q_proj = Linear::make(name + ".q_proj", dim, dim, false, rng, true);
    b.k_proj = Linear::make(name + ".k_proj", dim, dim, false, rng, true);
    b.out_proj = Linear::make(name + ".out_proj", dim, dim, false, rng, true);
    b.q_bn = BatchNormLayer::make(name + ".q_bn", dim);
    b.k_bn = BatchNormLayer::make(name + ".k_bn", dim);
    b.out_bn = BatchNormLayer::make(name + ".out_bn", dim);
    b.in_sn = mk_sn();
    b.q_sn = mk_sn();
    b.k_sn = mk_sn();
    b.a_sn = mk_sn();
    b.z_sn = mk_sn();
    b.pe = Tensor::zeros({win.tokens(), dim}, true);
    {
      std::normal_distribution<float> dist(0.0f, 0.02f);
      for (auto& v : b.pe.data()) v = dist(rng);
    }
    return b;
  }

  Tensor forward(const Tensor& x, EnergyTracker* prof = nullptr, int64_t batch = 1) const {
    int64_t C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t T = x.dim(0) / batch;
    int64_t dh = C / heads;
    WindowConfig eff = effective_window(win, T, H, W);
    Tensor i_s = in_sn.forward(x, batch);  // binary input to both projections
    Tensor q = q_sn.forward(q_bn.forward(q_proj.forward_tchw(i_s, prof)), batch);

    Tensor k_pre = k_bn.forward(k_proj.forward_tchw(i_s, prof));
    // Paint the per-token PE onto the grid (window tiling, unshifted), the
    // same pattern for every batch element.
    std::vector<int64_t> tok_idx = grid_token_index(T, H, W, eff);
    std::vector<int64_t> tok_idx_b;
    tok_idx_b.reserve(tok_idx.size() * static_cast<size_t>(batch));
    int64_t plane = H * W;
    for (int64_t t = 0; t < T; ++t)
      for (int64_t b = 0; b < batch; ++b)
        tok_idx_b.insert(tok_idx_b.end(), tok_idx.begin() + t * plane,
                         tok_idx.begin() + (t + 1) * plane);
    Tensor pe_grid = op_gather_rows(pe, tok_idx_b);  // (T*B*H*W, C)
    pe_grid = op_permute(op_reshape(pe_grid, {T * batch, H, W, C}), {0, 3, 1, 2});
    Tensor k = k_sn.forward(op_add(k_pre, pe_grid), batch);

    // Token-attention gate: per-head channel count of Q, spiked.
    Tensor a_pre = op_sum_axis(op_reshape(q, {T * batch, heads, dh, H, W}), 2);
    Tensor a = a_sn.forward(a_pre, batch);

    auto kwin = detail::to_windows(k, eff, batch);
    auto awin = detail::to_windows(a, eff, batch);
    int64_t n_win = kwin.windows.dim(0), n_tok = kwin.windows.dim(1);

    Tensor token_mask;
    if (kwin.Tp != T || kwin.Hp != H || kwin.Wp != W)
      token_mask = detail::tile_axis0(make_token_mask(kwin.Tp, kwin.Hp, kwin.Wp, eff, T, H, W),
                                      batch);

    std::vector<Tensor> head_outs;
    for (int64_t h = 0; h < heads; ++h) {
      Tensor ah = op_slice(awin.windows, 2, h, 1);
      Tensor kh = op_slice(kwin.windows, 2, h * dh, dh);
      head_outs.push_back(sdsa_qk_window(ah, kh, token_mask));
    }
    Tensor zp = heads == 1 ? head_outs[0] : op_concat(head_outs, 2);

    if (prof) {
      double reduce_flops = static_cast<double>(n_win / batch * n_tok) *
                            static_cast<double>(C - heads) / static_cast<double>(T);
      prof->record_input(name + ".attn_reduce", CostKind::SpikeGated, reduce_flops, q, T);
      // Gating additions happen where both the gate and key are 1; the static
      // capacity is N_w*N_t*C and the measured rate covers surviving tokens.
      double gate_flops = static_cast<double>(n_win / batch * n_tok) * static_cast<double>(C) /
                          static_cast<double>(T);
      prof->record_input(name + ".attn_gate", CostKind::SpikeGated, gate_flops, zp, T);
    }

    Tensor z_grid = detail::from_windows(zp, kwin, eff);
    return out_bn.forward(out_proj.forward_tchw(z_sn.forward(z_grid, batch), prof));
  }

  void collect(ParamMap& out) const {
    q_proj.collect(out);
    k_proj.collect(out);
    out_proj.collect(out);
    q_bn.collect(out);
    k_bn.collect(out);
    out_bn.collect(out);
    out.add(name + ".pe", pe);
    collect_neuron_params(in_sn, name + ".in_sn", out);
    collect_neuron_params(q_sn, name + ".q_sn", out);
    collect_neuron_params(k_sn, name + ".k_sn", out);
    collect_neuron_params(a_sn, name + ".a_sn", out);
    collect_neuron_params(z_sn, name + ".z_sn", out);
  }
};

}  // namespace sdflow
