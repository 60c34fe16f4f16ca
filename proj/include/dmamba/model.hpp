#pragma once

#include <optional>

#include "dmamba/ssm.hpp"

namespace dmamba {

struct ActionSpace {
  enum class Kind { continuous, discrete };
  Kind kind = Kind::discrete;
  int64_t dim = 2;  // action vector width (continuous) or action count (discrete)

  bool continuous() const { return kind == Kind::continuous; }
};

struct DecisionMambaConfig {
  int64_t n_layers = 2;
  int64_t embed_dim = 64;       // D
  int64_t ssm_state = 16;       // N
  int64_t expand = 2;           // E
  int64_t conv_kernel = 4;      // k
  int64_t context_length = 10;  // K
  double dropout_p = 0.1;
  bool use_channel_mlp = true;
  int64_t max_timestep = 1024;
  ActionSpace action_space;
  int64_t state_dim = 1;
  ScanMode scan_mode = ScanMode::sequential;

  int64_t inner_dim() const { return expand * embed_dim; }

  void validate() const {
    require(n_layers >= 1 && embed_dim >= 1 && ssm_state >= 1 && expand >= 1 &&
                conv_kernel >= 1 && context_length >= 1 && max_timestep >= 1 && state_dim >= 1 &&
                action_space.dim >= 1,
            "model config extents must be positive");
    require(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p ", dropout_p, " outside [0,1)");
  }
};

struct MambaBlockParams {
  LinearParams in_proj_x;  // [D -> ED]
  LinearParams in_proj_z;  // [D -> ED]
  Conv1dParams conv;       // depthwise over ED channels
  SsmParams ssm;           // Din = ED
  LinearParams out_proj;   // [ED -> D]
};

struct MambaLayerParams {
  LayerNormParams ln1;
  LayerNormParams ln2;
  MambaBlockParams block;
  std::optional<ChannelMlpParams> mlp;  // absent under the RC ablation
};

struct DecisionMambaParams {
  LinearParams rtg_embed;             // [1 -> D]
  LinearParams state_embed;           // [S -> D]
  LinearParams action_embed_linear;   // [A -> D], continuous spaces
  EmbeddingTable action_embed_table;  // [count, D], discrete spaces
  EmbeddingTable time_embed;          // [max_timestep, D]
  LayerNormParams embed_ln;
  std::vector<MambaLayerParams> layers;
  LayerNormParams final_ln;
  LinearParams head;  // [D -> action_dim or count]
};

// Padded K-step training window. `mask` is 0 exactly on left-padding
// positions; padded entries are zero. `action_valid` multiplies the action
// token embedding: training sets it to `mask`, rollout additionally zeroes
// the current step whose action is not yet known.
struct Batch {
  Tensor rtg;           // [B,K,1]
  Tensor states;        // [B,K,S]
  Tensor cont_actions;  // [B,K,A], continuous spaces only
  ITensor disc_actions; // [B,K], discrete spaces only
  ITensor timesteps;    // [B,K]
  Tensor mask;          // [B,K]
  Tensor action_valid;  // [B,K]

  int64_t batch_size() const { return rtg.extent(0); }
  int64_t steps() const { return rtg.extent(1); }
};

// ---------------------------------------------------------------------------
// Initialization and parameter registry
// ---------------------------------------------------------------------------

inline MambaBlockParams init_mamba_block(const DecisionMambaConfig& cfg, std::mt19937_64& rng) {
  MambaBlockParams p;
  const int64_t d = cfg.embed_dim, ed = cfg.inner_dim();
  p.in_proj_x = init_linear(d, ed, /*with_bias=*/false, rng);
  p.in_proj_z = init_linear(d, ed, /*with_bias=*/false, rng);
  p.conv = init_conv1d(ed, cfg.conv_kernel, rng);
  p.ssm = init_ssm(ed, cfg.ssm_state, rng);
  p.out_proj = init_linear(ed, d, /*with_bias=*/false, rng);
  return p;
}

inline DecisionMambaParams init_params(const DecisionMambaConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  DecisionMambaParams p;
  const int64_t d = cfg.embed_dim;
  p.rtg_embed = init_linear(1, d, true, rng);
  p.state_embed = init_linear(cfg.state_dim, d, true, rng);
  if (cfg.action_space.continuous())
    p.action_embed_linear = init_linear(cfg.action_space.dim, d, true, rng);
  else
    p.action_embed_table = init_embedding(cfg.action_space.dim, d, rng);
  p.time_embed = init_embedding(cfg.max_timestep, d, rng);
  p.embed_ln = init_layer_norm(d);
  for (int64_t l = 0; l < cfg.n_layers; ++l) {
    MambaLayerParams layer;
    layer.ln1 = init_layer_norm(d);
    layer.ln2 = init_layer_norm(d);
    layer.block = init_mamba_block(cfg, rng);
    if (cfg.use_channel_mlp) layer.mlp = init_channel_mlp(d, cfg.dropout_p, rng);
    p.layers.push_back(std::move(layer));
  }
  p.final_ln = init_layer_norm(d);
  p.head = init_linear(d, cfg.action_space.dim, true, rng);
  return p;
}

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

namespace detail {
inline void push_linear(NamedParams& out, const std::string& prefix, const LinearParams& p) {
  out.emplace_back(prefix + ".weight", p.weight);
  if (p.bias.defined()) out.emplace_back(prefix + ".bias", p.bias);
}
inline void push_ln(NamedParams& out, const std::string& prefix, const LayerNormParams& p) {
  out.emplace_back(prefix + ".gamma", p.gamma);
  out.emplace_back(prefix + ".beta", p.beta);
}
}  // namespace detail

// Canonical dotted parameter paths, in a fixed traversal order.
inline NamedParams named_params(const DecisionMambaParams& p) {
  NamedParams out;
  detail::push_linear(out, "rtg_embed", p.rtg_embed);
  detail::push_linear(out, "state_embed", p.state_embed);
  if (p.action_embed_linear.weight.defined())
    detail::push_linear(out, "action_embed", p.action_embed_linear);
  else
    out.emplace_back("action_embed.table", p.action_embed_table.table);
  out.emplace_back("time_embed.table", p.time_embed.table);
  detail::push_ln(out, "embed_ln", p.embed_ln);
  for (size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "layers." + std::to_string(l);
    const MambaLayerParams& layer = p.layers[l];
    detail::push_ln(out, pre + ".ln1", layer.ln1);
    detail::push_ln(out, pre + ".ln2", layer.ln2);
    detail::push_linear(out, pre + ".block.in_proj_x", layer.block.in_proj_x);
    detail::push_linear(out, pre + ".block.in_proj_z", layer.block.in_proj_z);
    out.emplace_back(pre + ".block.conv.kernel", layer.block.conv.kernel);
    out.emplace_back(pre + ".block.conv.bias", layer.block.conv.bias);
    out.emplace_back(pre + ".block.ssm.a_log", layer.block.ssm.a_log);
    detail::push_linear(out, pre + ".block.ssm.b_proj", layer.block.ssm.b_proj);
    detail::push_linear(out, pre + ".block.ssm.c_proj", layer.block.ssm.c_proj);
    detail::push_linear(out, pre + ".block.ssm.dt_down", layer.block.ssm.dt_down);
    detail::push_linear(out, pre + ".block.ssm.dt_up", layer.block.ssm.dt_up);
    out.emplace_back(pre + ".block.ssm.dt_bias", layer.block.ssm.dt_bias);
    detail::push_linear(out, pre + ".block.out_proj", layer.block.out_proj);
    if (layer.mlp) {
      detail::push_linear(out, pre + ".mlp.up", layer.mlp->up);
      detail::push_linear(out, pre + ".mlp.down", layer.mlp->down);
    }
  }
  detail::push_ln(out, "final_ln", p.final_ln);
  detail::push_linear(out, "head", p.head);
  return out;
}

inline int64_t param_count(const DecisionMambaParams& p) {
  int64_t n = 0;
  for (const auto& [name, t] : named_params(p)) n += t.numel();
  return n;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// Algorithm: project to (x, z); x <- SiLU(causal conv); B, C, Delta from x;
// ZOH discretize; selective scan; gate by SiLU(z); project back to D.
inline Tensor mamba_block_forward(const Tensor& x_in, const MambaBlockParams& p, ScanMode mode) {
  Tensor xp = linear(x_in, p.in_proj_x);  // (B, L, ED)
  Tensor z = linear(x_in, p.in_proj_z);   // (B, L, ED)
  xp = silu(causal_conv1d(xp, p.conv));
  Tensor b = linear(xp, p.ssm.b_proj);
  Tensor c = linear(xp, p.ssm.c_proj);
  Tensor delta = compute_delta(xp, p.ssm);           // (B, L, ED)
  Discretized disc = zoh_discretize(delta, p.ssm.a_log, b, xp);
  Tensor y = selective_scan(disc, c, mode);          // (B, L, ED)
  y = mul(y, silu(z));
  return linear(y, p.out_proj);                      // (B, L, D)
}

// u = x + block(ln1(x)); out = u + mlp(ln2(u)) unless the channel-mixing MLP
// is ablated away.
inline Tensor mamba_layer_forward(const Tensor& x, const MambaLayerParams& p, ScanMode scan_mode,
                                  Mode mode, std::mt19937_64& rng) {
  Tensor u = add(x, mamba_block_forward(layer_norm(x, p.ln1), p.block, scan_mode));
  if (!p.mlp) return u;
  return add(u, channel_mlp(layer_norm(u, p.ln2), *p.mlp, mode, rng));
}

// Per-modality embeddings plus the shared per-timestep embedding, interleaved
// as (rtg_i, s_i, a_i) at flat positions (3i, 3i+1, 3i+2).
inline Tensor interleave_tokens(const Batch& batch, const DecisionMambaParams& p,
                                const DecisionMambaConfig& cfg) {
  const int64_t B = batch.batch_size(), K = batch.steps(), D = cfg.embed_dim;
  Tensor ttok = embed(p.time_embed, batch.timesteps);  // (B, K, D)
  Tensor rtok = add(linear(batch.rtg, p.rtg_embed), ttok);
  Tensor stok = add(linear(batch.states, p.state_embed), ttok);
  Tensor atok = cfg.action_space.continuous()
                    ? linear(batch.cont_actions, p.action_embed_linear)
                    : embed(p.action_embed_table, batch.disc_actions);
  atok = mul(atok, reshape(batch.action_valid, {B, K, 1}));
  atok = add(atok, ttok);

  Tensor tokens = concat({reshape(rtok, {B, K, 1, D}), reshape(stok, {B, K, 1, D}),
                          reshape(atok, {B, K, 1, D})},
                         2);  // (B, K, 3, D)
  return reshape(tokens, {B, 3 * K, D});
}

// Token embedding of the K-step window, followed by embedding layer-norm.
inline Tensor embed_trajectory(const Batch& batch, const DecisionMambaParams& p,
                               const DecisionMambaConfig& cfg) {
  return layer_norm(interleave_tokens(batch, p, cfg), p.embed_ln);
}

// Predicted actions, one per step, read from the state-token positions.
// Continuous heads squash through tanh; discrete heads emit raw logits.
inline Tensor forward(const Batch& batch, const DecisionMambaParams& p,
                      const DecisionMambaConfig& cfg, Mode mode, std::mt19937_64& rng) {
  const int64_t K = batch.steps();
  require(K <= cfg.context_length, "window of ", K, " steps exceeds context length ",
          cfg.context_length);
  Tensor x = embed_trajectory(batch, p, cfg);
  x = dropout(x, cfg.dropout_p, mode, rng);
  for (const MambaLayerParams& layer : p.layers)
    x = mamba_layer_forward(x, layer, cfg.scan_mode, mode, rng);
  x = layer_norm(x, p.final_ln);
  Tensor state_tok = slice(x, 1, 1, 3 * K, 3);  // (B, K, D)
  Tensor out = linear(state_tok, p.head);
  return cfg.action_space.continuous() ? tanh(out) : out;
}

}  // namespace dmamba
