//! Deterministic miniature transformer decoder.
//!
//! The model exists so KV-cache correctness is observable end to end: every
//! generated token depends on the cached keys and values, so a corrupted or
//! misplaced block changes the output stream. Weights are filled from a
//! seeded SplitMix64 stream in a fixed order (see README), making every
//! forward pass a pure function of `(config, weight_seed)`.
//!
//! Two storage paths are provided with bit-identical arithmetic: a paged
//! path reading through a block table, and a contiguous path over a flat
//! per-sequence buffer (used by the reservation baselines).

use serde::{Deserialize, Serialize};

use crate::attention::{
    interleaved_attention, paged_attention, AttentionQuery, ContigKv, KvStorage,
};
use crate::block_manager::BlockTable;
use crate::rng::SplitMix64;
use crate::types::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub max_seq_len: usize,
    pub weight_seed: u64,
    /// Optional pre-attention / pre-MLP layer normalization (no learned
    /// parameters). Off by default to keep the arithmetic minimal.
    pub layer_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_layers: 2,
            num_heads: 2,
            head_dim: 8,
            max_seq_len: 2048,
            weight_seed: 0,
            layer_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 1
            || self.num_layers < 1
            || self.num_heads < 1
            || self.head_dim < 1
            || self.max_seq_len < 1
        {
            return Err("all model dimensions must be >= 1".into());
        }
        Ok(())
    }
}

struct LayerWeights {
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    w_o: Vec<f64>,
    w_mlp_in: Vec<f64>,
    w_mlp_out: Vec<f64>,
}

/// All weights, fully determined by `(ModelConfig, weight_seed)`.
///
/// Generation order: token embedding, position embedding, then per layer
/// `W_q, W_k, W_v, W_o, W_mlp_in, W_mlp_out`, then the output projection.
/// Every entry is `uniform(-1, 1) / sqrt(hidden)`, row-major.
struct ModelWeights {
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    layers: Vec<LayerWeights>,
    out_proj: Vec<f64>,
}

impl ModelWeights {
    fn generate(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden();
        let mlp = 4 * d;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::new(cfg.weight_seed);
        let mut mat = |rows: usize, cols: usize| -> Vec<f64> {
            (0..rows * cols).map(|_| rng.next_symmetric() * scale).collect()
        };
        let tok_emb = mat(cfg.vocab_size, d);
        let pos_emb = mat(cfg.max_seq_len, d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                w_q: mat(d, d),
                w_k: mat(d, d),
                w_v: mat(d, d),
                w_o: mat(d, d),
                w_mlp_in: mat(d, mlp),
                w_mlp_out: mat(mlp, d),
            })
            .collect();
        let out_proj = mat(d, cfg.vocab_size);
        Self {
            tok_emb,
            pos_emb,
            layers,
            out_proj,
        }
    }
}

/// `y = x^T W` for row-major `W[rows][cols]`, accumulated row by row so all
/// call sites share one floating-point evaluation order.
fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for j in 0..cols {
            y[j] += xi * row[j];
        }
    }
    y
}

fn layer_norm(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    for v in x.iter_mut() {
        *v = (*v - mean) * inv;
    }
}

pub struct TinyModel {
    cfg: ModelConfig,
    weights: ModelWeights,
}

impl TinyModel {
    pub fn new(cfg: ModelConfig) -> Self {
        cfg.validate().expect("valid model config");
        let weights = ModelWeights::generate(&cfg);
        Self { cfg, weights }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn embed(&self, token: TokenId, pos: usize) -> Vec<f64> {
        let d = self.cfg.hidden();
        assert!((token.0 as usize) < self.cfg.vocab_size, "token out of vocab");
        assert!(pos < self.cfg.max_seq_len, "position beyond max_seq_len");
        let t = &self.weights.tok_emb[token.0 as usize * d..(token.0 as usize + 1) * d];
        let p = &self.weights.pos_emb[pos * d..(pos + 1) * d];
        t.iter().zip(p).map(|(a, b)| a + b).collect()
    }

    /// Project one position through a layer's Q/K/V maps.
    fn qkv(&self, layer: usize, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.cfg.hidden();
        let lw = &self.weights.layers[layer];
        (
            matvec(h, &lw.w_q, d),
            matvec(h, &lw.w_k, d),
            matvec(h, &lw.w_v, d),
        )
    }

    fn finish_layer(&self, layer: usize, h: &mut [f64], attn: &[f64]) {
        let d = self.cfg.hidden();
        let lw = &self.weights.layers[layer];
        let proj = matvec(attn, &lw.w_o, d);
        for i in 0..d {
            h[i] += proj[i];
        }
        let mut pre_mlp = h.to_vec();
        if self.cfg.layer_norm {
            layer_norm(&mut pre_mlp);
        }
        let mut mid = matvec(&pre_mlp, &lw.w_mlp_in, 4 * d);
        for v in &mut mid {
            *v = v.tanh();
        }
        let out = matvec(&mid, &lw.w_mlp_out, d);
        for i in 0..d {
            h[i] += out[i];
        }
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        matvec(h, &self.weights.out_proj, self.cfg.vocab_size)
    }

    fn maybe_norm(&self, h: &[f64]) -> Vec<f64> {
        let mut x = h.to_vec();
        if self.cfg.layer_norm {
            layer_norm(&mut x);
        }
        x
    }

    /// Prompt phase over a paged cache: computes positions `start..`, writes
    /// their K/V into the table's blocks, and returns next-token logits for
    /// the final position. `start > 0` is used when the leading positions
    /// are covered by an attached shared prefix whose KV already exists.
    pub fn prefill_paged(
        &self,
        tokens: &[TokenId],
        start: usize,
        table: &BlockTable,
        storage: &mut KvStorage,
    ) -> Vec<f64> {
        let n = tokens.len();
        assert!(n >= 1 && start < n, "prompt must extend past the cached prefix");
        assert!(n <= self.cfg.max_seq_len, "prompt longer than max_seq_len");
        assert!(table.filled_slots() >= n, "table does not cover the prompt");
        let block_size = storage.block_size();
        let (nh, dh) = (self.cfg.num_heads, self.cfg.head_dim);

        let mut hidden: Vec<Vec<f64>> =
            (start..n).map(|pos| self.embed(tokens[pos], pos)).collect();
        for layer in 0..self.cfg.num_layers {
            // First write every position's K/V, then attend; causal reads at
            // position p only touch slots <= p, which are now all present.
            let mut queries: Vec<Vec<f64>> = Vec::with_capacity(hidden.len());
            for (idx, h) in hidden.iter().enumerate() {
                let pos = start + idx;
                let (q, k, v) = self.qkv(layer, &self.maybe_norm(h));
                let (entry, slot) = table.locate(pos, block_size);
                for head in 0..nh {
                    storage.write_kv(
                        entry.block,
                        slot,
                        layer,
                        head,
                        &k[head * dh..(head + 1) * dh],
                        &v[head * dh..(head + 1) * dh],
                    );
                }
                queries.push(q);
            }
            for (idx, h) in hidden.iter_mut().enumerate() {
                let pos = start + idx;
                let q = &queries[idx];
                let mut attn = vec![0.0; self.cfg.hidden()];
                for head in 0..nh {
                    let out = paged_attention(
                        &AttentionQuery {
                            q: &q[head * dh..(head + 1) * dh],
                            context_len: pos + 1,
                            table,
                            layer,
                            head,
                        },
                        storage,
                    );
                    attn[head * dh..(head + 1) * dh].copy_from_slice(&out);
                }
                self.finish_layer(layer, h, &attn);
            }
        }
        self.logits(hidden.last().unwrap())
    }

    /// One decode step over a paged cache: embeds `last_token` at `pos`,
    /// writes its K/V into the slot the block manager provisioned, attends
    /// over the whole context (including itself), and returns logits.
    pub fn decode_paged(
        &self,
        last_token: TokenId,
        pos: usize,
        table: &BlockTable,
        storage: &mut KvStorage,
    ) -> Vec<f64> {
        let block_size = storage.block_size();
        assert!(
            table.filled_slots() == pos + 1,
            "decode slot not provisioned: table holds {} slots, position is {}",
            table.filled_slots(),
            pos,
        );
        let (nh, dh) = (self.cfg.num_heads, self.cfg.head_dim);
        let mut h = self.embed(last_token, pos);
        for layer in 0..self.cfg.num_layers {
            let (q, k, v) = self.qkv(layer, &self.maybe_norm(&h));
            let (entry, slot) = table.locate(pos, block_size);
            for head in 0..nh {
                storage.write_kv(
                    entry.block,
                    slot,
                    layer,
                    head,
                    &k[head * dh..(head + 1) * dh],
                    &v[head * dh..(head + 1) * dh],
                );
            }
            let mut attn = vec![0.0; self.cfg.hidden()];
            for head in 0..nh {
                let out = paged_attention(
                    &AttentionQuery {
                        q: &q[head * dh..(head + 1) * dh],
                        context_len: pos + 1,
                        table,
                        layer,
                        head,
                    },
                    storage,
                );
                attn[head * dh..(head + 1) * dh].copy_from_slice(&out);
            }
            self.finish_layer(layer, &mut h, &attn);
        }
        self.logits(&h)
    }

    /// Prompt phase into a contiguous per-sequence buffer (baselines).
    pub fn prefill_contig(&self, tokens: &[TokenId], buf: &mut ContigKv) -> Vec<f64> {
        let n = tokens.len();
        assert!(n >= 1);
        assert!(n <= self.cfg.max_seq_len, "prompt longer than max_seq_len");
        let (nh, dh) = (self.cfg.num_heads, self.cfg.head_dim);
        let mut hidden: Vec<Vec<f64>> =
            (0..n).map(|pos| self.embed(tokens[pos], pos)).collect();
        for layer in 0..self.cfg.num_layers {
            let mut queries: Vec<Vec<f64>> = Vec::with_capacity(n);
            for (pos, h) in hidden.iter().enumerate() {
                let (q, k, v) = self.qkv(layer, &self.maybe_norm(h));
                for head in 0..nh {
                    buf.write_kv(
                        pos,
                        layer,
                        head,
                        &k[head * dh..(head + 1) * dh],
                        &v[head * dh..(head + 1) * dh],
                    );
                }
                queries.push(q);
            }
            for (pos, h) in hidden.iter_mut().enumerate() {
                let q = &queries[pos];
                let mut attn = vec![0.0; self.cfg.hidden()];
                for head in 0..nh {
                    let out = interleaved_attention(
                        &q[head * dh..(head + 1) * dh],
                        buf.kv_slice(layer, head, pos + 1),
                        pos + 1,
                    );
                    attn[head * dh..(head + 1) * dh].copy_from_slice(&out);
                }
                self.finish_layer(layer, h, &attn);
            }
        }
        self.logits(hidden.last().unwrap())
    }

    /// One decode step over a contiguous buffer (baselines).
    pub fn decode_contig(&self, last_token: TokenId, pos: usize, buf: &mut ContigKv) -> Vec<f64> {
        let (nh, dh) = (self.cfg.num_heads, self.cfg.head_dim);
        let mut h = self.embed(last_token, pos);
        for layer in 0..self.cfg.num_layers {
            let (q, k, v) = self.qkv(layer, &self.maybe_norm(&h));
            for head in 0..nh {
                buf.write_kv(
                    pos,
                    layer,
                    head,
                    &k[head * dh..(head + 1) * dh],
                    &v[head * dh..(head + 1) * dh],
                );
            }
            let mut attn = vec![0.0; self.cfg.hidden()];
            for head in 0..nh {
                let out = interleaved_attention(
                    &q[head * dh..(head + 1) * dh],
                    buf.kv_slice(layer, head, pos + 1),
                    pos + 1,
                );
                attn[head * dh..(head + 1) * dh].copy_from_slice(&out);
            }
            self.finish_layer(layer, &mut h, &attn);
        }
        self.logits(&h)
    }
}
