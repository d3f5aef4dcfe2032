//! Causal forward pass with full activation caching for the backward pass.

use crate::error::{Error, Result};

use super::{EmbeddingSequence, LayerWeights, ModelBundle};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Per-row layernorm statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-layer activations. Position count `n` is small, so we keep
/// everything rather than recompute.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub h_in: Vec<f64>,
    pub ln1: LnStats,
    pub a1: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Softmaxed causal attention weights, `num_heads × n × n`
    /// (entries with j > i stay zero).
    pub att: Vec<f64>,
    /// Attention output before the output projection, `n × d`.
    pub concat: Vec<f64>,
    pub h_mid: Vec<f64>,
    pub ln2: LnStats,
    pub a2: Vec<f64>,
    pub mlp_pre: Vec<f64>,
    pub h_out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub n: usize,
    pub layers: Vec<LayerCache>,
    /// Input to the final layernorm (`n × d`).
    pub hf_in: Vec<f64>,
    pub lnf: LnStats,
    pub final_hidden: Vec<f64>,
    /// Logits at the last position only.
    pub logits: Vec<f64>,
}

/// `y[i] = layernorm(x[i]) * gamma + beta` for each of `n` rows.
fn layernorm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    n: usize,
    d: usize,
) -> (Vec<f64>, LnStats) {
    let mut out = vec![0.0; n * d];
    let mut mean = vec![0.0; n];
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        mean[i] = mu;
        rstd[i] = rs;
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = (row[j] - mu) * rs * gamma[j] + beta[j];
        }
    }
    (out, LnStats { mean, rstd })
}

/// `y[i][o] = Σ_c x[i][c] · w[c*out_dim + o] + b[o]` for each of `n` rows.
fn linear_rows(x: &[f64], w: &[f64], b: &[f64], n: usize, in_dim: usize, out_dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * out_dim];
    for i in 0..n {
        let row = &x[i * in_dim..(i + 1) * in_dim];
        let orow = &mut out[i * out_dim..(i + 1) * out_dim];
        orow.copy_from_slice(&b[..out_dim]);
        for (c, &xc) in row.iter().enumerate() {
            let wrow = &w[c * out_dim..(c + 1) * out_dim];
            for o in 0..out_dim {
                orow[o] += xc * wrow[o];
            }
        }
    }
    out
}

/// Causal multi-head attention over pre-computed q/k/v. Returns the
/// softmaxed weights and the concatenated head outputs.
fn causal_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    num_heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let hd = d / num_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut att = vec![0.0; num_heads * n * n];
    let mut concat = vec![0.0; n * d];
    for h in 0..num_heads {
        let off = h * hd;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + hd];
            // Scores for j <= i, stabilized by max subtraction.
            let mut scores = Vec::with_capacity(i + 1);
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k[j * d + off..j * d + off + hd];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                if s > max {
                    max = s;
                }
                scores.push(s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let arow = &mut att[h * n * n + i * n..h * n * n + i * n + n];
            for (j, s) in scores.iter().enumerate() {
                arow[j] = s / sum;
            }
            let orow = &mut concat[i * d + off..i * d + off + hd];
            for j in 0..=i {
                let w = arow[j];
                let vj = &v[j * d + off..j * d + off + hd];
                for c in 0..hd {
                    orow[c] += w * vj[c];
                }
            }
        }
    }
    (att, concat)
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl ModelBundle {
    /// Full causal forward pass; logits are computed at the last position.
    pub(crate) fn forward(&self, prefix: &EmbeddingSequence) -> Result<ForwardCache> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let n = prefix.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "forward pass requires a non-empty prefix".into(),
            ));
        }
        if n > cfg.max_positions {
            return Err(Error::CapacityExceeded {
                len: n,
                max_positions: cfg.max_positions,
            });
        }
        if prefix.dim() != d {
            return Err(Error::InvalidArgument(format!(
                "prefix dim {} does not match embed_dim {d}",
                prefix.dim()
            )));
        }

        // Position embeddings are added to the raw prefix rows.
        let mut h = prefix.as_slice().to_vec();
        for i in 0..n {
            let pos = &self.position_embeddings[i * d..(i + 1) * d];
            add_assign(&mut h[i * d..(i + 1) * d], pos);
        }

        let eps = cfg.layernorm_epsilon;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for lw in &self.layers {
            let cache = self.forward_layer(&h, lw, n, eps);
            h = cache.h_out.clone();
            layers.push(cache);
        }

        let hf_in = h;
        let (final_hidden, lnf) = layernorm_rows(&hf_in, &self.lnf_gamma, &self.lnf_beta, eps, n, d);

        let last = &final_hidden[(n - 1) * d..n * d];
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; vocab];
        for (c, &xc) in last.iter().enumerate() {
            let wrow = &self.output_projection[c * vocab..(c + 1) * vocab];
            for o in 0..vocab {
                logits[o] += xc * wrow[o];
            }
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logit in forward pass".into()));
        }

        Ok(ForwardCache {
            n,
            layers,
            hf_in,
            lnf,
            final_hidden,
            logits,
        })
    }

    fn forward_layer(&self, h_in: &[f64], lw: &LayerWeights, n: usize, eps: f64) -> LayerCache {
        let d = self.config.embed_dim;
        let m = self.config.mlp_hidden;
        let heads = self.config.num_heads;

        let (a1, ln1) = layernorm_rows(h_in, &lw.ln1_gamma, &lw.ln1_beta, eps, n, d);
        let q = linear_rows(&a1, &lw.w_q, &lw.b_q, n, d, d);
        let k = linear_rows(&a1, &lw.w_k, &lw.b_k, n, d, d);
        let v = linear_rows(&a1, &lw.w_v, &lw.b_v, n, d, d);
        let (att, concat) = causal_attention(&q, &k, &v, n, d, heads);
        let attn_out = linear_rows(&concat, &lw.w_o, &lw.b_o, n, d, d);

        let mut h_mid = h_in.to_vec();
        add_assign(&mut h_mid, &attn_out);

        let (a2, ln2) = layernorm_rows(&h_mid, &lw.ln2_gamma, &lw.ln2_beta, eps, n, d);
        let mlp_pre = linear_rows(&a2, &lw.w_fc, &lw.b_fc, n, d, m);
        let mlp_act: Vec<f64> = mlp_pre.iter().map(|&x| gelu(x)).collect();
        let mlp_out = linear_rows(&mlp_act, &lw.w_proj, &lw.b_proj, n, m, d);

        let mut h_out = h_mid.clone();
        add_assign(&mut h_out, &mlp_out);

        LayerCache {
            h_in: h_in.to_vec(),
            ln1,
            a1,
            q,
            k,
            v,
            att,
            concat,
            h_mid,
            ln2,
            a2,
            mlp_pre,
            h_out,
        }
    }
}
