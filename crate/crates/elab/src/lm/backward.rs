//! Exact reverse-mode gradient of the KL loss with respect to the prefix
//! embeddings. Model parameters receive no gradient: the bundle is frozen
//! and the backward pass only ever produces `d loss / d prefix`.

use crate::error::{Error, Result};
use crate::prob::{log_sum_exp, softmax, ProbVector};

use super::forward::{gelu_grad, ForwardCache, LnStats};
use super::{EmbeddingSequence, KlEval, LayerWeights, ModelBundle};

/// KL(target ‖ softmax(logits)) in nats, together with the output
/// distribution and the exact logit gradient `S·q − p` (`S = Σ p`).
fn kl_from_logits(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let q = softmax(logits);
    let mut loss = 0.0;
    let mut target_sum = 0.0;
    for (v, &p) in target.iter().enumerate() {
        target_sum += p;
        if p > 0.0 {
            loss += p * (p.ln() - (logits[v] - lse));
        }
    }
    let dlogits: Vec<f64> = q
        .iter()
        .zip(target)
        .map(|(&qv, &pv)| target_sum * qv - pv)
        .collect();
    (loss, q, dlogits)
}

/// `dx[i][c] += Σ_o dy[i][o] · w[c*out_dim + o]` for each of `n` rows.
fn linear_backward_rows(
    dy: &[f64],
    w: &[f64],
    dx: &mut [f64],
    n: usize,
    in_dim: usize,
    out_dim: usize,
) {
    for i in 0..n {
        let dyrow = &dy[i * out_dim..(i + 1) * out_dim];
        let dxrow = &mut dx[i * in_dim..(i + 1) * in_dim];
        for c in 0..in_dim {
            let wrow = &w[c * out_dim..(c + 1) * out_dim];
            let mut acc = 0.0;
            for o in 0..out_dim {
                acc += dyrow[o] * wrow[o];
            }
            dxrow[c] += acc;
        }
    }
}

/// Layernorm backward for `n` rows; returns `d loss / d x`.
fn layernorm_backward_rows(
    dy: &[f64],
    x: &[f64],
    stats: &LnStats,
    gamma: &[f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    for i in 0..n {
        let mu = stats.mean[i];
        let rstd = stats.rstd[i];
        let xrow = &x[i * d..(i + 1) * d];
        let dyrow = &dy[i * d..(i + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xrow[j] - mu) * rstd;
            let dxhat = dyrow[j] * gamma[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxrow = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let xhat = (xrow[j] - mu) * rstd;
            let dxhat = dyrow[j] * gamma[j];
            dxrow[j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * rstd;
        }
    }
    dx
}

impl ModelBundle {
    /// Forward-only KL evaluation: `(loss in nats, output distribution)`.
    ///
    /// Shares the exact code path with the gradient variant, so the two
    /// report bit-identical losses for the same inputs.
    pub fn kl_loss(&self, prefix: &EmbeddingSequence, target: &ProbVector) -> Result<(f64, ProbVector)> {
        self.check_target(target)?;
        let cache = self.forward(prefix)?;
        let (loss, q, _) = kl_from_logits(&cache.logits, target.probs());
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite KL loss".into()));
        }
        Ok((loss, ProbVector::new(q)?))
    }

    /// KL loss (nats) and its exact reverse-mode gradient with respect to
    /// every prefix row.
    pub fn kl_loss_and_prefix_gradient(
        &self,
        prefix: &EmbeddingSequence,
        target: &ProbVector,
    ) -> Result<KlEval> {
        self.check_target(target)?;
        let cache = self.forward(prefix)?;
        let (loss, q, dlogits) = kl_from_logits(&cache.logits, target.probs());
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite KL loss".into()));
        }
        let dprefix = self.backward(&cache, &dlogits);
        if dprefix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prefix gradient".into()));
        }
        Ok(KlEval {
            loss_nats: loss,
            grad: EmbeddingSequence::new(dprefix, self.config.embed_dim)?,
            output: ProbVector::new(q)?,
        })
    }

    fn check_target(&self, target: &ProbVector) -> Result<()> {
        if target.len() != self.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "target has {} entries, vocabulary has {}",
                target.len(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Propagates `dlogits` back to the prefix rows.
    fn backward(&self, cache: &ForwardCache, dlogits: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let vocab = cfg.vocab_size;
        let n = cache.n;

        // Output projection: only the last position carries loss gradient.
        let mut d_final = vec![0.0; n * d];
        {
            let row = &mut d_final[(n - 1) * d..n * d];
            for (c, slot) in row.iter_mut().enumerate() {
                let wrow = &self.output_projection[c * vocab..(c + 1) * vocab];
                let mut acc = 0.0;
                for o in 0..vocab {
                    acc += dlogits[o] * wrow[o];
                }
                *slot = acc;
            }
        }

        // Final layernorm.
        let mut dh = layernorm_backward_rows(&d_final, &cache.hf_in, &cache.lnf, &self.lnf_gamma, n, d);

        for (lw, lc) in self.layers.iter().zip(cache.layers.iter()).rev() {
            dh = self.backward_layer(lw, lc, &dh, n);
        }

        // Position embeddings are added constants, so dh is already the
        // prefix gradient.
        dh
    }

    fn backward_layer(
        &self,
        lw: &LayerWeights,
        lc: &super::forward::LayerCache,
        d_h_out: &[f64],
        n: usize,
    ) -> Vec<f64> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let m = cfg.mlp_hidden;
        let heads = cfg.num_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();

        // MLP branch: h_out = h_mid + W_proj·gelu(W_fc·a2).
        let mut d_act = vec![0.0; n * m];
        linear_backward_rows(d_h_out, &lw.w_proj, &mut d_act, n, m, d);
        let mut d_pre = d_act;
        for (g, &pre) in d_pre.iter_mut().zip(lc.mlp_pre.iter()) {
            *g *= gelu_grad(pre);
        }
        let mut d_a2 = vec![0.0; n * d];
        linear_backward_rows(&d_pre, &lw.w_fc, &mut d_a2, n, d, m);

        let mut d_h_mid = layernorm_backward_rows(&d_a2, &lc.h_mid, &lc.ln2, &lw.ln2_gamma, n, d);
        for (dst, src) in d_h_mid.iter_mut().zip(d_h_out) {
            *dst += src;
        }

        // Attention branch: h_mid = h_in + W_o·concat.
        let mut d_concat = vec![0.0; n * d];
        linear_backward_rows(&d_h_mid, &lw.w_o, &mut d_concat, n, d, d);

        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * hd;
            let att = &lc.att[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let arow = &att[i * n..i * n + n];
                let dcrow = &d_concat[i * d + off..i * d + off + hd];
                // d attention weights, then softmax backward over j <= i.
                let mut datt = vec![0.0; i + 1];
                for (j, da) in datt.iter_mut().enumerate() {
                    let vrow = &lc.v[j * d + off..j * d + off + hd];
                    *da = dcrow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    // dv accumulation for this (i, j) pair.
                    let dvrow = &mut dv[j * d + off..j * d + off + hd];
                    let w = arow[j];
                    for c in 0..hd {
                        dvrow[c] += w * dcrow[c];
                    }
                }
                let dot: f64 = (0..=i).map(|j| arow[j] * datt[j]).sum();
                for j in 0..=i {
                    let ds = arow[j] * (datt[j] - dot) * scale;
                    let krow = &lc.k[j * d + off..j * d + off + hd];
                    let qrow = &lc.q[i * d + off..i * d + off + hd];
                    let dqrow = &mut dq[i * d + off..i * d + off + hd];
                    for c in 0..hd {
                        dqrow[c] += ds * krow[c];
                    }
                    let dkrow = &mut dk[j * d + off..j * d + off + hd];
                    for c in 0..hd {
                        dkrow[c] += ds * qrow[c];
                    }
                }
            }
        }

        let mut d_a1 = vec![0.0; n * d];
        linear_backward_rows(&dq, &lw.w_q, &mut d_a1, n, d, d);
        linear_backward_rows(&dk, &lw.w_k, &mut d_a1, n, d, d);
        linear_backward_rows(&dv, &lw.w_v, &mut d_a1, n, d, d);

        let mut d_h_in = layernorm_backward_rows(&d_a1, &lc.h_in, &lc.ln1, &lw.ln1_gamma, n, d);
        for (dst, src) in d_h_in.iter_mut().zip(&d_h_mid) {
            *dst += src;
        }
        d_h_in
    }
}
