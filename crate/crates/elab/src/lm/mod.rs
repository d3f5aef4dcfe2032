//! Minimal autoregressive transformer with a frozen parameter set.
//!
//! The architecture is a GPT-style stack: learned absolute position
//! embeddings, pre-layernorm blocks (causal multi-head attention + GELU
//! MLP, both with residual connections), a final layernorm, and a linear
//! output projection to vocabulary logits. Everything is plain `f64` with
//! no batching or KV caching; sizes here are desk-scale and the point is
//! exactness, not throughput.
//!
//! A [`ModelBundle`] is immutable after creation: no API mutates weights,
//! so bundles can be shared freely across threads. Forward passes and
//! gradient calls are pure functions of (model, inputs).

mod backward;
mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::prob::ProbVector;

pub(crate) use forward::ForwardCache;

/// Standard deviation for token and position embedding initialization.
const EMBED_INIT_STD: f64 = 0.02;

/// Architecture hyperparameters plus the weight-initialization seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The default desk-scale model used by the experiment harness.
    pub fn desk_default() -> Self {
        Self {
            vocab_size: 512,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 256,
            max_positions: 16,
            layernorm_epsilon: 1e-5,
            seed: 0,
        }
    }

    /// A tiny configuration handy for exhaustive tests.
    pub fn tiny(vocab_size: usize, embed_dim: usize, num_heads: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim,
            num_layers: 1,
            num_heads,
            mlp_hidden: embed_dim * 4,
            max_positions: 8,
            layernorm_epsilon: 1e-5,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("max_positions", self.max_positions),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "layernorm_epsilon must be a small positive real".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one transformer block. Linear weights are stored row-major
/// as `[input][output]`, so `y[o] = Σ_c x[c] · w[c*out_dim + o] + b[o]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub w_q: Vec<f64>,
    pub b_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
}

/// Frozen transformer weights plus the architecture config.
///
/// All fields are private and no method takes `&mut self`; once built, a
/// bundle never changes. The persistence layer provides a checksum over
/// the exact byte serialization for verifying that contract end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub(crate) config: ModelConfig,
    /// `vocab_size × embed_dim`, row per token.
    pub(crate) token_embeddings: Vec<f64>,
    /// `max_positions × embed_dim`.
    pub(crate) position_embeddings: Vec<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    pub(crate) lnf_gamma: Vec<f64>,
    pub(crate) lnf_beta: Vec<f64>,
    /// `embed_dim × vocab_size`.
    pub(crate) output_projection: Vec<f64>,
}

/// A sequence of input-embedding rows; the tunable prefix lives here.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    data: Vec<f64>,
    dim: usize,
}

impl EmbeddingSequence {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "data length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        Ok(Self { data, dim })
    }

    pub fn zeros(len: usize, dim: usize) -> Self {
        Self {
            data: vec![0.0; len * dim],
            dim,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self { data: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }

    /// Concatenation `self ++ other`.
    pub fn concat(&self, other: &EmbeddingSequence) -> EmbeddingSequence {
        assert_eq!(self.dim, other.dim);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        EmbeddingSequence { data, dim: self.dim }
    }
}

/// Result of one loss-plus-gradient evaluation.
#[derive(Debug, Clone)]
pub struct KlEval {
    /// KL(target ‖ output) in nats.
    pub loss_nats: f64,
    /// Exact gradient of the loss with respect to each prefix row.
    pub grad: EmbeddingSequence,
    /// The model's next-token distribution at this prefix.
    pub output: ProbVector,
}

/// Builds a model deterministically from `(config, config.seed)`.
///
/// Projection weights are i.i.d. Gaussian with variance `1/embed_dim`,
/// embeddings use the customary 0.02 standard deviation, biases start at
/// zero, and layernorm parameters at identity.
pub fn init_random_model(config: &ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let d = config.embed_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let embed = Normal::new(0.0, EMBED_INIT_STD).expect("valid normal");
    let proj = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");

    let mut draw = |dist: &Normal<f64>, count: usize| -> Vec<f64> {
        (0..count).map(|_| dist.sample(&mut rng)).collect()
    };

    let token_embeddings = draw(&embed, config.vocab_size * d);
    let position_embeddings = draw(&embed, config.max_positions * d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            ln1_gamma: vec![1.0; d],
            ln1_beta: vec![0.0; d],
            w_q: draw(&proj, d * d),
            b_q: vec![0.0; d],
            w_k: draw(&proj, d * d),
            b_k: vec![0.0; d],
            w_v: draw(&proj, d * d),
            b_v: vec![0.0; d],
            w_o: draw(&proj, d * d),
            b_o: vec![0.0; d],
            ln2_gamma: vec![1.0; d],
            ln2_beta: vec![0.0; d],
            w_fc: draw(&proj, d * config.mlp_hidden),
            b_fc: vec![0.0; config.mlp_hidden],
            w_proj: draw(&proj, config.mlp_hidden * d),
            b_proj: vec![0.0; d],
        });
    }
    let lnf_gamma = vec![1.0; d];
    let lnf_beta = vec![0.0; d];
    let output_projection = draw(&proj, d * config.vocab_size);

    Ok(ModelBundle {
        config: config.clone(),
        token_embeddings,
        position_embeddings,
        layers,
        lnf_gamma,
        lnf_beta,
        output_projection,
    })
}

impl ModelBundle {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// The embedding row for one token.
    pub fn token_embedding(&self, token: usize) -> Result<&[f64]> {
        let d = self.config.embed_dim;
        if token >= self.config.vocab_size {
            return Err(Error::InvalidToken {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(&self.token_embeddings[token * d..(token + 1) * d])
    }

    /// The full `vocab_size × embed_dim` lookup table, row-major.
    pub fn token_embedding_table(&self) -> &[f64] {
        &self.token_embeddings
    }

    /// Looks up embeddings for a token sequence. An empty sequence yields
    /// an empty `EmbeddingSequence`.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<EmbeddingSequence> {
        let mut seq = EmbeddingSequence::empty(self.config.embed_dim);
        for &t in tokens {
            seq.push_row(self.token_embedding(t)?);
        }
        Ok(seq)
    }

    /// Checks that every weight tensor is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, tensor) in self.named_tensors() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite entry in tensor {name}")));
            }
        }
        Ok(())
    }

    /// All weight tensors in their canonical (serialization) order.
    pub fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("token_embeddings".into(), &self.token_embeddings),
            ("position_embeddings".into(), &self.position_embeddings),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let pairs: [(&str, &Vec<f64>); 16] = [
                ("ln1_gamma", &layer.ln1_gamma),
                ("ln1_beta", &layer.ln1_beta),
                ("w_q", &layer.w_q),
                ("b_q", &layer.b_q),
                ("w_k", &layer.w_k),
                ("b_k", &layer.b_k),
                ("w_v", &layer.w_v),
                ("b_v", &layer.b_v),
                ("w_o", &layer.w_o),
                ("b_o", &layer.b_o),
                ("ln2_gamma", &layer.ln2_gamma),
                ("ln2_beta", &layer.ln2_beta),
                ("w_fc", &layer.w_fc),
                ("b_fc", &layer.b_fc),
                ("w_proj", &layer.w_proj),
                ("b_proj", &layer.b_proj),
            ];
            for (name, tensor) in pairs {
                out.push((format!("layers[{i}].{name}"), tensor.as_slice()));
            }
        }
        out.push(("lnf_gamma".into(), &self.lnf_gamma));
        out.push(("lnf_beta".into(), &self.lnf_beta));
        out.push(("output_projection".into(), &self.output_projection));
        out
    }

    /// Runs the causal forward pass and returns the softmax distribution at
    /// the last position.
    pub fn next_token_distribution(&self, prefix: &EmbeddingSequence) -> Result<ProbVector> {
        let cache = self.forward(prefix)?;
        Ok(ProbVector::from_logits(&cache.logits))
    }

    /// Final hidden states (after the last layernorm) for every position,
    /// as an `n × embed_dim` sequence.
    pub fn final_hidden_states(&self, prefix: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        let cache = self.forward(prefix)?;
        EmbeddingSequence::new(cache.final_hidden.clone(), self.config.embed_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits_equal(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn same_config_gives_bit_identical_model() {
        let cfg = ModelConfig::tiny(32, 16, 4, 99);
        let a = init_random_model(&cfg).unwrap();
        let b = init_random_model(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
            assert_eq!(na, nb);
            assert!(bits_equal(ta, tb), "tensor {na} differs between runs");
        }
    }

    #[test]
    fn head_dim_follows_config() {
        let cfg = ModelConfig {
            vocab_size: 100,
            embed_dim: 64,
            num_layers: 1,
            num_heads: 4,
            mlp_hidden: 128,
            max_positions: 8,
            layernorm_epsilon: 1e-5,
            seed: 1,
        };
        assert_eq!(cfg.head_dim(), 16);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = ModelConfig::desk_default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::desk_default();
        cfg.vocab_size = 0;
        assert!(cfg.validate().is_err());
        cfg = ModelConfig::desk_default();
        cfg.layernorm_epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_statistics_match_declared_distribution() {
        let cfg = ModelConfig::desk_default();
        let model = init_random_model(&cfg).unwrap();
        model.validate().unwrap();
        // Sample mean of i.i.d. N(0, 1/d) entries should sit within 5
        // standard errors of zero.
        let sigma = (1.0 / cfg.embed_dim as f64).sqrt();
        for name in ["layers[0].w_q", "layers[1].w_fc", "output_projection"] {
            let tensors = model.named_tensors();
            let (_, t) = tensors.iter().find(|(n, _)| n == name).unwrap();
            let mean: f64 = t.iter().sum::<f64>() / t.len() as f64;
            let bound = 5.0 * sigma / (t.len() as f64).sqrt();
            assert!(
                mean.abs() <= bound,
                "{name}: sample mean {mean} outside 5-sigma bound {bound}"
            );
        }
    }

    #[test]
    fn embed_tokens_is_table_lookup() {
        let cfg = ModelConfig::tiny(16, 8, 2, 5);
        let model = init_random_model(&cfg).unwrap();
        let seq = model.embed_tokens(&[7]).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(bits_equal(seq.row(0), model.token_embedding(7).unwrap()));

        let empty = model.embed_tokens(&[]).unwrap();
        assert_eq!(empty.len(), 0);

        let dup = model.embed_tokens(&[3, 3]).unwrap();
        assert!(bits_equal(dup.row(0), dup.row(1)));

        assert!(matches!(
            model.embed_tokens(&[16]),
            Err(crate::Error::InvalidToken { token: 16, .. })
        ));
    }
}
