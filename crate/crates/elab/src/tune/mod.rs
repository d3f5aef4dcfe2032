//! Prompt tuning against a frozen model.
//!
//! Three frameworks drive a prefix of input embeddings toward a target
//! next-token distribution:
//!
//! - **soft**: every position is a free embedding vector, updated each
//!   epoch by one AdamW step on the full prefix gradient;
//! - **hard**: every position is the embedding of a real vocabulary token,
//!   updated left to right by gradient-guided token flips that are
//!   accepted only when they do not increase the true KL;
//! - **hybrid**: a per-position mixture — hard positions flip left to
//!   right, soft positions share a single optimizer step per epoch.
//!
//! All three run through one engine, so an all-soft hybrid is literally
//! `tune_soft` and an all-hard hybrid is literally `tune_hard`. Early
//! stopping follows a patience rule on the best loss seen; hard tuning
//! additionally stops once a full sweep changes no token. The minimum loss
//! over the whole trajectory is what gets reported.

mod adamw;
mod tuner;

pub use tuner::{best_of_inits, hard_flip_step, init_prompt, tune_hard, tune_hybrid, tune_soft};

use crate::error::{Error, Result};
use crate::lm::{EmbeddingSequence, ModelBundle};
use crate::prob::ProbVector;

/// Default prefix length.
pub const DEFAULT_PROMPT_LEN: usize = 5;
/// Default number of prompt initializations to take the minimum over.
pub const DEFAULT_NUM_INITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Hard,
    Soft,
}

/// Per-position hard/soft assignment for a prompt prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    positions: Vec<PositionKind>,
}

impl PromptLayout {
    pub fn new(positions: Vec<PositionKind>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidArgument("layout needs length >= 1".into()));
        }
        Ok(Self { positions })
    }

    pub fn all_soft(len: usize) -> Self {
        Self {
            positions: vec![PositionKind::Soft; len],
        }
    }

    pub fn all_hard(len: usize) -> Self {
        Self {
            positions: vec![PositionKind::Hard; len],
        }
    }

    /// `len` positions with the last `soft_count` of them soft.
    pub fn hybrid(len: usize, soft_count: usize) -> Result<Self> {
        if soft_count > len {
            return Err(Error::InvalidArgument(format!(
                "soft count {soft_count} exceeds layout length {len}"
            )));
        }
        let mut positions = vec![PositionKind::Hard; len];
        for p in positions.iter_mut().skip(len - soft_count) {
            *p = PositionKind::Soft;
        }
        Self::new(positions)
    }

    /// Parses `soft`, `hard`, `hybrid:K`, or an explicit pattern such as
    /// `hhsss`. The named forms use `default_len` positions.
    pub fn parse(spec: &str, default_len: usize) -> Result<Self> {
        match spec {
            "soft" => Ok(Self::all_soft(default_len)),
            "hard" => Ok(Self::all_hard(default_len)),
            other => {
                if let Some(count) = other.strip_prefix("hybrid:") {
                    let soft_count: usize = count.parse().map_err(|_| {
                        Error::InvalidArgument(format!("bad hybrid soft count `{count}`"))
                    })?;
                    return Self::hybrid(default_len, soft_count);
                }
                let positions: Result<Vec<PositionKind>> = other
                    .chars()
                    .map(|c| match c {
                        'h' => Ok(PositionKind::Hard),
                        's' => Ok(PositionKind::Soft),
                        _ => Err(Error::InvalidArgument(format!(
                            "bad layout character `{c}` in `{other}`"
                        ))),
                    })
                    .collect();
                Self::new(positions?)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn kind(&self, i: usize) -> PositionKind {
        self.positions[i]
    }

    pub fn soft_count(&self) -> usize {
        self.positions
            .iter()
            .filter(|k| **k == PositionKind::Soft)
            .count()
    }

    pub fn is_all_soft(&self) -> bool {
        self.soft_count() == self.len()
    }

    pub fn is_all_hard(&self) -> bool {
        self.soft_count() == 0
    }

    /// `soft`, `hard`, or `hybrid:K` (K = soft count).
    pub fn framework_label(&self) -> String {
        if self.is_all_soft() {
            "soft".into()
        } else if self.is_all_hard() {
            "hard".into()
        } else {
            format!("hybrid:{}", self.soft_count())
        }
    }

    /// Explicit `h`/`s` pattern.
    pub fn pattern(&self) -> String {
        self.positions
            .iter()
            .map(|k| match k {
                PositionKind::Hard => 'h',
                PositionKind::Soft => 's',
            })
            .collect()
    }

    /// The compact spec string that [`PromptLayout::parse`] maps back to
    /// this layout: a named form when one applies, else the raw pattern.
    pub fn spec_string(&self) -> String {
        if self.is_all_soft() {
            "soft".into()
        } else if self.is_all_hard() {
            "hard".into()
        } else {
            let suffix_soft = Self::hybrid(self.len(), self.soft_count()).unwrap();
            if *self == suffix_soft {
                format!("hybrid:{}", self.soft_count())
            } else {
                self.pattern()
            }
        }
    }
}

/// Current prefix parameters: the embedding rows plus, for each hard
/// position, the vocabulary token whose embedding that row must equal.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub embeddings: EmbeddingSequence,
    pub hard_tokens: Vec<Option<usize>>,
}

impl PromptState {
    pub fn len(&self) -> usize {
        self.hard_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard_tokens.is_empty()
    }

    pub fn layout(&self) -> PromptLayout {
        PromptLayout {
            positions: self
                .hard_tokens
                .iter()
                .map(|t| {
                    if t.is_some() {
                        PositionKind::Hard
                    } else {
                        PositionKind::Soft
                    }
                })
                .collect(),
        }
    }

    pub fn is_all_soft(&self) -> bool {
        self.hard_tokens.iter().all(|t| t.is_none())
    }

    pub fn is_all_hard(&self) -> bool {
        self.hard_tokens.iter().all(|t| t.is_some())
    }

    pub(crate) fn soft_positions(&self) -> Vec<usize> {
        self.hard_tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.is_none().then_some(i))
            .collect()
    }

    /// Checks the hard-row contract: every hard position's embedding row
    /// equals the model's row for its token, bit for bit.
    pub fn validate_against(&self, model: &ModelBundle) -> Result<()> {
        if self.embeddings.len() != self.hard_tokens.len() {
            return Err(Error::InvalidArgument(
                "prompt state rows and token list disagree in length".into(),
            ));
        }
        for (i, tok) in self.hard_tokens.iter().enumerate() {
            if let Some(t) = tok {
                let expected = model.token_embedding(*t)?;
                if self.embeddings.row(i) != expected {
                    return Err(Error::InvalidArgument(format!(
                        "hard position {i} does not hold the embedding of token {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// How soft positions are initialized.
#[derive(Debug, Clone, PartialEq)]
pub enum SoftInit {
    /// Per-dimension Gaussian matched to the embedding table's empirical
    /// mean and standard deviation.
    EmbeddingStats,
    /// Fixed Gaussian, identical across dimensions.
    Gaussian { mean: f64, std: f64 },
}

/// Tuning hyperparameters and the init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Optional fixed (non-tunable) token prepended ahead of the prefix.
    pub leading_token: Option<usize>,
    pub soft_init: SoftInit,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_epochs: 500,
            patience: 20,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
            leading_token: None,
            soft_init: SoftInit::EmbeddingStats,
        }
    }
}

impl TuneConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "patience and max_epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Why a tuning run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// No improvement over `patience` consecutive epochs.
    Patience,
    /// The epoch budget ran out.
    MaxEpochs,
    /// A full hard sweep changed no token.
    ConvergedHard,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::ConvergedHard => "converged_hard",
        }
    }
}

/// Outcome of one tuning run.
#[derive(Debug, Clone)]
pub struct TuneResult {
    /// Minimum KL over the trajectory, in bits.
    pub min_loss_bits: f64,
    /// Loss at epoch 0 (the initial state) and after each epoch, in bits.
    pub loss_trajectory: Vec<f64>,
    /// The model output at the epoch achieving `min_loss_bits`.
    pub best_output: ProbVector,
    pub best_output_entropy_bits: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    /// The prefix state at the best epoch.
    pub best_prompt: PromptState,
}
