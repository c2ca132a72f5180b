//! TinyVLM: a small trainable two-stream transformer. Image patches enter
//! through a linear patch projector, caption/structural tokens through an
//! embedding table; pre-norm blocks with causal attention and GELU MLPs
//! produce one answer-class token prediction at the trailing answer
//! position.
//!
//! Per-head pre-projection outputs can be scaled by a constant at a chosen
//! position (the intervention hook), and residual-stream vectors at the
//! answer position can be captured per layer without perturbing the
//! forward pass.

mod backward;
mod checkpoint;
mod forward;
mod planted;
mod train;

pub use backward::batch_loss_and_grads;
pub use planted::{planted_caption_pathway_model, PLANTED_CAPTION_HEAD, PLANTED_IMAGE_HEAD};
pub use train::{train, TrainReport, TrainSchedule};

use crate::conflictgen::EncodedPrompt;
use crate::numerics::{Mat, Rng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{context}: index {index} out of range (bound {bound})")]
    Index {
        context: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("prompt of length {len} exceeds max_seq {max_seq}")]
    PromptTooLong { len: usize, max_seq: usize },
    #[error("prompt does not end at the answer position")]
    NotAtAnswer,
    #[error("prompt has {got} image tokens but carries {patches} patch rows")]
    PatchMismatch { got: usize, patches: usize },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_image_tokens: usize,
    pub max_seq: usize,
    pub n_classes: usize,
    pub patch_dim: usize,
}

impl ModelConfig {
    /// Defaults sized for desk-scale training runs.
    pub fn desk_default(n_classes: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 8,
            d_model: 64,
            vocab_size,
            n_image_tokens: 16,
            max_seq: 32,
            n_classes,
            patch_dim: 8,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Vocab id of the answer token for `class_id`; answer classes occupy
    /// the final `n_classes` ids.
    pub fn answer_token(&self, class_id: usize) -> u32 {
        debug_assert!(class_id < self.n_classes);
        (self.vocab_size - self.n_classes + class_id) as u32
    }

    /// Class id of a vocab token if it is an answer token.
    pub fn class_of_token(&self, token: u32) -> Option<usize> {
        let base = self.vocab_size - self.n_classes;
        let t = token as usize;
        (t >= base && t < self.vocab_size).then(|| t - base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(ModelError::Config("zero-sized dimension".into()));
        }
        if self.vocab_size < self.n_classes + 5 {
            return Err(ModelError::Config(format!(
                "vocab {} too small for {} answer classes plus structure",
                self.vocab_size, self.n_classes
            )));
        }
        Ok(())
    }
}

/// One transformer block's parameters (pre-norm, GELU MLP, 4x expansion).
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gamma: Mat,
    pub ln1_beta: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2_gamma: Mat,
    pub ln2_beta: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Full parameter set, with a stable tensor enumeration used by the
/// optimizer, checkpoints, and the gradient checker.
#[derive(Debug, Clone)]
pub struct Params {
    pub patch_proj: Mat,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<BlockParams>,
    pub unembed: Mat,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff());
        let block = || BlockParams {
            ln1_gamma: Mat::zeros(1, d),
            ln1_beta: Mat::zeros(1, d),
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln2_gamma: Mat::zeros(1, d),
            ln2_beta: Mat::zeros(1, d),
            w1: Mat::zeros(d, ff),
            b1: Mat::zeros(1, ff),
            w2: Mat::zeros(ff, d),
            b2: Mat::zeros(1, d),
        };
        Params {
            patch_proj: Mat::zeros(cfg.patch_dim, d),
            tok_emb: Mat::zeros(cfg.vocab_size, d),
            pos_emb: Mat::zeros(cfg.max_seq, d),
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            unembed: Mat::zeros(d, cfg.vocab_size),
        }
    }

    fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (d, ff) = (cfg.d_model, cfg.d_ff());
        let std = 0.05f32;
        // Residual-writing projections start smaller, scaled by depth.
        let resid_std = std / (2.0 * cfg.n_layers as f32).sqrt();
        let mut params = Params::zeros(cfg);
        params.patch_proj = Mat::randn(cfg.patch_dim, d, std, rng);
        params.tok_emb = Mat::randn(cfg.vocab_size, d, std, rng);
        params.pos_emb = Mat::randn(cfg.max_seq, d, 0.01, rng);
        for block in &mut params.blocks {
            block.ln1_gamma = Mat::from_vec(1, d, vec![1.0; d]).expect("shape");
            block.ln2_gamma = Mat::from_vec(1, d, vec![1.0; d]).expect("shape");
            block.wq = Mat::randn(d, d, std, rng);
            block.wk = Mat::randn(d, d, std, rng);
            block.wv = Mat::randn(d, d, std, rng);
            block.wo = Mat::randn(d, d, resid_std, rng);
            block.w1 = Mat::randn(d, ff, std, rng);
            block.w2 = Mat::randn(ff, d, resid_std, rng);
        }
        params.unembed = Mat::randn(d, cfg.vocab_size, std, rng);
        params
    }

    /// Stable (name, tensor) enumeration.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("patch_proj".into(), &self.patch_proj),
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, mat) in [
                ("ln1_gamma", &b.ln1_gamma),
                ("ln1_beta", &b.ln1_beta),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_gamma", &b.ln2_gamma),
                ("ln2_beta", &b.ln2_beta),
                ("w1", &b.w1),
                ("b1", &b.b1),
                ("w2", &b.w2),
                ("b2", &b.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), mat));
            }
        }
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("patch_proj".into(), &mut self.patch_proj),
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, mat) in [
                ("ln1_gamma", &mut b.ln1_gamma),
                ("ln1_beta", &mut b.ln1_beta),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("ln2_gamma", &mut b.ln2_gamma),
                ("ln2_beta", &mut b.ln2_beta),
                ("w1", &mut b.w1),
                ("b1", &mut b.b1),
                ("w2", &mut b.w2),
                ("b2", &mut b.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), mat));
            }
        }
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    /// Elementwise accumulate, used when reducing per-example gradients.
    pub fn accumulate(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b).expect("gradient shapes match");
        }
    }

    pub fn scale(&mut self, s: f32) {
        for (_, m) in self.tensors_mut() {
            m.scale(s);
        }
    }
}

/// Scale one head's pre-projection output vector by `alpha` at `position`
/// before the output projection. `alpha = 1` is a no-op.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeadInterventionSpec {
    pub layer: usize,
    pub head: usize,
    pub alpha: f32,
    pub position: usize,
}

/// What to record during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureFlags {
    /// Residual-stream vector at the answer position after embedding and
    /// after each block.
    pub residuals: bool,
    /// Per-head pre-projection outputs at the answer position.
    pub head_outputs: bool,
    /// Logits at every position, not just the answer position.
    pub all_logits: bool,
}

impl CaptureFlags {
    pub fn residuals_only() -> Self {
        CaptureFlags {
            residuals: true,
            ..Default::default()
        }
    }
}

/// Captured activations; copying these never changes the forward result.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `n_layers + 1` vectors of `d_model`: post-embedding, then after
    /// each block, all at the answer position.
    pub residuals: Vec<Vec<f32>>,
    /// `[layer][head]` pre-projection output at the answer position, as
    /// actually computed (including any intervention scaling).
    pub head_outputs: Option<Vec<Vec<Vec<f32>>>>,
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits over the vocabulary at the answer position.
    pub answer_logits: Vec<f32>,
    pub trace: Option<ForwardTrace>,
    /// Present only when `CaptureFlags::all_logits` is set.
    pub all_logits: Option<Mat>,
}

/// Result of closed-vocabulary answer prediction.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Argmax over answer-class tokens, ties broken by lowest class id.
    pub class_id: usize,
    /// Logits restricted to the answer-class tokens, in class order.
    pub answer_logits: Vec<f32>,
    /// Whether the unrestricted argmax over the full vocabulary landed on
    /// an answer-class token (used by strict out-of-option scoring).
    pub global_argmax_is_answer: bool,
}

/// The model: immutable once trained; forward passes are reentrant.
#[derive(Debug, Clone)]
pub struct TinyVlm {
    pub cfg: ModelConfig,
    pub params: Params,
}

impl TinyVlm {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let params = Params::init(&cfg, &mut rng.substream("init"));
        Ok(TinyVlm { cfg, params })
    }

    pub fn zeroed(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = Params::zeros(&cfg);
        Ok(TinyVlm { cfg, params })
    }

    /// Closed-vocabulary prediction at the answer position.
    pub fn predict_answer(
        &self,
        prompt: &EncodedPrompt,
        interventions: &[HeadInterventionSpec],
    ) -> Result<Prediction> {
        if prompt.answer_position != prompt.tokens.len() - 1 {
            return Err(ModelError::NotAtAnswer);
        }
        let out = self.forward(prompt, interventions, CaptureFlags::default())?;
        Ok(self.prediction_from_logits(&out.answer_logits))
    }

    pub fn prediction_from_logits(&self, logits: &[f32]) -> Prediction {
        let base = self.cfg.vocab_size - self.cfg.n_classes;
        let answer_logits: Vec<f32> = logits[base..].to_vec();
        let mut class_id = 0;
        for (k, &v) in answer_logits.iter().enumerate() {
            if v > answer_logits[class_id] {
                class_id = k;
            }
        }
        let mut global = 0;
        for (t, &v) in logits.iter().enumerate() {
            if v > logits[global] {
                global = t;
            }
        }
        Prediction {
            class_id,
            answer_logits,
            global_argmax_is_answer: global >= base,
        }
    }
}

pub(crate) fn gelu(x: f32) -> f32 {
    const C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const C2: f64 = 0.044715;
    let x = x as f64;
    (0.5 * x * (1.0 + (C1 * (x + C2 * x * x * x)).tanh())) as f32
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    const C1: f64 = 0.797_884_560_802_865_4;
    const C2: f64 = 0.044715;
    let x = x as f64;
    let u = C1 * (x + C2 * x * x * x);
    let t = u.tanh();
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C1 * (1.0 + 3.0 * C2 * x * x)) as f32
}
