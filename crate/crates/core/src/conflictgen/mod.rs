//! Dataset construction for the conflicting image/caption task: synthetic
//! class-patterned grids, CIFAR-10 binary ingestion, consistent and
//! inconsistent pair sampling, prompt encoding, and behavioral scoring.

mod cifar;
mod dataset_io;

pub use cifar::{parse_cifar10_binary, CIFAR_GRID_SIZE, CIFAR_PATCH_DIM};
pub use dataset_io::{load_dataset, save_dataset};

use crate::numerics::{Mat, Rng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot sample a conflicting label from a single-class set")]
    ImpossibleConflict,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("class set must have unique names and at least 2 classes")]
    BadClassSet,
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Which input stream a prompt asks the model to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Caption,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Caption,
            Modality::Caption => Modality::Image,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Caption => "caption",
        }
    }
}

/// Ordered set of class labels.
#[derive(Debug, Clone)]
pub struct ClassSet {
    names: Vec<String>,
}

impl ClassSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(DataError::BadClassSet);
        }
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                if names[i] == names[j] {
                    return Err(DataError::BadClassSet);
                }
            }
        }
        Ok(ClassSet { names })
    }

    /// `class_0 .. class_{n-1}` placeholder names.
    pub fn numbered(n: usize) -> Self {
        ClassSet {
            names: (0..n).map(|k| format!("class_{k}")).collect(),
        }
    }

    /// The ten CIFAR-10 class names in label order.
    pub fn cifar10() -> Self {
        ClassSet {
            names: [
                "airplane",
                "automobile",
                "bird",
                "cat",
                "deer",
                "dog",
                "frog",
                "horse",
                "ship",
                "truck",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, k: usize) -> &str {
        &self.names[k]
    }
}

/// An image-like input: a grid of patch vectors plus its true class.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    /// `grid_size^2` rows of `patch_dim` floats, row-major over patches.
    pub grid: Mat,
    pub class_id: usize,
}

/// Parameters of the synthetic "shapes grid" generator.
///
/// Class k writes amplitude 1.0 into one channel (k mod patch_dim) of a
/// patch drawn from a class-specific quadrant, over N(0, sigma) background
/// noise. Classes stay linearly separable from raw flattened grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub grid_size: usize,
    pub patch_dim: usize,
    pub noise_sigma: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 6,
            grid_size: 4,
            patch_dim: 8,
            noise_sigma: 0.05,
        }
    }
}

/// Draw `n` labeled grids with classes cycled round-robin (balanced).
pub fn generate_synthetic(spec: &SynthSpec, n: usize, rng: &mut Rng) -> Vec<LabeledImage> {
    assert!(spec.grid_size >= 2 && spec.grid_size % 2 == 0);
    assert!(spec.n_classes >= 2 && spec.n_classes <= 4 * spec.patch_dim);
    (0..n)
        .map(|i| synth_image(spec, i % spec.n_classes, rng))
        .collect()
}

fn synth_image(spec: &SynthSpec, class_id: usize, rng: &mut Rng) -> LabeledImage {
    let g = spec.grid_size;
    let n_patches = g * g;
    let mut grid = Mat::zeros(n_patches, spec.patch_dim);
    if spec.noise_sigma > 0.0 {
        for v in grid.data_mut() {
            *v = rng.normal() * spec.noise_sigma;
        }
    }
    let channel = class_id % spec.patch_dim;
    let quadrant = (class_id / spec.patch_dim) % 4;
    let half = g / 2;
    let (row0, col0) = (quadrant / 2 * half, quadrant % 2 * half);
    let row = row0 + rng.below(half);
    let col = col0 + rng.below(half);
    let patch = row * g + col;
    grid.set(patch, channel, grid.get(patch, channel) + 1.0);
    LabeledImage { grid, class_id }
}

/// An image paired with a (possibly false) caption class.
#[derive(Debug, Clone)]
pub struct ConflictPair {
    pub image: LabeledImage,
    pub caption_class: usize,
    pub consistent: bool,
    pub target: Modality,
}

impl ConflictPair {
    /// Class label the prompt asks for.
    pub fn target_label(&self) -> usize {
        match self.target {
            Modality::Image => self.image.class_id,
            Modality::Caption => self.caption_class,
        }
    }

    /// Class label of the misleading (non-target) stream.
    pub fn non_target_label(&self) -> usize {
        match self.target {
            Modality::Image => self.caption_class,
            Modality::Caption => self.image.class_id,
        }
    }
}

/// Pairing regimes; unimodal modes drop the other segment at encoding time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMode {
    Consistent,
    Inconsistent,
    UnimodalImage,
    UnimodalCaption,
}

/// Uniform draw from the classes other than `true_class`.
pub fn sample_false_label(true_class: usize, classes: &ClassSet, rng: &mut Rng) -> Result<usize> {
    let c = classes.len();
    if c < 2 {
        return Err(DataError::ImpossibleConflict);
    }
    let k = rng.below(c - 1);
    Ok(if k >= true_class { k + 1 } else { k })
}

/// Build pairs from a labeled image pool under the given mode.
pub fn make_pairs(
    images: &[LabeledImage],
    classes: &ClassSet,
    mode: PairMode,
    target: Modality,
    rng: &mut Rng,
) -> Result<Vec<ConflictPair>> {
    if images.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    images
        .iter()
        .map(|img| {
            let (caption_class, consistent, target) = match mode {
                PairMode::Consistent => (img.class_id, true, target),
                PairMode::Inconsistent => {
                    (sample_false_label(img.class_id, classes, rng)?, false, target)
                }
                PairMode::UnimodalImage => (img.class_id, true, Modality::Image),
                PairMode::UnimodalCaption => (img.class_id, true, Modality::Caption),
            };
            Ok(ConflictPair {
                image: img.clone(),
                caption_class,
                consistent,
                target,
            })
        })
        .collect()
}

/// Caption template texts, one token each at encoding time.
pub const CAPTION_TEMPLATES: [&str; 6] = [
    "This is an image of a {}.",
    "This is a photo of a {}.",
    "An image of a {}.",
    "A photo of a {}.",
    "This is a {}.",
    "A {}.",
];

/// Token-id layout for a class count. Answer classes occupy the final
/// `n_classes` ids so the model can address them from its config alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub n_classes: usize,
}

impl Vocab {
    pub const IMG: u32 = 0;
    pub const SEP: u32 = 1;
    pub const QUERY_IMAGE: u32 = 2;
    pub const QUERY_CAPTION: u32 = 3;
    pub const ANSWER: u32 = 4;
    const TEMPLATE_BASE: u32 = 5;

    pub fn new(n_classes: usize) -> Self {
        Vocab { n_classes }
    }

    pub fn n_templates(&self) -> usize {
        CAPTION_TEMPLATES.len()
    }

    pub fn template_token(&self, t: usize) -> u32 {
        assert!(t < self.n_templates());
        Self::TEMPLATE_BASE + t as u32
    }

    pub fn caption_token(&self, class_id: usize) -> u32 {
        assert!(class_id < self.n_classes);
        Self::TEMPLATE_BASE + self.n_templates() as u32 + class_id as u32
    }

    pub fn answer_token(&self, class_id: usize) -> u32 {
        assert!(class_id < self.n_classes);
        self.size() as u32 - self.n_classes as u32 + class_id as u32
    }

    pub fn query_token(&self, target: Modality) -> u32 {
        match target {
            Modality::Image => Self::QUERY_IMAGE,
            Modality::Caption => Self::QUERY_CAPTION,
        }
    }

    pub fn size(&self) -> usize {
        Self::TEMPLATE_BASE as usize + self.n_templates() + 2 * self.n_classes
    }
}

/// Which segments the encoded prompt carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Full,
    UnimodalImage,
    UnimodalCaption,
}

impl PromptKind {
    pub fn for_mode(mode: PairMode) -> PromptKind {
        match mode {
            PairMode::UnimodalImage => PromptKind::UnimodalImage,
            PairMode::UnimodalCaption => PromptKind::UnimodalCaption,
            _ => PromptKind::Full,
        }
    }
}

/// Token-level prompt: image tokens, separators, caption, query, options,
/// and the trailing answer-template token whose next-token prediction is
/// the model's answer.
#[derive(Debug, Clone)]
pub struct EncodedPrompt {
    pub tokens: Vec<u32>,
    /// Patch rows consumed by IMG positions in order; absent for
    /// caption-only prompts.
    pub patches: Option<Mat>,
    pub answer_position: usize,
    /// Class ids offered as options, in prompt order.
    pub options: Vec<usize>,
}

/// Encode a pair as a full two-segment prompt (see [`encode_prompt`]).
pub fn build_prompt(
    pair: &ConflictPair,
    vocab: &Vocab,
    template_index: usize,
    rng: &mut Rng,
) -> EncodedPrompt {
    encode_prompt(pair, PromptKind::Full, vocab, template_index, rng)
}

/// Encode a pair with explicit segment selection.
///
/// Options always include the image and caption labels plus distinct
/// distractors up to `min(5, |C|)` total, in seeded shuffled order.
pub fn encode_prompt(
    pair: &ConflictPair,
    kind: PromptKind,
    vocab: &Vocab,
    template_index: usize,
    rng: &mut Rng,
) -> EncodedPrompt {
    let options = sample_options(pair, vocab.n_classes, rng);
    let mut tokens = Vec::new();
    let mut patches = None;
    if kind != PromptKind::UnimodalCaption {
        for _ in 0..pair.image.grid.rows() {
            tokens.push(Vocab::IMG);
        }
        patches = Some(pair.image.grid.clone());
    }
    tokens.push(Vocab::SEP);
    if kind != PromptKind::UnimodalImage {
        tokens.push(vocab.template_token(template_index));
        tokens.push(vocab.caption_token(pair.caption_class));
    }
    tokens.push(Vocab::SEP);
    tokens.push(vocab.query_token(pair.target));
    for &o in &options {
        tokens.push(vocab.caption_token(o));
    }
    tokens.push(Vocab::ANSWER);
    let answer_position = tokens.len() - 1;
    EncodedPrompt {
        tokens,
        patches,
        answer_position,
        options,
    }
}

fn sample_options(pair: &ConflictPair, n_classes: usize, rng: &mut Rng) -> Vec<usize> {
    let n_options = n_classes.min(5);
    let mut options = vec![pair.image.class_id];
    if pair.caption_class != pair.image.class_id {
        options.push(pair.caption_class);
    }
    let pool: Vec<usize> = (0..n_classes).filter(|c| !options.contains(c)).collect();
    let needed = n_options - options.len();
    for idx in rng.sample_distinct(pool.len(), needed) {
        options.push(pool[idx]);
    }
    rng.shuffle(&mut options);
    options
}

/// Behavioral category of a single prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionOutcome {
    Correct,
    Misled,
    InOptionIncorrect,
    OutOfOption,
}

/// Categorize a predicted class against the pair's two labels and the
/// offered options. `None` means no answer-class token won.
pub fn classify_prediction(
    predicted: Option<usize>,
    pair: &ConflictPair,
    options: &[usize],
) -> PredictionOutcome {
    let Some(p) = predicted else {
        return PredictionOutcome::OutOfOption;
    };
    if p == pair.target_label() {
        PredictionOutcome::Correct
    } else if p == pair.non_target_label() {
        PredictionOutcome::Misled
    } else if options.contains(&p) {
        PredictionOutcome::InOptionIncorrect
    } else {
        PredictionOutcome::OutOfOption
    }
}

/// Counts of behavioral categories over an evaluation set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehavioralBreakdown {
    pub correct: usize,
    pub misled: usize,
    pub in_option_incorrect: usize,
    pub out_of_option: usize,
}

impl BehavioralBreakdown {
    pub fn record(&mut self, outcome: PredictionOutcome) {
        match outcome {
            PredictionOutcome::Correct => self.correct += 1,
            PredictionOutcome::Misled => self.misled += 1,
            PredictionOutcome::InOptionIncorrect => self.in_option_incorrect += 1,
            PredictionOutcome::OutOfOption => self.out_of_option += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.correct + self.misled + self.in_option_incorrect + self.out_of_option
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.correct as f64 / self.total() as f64
        }
    }
}

/// Answer token sequences per class, for first-token collision filtering.
/// The default single-token scheme is structurally collision-free; multi
/// token schemes (e.g. word-piece style answers) can collide.
#[derive(Debug, Clone)]
pub struct TokenizerMap {
    pub answer_sequences: Vec<Vec<u32>>,
}

impl TokenizerMap {
    pub fn single_token(vocab: &Vocab) -> Self {
        TokenizerMap {
            answer_sequences: (0..vocab.n_classes)
                .map(|k| vec![vocab.answer_token(k)])
                .collect(),
        }
    }

    pub fn first_token(&self, class_id: usize) -> u32 {
        self.answer_sequences[class_id][0]
    }
}

/// Drop pairs whose image-label and caption-label answers begin with the
/// same token, which would make next-token evaluation ambiguous.
pub fn filter_first_token_collisions(
    pairs: Vec<ConflictPair>,
    map: &TokenizerMap,
) -> Vec<ConflictPair> {
    pairs
        .into_iter()
        .filter(|p| map.first_token(p.image.class_id) != map.first_token(p.caption_class))
        .collect()
}

#[cfg(test)]
mod tests;
