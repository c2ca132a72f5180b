//! Stage implementations and the dependency DAG. Each stage reads its
//! upstream artifacts from the output directory, writes its own
//! atomically, and records digests in the manifest.

use crate::cache::{read_cache, write_cache};
use crate::config::{DataSource, ExperimentConfig};
use crate::manifest::RunManifest;
use crate::{report, HarnessError};
use conflictlens_core::conflictgen::{
    classify_prediction, encode_prompt, generate_synthetic, load_dataset, make_pairs,
    parse_cifar10_binary, save_dataset, BehavioralBreakdown, ClassSet, ConflictPair,
    EncodedPrompt, LabeledImage, Modality, PairMode, PromptKind, Vocab, CIFAR_GRID_SIZE,
    CIFAR_PATCH_DIM,
};
use conflictlens_core::intervene::{
    classify_head, post_intervention_salience, rank_heads, sweep_all_heads, transfer_eval,
    AlphaGrid, EvalSet, GapShiftCell, HeadClassification, HeadCurve, HeadRanking, HeadType,
    TransferCell,
};
use conflictlens_core::model::{train, ModelConfig, TinyVlm, TrainSchedule};
use conflictlens_core::numerics::Rng;
use conflictlens_core::probelab::{
    consistency_probe_suite, make_class_folds, unimodal_probe_suite, ClassFolds, ConsistencyCell,
    ProbeConfig, RowMeta, TraceSet, UnimodalProbeCell,
};
use conflictlens_core::saliencelab::{salience_profile_by_seed, LayerSalience, SeedSalience};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Train,
    Behave,
    Probe,
    Cluster,
    Sweep,
    Classify,
    Transfer,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Gen,
        Stage::Train,
        Stage::Behave,
        Stage::Probe,
        Stage::Cluster,
        Stage::Sweep,
        Stage::Classify,
        Stage::Transfer,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Behave => "behave",
            Stage::Probe => "probe",
            Stage::Cluster => "cluster",
            Stage::Sweep => "sweep",
            Stage::Classify => "classify",
            Stage::Transfer => "transfer",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Gen => &[],
            Stage::Train => &[Stage::Gen],
            Stage::Behave => &[Stage::Gen, Stage::Train],
            Stage::Probe => &[Stage::Behave],
            Stage::Cluster => &[Stage::Behave],
            Stage::Sweep => &[Stage::Gen, Stage::Train],
            Stage::Classify => &[Stage::Sweep],
            Stage::Transfer => &[Stage::Gen, Stage::Train, Stage::Classify],
            Stage::Report => &[],
        }
    }
}

pub(crate) struct Ctx {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    fn rng(&self) -> Rng {
        Rng::new(self.config.seed)
    }

    /// Data geometry: (n_classes, grid_size, patch_dim).
    fn data_dims(&self) -> (usize, usize, usize) {
        match &self.config.data.source {
            DataSource::Synthetic(spec) => (spec.n_classes, spec.grid_size, spec.patch_dim),
            DataSource::Cifar10 { .. } => (10, CIFAR_GRID_SIZE, CIFAR_PATCH_DIM),
        }
    }

    fn vocab(&self) -> Vocab {
        Vocab::new(self.data_dims().0)
    }

    fn classes(&self) -> ClassSet {
        match &self.config.data.source {
            DataSource::Synthetic(spec) => ClassSet::numbered(spec.n_classes),
            DataSource::Cifar10 { .. } => ClassSet::cifar10(),
        }
    }

    fn model_config(&self) -> ModelConfig {
        let (n_classes, grid, patch_dim) = self.data_dims();
        ModelConfig {
            n_layers: self.config.model.n_layers,
            n_heads: self.config.model.n_heads,
            d_model: self.config.model.d_model,
            vocab_size: self.vocab().size(),
            n_image_tokens: grid * grid,
            max_seq: self.config.model.max_seq,
            n_classes,
            patch_dim,
        }
    }

    fn load_pool(&self, name: &str) -> Result<Vec<LabeledImage>, HarnessError> {
        let path = self.path(&format!("gen/{name}.cgen"));
        let mut f = std::fs::File::open(&path)
            .map_err(|e| HarnessError::Io(format!("open {}: {e}", path.display())))?;
        let (_, _, _, images) = load_dataset(&mut std::io::BufReader::new(&mut f))?;
        Ok(images)
    }

    fn load_model(&self) -> Result<TinyVlm, HarnessError> {
        Ok(TinyVlm::load_from_path(self.path("train/model.tvlm"))?)
    }
}

/// Run one stage against a config, enforcing the stage DAG and recording
/// the manifest entry.
pub fn run_stage(stage: Stage, config: &ExperimentConfig) -> Result<(), HarnessError> {
    if config.threads > 0 {
        // Best effort: the global pool can only be sized once per process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    let ctx = Ctx {
        config: config.clone(),
        out_dir: config.out_dir.clone(),
    };
    std::fs::create_dir_all(&ctx.out_dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    let manifest_path = ctx.path("manifest.json");
    let mut manifest = RunManifest::load_or_new(&manifest_path, &config.hash())?;

    for dep in stage.deps() {
        if !manifest.has_stage(dep.name()) {
            return Err(HarnessError::Dependency {
                stage: stage.name().to_string(),
                needs: dep.name().to_string(),
            });
        }
    }

    let started = Instant::now();
    let (inputs, outputs) = match stage {
        Stage::Gen => stage_gen(&ctx)?,
        Stage::Train => stage_train(&ctx)?,
        Stage::Behave => stage_behave(&ctx)?,
        Stage::Probe => stage_probe(&ctx)?,
        Stage::Cluster => stage_cluster(&ctx)?,
        Stage::Sweep => stage_sweep(&ctx)?,
        Stage::Classify => stage_classify(&ctx)?,
        Stage::Transfer => stage_transfer(&ctx)?,
        Stage::Report => report::stage_report(&ctx.out_dir)?,
    };
    let wall_ms = started.elapsed().as_millis();
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let output_refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    manifest.record_stage(stage.name(), &input_refs, &output_refs, wall_ms)?;
    manifest.save(&manifest_path)
}

/// Run every stage in dependency order.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<(), HarnessError> {
    for stage in Stage::ALL {
        run_stage(stage, config)?;
    }
    Ok(())
}

type StageFiles = (Vec<PathBuf>, Vec<PathBuf>);

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn stage_gen(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let (n_classes, grid, patch_dim) = ctx.data_dims();
    let pools: Vec<(&str, usize, &str)> = vec![
        ("train", ctx.config.data.n_train_images, "data_train"),
        ("eval", ctx.config.data.n_eval_images, "data_eval"),
        ("transfer_a", ctx.config.data.n_transfer_images, "data_transfer_a"),
        ("transfer_b", ctx.config.data.n_transfer_images, "data_transfer_b"),
    ];
    let mut outputs = Vec::new();
    let mut inputs = Vec::new();
    for (name, n, stream) in pools {
        let images = match &ctx.config.data.source {
            DataSource::Synthetic(spec) => {
                let mut rng = ctx.rng().substream(stream);
                generate_synthetic(spec, n, &mut rng)
            }
            DataSource::Cifar10 { path } => {
                let bytes = std::fs::read(path)
                    .map_err(|e| HarnessError::Io(format!("read {}: {e}", path.display())))?;
                if !inputs.contains(path) {
                    inputs.push(path.clone());
                }
                let all = parse_cifar10_binary(&bytes)?;
                // Deterministic disjoint slices per pool.
                let offset = match name {
                    "train" => 0,
                    "eval" => ctx.config.data.n_train_images,
                    "transfer_a" => {
                        ctx.config.data.n_train_images + ctx.config.data.n_eval_images
                    }
                    _ => {
                        ctx.config.data.n_train_images
                            + ctx.config.data.n_eval_images
                            + ctx.config.data.n_transfer_images
                    }
                };
                if offset + n > all.len() {
                    return Err(HarnessError::Config(format!(
                        "CIFAR batch has {} records, pools need {}",
                        all.len(),
                        offset + n
                    )));
                }
                all[offset..offset + n].to_vec()
            }
        };
        let path = ctx.path(&format!("gen/{name}.cgen"));
        let mut buf = Vec::new();
        save_dataset(&mut buf, n_classes, grid, patch_dim, &images)?;
        crate::write_atomic(&path, &buf)?;
        outputs.push(path);
    }
    Ok((inputs, outputs))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_train_accuracy: f64,
    pub steps: usize,
    pub final_loss: f32,
    pub n_examples: usize,
}

/// Curriculum: per training image one unimodal-image prompt, one
/// unimodal-caption prompt, one consistent pair (alternating target), and
/// `conflicts_per_image` conflicting pairs (alternating target) whose
/// supervision label is the caption class with probability rho and the
/// image class otherwise, independent of the requested target.
pub fn build_curriculum(
    images: &[LabeledImage],
    classes: &ClassSet,
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    rho: f64,
    conflicts_per_image: usize,
    template_index: usize,
    rng: &mut Rng,
) -> Result<Vec<(EncodedPrompt, u32)>, HarnessError> {
    let mut dataset = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let class = img.class_id;
        let base = [img.clone()];

        let uni_img = make_pairs(&base, classes, PairMode::UnimodalImage, Modality::Image, rng)?;
        dataset.push((
            encode_prompt(&uni_img[0], PromptKind::UnimodalImage, vocab, template_index, rng),
            model_cfg.answer_token(class),
        ));

        let uni_cap =
            make_pairs(&base, classes, PairMode::UnimodalCaption, Modality::Caption, rng)?;
        dataset.push((
            encode_prompt(&uni_cap[0], PromptKind::UnimodalCaption, vocab, template_index, rng),
            model_cfg.answer_token(class),
        ));

        let target = if i % 2 == 0 { Modality::Image } else { Modality::Caption };
        let consistent = make_pairs(&base, classes, PairMode::Consistent, target, rng)?;
        dataset.push((
            encode_prompt(&consistent[0], PromptKind::Full, vocab, template_index, rng),
            model_cfg.answer_token(class),
        ));

        for j in 0..conflicts_per_image {
            let target = if j % 2 == 0 { Modality::Image } else { Modality::Caption };
            let conflict = make_pairs(&base, classes, PairMode::Inconsistent, target, rng)?;
            let pair = &conflict[0];
            let supervised = if (rng.next_f64()) < rho {
                pair.caption_class
            } else {
                pair.image.class_id
            };
            dataset.push((
                encode_prompt(pair, PromptKind::Full, vocab, template_index, rng),
                model_cfg.answer_token(supervised),
            ));
        }
    }
    Ok(dataset)
}

fn stage_train(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let images = ctx.load_pool("train")?;
    let classes = ctx.classes();
    let vocab = ctx.vocab();
    let model_cfg = ctx.model_config();
    let mut rng = ctx.rng().substream("curriculum");
    let dataset = build_curriculum(
        &images,
        &classes,
        &vocab,
        &model_cfg,
        ctx.config.train.rho,
        ctx.config.train.conflicts_per_image,
        ctx.config.template_index,
        &mut rng,
    )?;

    let mut model = TinyVlm::new(model_cfg, &mut ctx.rng())?;
    let schedule = TrainSchedule {
        epochs: ctx.config.train.epochs,
        batch_size: ctx.config.train.batch_size,
        lr: ctx.config.train.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: ctx.rng().substream("train").seed(),
    };
    let report = train(&mut model, &dataset, &schedule)?;

    let model_path = ctx.path("train/model.tvlm");
    let mut buf = Vec::new();
    model.save_checkpoint(&mut buf)?;
    crate::write_atomic(&model_path, &buf)?;

    let curve_path = ctx.path("train/loss_curve.csv");
    let mut csv = String::from("step,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    crate::write_atomic(&curve_path, csv.as_bytes())?;

    let summary = TrainSummary {
        final_train_accuracy: report.final_train_accuracy,
        steps: report.loss_curve.len(),
        final_loss: report.loss_curve.last().copied().unwrap_or(f32::NAN),
        n_examples: dataset.len(),
    };
    let summary_path = ctx.path("train/train_report.json");
    crate::write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    Ok((
        vec![ctx.path("gen/train.cgen")],
        vec![model_path, curve_path, summary_path],
    ))
}

// ---------------------------------------------------------------------------
// behave
// ---------------------------------------------------------------------------

/// Evaluation conditions, in fixed id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    UnimodalImage,
    UnimodalCaption,
    ConsistentImage,
    ConsistentCaption,
    InconsistentImage,
    InconsistentCaption,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::UnimodalImage,
        Condition::UnimodalCaption,
        Condition::ConsistentImage,
        Condition::ConsistentCaption,
        Condition::InconsistentImage,
        Condition::InconsistentCaption,
    ];

    pub fn id(self) -> u32 {
        Condition::ALL.iter().position(|&c| c == self).unwrap() as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::UnimodalImage => "unimodal_image",
            Condition::UnimodalCaption => "unimodal_caption",
            Condition::ConsistentImage => "consistent_image",
            Condition::ConsistentCaption => "consistent_caption",
            Condition::InconsistentImage => "inconsistent_image",
            Condition::InconsistentCaption => "inconsistent_caption",
        }
    }

    pub fn target(self) -> Modality {
        match self {
            Condition::UnimodalImage | Condition::ConsistentImage | Condition::InconsistentImage => {
                Modality::Image
            }
            _ => Modality::Caption,
        }
    }

    fn mode(self) -> PairMode {
        match self {
            Condition::UnimodalImage => PairMode::UnimodalImage,
            Condition::UnimodalCaption => PairMode::UnimodalCaption,
            Condition::ConsistentImage | Condition::ConsistentCaption => PairMode::Consistent,
            _ => PairMode::Inconsistent,
        }
    }

    fn prompt_kind(self) -> PromptKind {
        PromptKind::for_mode(self.mode())
    }

    /// Paired conditions whose activations feed probing and clustering.
    pub fn cached(self) -> bool {
        !matches!(self, Condition::UnimodalImage | Condition::UnimodalCaption)
    }
}

/// Deterministically rebuild a condition's evaluation items; behave,
/// probe, and cluster all derive the same pairs from the config seed.
pub(crate) fn condition_items(
    ctx: &Ctx,
    images: &[LabeledImage],
    cond: Condition,
) -> Result<Vec<(EncodedPrompt, ConflictPair)>, HarnessError> {
    let classes = ctx.classes();
    let vocab = ctx.vocab();
    let n = ctx.config.eval.n_pairs_per_condition.min(images.len());
    let mut rng = ctx.rng().substream(&format!("pairs_{}", cond.name()));
    let pairs = make_pairs(&images[..n], &classes, cond.mode(), cond.target(), &mut rng)?;
    Ok(pairs
        .into_iter()
        .map(|p| {
            let prompt = encode_prompt(&p, cond.prompt_kind(), &vocab, ctx.config.template_index, &mut rng);
            (prompt, p)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub target: Modality,
    pub n: usize,
    pub accuracy: f64,
    pub breakdown: BehavioralBreakdown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub conditions: Vec<ConditionResult>,
}

impl BehaviorReport {
    pub fn accuracy_of(&self, cond: Condition) -> Option<f64> {
        self.conditions
            .iter()
            .find(|c| c.condition == cond)
            .map(|c| c.accuracy)
    }
}

fn stage_behave(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let images = ctx.load_pool("eval")?;
    let model = ctx.load_model()?;
    let strict = ctx.config.eval.strict_out_of_option;

    let mut results = Vec::new();
    let mut outputs = Vec::new();
    for cond in Condition::ALL {
        let items = condition_items(ctx, &images, cond)?;
        let mut breakdown = BehavioralBreakdown::default();
        for (prompt, pair) in &items {
            let pred = model.predict_answer(prompt, &[])?;
            let predicted = if strict && !pred.global_argmax_is_answer {
                None
            } else {
                Some(pred.class_id)
            };
            breakdown.record(classify_prediction(predicted, pair, &prompt.options));
        }
        results.push(ConditionResult {
            condition: cond,
            target: cond.target(),
            n: items.len(),
            accuracy: breakdown.accuracy(),
            breakdown,
        });
        if cond.cached() {
            let traces = TraceSet::capture(&model, &items, None)?;
            let cache_path = ctx.path(&format!("behave/cache_{}.actv", cond.name()));
            write_cache(&cache_path, cond.id(), &traces)?;
            outputs.push(cache_path);
        }
    }

    let report = BehaviorReport {
        conditions: results,
    };
    let json_path = ctx.path("behave/behavior.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    let mut csv = String::from(
        "condition,target,n,correct,misled,in_option_incorrect,out_of_option,accuracy\n",
    );
    for c in &report.conditions {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.6}\n",
            c.condition.name(),
            c.target.name(),
            c.n,
            c.breakdown.correct,
            c.breakdown.misled,
            c.breakdown.in_option_incorrect,
            c.breakdown.out_of_option,
            c.accuracy
        ));
    }
    let csv_path = ctx.path("behave/behavior.csv");
    crate::write_atomic(&csv_path, csv.as_bytes())?;
    outputs.push(json_path);
    outputs.push(csv_path);
    Ok((
        vec![ctx.path("gen/eval.cgen"), ctx.path("train/model.tvlm")],
        outputs,
    ))
}

/// Load a cached condition back into a TraceSet, re-deriving row metadata
/// from the deterministic pair stream.
pub(crate) fn load_condition_traces(
    ctx: &Ctx,
    images: &[LabeledImage],
    cond: Condition,
) -> Result<TraceSet, HarnessError> {
    let (header, per_layer) = read_cache(&ctx.path(&format!("behave/cache_{}.actv", cond.name())))?;
    let items = condition_items(ctx, images, cond)?;
    if header.n_rows != items.len() {
        return Err(HarnessError::Numerical(format!(
            "cache for {} holds {} rows, config derives {}",
            cond.name(),
            header.n_rows,
            items.len()
        )));
    }
    let meta: Vec<RowMeta> = items.iter().map(|(_, p)| RowMeta::of(p)).collect();
    Ok(TraceSet { per_layer, meta })
}

fn merge_traces(sets: Vec<TraceSet>) -> TraceSet {
    let n_layers = sets[0].n_layers();
    let d = sets[0].per_layer[0].cols();
    let total: usize = sets.iter().map(TraceSet::n_rows).sum();
    let mut per_layer = vec![conflictlens_core::numerics::Mat::zeros(total, d); n_layers];
    let mut meta = Vec::with_capacity(total);
    let mut row = 0;
    for set in sets {
        for i in 0..set.n_rows() {
            for layer in 0..n_layers {
                per_layer[layer]
                    .row_mut(row)
                    .copy_from_slice(set.per_layer[layer].row(i));
            }
            meta.push(set.meta[i]);
            row += 1;
        }
    }
    TraceSet { per_layer, meta }
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub unimodal: Vec<serde_json::Value>,
    pub consistency: Vec<serde_json::Value>,
    pub folds: ClassFolds,
}

fn stage_probe(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let images = ctx.load_pool("eval")?;
    let (n_classes, _, _) = ctx.data_dims();
    let probe_cfg = ProbeConfig {
        epochs: ctx.config.probe.epochs,
        batch_size: ctx.config.probe.batch_size,
        lr: ctx.config.probe.lr,
        val_fraction: 0.2,
    };

    let inconsistent = merge_traces(vec![
        load_condition_traces(ctx, &images, Condition::InconsistentImage)?,
        load_condition_traces(ctx, &images, Condition::InconsistentCaption)?,
    ]);
    let unimodal_cells: Vec<UnimodalProbeCell> = unimodal_probe_suite(
        &inconsistent,
        n_classes,
        &probe_cfg,
        &ctx.rng().substream("unimodal_probes"),
    )?;

    let mixed = merge_traces(vec![
        load_condition_traces(ctx, &images, Condition::ConsistentImage)?,
        load_condition_traces(ctx, &images, Condition::ConsistentCaption)?,
        load_condition_traces(ctx, &images, Condition::InconsistentImage)?,
        load_condition_traces(ctx, &images, Condition::InconsistentCaption)?,
    ]);
    let mut fold_rng = ctx.rng().substream("folds");
    let folds = make_class_folds(n_classes, &mut fold_rng)?;
    let consistency_cells: Vec<ConsistencyCell> = consistency_probe_suite(
        &mixed,
        &folds,
        &probe_cfg,
        &ctx.rng().substream("consistency_probes"),
    )?;

    let mut csv = String::from("layer,probe_kind,target_modality,regime,accuracy,n\n");
    for cell in &unimodal_cells {
        csv.push_str(&format!(
            "{},{},{},plain,{:.6},{}\n",
            cell.layer,
            cell.probe.name(),
            cell.target.name(),
            cell.accuracy,
            cell.n_test
        ));
    }
    for cell in &consistency_cells {
        csv.push_str(&format!(
            "{},consistency,{},{},{:.6},{}\n",
            cell.layer,
            cell.target.name(),
            cell.regime.name(),
            cell.accuracy,
            cell.n
        ));
    }
    let csv_path = ctx.path("probe/probe_report.csv");
    crate::write_atomic(&csv_path, csv.as_bytes())?;

    let report = ProbeReport {
        unimodal: unimodal_cells
            .iter()
            .map(|c| serde_json::to_value(c).unwrap())
            .collect(),
        consistency: consistency_cells
            .iter()
            .map(|c| serde_json::to_value(c).unwrap())
            .collect(),
        folds,
    };
    let json_path = ctx.path("probe/probe.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;

    let inputs = Condition::ALL
        .iter()
        .filter(|c| c.cached())
        .map(|c| ctx.path(&format!("behave/cache_{}.actv", c.name())))
        .collect();
    Ok((inputs, vec![csv_path, json_path]))
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Averaged per-layer profiles per inconsistent condition.
    pub profiles: Vec<(String, Vec<serde_json::Value>)>,
    /// (condition, last-layer gap, behavioral accuracy).
    pub gap_points: Vec<(String, f64, f64)>,
    /// Pearson (r, p) when at least 3 conditions are available.
    pub correlation: Option<(f64, f64)>,
}

fn stage_cluster(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let images = ctx.load_pool("eval")?;
    let (n_classes, _, _) = ctx.data_dims();
    let behavior: BehaviorReport = read_json(&ctx.path("behave/behavior.json"))?;

    let mut csv = String::from("layer,modality,h,c,v,seed,condition\n");
    let mut profiles = Vec::new();
    let mut gap_points = Vec::new();
    for cond in [Condition::InconsistentImage, Condition::InconsistentCaption] {
        let traces = load_condition_traces(ctx, &images, cond)?;
        let detail: Vec<SeedSalience> = salience_profile_by_seed(
            &traces,
            n_classes,
            &ctx.rng().substream(&format!("cluster_{}", cond.name())),
            ctx.config.cluster.n_seeds,
            ctx.config.cluster.n_init,
        )?;
        for cell in &detail {
            for (modality, hcv) in [("image", &cell.image), ("caption", &cell.caption)] {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{},{}\n",
                    cell.layer,
                    modality,
                    hcv.h,
                    hcv.c,
                    hcv.v,
                    cell.seed,
                    cond.name()
                ));
            }
        }
        // Average the seeds into per-layer profiles.
        let averaged = average_seeds(&detail, ctx.config.cluster.n_seeds);
        let last = averaged.last().expect("at least one layer");
        let gap = last.gap(cond.target());
        let accuracy = behavior.accuracy_of(cond).unwrap_or(f64::NAN);
        gap_points.push((cond.name().to_string(), gap, accuracy));
        profiles.push((
            cond.name().to_string(),
            averaged
                .iter()
                .map(|l| serde_json::to_value(l).unwrap())
                .collect(),
        ));
    }

    let correlation = if gap_points.len() >= 3 {
        conflictlens_core::saliencelab::correlate_gap_accuracy(
            &gap_points.iter().map(|(_, g, a)| (*g, *a)).collect::<Vec<_>>(),
        )
        .ok()
    } else {
        None
    };

    let salience_path = ctx.path("cluster/salience.csv");
    crate::write_atomic(&salience_path, csv.as_bytes())?;

    let mut corr_csv = String::from("condition,gap,accuracy\n");
    for (name, gap, acc) in &gap_points {
        corr_csv.push_str(&format!("{name},{gap:.6},{acc:.6}\n"));
    }
    match correlation {
        Some((r, p)) => corr_csv.push_str(&format!("# pearson r = {r:.6}, p = {p:.6e}\n")),
        None => corr_csv.push_str("# pearson: n/a (needs >= 3 conditions; run multiple configs)\n"),
    }
    let corr_path = ctx.path("cluster/correlation.csv");
    crate::write_atomic(&corr_path, corr_csv.as_bytes())?;

    let report = ClusterReport {
        profiles,
        gap_points,
        correlation,
    };
    let json_path = ctx.path("cluster/salience.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;

    Ok((
        vec![
            ctx.path("behave/cache_inconsistent_image.actv"),
            ctx.path("behave/cache_inconsistent_caption.actv"),
            ctx.path("behave/behavior.json"),
        ],
        vec![salience_path, corr_path, json_path],
    ))
}

fn average_seeds(detail: &[SeedSalience], n_seeds: usize) -> Vec<LayerSalience> {
    let n_layers = detail.iter().map(|d| d.layer + 1).max().unwrap_or(0);
    let mut out: Vec<LayerSalience> = (0..n_layers)
        .map(|layer| LayerSalience {
            layer,
            image: Default::default(),
            caption: Default::default(),
            n_seeds,
        })
        .collect();
    for d in detail {
        let cell = &mut out[d.layer];
        cell.image.h += d.image.h / n_seeds as f64;
        cell.image.c += d.image.c / n_seeds as f64;
        cell.image.v += d.image.v / n_seeds as f64;
        cell.caption.h += d.caption.h / n_seeds as f64;
        cell.caption.c += d.caption.c / n_seeds as f64;
        cell.caption.v += d.caption.v / n_seeds as f64;
    }
    out
}

// ---------------------------------------------------------------------------
// sweep / classify / transfer
// ---------------------------------------------------------------------------

fn sweep_eval_set(ctx: &Ctx, pool: &str, stream: &str) -> Result<EvalSet, HarnessError> {
    let images = ctx.load_pool(pool)?;
    let classes = ctx.classes();
    let vocab = ctx.vocab();
    let mut rng = ctx.rng().substream(stream);
    Ok(EvalSet::build(
        &images,
        &classes,
        &vocab,
        ctx.config.template_index,
        ctx.config.intervention.n_sweep_pairs,
        &mut rng,
    )?)
}

fn stage_sweep(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let model = ctx.load_model()?;
    let eval = sweep_eval_set(ctx, "eval", "sweep_pairs")?;
    let grid = AlphaGrid::standard();
    let curves = sweep_all_heads(&model, &eval, &grid)?;

    let mut csv = String::from(
        "layer,head,target_modality,alpha,portion_target,portion_nontarget,portion_other\n",
    );
    for curve in &curves {
        for target in [Modality::Image, Modality::Caption] {
            let series = curve.series(target);
            for (i, &alpha) in grid.values().iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{},{},{:.6},{:.6},{:.6}\n",
                    curve.layer,
                    curve.head,
                    target.name(),
                    alpha,
                    series.target[i],
                    series.non_target[i],
                    series.other[i]
                ));
            }
        }
    }
    let csv_path = ctx.path("sweep/curves.csv");
    crate::write_atomic(&csv_path, csv.as_bytes())?;
    let json_path = ctx.path("sweep/curves.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string(&curves).unwrap().as_bytes(),
    )?;
    Ok((
        vec![ctx.path("gen/eval.cgen"), ctx.path("train/model.tvlm")],
        vec![csv_path, json_path],
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub epsilon: f64,
    pub classifications: Vec<HeadClassification>,
    pub ranking: HeadRanking,
}

fn stage_classify(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let curves: Vec<HeadCurve> = read_json(&ctx.path("sweep/curves.json"))?;
    let eps = ctx.config.intervention.epsilon;
    let classifications: Vec<HeadClassification> =
        curves.iter().map(|c| classify_head(c, eps)).collect();
    let ranking = rank_heads(&classifications, &curves);

    let mut csv = String::from("layer,head,type,delta1,delta2\n");
    for score in &ranking.scores {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            score.layer,
            score.head,
            score.head_type.name(),
            score.delta1,
            score.delta2
        ));
    }
    let csv_path = ctx.path("classify/heads.csv");
    crate::write_atomic(&csv_path, csv.as_bytes())?;

    let report = ClassifyReport {
        epsilon: eps,
        classifications,
        ranking,
    };
    let json_path = ctx.path("classify/classification.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    Ok((vec![ctx.path("sweep/curves.json")], vec![csv_path, json_path]))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub head: (usize, usize),
    pub head_type: HeadType,
    pub alpha: f32,
    pub cells: Vec<TransferCell>,
    pub gap_shifts: Vec<GapShiftCell>,
}

fn choose_transfer_head(
    ctx: &Ctx,
    report: &ClassifyReport,
) -> ((usize, usize), HeadType) {
    if let Some(head) = ctx.config.intervention.transfer_head {
        let ty = report
            .classifications
            .iter()
            .find(|c| (c.layer, c.head) == head)
            .map_or(HeadType::Unclassified, |c| c.head_type);
        return (head, ty);
    }
    // Best intervenability among classified heads; fall back to the best
    // overall when nothing classified.
    let mut best: Option<(&conflictlens_core::intervene::HeadScore, bool)> = None;
    for score in &report.ranking.scores {
        let classified = score.head_type != HeadType::Unclassified;
        let better = match best {
            None => true,
            Some((b, b_classified)) => {
                (classified && !b_classified)
                    || (classified == b_classified && score.delta1 > b.delta1)
            }
        };
        if better {
            best = Some((score, classified));
        }
    }
    let (score, _) = best.expect("at least one head");
    ((score.layer, score.head), score.head_type)
}

fn stage_transfer(ctx: &Ctx) -> Result<StageFiles, HarnessError> {
    let model = ctx.load_model()?;
    let classify: ClassifyReport = read_json(&ctx.path("classify/classification.json"))?;
    let (head, head_type) = choose_transfer_head(ctx, &classify);
    let alpha = ctx.config.intervention.transfer_alpha;
    let (n_classes, _, _) = ctx.data_dims();

    let datasets = vec![
        ("transfer_a".to_string(), sweep_eval_set(ctx, "transfer_a", "transfer_a_pairs")?),
        ("transfer_b".to_string(), sweep_eval_set(ctx, "transfer_b", "transfer_b_pairs")?),
    ];
    let cells = transfer_eval(&model, head, alpha, &datasets)?;
    let gap_shifts = post_intervention_salience(
        &model,
        head,
        alpha,
        &datasets,
        n_classes,
        &ctx.rng().substream("transfer_salience"),
        ctx.config.cluster.n_seeds,
        ctx.config.cluster.n_init,
    )?;

    let mut csv = String::from("dataset,target,original,intervened,delta\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:+.6}\n",
            c.dataset,
            c.target.name(),
            c.original,
            c.intervened,
            c.delta
        ));
    }
    let csv_path = ctx.path("transfer/transfer.csv");
    crate::write_atomic(&csv_path, csv.as_bytes())?;

    let mut shift_csv = String::from("dataset,target,gap_before,gap_after,delta\n");
    for c in &gap_shifts {
        shift_csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:+.6}\n",
            c.dataset,
            c.target.name(),
            c.gap_before,
            c.gap_after,
            c.delta
        ));
    }
    let shift_path = ctx.path("transfer/salience_shift.csv");
    crate::write_atomic(&shift_path, shift_csv.as_bytes())?;

    let report = TransferReport {
        head,
        head_type,
        alpha,
        cells,
        gap_shifts,
    };
    let json_path = ctx.path("transfer/transfer.json");
    crate::write_atomic(
        &json_path,
        serde_json::to_string_pretty(&report).unwrap().as_bytes(),
    )?;
    Ok((
        vec![
            ctx.path("classify/classification.json"),
            ctx.path("gen/transfer_a.cgen"),
            ctx.path("gen/transfer_b.cgen"),
            ctx.path("train/model.tvlm"),
        ],
        vec![csv_path, shift_path, json_path],
    ))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Io(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| HarnessError::Numerical(format!("parse {}: {e}", path.display())))
}
