//! Training phases and evaluation.

use log::{info, warn};
use rand::Rng as _;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{ContextualMode, TrainConfig};
use super::metrics::{argmax, evaluate_metrics, Metrics};
use crate::augment::make_views;
use crate::data::{batch_indices, gather_samples, Batch, Dataset, SampleSource, UNLABELED};
use crate::error::{Error, Result};
use crate::losses::{
    combine_graph, contextual_contrast, cross_entropy_graph, supervised_contextual_contrast, temporal_contrast,
    SccNormalization,
};
use crate::nn::model::{self, init_classifier, init_context, init_encoder, init_projection, is_classifier, is_encoder};
use crate::nn::{
    adam_step, apply_bn_observations, classifier_forward, compute_gradients, encoder_forward, predict_logits,
    projection_head_forward, transformer_context, AdamState, Bound, EncoderConfig, ForwardCtx, Graph, LossTerms,
    ModelDims, ParamStore, TransformerConfig, Var,
};
use crate::rng::SeedStream;
use crate::tensor::{Scalar, Tensor};

/// One optimizer step's loss breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub phase: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub tc_strong: Option<f64>,
    pub tc_weak: Option<f64>,
    pub contextual: Option<f64>,
    pub cross_entropy: Option<f64>,
}

/// A finished phase: its checkpoint plus per-step losses.
#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

/// Contextual term of a contrastive objective.
#[derive(Debug, Clone, Copy)]
pub enum Contextual<'a> {
    Off,
    Unsup {
        weight: f64,
        tau: f64,
    },
    /// `labels` holds one label per sample of the batch.
    Sup {
        weight: f64,
        tau: f64,
        labels: &'a [i64],
        norm: SccNormalization,
    },
}

/// Everything needed to build the two-view contrastive objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub encoder: &'a EncoderConfig,
    pub transformer: &'a TransformerConfig,
    pub horizon: usize,
    pub cross_view: bool,
    pub temporal_weight: f64,
    pub contextual: Contextual<'a>,
}

impl Objective<'_> {
    /// True when no active term carries weight, so the objective cannot
    /// move any parameter.
    pub fn is_constant(&self) -> bool {
        let ctx = match self.contextual {
            Contextual::Off => 0.0,
            Contextual::Unsup { weight, .. } | Contextual::Sup { weight, .. } => weight,
        };
        self.temporal_weight == 0.0 && ctx == 0.0
    }
}

/// Temporal terms in both directions plus the contextual term, on one tape.
/// `anchor` is the context prefix length.
pub fn contrastive_loss<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bound<F>,
    obj: &Objective,
    weak: Var,
    strong: Var,
    anchor: usize,
    ctx: &mut ForwardCtx,
) -> Result<LossTerms> {
    let z_weak = encoder_forward(g, p, obj.encoder, weak, ctx)?;
    let z_strong = encoder_forward(g, p, obj.encoder, strong, ctx)?;
    let c_weak = transformer_context(g, p, obj.transformer, z_weak, anchor, ctx)?;
    let c_strong = transformer_context(g, p, obj.transformer, z_strong, anchor, ctx)?;
    let (tgt_of_strong, tgt_of_weak) = if obj.cross_view { (z_weak, z_strong) } else { (z_strong, z_weak) };
    let tc_strong = temporal_contrast(g, p, c_strong, tgt_of_strong, anchor, obj.horizon)?;
    let tc_weak = temporal_contrast(g, p, c_weak, tgt_of_weak, anchor, obj.horizon)?;
    let mut parts = vec![("tc_strong", tc_strong), ("tc_weak", tc_weak)];
    let (contextual, weight) = match obj.contextual {
        Contextual::Off => (None, 0.0),
        Contextual::Unsup { weight, tau } => {
            let rows = projected_rows(g, p, c_weak, c_strong)?;
            (Some(contextual_contrast(g, rows, tau)?), weight)
        }
        Contextual::Sup {
            weight,
            tau,
            labels,
            norm,
        } => {
            let rows = projected_rows(g, p, c_weak, c_strong)?;
            let row_labels: Vec<i64> = labels.iter().flat_map(|&y| [y, y]).collect();
            (Some(supervised_contextual_contrast(g, rows, &row_labels, tau, norm)?), weight)
        }
    };
    if let Some(c) = contextual {
        parts.push(("contextual", c));
    }
    let total = combine_graph(g, &[tc_strong, tc_weak], obj.temporal_weight, contextual, weight)?;
    Ok(LossTerms { total, parts })
}

fn projected_rows<F: Scalar>(g: &mut Graph<F>, p: &Bound<F>, c_weak: Var, c_strong: Var) -> Result<Var> {
    let pw = projection_head_forward(g, p, c_weak)?;
    let ps = projection_head_forward(g, p, c_strong)?;
    g.interleave_rows(pw, ps)
}

fn contrastive_trainable(name: &str) -> bool {
    !is_classifier(name)
}

fn encoder_or_classifier(name: &str) -> bool {
    is_encoder(name) || is_classifier(name)
}

fn tag_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
        other => other,
    }
}

fn part(parts: &[(&'static str, f32)], name: &str) -> Option<f64> {
    parts.iter().find(|(n, _)| *n == name).map(|(_, v)| *v as f64)
}

/// Shared loop of the two contrastive phases. `labels` switches the
/// contextual term to its supervised form.
#[allow(clippy::too_many_arguments)]
fn contrastive_training<S: SampleSource + ?Sized>(
    src: &S,
    labels: Option<&[i64]>,
    cfg: &TrainConfig,
    dims: &ModelDims,
    params: &mut ParamStore,
    adam: &mut AdamState,
    phase: &'static str,
    seeds: SeedStream,
) -> Result<Vec<StepRecord>> {
    let n = src.len();
    if n == 0 {
        return Err(Error::data(format!("{phase}: empty training set")));
    }
    let bs = cfg.batch_size.min(n);
    let (temporal_weight, ctx_weight) = match labels {
        None => (cfg.loss.unsup_temporal, cfg.loss.unsup_contextual),
        Some(_) => (cfg.loss.semi_temporal, cfg.loss.semi_contextual),
    };
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = batch_indices(n, bs, Some(seeds.named("shuffle").child(epoch as u64).key()));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order {
            if idx.len() < 2 {
                continue;
            }
            let batch_labels: Option<Vec<i64>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let contextual = match (cfg.ablation.contextual, &batch_labels) {
                (ContextualMode::Off, _) => Contextual::Off,
                (_, None) => Contextual::Unsup {
                    weight: ctx_weight,
                    tau: cfg.loss.temperature,
                },
                (_, Some(l)) => Contextual::Sup {
                    weight: ctx_weight,
                    tau: cfg.loss.temperature,
                    labels: l,
                    norm: cfg.scc_normalization,
                },
            };
            let obj = Objective {
                encoder: &cfg.encoder,
                transformer: &cfg.transformer,
                horizon: dims.horizon,
                cross_view: cfg.ablation.cross_view,
                temporal_weight,
                contextual,
            };
            if obj.is_constant() {
                continue;
            }
            let step_seeds = seeds.named("step").child(step as u64);
            let batch = Batch {
                x: gather_samples(src, &idx),
                y: vec![UNLABELED; idx.len()],
            };
            let views = make_views(&batch, &cfg.augment, cfg.ablation.views, &mut step_seeds.named("augment").rng());
            let anchor = step_seeds
                .named("anchor")
                .rng()
                .random_range(1..=dims.latent_len - dims.horizon);
            let mut dropout_rng = step_seeds.named("dropout").rng();
            let mut ctx = ForwardCtx::train(&mut dropout_rng);
            let out = compute_gradients(params, contrastive_trainable, |g, p| {
                let w = g.constant(views.weak.x);
                let s = g.constant(views.strong.x);
                contrastive_loss(g, p, &obj, w, s, anchor, &mut ctx)
            })
            .map_err(|e| tag_step(e, step))?;
            adam_step(params, &out.grads, adam, &cfg.optimizer)?;
            apply_bn_observations(params, &ctx.observations, cfg.encoder.bn_momentum);
            records.push(StepRecord {
                phase,
                epoch,
                step,
                total: out.loss as f64,
                tc_strong: part(&out.parts, "tc_strong"),
                tc_weak: part(&out.parts, "tc_weak"),
                contextual: part(&out.parts, "contextual"),
                cross_entropy: None,
            });
            epoch_loss += out.loss as f64;
            batches += 1;
            step += 1;
        }
        if batches > 0 {
            info!("{phase} epoch {}/{}: loss {:.4}", epoch + 1, cfg.epochs, epoch_loss / batches as f64);
        }
    }
    if step == 0 {
        warn!("{phase}: objective is constant or no batch had two samples; parameters unchanged");
    }
    Ok(records)
}

/// Encoder plus classifier trained with cross-entropy; everything else frozen.
fn supervised_training(
    labeled: &Dataset,
    cfg: &TrainConfig,
    params: &mut ParamStore,
    epochs: usize,
    phase: &'static str,
    seeds: SeedStream,
) -> Result<Vec<StepRecord>> {
    let n = labeled.len();
    if n == 0 {
        return Err(Error::data(format!("{phase}: empty labeled set")));
    }
    if !labeled.is_fully_labeled() {
        return Err(Error::data(format!("{phase}: labeled set contains unlabeled samples")));
    }
    let bs = cfg.batch_size.min(n);
    let mut adam = AdamState::new();
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        let order = batch_indices(n, bs, Some(seeds.named("shuffle").child(epoch as u64).key()));
        let batches = order.len();
        for idx in order {
            let x = gather_samples(labeled, &idx);
            let y: Vec<i64> = idx.iter().map(|&i| labeled.labels()[i]).collect();
            let mut dropout_rng = seeds.named("step").child(step as u64).rng();
            let mut ctx = ForwardCtx::train(&mut dropout_rng);
            let out = compute_gradients(params, encoder_or_classifier, |g, p| {
                let xv = g.constant(x);
                let z = encoder_forward(g, p, &cfg.encoder, xv, &mut ctx)?;
                let logits = classifier_forward(g, p, z)?;
                Ok(LossTerms::single("cross_entropy", cross_entropy_graph(g, logits, &y)?))
            })
            .map_err(|e| tag_step(e, step))?;
            adam_step(params, &out.grads, &mut adam, &cfg.optimizer)?;
            apply_bn_observations(params, &ctx.observations, cfg.encoder.bn_momentum);
            records.push(StepRecord {
                phase,
                epoch,
                step,
                total: out.loss as f64,
                tc_strong: None,
                tc_weak: None,
                contextual: None,
                cross_entropy: Some(out.loss as f64),
            });
            epoch_loss += out.loss as f64;
            step += 1;
        }
        info!("{phase} epoch {}/{epochs}: loss {:.4}", epoch + 1, epoch_loss / batches as f64);
    }
    Ok(records)
}

fn meta(phase: &str, parent: Option<String>, dims: &ModelDims, cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        phase: phase.to_string(),
        parent,
        in_channels: dims.in_channels,
        length: dims.length,
        num_classes: dims.num_classes,
        pseudo_agreement: None,
        config: cfg.clone(),
    }
}

fn history(records: &[StepRecord]) -> Vec<f32> {
    records.iter().map(|r| r.total as f32).collect()
}

pub fn model_dims(cfg: &TrainConfig, in_channels: usize, length: usize, num_classes: usize) -> Result<ModelDims> {
    ModelDims::new(&cfg.model(), in_channels, length, num_classes)
}

fn checkpoint_dims(ck: &Checkpoint) -> Result<ModelDims> {
    model_dims(&ck.meta.config, ck.meta.in_channels, ck.meta.length, ck.meta.num_classes)
}

fn check_compatible(ck: &Checkpoint, d: &Dataset) -> Result<()> {
    if ck.meta.in_channels != d.channels() || ck.meta.length != d.length() || ck.meta.num_classes != d.num_classes() {
        return Err(Error::shape(format!(
            "dataset `{}` is ({} channels, length {}, {} classes) but checkpoint expects ({}, {}, {})",
            d.name(),
            d.channels(),
            d.length(),
            d.num_classes(),
            ck.meta.in_channels,
            ck.meta.length,
            ck.meta.num_classes
        )));
    }
    Ok(())
}

/// Self-supervised pretraining. Reads samples only, never labels.
pub fn pretrain_tstcc<S: SampleSource + ?Sized>(src: &S, cfg: &TrainConfig) -> Result<PhaseOutput> {
    cfg.validate_settings()?;
    if cfg.ablation.contextual == ContextualMode::Sup {
        return Err(Error::config("pretraining cannot use the supervised contextual term"));
    }
    let dims = model_dims(cfg, src.channels(), src.length(), src.num_classes())?;
    let seeds = SeedStream::new(cfg.seed).named("pretrain");
    let mut params = model::init_contrastive(&cfg.model(), &dims, seeds);
    let mut adam = AdamState::new();
    let records = contrastive_training(src, None, cfg, &dims, &mut params, &mut adam, "pretrain", seeds)?;
    let mut checkpoint = Checkpoint::new(meta("pretrain", None, &dims, cfg), params);
    checkpoint.adam = Some(adam);
    checkpoint.history = history(&records);
    Ok(PhaseOutput { checkpoint, records })
}

/// Fine-tune the checkpoint's encoder together with a classifier (fresh
/// unless the checkpoint has one) on `labeled`.
pub fn finetune(ck: &Checkpoint, labeled: &Dataset, cfg: &TrainConfig) -> Result<PhaseOutput> {
    finetune_phase(ck, labeled, cfg, "finetune")
}

fn finetune_phase(ck: &Checkpoint, labeled: &Dataset, cfg: &TrainConfig, phase: &'static str) -> Result<PhaseOutput> {
    check_compatible(ck, labeled)?;
    let dims = checkpoint_dims(ck)?;
    let seeds = SeedStream::new(cfg.seed).named(phase);
    let mut params = ck.params.clone();
    if !params.contains("classifier.weight") {
        init_classifier(&mut params, &dims, seeds);
    }
    let records = supervised_training(labeled, cfg, &mut params, cfg.supervised_epochs(), phase, seeds)?;
    let mut checkpoint = Checkpoint::new(meta(phase, ck.id().ok(), &dims, cfg), params);
    checkpoint.norm = ck.norm.clone();
    checkpoint.history = history(&records);
    Ok(PhaseOutput { checkpoint, records })
}

/// Fresh encoder only, for the from-scratch baselines.
pub fn fresh_encoder(cfg: &TrainConfig, in_channels: usize, length: usize, num_classes: usize) -> Result<Checkpoint> {
    cfg.validate_settings()?;
    let dims = model_dims(cfg, in_channels, length, num_classes)?;
    let mut params = ParamStore::new();
    init_encoder(&mut params, &cfg.encoder, in_channels, SeedStream::new(cfg.seed).named("scratch"));
    Ok(Checkpoint::new(meta("init", None, &dims, cfg), params))
}

/// Encoder and classifier trained from scratch on `labeled`.
pub fn train_supervised(labeled: &Dataset, cfg: &TrainConfig) -> Result<PhaseOutput> {
    let init = fresh_encoder(cfg, labeled.channels(), labeled.length(), labeled.num_classes())?;
    finetune_phase(&init, labeled, cfg, "supervised")
}

/// Labels predicted for a formerly unlabeled set.
#[derive(Debug, Clone)]
pub struct PseudoLabeled {
    /// Kept samples with their predicted labels.
    pub dataset: Dataset,
    /// Rows of the input that were kept, ascending.
    pub kept: Vec<usize>,
    /// Id of the labeling checkpoint.
    pub source: String,
    /// Fraction of kept predictions matching `truth`, when given.
    pub agreement: Option<f64>,
}

/// Argmax class for every sample; with a confidence threshold configured,
/// samples below it are dropped.
pub fn generate_pseudo_labels(ck: &Checkpoint, unlabeled: &Dataset, truth: Option<&[i64]>) -> Result<PseudoLabeled> {
    check_compatible(ck, unlabeled)?;
    if let Some(t) = truth {
        if t.len() != unlabeled.len() {
            return Err(Error::data("truth length differs from unlabeled set"));
        }
    }
    let cfg = &ck.meta.config;
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    if !unlabeled.is_empty() {
        let logits = predict_logits(&ck.params, &cfg.encoder, unlabeled.samples(), cfg.eval_batch_size)?;
        for i in 0..unlabeled.len() {
            let row = logits.row(i);
            let best = argmax(row);
            if let Some(thr) = cfg.pseudo_threshold {
                let m = row[best] as f64;
                let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
                if 1.0 / z < thr {
                    continue;
                }
            }
            kept.push(i);
            labels.push(best as i64);
        }
    }
    let agreement = match truth {
        Some(t) if !kept.is_empty() => {
            Some(kept.iter().zip(&labels).filter(|(&i, &y)| t[i] == y).count() as f64 / kept.len() as f64)
        }
        _ => None,
    };
    let dataset = unlabeled.subset(&kept).with_labels(labels)?;
    Ok(PseudoLabeled {
        dataset,
        kept,
        source: ck.id()?,
        agreement,
    })
}

/// Checkpoint holding the labeling model plus its pseudo labels.
pub fn pseudo_label_checkpoint(ck: &Checkpoint, pseudo: &PseudoLabeled) -> Checkpoint {
    let mut out = ck.clone();
    out.meta.phase = "pseudo_label".into();
    out.meta.parent = Some(pseudo.source.clone());
    out.meta.pseudo_agreement = pseudo.agreement;
    out.pseudo_labels = Some(pseudo.dataset.labels().to_vec());
    out.history.clear();
    out
}

/// Class-aware contrastive training on a fully labeled set. The encoder
/// continues from `ck`; transformer and heads start fresh.
pub fn train_catcc(ck: &Checkpoint, data: &Dataset, cfg: &TrainConfig) -> Result<PhaseOutput> {
    cfg.validate_settings()?;
    check_compatible(ck, data)?;
    if !data.is_fully_labeled() {
        return Err(Error::data("class-aware training needs every sample labeled"));
    }
    let dims = checkpoint_dims(ck)?;
    let seeds = SeedStream::new(cfg.seed).named("catcc");
    let mut params = ParamStore::new();
    params.copy_prefix_from(&ck.params, "encoder.");
    init_context(&mut params, &cfg.transformer, &dims, seeds);
    init_projection(&mut params, dims.hidden, seeds);
    let mut adam = AdamState::new();
    let records = contrastive_training(data, Some(data.labels()), cfg, &dims, &mut params, &mut adam, "catcc", seeds)?;
    let mut checkpoint = Checkpoint::new(meta("catcc", ck.id().ok(), &dims, cfg), params);
    checkpoint.adam = Some(adam);
    checkpoint.norm = ck.norm.clone();
    checkpoint.history = history(&records);
    Ok(PhaseOutput { checkpoint, records })
}

/// Class predictions from a checkpoint with a classifier.
pub fn predict(ck: &Checkpoint, d: &Dataset) -> Result<Vec<i64>> {
    check_compatible(ck, d)?;
    if d.is_empty() {
        return Ok(Vec::new());
    }
    let logits = predict_logits(&ck.params, &ck.meta.config.encoder, d.samples(), ck.meta.config.eval_batch_size)?;
    Ok((0..d.len()).map(|i| argmax(logits.row(i)) as i64).collect())
}

/// Metrics of a checkpoint with a classifier on a labeled test set.
pub fn evaluate(ck: &Checkpoint, test: &Dataset) -> Result<Metrics> {
    if !test.is_fully_labeled() {
        return Err(Error::data("test set must be fully labeled"));
    }
    evaluate_metrics(&predict(ck, test)?, test.labels(), test.num_classes())
}

/// Train a fresh classifier on frozen encoder features, then score `test`.
pub fn linear_evaluate(ck: &Checkpoint, train_labeled: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Metrics> {
    check_compatible(ck, train_labeled)?;
    check_compatible(ck, test)?;
    if train_labeled.is_empty() || !train_labeled.is_fully_labeled() {
        return Err(Error::data("linear evaluation needs a nonempty fully labeled training set"));
    }
    if !test.is_fully_labeled() {
        return Err(Error::data("test set must be fully labeled"));
    }
    let absent: Vec<usize> = train_labeled
        .class_counts()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(k, _)| k)
        .collect();
    if !absent.is_empty() {
        warn!("linear evaluation: classes {absent:?} absent from the training set");
    }
    let dims = checkpoint_dims(ck)?;
    let enc = &ck.meta.config.encoder;
    let feats = model::encode_features(&ck.params, enc, train_labeled.samples(), cfg.eval_batch_size)?;
    let width = feats.dim(1);
    let seeds = SeedStream::new(cfg.seed).named("linear");
    let mut head = ParamStore::new();
    init_classifier(&mut head, &dims, seeds);
    let mut adam = AdamState::new();
    let n = train_labeled.len();
    let bs = cfg.batch_size.min(n);
    for epoch in 0..cfg.supervised_epochs() {
        for idx in batch_indices(n, bs, Some(seeds.named("shuffle").child(epoch as u64).key())) {
            let mut x = Vec::with_capacity(idx.len() * width);
            for &i in &idx {
                x.extend_from_slice(feats.row(i));
            }
            let x = Tensor::new(vec![idx.len(), width], x)?;
            let y: Vec<i64> = idx.iter().map(|&i| train_labeled.labels()[i]).collect();
            let out = compute_gradients(&head, |_| true, |g, p| {
                let xv = g.constant(x);
                let logits = classifier_forward(g, p, xv)?;
                Ok(LossTerms::single("cross_entropy", cross_entropy_graph(g, logits, &y)?))
            })?;
            adam_step(&mut head, &out.grads, &mut adam, &cfg.optimizer)?;
        }
    }
    let mut scored = ck.clone();
    scored.params.remove_prefix("classifier.");
    scored.params.copy_prefix_from(&head, "classifier.");
    evaluate(&scored, test)
}
