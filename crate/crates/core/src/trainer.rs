//! Training loops: supervised pretraining, the alternating adaptation and
//! pseudo-labeling rounds, and the supervised fits the baselines reuse.
//!
//! Target instance labels never enter this module: [`TrainingData::new`]
//! strips them before anything else touches the target set.

use std::collections::BTreeMap;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    bag_term, instance_term, objective_gradients, BagInput, Components, Gradients, Objective, Scope,
    Step2Batch,
};
use crate::metrics::pr_auc;
use crate::model::{init_instance_head, to_matrix, ArchSpec, Dist, InstanceHeads, ModelBundle, Params};
use crate::optim::Adam;
use crate::pseudo::{
    balance_negative_bag_sample, centroid_pseudo_labels, confidence_scores, mix_scores, schedule_tau,
    select_pseudo_labels, Candidate, CentroidQuota, ConfidencePair, MixRule, ScheduleConfig,
};
use crate::rng::{self, streams};
use crate::types::{training_view, DomainDataset, InstanceRef, PseudoLabelAssignment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    /// `A_p = A_n = 1`, `τ ∈ [n_tpi/10, n_tpi/4]`.
    Pathology,
    /// `A_p = 1`, `A_n = 3`, `τ ∈ [n_tpi/30, n_tpi/10]`.
    Digits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub epochs_step1: usize,
    pub epochs_step23: usize,
    pub lr: f64,
    /// Rate for the two discrepancy objectives.
    pub lr_matching: f64,
    /// Bags per step; adaptation steps split them evenly between domains.
    pub bags_per_step: usize,
    pub instances_per_step: usize,
    pub lambda: f64,
    pub n_inner_generator_steps: usize,
    pub schedule_preset: SchedulePreset,
    /// Overrides the preset when set.
    pub schedule: Option<ScheduleConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: ArchSpec::default(),
            epochs_step1: 50,
            epochs_step23: 100,
            lr: 1e-3,
            lr_matching: 1e-4,
            bags_per_step: 8,
            instances_per_step: 128,
            lambda: 0.5,
            n_inner_generator_steps: 4,
            schedule_preset: SchedulePreset::Digits,
            schedule: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.lr > 0.0 && self.lr_matching > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.bags_per_step == 0 || self.instances_per_step == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }

    pub fn schedule_for(&self, n_tpi: usize) -> ScheduleConfig {
        self.schedule.unwrap_or(match self.schedule_preset {
            SchedulePreset::Pathology => ScheduleConfig::pathology(n_tpi),
            SchedulePreset::Digits => ScheduleConfig::digits(n_tpi),
        })
    }
}

/// Where pseudo-label scores come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeler {
    Mix(MixRule),
    BagHeadOnly,
    InstanceHeadsOnly,
    /// Nearest source class centroid in feature space.
    Centroid,
}

/// Switches for the ablated variants of the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub pseudo_labels: bool,
    pub feature_matching: bool,
    pub labeler: Labeler,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            pseudo_labels: true,
            feature_matching: true,
            labeler: Labeler::Mix(MixRule::Confidence),
        }
    }
}

/// Matrices prepared from the training-view datasets.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub dim: usize,
    pub source_bags: Vec<BagInput>,
    pub source_x: Array2<f64>,
    pub source_y: Vec<u8>,
    pub source_val_x: Array2<f64>,
    pub source_val_y: Vec<u8>,
    pub target_bags: Vec<BagInput>,
    /// Every target training instance, bags in order.
    pub target_x: Array2<f64>,
    pub target_refs: Vec<InstanceRef>,
    /// Rows of `target_x` that come from positive / negative bags.
    pub target_pos_rows: Vec<usize>,
    pub target_neg_rows: Vec<usize>,
    row_of: BTreeMap<InstanceRef, usize>,
}

fn source_labels(ds: &DomainDataset) -> Result<Vec<u8>> {
    ds.instances()
        .map(|i| {
            i.oracle_label()
                .ok_or_else(|| Error::InvalidDataset(format!("source instance {:?} lacks a label", i.id())))
        })
        .collect()
}

fn bag_inputs(ds: &DomainDataset, dim: usize) -> Vec<BagInput> {
    ds.bags()
        .iter()
        .map(|b| BagInput {
            x: to_matrix(b.instances().iter().map(|i| i.features()), dim),
            label: b.label(),
        })
        .collect()
}

impl TrainingData {
    pub fn new(source_train: &DomainDataset, source_val: &DomainDataset, target_train: &DomainDataset) -> Result<Self> {
        let target = training_view(target_train);
        let dim = source_train
            .dim()
            .ok_or_else(|| Error::InvalidDataset("empty source training set".into()))?;
        for ds in [source_val, &target] {
            if ds.dim().is_some_and(|d| d != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: ds.dim().unwrap_or(0),
                });
            }
        }
        if target.n_bags() == 0 {
            return Err(Error::InvalidDataset("empty target training set".into()));
        }
        let mut target_refs = Vec::new();
        let mut pos_rows = Vec::new();
        let mut neg_rows = Vec::new();
        let mut row_of = BTreeMap::new();
        for bag in target.bags() {
            for inst in bag.instances() {
                let row = target_refs.len();
                target_refs.push(inst.id());
                row_of.insert(inst.id(), row);
                if bag.label() == 1 {
                    pos_rows.push(row);
                } else {
                    neg_rows.push(row);
                }
            }
        }
        Ok(Self {
            dim,
            source_bags: bag_inputs(source_train, dim),
            source_x: to_matrix(source_train.instances().map(|i| i.features()), dim),
            source_y: source_labels(source_train)?,
            source_val_x: to_matrix(source_val.instances().map(|i| i.features()), dim),
            source_val_y: source_labels(source_val)?,
            target_bags: bag_inputs(&target, dim),
            target_x: to_matrix(target.instances().map(|i| i.features()), dim),
            target_refs,
            target_pos_rows: pos_rows,
            target_neg_rows: neg_rows,
            row_of,
        })
    }

    /// Instances in target positive bags.
    pub fn n_tpi(&self) -> usize {
        self.target_pos_rows.len()
    }

    pub fn target_row(&self, id: &InstanceRef) -> Option<usize> {
        self.row_of.get(id).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
}

/// Values an optional observer computes from outside the training path
/// (typically with oracle labels).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    pub pseudo_label_precision: Option<f64>,
    pub target_pr_auc: Option<f64>,
}

pub type Monitor<'a> = dyn FnMut(&ModelBundle, &[PseudoLabelAssignment]) -> MonitorReport + 'a;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Option<Phase>,
    pub loss_bag_source: f64,
    pub loss_bag_target: f64,
    pub loss_instance: f64,
    pub loss_adv: f64,
    pub tau: Option<usize>,
    pub pseudo_positive: usize,
    pub pseudo_negative: usize,
    pub negative_bag_samples: usize,
    pub c_b: Option<f64>,
    pub c_i: Option<f64>,
    /// Instance-head PR-AUC on source validation.
    pub source_val_pr_auc: Option<f64>,
    pub pseudo_label_precision: Option<f64>,
    pub target_pr_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn adapt_records(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.phase == Some(Phase::Adapt))
    }
}

/// A failed run: the error and every record written before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub history: TrainingHistory,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} epochs)", self.error, self.history.len())
    }
}

impl std::error::Error for TrainFailure {}

/// Adam states for the parameter groups one objective may update.
#[derive(Clone, Debug)]
pub struct ScopedOptimizer {
    pub encoder: Adam,
    pub bag_head: Adam,
    pub heads: Vec<Adam>,
}

impl ScopedOptimizer {
    pub fn new(lr: f64) -> Self {
        Self {
            encoder: Adam::new(lr),
            bag_head: Adam::new(lr),
            heads: vec![Adam::new(lr), Adam::new(lr)],
        }
    }

    /// Steps only the groups in `scope`.
    pub fn apply(&mut self, model: &mut ModelBundle, grads: &Gradients, scope: Scope) {
        if scope.encoder {
            self.encoder.step(&mut model.encoder, &grads.encoder);
        }
        if scope.bag_head {
            self.bag_head.step(&mut model.bag_head, &grads.bag_head);
        }
        if scope.instance_heads {
            for ((head, g), opt) in model.heads.as_mut_slice().into_iter().zip(&grads.heads).zip(&mut self.heads) {
                opt.step(head, g);
            }
        }
    }
}

/// One gradient step on `objective`, touching only its scope.
pub fn objective_step(
    model: &mut ModelBundle,
    objective: Objective,
    batch: &Step2Batch,
    lambda: f64,
    opt: &mut ScopedOptimizer,
) -> Result<(f64, Components)> {
    let (value, components, grads) = objective_gradients(model, objective, batch, lambda)?;
    opt.apply(model, &grads, objective.scope());
    Ok((value, components))
}

/// Endless reshuffled walk over `0..n`.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut rng::Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut rng::Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < k.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn check_finite(model: &ModelBundle, values: &[f64], phase: &'static str, epoch: usize) -> Result<()> {
    if values.iter().any(|v| !v.is_finite())
        || !model.encoder.all_finite()
        || !model.bag_head.all_finite()
        || model.heads.as_slice().iter().any(|h| !h.all_finite())
    {
        return Err(Error::Diverged { phase, epoch });
    }
    Ok(())
}

/// Supervised data for [`fit_supervised`]: bags for the bag head and
/// labeled instances for the instance head(s). Either may be empty.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedInputs<'a> {
    pub bags: &'a [BagInput],
    pub x: &'a Array2<f64>,
    pub y: &'a [u8],
}

/// Joint supervised training: `λ L_I + (1-λ) L_B` when both parts are
/// present, the present one alone otherwise. Each epoch walks the bags
/// once (or the instances once when there are no bags).
pub fn fit_supervised(
    model: &mut ModelBundle,
    inputs: SupervisedInputs,
    cfg: &TrainConfig,
    epochs: usize,
    stream: u64,
    history: &mut TrainingHistory,
    source_val: Option<(&Array2<f64>, &[u8])>,
) -> Result<()> {
    let has_bags = !inputs.bags.is_empty();
    let has_inst = !inputs.y.is_empty();
    let (wi, wb) = match (has_bags, has_inst) {
        (true, true) => (cfg.lambda, 1.0 - cfg.lambda),
        (true, false) => (0.0, 1.0),
        (false, true) => (1.0, 0.0),
        (false, false) => return Err(Error::InvalidDataset("nothing to train on".into())),
    };
    let mut rng = rng::stream(cfg.seed, stream);
    let mut opt = ScopedOptimizer::new(cfg.lr);
    let mut bag_cycle = Cycler::new(inputs.bags.len(), &mut rng);
    let mut inst_cycle = Cycler::new(inputs.y.len(), &mut rng);
    let steps = if has_bags {
        inputs.bags.len().div_ceil(cfg.bags_per_step)
    } else {
        inputs.y.len().div_ceil(cfg.instances_per_step)
    };
    for epoch in 0..epochs {
        let (mut lb, mut li) = (0.0, 0.0);
        for _ in 0..steps {
            let mut grads = Gradients::zeros(model);
            if has_bags {
                let idx = bag_cycle.take(cfg.bags_per_step, &mut rng);
                let bags: Vec<&BagInput> = idx.iter().map(|&i| &inputs.bags[i]).collect();
                lb += bag_term(model, &bags, wb, Scope::ALL, &mut grads).value;
            }
            if has_inst {
                let idx = inst_cycle.take(cfg.instances_per_step, &mut rng);
                let x = inputs.x.select(Axis(0), &idx);
                let y: Vec<u8> = idx.iter().map(|&i| inputs.y[i]).collect();
                li += instance_term(model, x.view(), &y, wi, Scope::ALL, &mut grads).value;
            }
            opt.apply(model, &grads, Scope::ALL);
        }
        let (lb, li) = (lb / steps as f64, li / steps as f64);
        check_finite(model, &[lb, li], "pretrain", history.len())?;
        let val = source_val.and_then(|(x, y)| source_val_pr_auc(model, x, y));
        history.push(EpochRecord {
            epoch: history.len(),
            phase: Some(Phase::Pretrain),
            loss_bag_target: lb,
            loss_instance: li,
            source_val_pr_auc: val,
            ..EpochRecord::default()
        });
        debug!("pretrain epoch {epoch}: L_B {lb:.4} L_I {li:.4}");
    }
    Ok(())
}

fn source_val_pr_auc(model: &ModelBundle, x: &Array2<f64>, y: &[u8]) -> Option<f64> {
    let feats = model.encoder.forward(x.view());
    let scores: Vec<f64> = model.instance_probs(feats.view()).iter().map(|p| p[1]).collect();
    pr_auc(&scores, y).ok()
}

/// Pretraining: the bag head on target bag labels and the single instance
/// head on source instance labels, through the shared encoder.
pub fn run_step1(
    model: &mut ModelBundle,
    data: &TrainingData,
    cfg: &TrainConfig,
    history: &mut TrainingHistory,
) -> Result<()> {
    fit_supervised(
        model,
        SupervisedInputs {
            bags: &data.target_bags,
            x: &data.source_x,
            y: &data.source_y,
        },
        cfg,
        cfg.epochs_step1,
        streams::SHUFFLE,
        history,
        Some((&data.source_val_x, &data.source_val_y)),
    )
}

/// Replaces the instance head(s) with two freshly initialized heads drawn
/// from distinct streams.
pub fn init_twin_heads(model: &mut ModelBundle, seed: u64) {
    let a = init_instance_head(&model.arch, &mut rng::stream(seed, streams::INIT_TWIN_A));
    let b = init_instance_head(&model.arch, &mut rng::stream(seed, streams::INIT_TWIN_B));
    model.heads = InstanceHeads::Twin(a, b);
}

/// Optimizer states carried across adaptation epochs.
#[derive(Clone, Debug)]
pub struct AdaptState {
    pub joint: ScopedOptimizer,
    pub matching: ScopedOptimizer,
    rng: rng::Rng,
    source_bag_cycle: Cycler,
    target_bag_cycle: Cycler,
    target_cycle: Cycler,
}

impl AdaptState {
    pub fn new(data: &TrainingData, cfg: &TrainConfig) -> Self {
        let mut rng = rng::stream(cfg.seed, streams::SHUFFLE + 1);
        Self {
            joint: ScopedOptimizer::new(cfg.lr),
            matching: ScopedOptimizer::new(cfg.lr_matching),
            source_bag_cycle: Cycler::new(data.source_bags.len(), &mut rng),
            target_bag_cycle: Cycler::new(data.target_bags.len(), &mut rng),
            target_cycle: Cycler::new(data.target_refs.len(), &mut rng),
            rng,
        }
    }
}

/// Knobs of one adaptation epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptOptions {
    pub lambda: f64,
    /// Include the bag losses in the joint objective.
    pub bags: bool,
    pub feature_matching: bool,
}

/// Mean loss components of one adaptation epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdaptLosses {
    pub bag_source: f64,
    pub bag_target: f64,
    pub instance: f64,
    pub adv: f64,
}

/// One adaptation epoch: per step the joint objective, then (with feature
/// matching) the head objective and `n_inner_generator_steps` encoder
/// objective updates. The labeled batch is drawn from the source instances
/// plus `pseudo_labels`.
pub fn run_step2_epoch(
    model: &mut ModelBundle,
    data: &TrainingData,
    pseudo_labels: &[PseudoLabelAssignment],
    cfg: &TrainConfig,
    opts: AdaptOptions,
    state: &mut AdaptState,
) -> Result<AdaptLosses> {
    if !model.heads.is_twin() {
        return Err(Error::InvalidConfig("adaptation needs twin instance heads".into()));
    }
    // Labeled pool: source rows then pseudo-labeled target rows.
    let mut pool_x = data.source_x.clone();
    let mut pool_y = data.source_y.clone();
    if !pseudo_labels.is_empty() {
        let rows: Result<Vec<usize>> = pseudo_labels
            .iter()
            .map(|a| {
                data.target_row(&a.instance)
                    .ok_or_else(|| Error::InvalidDataset(format!("unknown target instance {:?}", a.instance)))
            })
            .collect();
        let extra = data.target_x.select(Axis(0), &rows?);
        pool_x.append(Axis(0), extra.view()).expect("matching widths");
        pool_y.extend(pseudo_labels.iter().map(|a| a.label));
    }
    let rng = &mut state.rng;
    let mut labeled_cycle = Cycler::new(pool_y.len(), rng);
    let per_domain = (cfg.bags_per_step / 2).max(1);
    let steps = data.target_bags.len().div_ceil(per_domain);

    let mut sum = AdaptLosses::default();
    let mut adv_steps = 0usize;
    for _ in 0..steps {
        let li = labeled_cycle.take(cfg.instances_per_step, rng);
        let labeled_x = pool_x.select(Axis(0), &li);
        let labels: Vec<u8> = li.iter().map(|&i| pool_y[i]).collect();
        let ti = state.target_cycle.take(cfg.instances_per_step, rng);
        let target_x = data.target_x.select(Axis(0), &ti);
        let (sb, tb): (Vec<&BagInput>, Vec<&BagInput>) = if opts.bags {
            (
                state
                    .source_bag_cycle
                    .take(per_domain, rng)
                    .into_iter()
                    .map(|i| &data.source_bags[i])
                    .collect(),
                state
                    .target_bag_cycle
                    .take(per_domain, rng)
                    .into_iter()
                    .map(|i| &data.target_bags[i])
                    .collect(),
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let batch = Step2Batch {
            labeled_x: labeled_x.view(),
            labels: &labels,
            target_x: target_x.view(),
            source_bags: &sb,
            target_bags: &tb,
        };
        let (_, c) = objective_step(model, Objective::Joint, &batch, opts.lambda, &mut state.joint)?;
        sum.bag_source += c.bag_source;
        sum.bag_target += c.bag_target;
        sum.instance += c.instance;
        if opts.feature_matching {
            objective_step(model, Objective::HeadDiscrepancy, &batch, opts.lambda, &mut state.matching)?;
            for _ in 0..cfg.n_inner_generator_steps {
                let (_, c) =
                    objective_step(model, Objective::EncoderDiscrepancy, &batch, opts.lambda, &mut state.matching)?;
                sum.adv += c.discrepancy;
                adv_steps += 1;
            }
        }
    }
    let n = steps as f64;
    Ok(AdaptLosses {
        bag_source: sum.bag_source / n,
        bag_target: sum.bag_target / n,
        instance: sum.instance / n,
        adv: if adv_steps > 0 { sum.adv / adv_steps as f64 } else { 0.0 },
    })
}

/// Outcome of one pseudo-labeling round.
#[derive(Clone, Debug, PartialEq)]
pub struct Step3Outcome {
    pub assignments: Vec<PseudoLabelAssignment>,
    pub confidence: ConfidencePair,
    pub tau: usize,
    pub positive: usize,
    pub negative: usize,
    pub negative_bag_samples: usize,
}

/// Instance scores `p_I` from the current head(s).
pub fn instance_scores(model: &ModelBundle, x: &Array2<f64>) -> Vec<Dist> {
    let feats = model.encoder.forward(x.view());
    model.instance_probs(feats.view())
}

/// Attention weights of every row, read as `p_B(y=1|x)`.
pub fn attention_scores(model: &ModelBundle, x: &Array2<f64>) -> Vec<f64> {
    let feats = model.encoder.forward(x.view());
    model.bag_head.attention(feats.view()).to_vec()
}

/// Scores target instances of positive bags with the frozen model, selects
/// pseudo-labels under `τ(epoch)` and adds as many negative-bag samples as
/// labels were taken from positive bags.
pub fn run_step3(
    model: &ModelBundle,
    data: &TrainingData,
    schedule: &ScheduleConfig,
    labeler: Labeler,
    epoch: usize,
    seed: u64,
) -> Result<Step3Outcome> {
    let tau = schedule_tau(epoch, schedule);
    let pos_x = data.target_x.select(Axis(0), &data.target_pos_rows);
    let pos_refs: Vec<InstanceRef> = data.target_pos_rows.iter().map(|&r| data.target_refs[r]).collect();

    let val_attention = attention_scores(model, &data.source_val_x);
    let val_inst: Vec<f64> = instance_scores(model, &data.source_val_x).iter().map(|p| p[1]).collect();
    let confidence = confidence_scores(&val_attention, &val_inst, &data.source_val_y)?;

    let mut assignments = match labeler {
        Labeler::Centroid => {
            let src_feats = model.encoder.forward(data.source_x.view());
            let tgt_feats = model.encoder.forward(pos_x.view());
            let src_rows: Vec<&[f64]> = src_feats.rows().into_iter().map(|r| r.to_slice().expect("contiguous")).collect();
            let tgt: Vec<(InstanceRef, &[f64])> = tgt_feats
                .rows()
                .into_iter()
                .zip(&pos_refs)
                .map(|(r, id)| (*id, r.to_slice().expect("contiguous")))
                .collect();
            let quota = CentroidQuota::Count([schedule.a_n * tau, schedule.a_p * tau]);
            centroid_pseudo_labels(&src_rows, &data.source_y, &tgt, quota, epoch)
        }
        _ => {
            let attention = attention_scores(model, &pos_x);
            let inst = instance_scores(model, &pos_x);
            let p_m: Vec<Dist> = match labeler {
                Labeler::Mix(rule) => mix_scores(&attention, &inst, confidence, rule),
                Labeler::BagHeadOnly => attention.iter().map(|&a| [1.0 - a, a]).collect(),
                Labeler::InstanceHeadsOnly => inst,
                Labeler::Centroid => unreachable!(),
            };
            let candidates: Vec<Candidate> = pos_refs
                .iter()
                .zip(&p_m)
                .map(|(id, p)| Candidate { instance: *id, p_m: *p })
                .collect();
            select_pseudo_labels(&candidates, tau, schedule.a_p, schedule.a_n, epoch)
        }
    };
    let positive = assignments.iter().filter(|a| a.label == 1).count();
    let negative = assignments.len() - positive;
    let neg_pool: Vec<InstanceRef> = data.target_neg_rows.iter().map(|&r| data.target_refs[r]).collect();
    let sampled = balance_negative_bag_sample(&neg_pool, assignments.len(), seed, epoch);
    let negative_bag_samples = sampled.len();
    assignments.extend(sampled);
    Ok(Step3Outcome {
        assignments,
        confidence,
        tau,
        positive,
        negative,
        negative_bag_samples,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    /// Model at the end of pretraining.
    pub pretrained: ModelBundle,
    pub history: TrainingHistory,
    /// Pseudo-labels used by the last adaptation epoch.
    pub final_pseudo_labels: Vec<PseudoLabelAssignment>,
}

/// The full pipeline: pretraining, twin-head init, then `epochs_step23`
/// rounds of pseudo-labeling followed by an adaptation epoch.
pub fn train(
    data: &TrainingData,
    cfg: &TrainConfig,
    options: PipelineOptions,
    mut monitor: Option<&mut Monitor>,
) -> std::result::Result<TrainOutcome, TrainFailure> {
    let mut history = TrainingHistory::default();
    let fail = |error: Error, history: TrainingHistory| TrainFailure { error, history };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, history));
    }
    if cfg.arch.input_dim != data.dim {
        return Err(fail(
            Error::DimensionMismatch {
                expected: cfg.arch.input_dim,
                actual: data.dim,
            },
            history,
        ));
    }
    let mut model = match ModelBundle::init(&cfg.arch, cfg.seed) {
        Ok(m) => m,
        Err(e) => return Err(fail(e, history)),
    };
    if let Err(e) = run_step1(&mut model, data, cfg, &mut history) {
        return Err(fail(e, history));
    }
    let pretrained = model.clone();
    info!("pretraining done after {} epochs", cfg.epochs_step1);

    init_twin_heads(&mut model, cfg.seed);
    let schedule = cfg.schedule_for(data.n_tpi());
    let mut state = AdaptState::new(data, cfg);
    let adapt = AdaptOptions {
        lambda: cfg.lambda,
        bags: true,
        feature_matching: options.feature_matching,
    };
    let mut labels = Vec::new();
    for m in 0..cfg.epochs_step23 {
        let mut record = EpochRecord {
            epoch: history.len(),
            phase: Some(Phase::Adapt),
            ..EpochRecord::default()
        };
        if options.pseudo_labels {
            // The twin heads are untrained in the first round; it scores with
            // the pretrained head instead.
            let scorer = if m == 0 { &pretrained } else { &model };
            let out = match run_step3(scorer, data, &schedule, options.labeler, m, cfg.seed) {
                Ok(o) => o,
                Err(e) => return Err(fail(e, history)),
            };
            record.tau = Some(out.tau);
            record.pseudo_positive = out.positive;
            record.pseudo_negative = out.negative;
            record.negative_bag_samples = out.negative_bag_samples;
            record.c_b = Some(out.confidence.c_b);
            record.c_i = Some(out.confidence.c_i);
            labels = out.assignments;
        }
        if let Some(mon) = monitor.as_deref_mut() {
            let rep = mon(&model, &labels);
            record.pseudo_label_precision = rep.pseudo_label_precision;
            record.target_pr_auc = rep.target_pr_auc;
        }
        let losses = match run_step2_epoch(&mut model, data, &labels, cfg, adapt, &mut state) {
            Ok(l) => l,
            Err(e) => return Err(fail(e, history)),
        };
        record.loss_bag_source = losses.bag_source;
        record.loss_bag_target = losses.bag_target;
        record.loss_instance = losses.instance;
        record.loss_adv = losses.adv;
        let vals = [losses.bag_source, losses.bag_target, losses.instance, losses.adv];
        if let Err(e) = check_finite(&model, &vals, "adapt", record.epoch) {
            history.push(record);
            return Err(fail(e, history));
        }
        record.source_val_pr_auc = source_val_pr_auc(&model, &data.source_val_x, &data.source_val_y);
        debug!(
            "adapt epoch {m}: tau {:?} +{} -{} L_I {:.4} L_adv {:.4}",
            record.tau, record.pseudo_positive, record.pseudo_negative, record.loss_instance, record.loss_adv
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        model,
        pretrained,
        history,
        final_pseudo_labels: labels,
    })
}
