//! The comparison methods and ablations, each a wiring of the core trainer.

use std::fmt;

use milda::metrics::{accuracy, decide};
use milda::model::{Dist, ModelBundle};
use milda::pseudo::MixRule;
use milda::rng::streams;
use milda::trainer::{
    fit_supervised, init_twin_heads, instance_scores, attention_scores, run_step1, run_step2_epoch, train,
    AdaptOptions, AdaptState, EpochRecord, Labeler, MonitorReport, Phase, PipelineOptions, SupervisedInputs,
    TrainConfig, TrainingHistory,
};
use milda::{LabelOrigin, PseudoLabelAssignment};
use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Prepared;
use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    AttentionMil,
    SourceOnly,
    Mcdda,
    Plda,
    OursStep1,
    Ours,
    IdealCase,
    AblationNoPseudo,
    AblationNoMatching,
    AblationFiOnly,
    AblationFbOnly,
    AblationNoConf,
    AblationPfan,
}

impl MethodName {
    pub const ALL: [MethodName; 13] = [
        MethodName::AttentionMil,
        MethodName::SourceOnly,
        MethodName::Mcdda,
        MethodName::Plda,
        MethodName::OursStep1,
        MethodName::Ours,
        MethodName::IdealCase,
        MethodName::AblationNoPseudo,
        MethodName::AblationNoMatching,
        MethodName::AblationFiOnly,
        MethodName::AblationFbOnly,
        MethodName::AblationNoConf,
        MethodName::AblationPfan,
    ];

    pub const COMPARISON: [MethodName; 7] = [
        MethodName::AttentionMil,
        MethodName::SourceOnly,
        MethodName::Mcdda,
        MethodName::Plda,
        MethodName::OursStep1,
        MethodName::Ours,
        MethodName::IdealCase,
    ];

    /// The ablations, with the full pipeline as reference.
    pub const ABLATION: [MethodName; 7] = [
        MethodName::Ours,
        MethodName::AblationNoPseudo,
        MethodName::AblationNoMatching,
        MethodName::AblationFiOnly,
        MethodName::AblationFbOnly,
        MethodName::AblationNoConf,
        MethodName::AblationPfan,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::AttentionMil => "attention_mil",
            MethodName::SourceOnly => "source_only",
            MethodName::Mcdda => "mcdda",
            MethodName::Plda => "plda",
            MethodName::OursStep1 => "ours_step1",
            MethodName::Ours => "ours",
            MethodName::IdealCase => "ideal_case",
            MethodName::AblationNoPseudo => "ablation_no_pseudo",
            MethodName::AblationNoMatching => "ablation_no_matching",
            MethodName::AblationFiOnly => "ablation_fi_only",
            MethodName::AblationFbOnly => "ablation_fb_only",
            MethodName::AblationNoConf => "ablation_no_conf",
            MethodName::AblationPfan => "ablation_pfan",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Display name in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            MethodName::AttentionMil => "Attention MIL",
            MethodName::SourceOnly => "Source only",
            MethodName::Mcdda => "MCDDA",
            MethodName::Plda => "PLDA",
            MethodName::OursStep1 => "Ours (Step 1)",
            MethodName::Ours => "Ours",
            MethodName::IdealCase => "Ideal case",
            MethodName::AblationNoPseudo => "w/o pseudo-label",
            MethodName::AblationNoMatching => "w/o feature matching",
            MethodName::AblationFiOnly => "F_I only",
            MethodName::AblationFbOnly => "F_B only",
            MethodName::AblationNoConf => "w/o conf. score",
            MethodName::AblationPfan => "PFAN (centroid)",
        }
    }

    /// Pipeline switches for the methods that run the full trainer.
    pub fn pipeline(self) -> Option<PipelineOptions> {
        let base = PipelineOptions::default();
        Some(match self {
            MethodName::Ours => base,
            MethodName::AblationNoPseudo => PipelineOptions {
                pseudo_labels: false,
                ..base
            },
            MethodName::AblationNoMatching => PipelineOptions {
                feature_matching: false,
                ..base
            },
            MethodName::AblationFiOnly => PipelineOptions {
                labeler: Labeler::InstanceHeadsOnly,
                ..base
            },
            MethodName::AblationFbOnly => PipelineOptions {
                labeler: Labeler::BagHeadOnly,
                ..base
            },
            MethodName::AblationNoConf => PipelineOptions {
                labeler: Labeler::Mix(MixRule::PlainSum),
                ..base
            },
            MethodName::AblationPfan => PipelineOptions {
                labeler: Labeler::Centroid,
                ..base
            },
            _ => return None,
        })
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: MethodName,
    pub seed: u64,
    pub accuracy: f64,
    pub pr_auc: f64,
    pub dataset_hash: String,
}

/// A finished method run.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub row: MetricRow,
    /// Target-test instance scores `p(y=1)`, test instances in order.
    pub test_scores: Vec<f64>,
    pub history: TrainingHistory,
    pub model: ModelBundle,
    /// End-of-pretraining model, for the methods that have one.
    pub pretrained: Option<ModelBundle>,
}

fn evaluate(
    method: MethodName,
    seed: u64,
    prep: &Prepared,
    probs: &[Dist],
) -> Result<(MetricRow, Vec<f64>), HarnessError> {
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    let preds: Vec<u8> = probs.iter().map(|&p| decide(p)).collect();
    let acc = accuracy(&preds, &prep.test_y)?;
    let auc = milda::metrics::pr_auc(&scores, &prep.test_y)?;
    Ok((
        MetricRow {
            method,
            seed,
            accuracy: acc,
            pr_auc: auc,
            dataset_hash: prep.dataset_hash.clone(),
        },
        scores,
    ))
}

/// Precision of the positive-bag pseudo-labels and target-test PR-AUC,
/// logged each adaptation round.
pub fn monitor_report(prep: &Prepared, model: &ModelBundle, labels: &[PseudoLabelAssignment]) -> MonitorReport {
    let (mut n, mut ok) = (0usize, 0usize);
    for a in labels.iter().filter(|a| a.origin == LabelOrigin::PositiveBag) {
        if let Some(row) = prep.training.target_row(&a.instance) {
            n += 1;
            ok += usize::from(prep.target_train_y[row] == a.label);
        }
    }
    let scores: Vec<f64> = instance_scores(model, &prep.test_x).iter().map(|p| p[1]).collect();
    MonitorReport {
        pseudo_label_precision: (n > 0).then(|| ok as f64 / n as f64),
        target_pr_auc: prep.test_pr_auc(&scores),
    }
}

fn tagged(method: MethodName, seed: u64) -> impl Fn(milda::Error) -> HarnessError {
    move |source| HarnessError::Method {
        method,
        seed,
        source,
    }
}

/// Epochs for the single-phase baselines: the same budget as the full pipeline.
fn single_phase_epochs(cfg: &TrainConfig) -> usize {
    cfg.epochs_step1 + cfg.epochs_step23
}

/// Trains `method` with model seed `cfg.seed` and evaluates it on the
/// target test split.
pub fn run_method(method: MethodName, prep: &Prepared, cfg: &TrainConfig) -> Result<MethodRun, HarnessError> {
    let seed = cfg.seed;
    let tag = tagged(method, seed);
    let data = &prep.training;
    let mut history = TrainingHistory::default();
    let mut pretrained = None;
    let no_bags: &[milda::losses::BagInput] = &[];
    let empty_x = ndarray::Array2::<f64>::zeros((0, data.dim));

    let model = match method {
        MethodName::AttentionMil => {
            let mut model = ModelBundle::init(&cfg.arch, seed).map_err(&tag)?;
            fit_supervised(
                &mut model,
                SupervisedInputs {
                    bags: &data.target_bags,
                    x: &empty_x,
                    y: &[],
                },
                cfg,
                single_phase_epochs(cfg),
                streams::SHUFFLE,
                &mut history,
                None,
            )
            .map_err(&tag)?;
            let probs: Vec<Dist> = attention_scores(&model, &prep.test_x).iter().map(|&a| [1.0 - a, a]).collect();
            let (row, test_scores) = evaluate(method, seed, prep, &probs)?;
            return Ok(MethodRun {
                row,
                test_scores,
                history,
                model,
                pretrained,
            });
        }
        MethodName::SourceOnly | MethodName::IdealCase => {
            let mut model = ModelBundle::init(&cfg.arch, seed).map_err(&tag)?;
            let (x, y) = if method == MethodName::IdealCase {
                (&data.target_x, prep.target_train_y.as_slice())
            } else {
                (&data.source_x, data.source_y.as_slice())
            };
            fit_supervised(
                &mut model,
                SupervisedInputs { bags: no_bags, x, y },
                cfg,
                single_phase_epochs(cfg),
                streams::SHUFFLE,
                &mut history,
                Some((&data.source_val_x, &data.source_val_y)),
            )
            .map_err(&tag)?;
            model
        }
        MethodName::Plda => {
            let mut model = ModelBundle::init(&cfg.arch, seed).map_err(&tag)?;
            let val = Some((&data.source_val_x, data.source_val_y.as_slice()));
            fit_supervised(
                &mut model,
                SupervisedInputs {
                    bags: no_bags,
                    x: &data.source_x,
                    y: &data.source_y,
                },
                cfg,
                cfg.epochs_step1,
                streams::SHUFFLE,
                &mut history,
                val,
            )
            .map_err(&tag)?;
            pretrained = Some(model.clone());
            let pseudo: Vec<u8> = instance_scores(&model, &data.target_x).into_iter().map(decide).collect();
            let x = concatenate(Axis(0), &[data.source_x.view(), data.target_x.view()]).expect("matching widths");
            let y: Vec<u8> = data.source_y.iter().chain(&pseudo).copied().collect();
            fit_supervised(
                &mut model,
                SupervisedInputs { bags: no_bags, x: &x, y: &y },
                cfg,
                cfg.epochs_step23,
                streams::SHUFFLE + 2,
                &mut history,
                val,
            )
            .map_err(&tag)?;
            model
        }
        MethodName::Mcdda => {
            let mut model = ModelBundle::init(&cfg.arch, seed).map_err(&tag)?;
            init_twin_heads(&mut model, seed);
            let mut state = AdaptState::new(data, cfg);
            let opts = AdaptOptions {
                lambda: cfg.lambda,
                bags: false,
                feature_matching: true,
            };
            for _ in 0..single_phase_epochs(cfg) {
                let l = run_step2_epoch(&mut model, data, &[], cfg, opts, &mut state).map_err(&tag)?;
                if !(l.instance.is_finite() && l.adv.is_finite()) {
                    return Err(tag(milda::Error::Diverged {
                        phase: "mcdda",
                        epoch: history.len(),
                    }));
                }
                history.push(EpochRecord {
                    epoch: history.len(),
                    phase: Some(Phase::Adapt),
                    loss_instance: l.instance,
                    loss_adv: l.adv,
                    ..EpochRecord::default()
                });
            }
            model
        }
        MethodName::OursStep1 => {
            let mut model = ModelBundle::init(&cfg.arch, seed).map_err(&tag)?;
            run_step1(&mut model, data, cfg, &mut history).map_err(&tag)?;
            model
        }
        _ => {
            let options = method.pipeline().expect("pipeline method");
            let mut monitor = |m: &ModelBundle, l: &[PseudoLabelAssignment]| monitor_report(prep, m, l);
            let out = train(data, cfg, options, Some(&mut monitor)).map_err(|f| tag(f.error))?;
            history = out.history;
            pretrained = Some(out.pretrained);
            out.model
        }
    };
    let probs = instance_scores(&model, &prep.test_x);
    let (row, test_scores) = evaluate(method, seed, prep, &probs)?;
    Ok(MethodRun {
        row,
        test_scores,
        history,
        model,
        pretrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in MethodName::ALL {
            assert_eq!(MethodName::parse(m.as_str()), Some(m));
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert_eq!(MethodName::parse("nope"), None);
    }

    #[test]
    fn ablation_wiring() {
        assert_eq!(MethodName::Ours.pipeline(), Some(PipelineOptions::default()));
        assert!(!MethodName::AblationNoPseudo.pipeline().unwrap().pseudo_labels);
        assert!(!MethodName::AblationNoMatching.pipeline().unwrap().feature_matching);
        assert_eq!(
            MethodName::AblationNoConf.pipeline().unwrap().labeler,
            Labeler::Mix(MixRule::PlainSum)
        );
        assert_eq!(MethodName::AblationPfan.pipeline().unwrap().labeler, Labeler::Centroid);
        for m in MethodName::COMPARISON {
            assert_eq!(m.pipeline().is_some(), m == MethodName::Ours);
        }
    }
}
