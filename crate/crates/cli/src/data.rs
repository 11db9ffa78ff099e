//! Dataset preparation shared by every method of a run.

use std::path::Path;

use milda::container::{self, Provenance};
use milda::metrics::pr_auc;
use milda::model::{to_matrix, ModelBundle};
use milda::synth::{
    build_experiment_data, BagMode, ExperimentData, InstanceGroup, InstanceScorer,
};
use milda::trainer::{fit_supervised, instance_scores, SupervisedInputs, TrainConfig, TrainingData, TrainingHistory};
use milda::{validate_bag_consistency, DomainDataset, Split};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::config::SuiteConfig;
use crate::HarnessError;

/// Scores instances with a model trained on source labels only; embeds them
/// with its encoder.
pub struct SourceModelScorer {
    pub model: ModelBundle,
}

impl SourceModelScorer {
    pub fn train(data: &TrainingData, cfg: &TrainConfig) -> milda::Result<Self> {
        let mut model = ModelBundle::init(&cfg.arch, cfg.seed)?;
        fit_supervised(
            &mut model,
            SupervisedInputs {
                bags: &[],
                x: &data.source_x,
                y: &data.source_y,
            },
            cfg,
            cfg.epochs_step1,
            milda::rng::streams::SHUFFLE,
            &mut TrainingHistory::default(),
            None,
        )?;
        Ok(Self { model })
    }

    fn matrix(&self, group: &InstanceGroup) -> Array2<f64> {
        to_matrix(group.features.iter().map(Vec::as_slice), self.model.arch.input_dim)
    }
}

impl InstanceScorer for SourceModelScorer {
    fn embed(&self, group: &InstanceGroup) -> Vec<Vec<f64>> {
        let feats = self.model.encoder.forward(self.matrix(group).view());
        feats.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn score(&self, group: &InstanceGroup) -> Vec<f64> {
        instance_scores(&self.model, &self.matrix(group)).iter().map(|p| p[1]).collect()
    }
}

/// Everything a method needs: the datasets, training matrices, and the
/// evaluation-only target labels.
pub struct Prepared {
    pub data: ExperimentData,
    pub training: TrainingData,
    pub test_x: Array2<f64>,
    pub test_y: Vec<u8>,
    /// Oracle labels of the target training rows, in `training.target_x` order.
    /// Read only by ideal_case training and by audits.
    pub target_train_y: Vec<u8>,
    pub dataset_hash: String,
}

fn oracle_labels(ds: &DomainDataset) -> Result<Vec<u8>, HarnessError> {
    ds.instances()
        .map(|i| {
            i.oracle_label()
                .ok_or_else(|| HarnessError::Config(format!("instance {:?} has no oracle label", i.id())))
        })
        .collect()
}

pub fn dataset_hash(data: &ExperimentData) -> milda::Result<String> {
    let mut h = Sha256::new();
    for ds in [&data.source_train, &data.source_val, &data.target_train, &data.target_test] {
        h.update(container::content_hash(ds)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// Builds the datasets of `cfg`. Clustered target bags are scored by a
/// source-only model trained on the (mode-independent) source splits.
pub fn build_data(cfg: &SuiteConfig) -> Result<ExperimentData, HarnessError> {
    let mut dc = cfg.data_config();
    if dc.target_bags.mode == BagMode::Random {
        let data = build_experiment_data(&dc, None)?;
        for ds in [&data.source_train, &data.source_val, &data.target_train, &data.target_test] {
            let v = validate_bag_consistency(ds);
            if !v.is_empty() {
                return Err(HarnessError::Core(milda::Error::InvalidDataset(format!(
                    "{} consistency violations, first {:?}",
                    v.len(),
                    v[0]
                ))));
            }
        }
        return Ok(data);
    }
    let clustered = dc.target_bags.clone();
    dc.target_bags.mode = BagMode::Random;
    let pre = build_experiment_data(&dc, None)?;
    let training = TrainingData::new(&pre.source_train, &pre.source_val, &pre.target_train)?;
    let scorer = SourceModelScorer::train(&training, &cfg.train_config(cfg.generator.seed))?;
    dc.target_bags = clustered;
    Ok(build_experiment_data(&dc, Some(&scorer))?)
}

impl Prepared {
    pub fn new(data: ExperimentData) -> Result<Self, HarnessError> {
        let training = TrainingData::new(&data.source_train, &data.source_val, &data.target_train)?;
        let dim = training.dim;
        let test_x = to_matrix(data.target_test.instances().map(|i| i.features()), dim);
        let test_y = oracle_labels(&data.target_test)?;
        let target_train_y = oracle_labels(&data.target_train)?;
        let dataset_hash = dataset_hash(&data)?;
        Ok(Self {
            data,
            training,
            test_x,
            test_y,
            target_train_y,
            dataset_hash,
        })
    }

    pub fn build(cfg: &SuiteConfig) -> Result<Self, HarnessError> {
        Self::new(build_data(cfg)?)
    }

    /// Target-test PR-AUC of `p(y=1)` scores.
    pub fn test_pr_auc(&self, scores: &[f64]) -> Option<f64> {
        pr_auc(scores, &self.test_y).ok()
    }
}

/// Writes the four datasets as containers under `dir`.
pub fn save_datasets(dir: &Path, data: &ExperimentData, cfg: &SuiteConfig) -> Result<Vec<(Split, String)>, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let prov = Provenance {
        seed: Some(cfg.generator.seed),
        generator: Some(serde_json::to_value(&cfg.generator)?),
    };
    let mut out = Vec::new();
    for (name, ds) in [
        ("source_train", &data.source_train),
        ("source_val", &data.source_val),
        ("target_train", &data.target_train),
        ("target_test", &data.target_test),
    ] {
        container::save(&dir.join(format!("{name}.milda")), ds, &prov)?;
        out.push((ds.split(), container::content_hash(ds)?));
    }
    Ok(out)
}
