//! Instances, bags and datasets shared by every stage of the pipeline.
//!
//! Labels are `{0, 1}` integers throughout. Source instances always carry
//! their oracle label; target instances carry one only for evaluation, and
//! [`training_view`] strips it before any training code sees the data.

use std::cell::Cell;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn code(self) -> i64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            0 => Some(Domain::Source),
            1 => Some(Domain::Target),
            _ => None,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// Stable handle joining scores and pseudo-labels back to an instance.
/// Ordering is `(bag_id, index_in_bag)`, which is also the tie-break order
/// for every top-k selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub bag_id: u64,
    pub index_in_bag: usize,
}

thread_local! {
    static TARGET_LABEL_READS: Cell<u64> = const { Cell::new(0) };
}

/// Counts reads of target oracle labels made through [`Instance::oracle_label`]
/// on the current thread. Training code must never bump it.
pub mod label_audit {
    use super::TARGET_LABEL_READS;

    pub fn reset() {
        TARGET_LABEL_READS.with(|c| c.set(0));
    }

    pub fn target_reads() -> u64 {
        TARGET_LABEL_READS.with(|c| c.get())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    features: Vec<f64>,
    oracle_label: Option<u8>,
    domain: Domain,
    bag_id: u64,
    index_in_bag: usize,
}

impl Instance {
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn bag_id(&self) -> u64 {
        self.bag_id
    }

    pub fn index_in_bag(&self) -> usize {
        self.index_in_bag
    }

    pub fn id(&self) -> InstanceRef {
        InstanceRef {
            bag_id: self.bag_id,
            index_in_bag: self.index_in_bag,
        }
    }

    /// The oracle label, if present. Reads of present target labels are
    /// counted by [`label_audit`].
    pub fn oracle_label(&self) -> Option<u8> {
        if self.domain == Domain::Target && self.oracle_label.is_some() {
            TARGET_LABEL_READS.with(|c| c.set(c.get() + 1));
        }
        self.oracle_label
    }

    pub(crate) fn raw_oracle_label(&self) -> Option<u8> {
        self.oracle_label
    }

    pub fn has_oracle_label(&self) -> bool {
        self.oracle_label.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    id: u64,
    label: u8,
    domain: Domain,
    instances: Vec<Instance>,
}

impl Bag {
    /// Builds a bag from `(features, oracle_label)` members. Instance
    /// positions are assigned in the given order.
    pub fn new(
        id: u64,
        domain: Domain,
        label: u8,
        members: Vec<(Vec<f64>, Option<u8>)>,
    ) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidBag { bag_id: id, reason };
        if members.is_empty() {
            return Err(invalid("bag must hold at least one instance".into()));
        }
        if label > 1 {
            return Err(invalid(format!("bag label {label} is not binary")));
        }
        let dim = members[0].0.len();
        let mut instances = Vec::with_capacity(members.len());
        for (index_in_bag, (features, oracle_label)) in members.into_iter().enumerate() {
            if features.len() != dim {
                return Err(invalid(format!(
                    "instance {index_in_bag} has dimension {} (expected {dim})",
                    features.len()
                )));
            }
            if let Some(y) = oracle_label {
                if y > 1 {
                    return Err(invalid(format!("instance label {y} is not binary")));
                }
            } else if domain == Domain::Source {
                return Err(invalid("source instances must carry oracle labels".into()));
            }
            instances.push(Instance {
                features,
                oracle_label,
                domain,
                bag_id: id,
                index_in_bag,
            });
        }
        Ok(Self {
            id,
            label,
            domain,
            instances,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances[0].features.len()
    }

    fn stripped(&self) -> Self {
        let mut bag = self.clone();
        if bag.domain == Domain::Target {
            for inst in &mut bag.instances {
                inst.oracle_label = None;
            }
        }
        bag
    }
}

/// An ordered list of bags plus the split it belongs to. Counts are always
/// derived from the bag list.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    bags: Vec<Bag>,
    split: Split,
}

impl DomainDataset {
    pub fn new(bags: Vec<Bag>, split: Split) -> Result<Self> {
        if let Some(first) = bags.first() {
            let dim = first.dim();
            if let Some(bad) = bags.iter().find(|b| b.dim() != dim) {
                return Err(Error::InvalidDataset(format!(
                    "bag {} has dimension {} but dataset dimension is {dim}",
                    bad.id,
                    bad.dim()
                )));
            }
        }
        let mut ids: Vec<u64> = bags.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidDataset("duplicate bag ids".into()));
        }
        Ok(Self { bags, split })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Feature dimension, or `None` for an empty dataset.
    pub fn dim(&self) -> Option<usize> {
        self.bags.first().map(Bag::dim)
    }

    pub fn n_bags(&self) -> usize {
        self.bags.len()
    }

    /// Per-bag instance counts, in bag order.
    pub fn instance_counts(&self) -> Vec<usize> {
        self.bags.iter().map(Bag::len).collect()
    }

    pub fn n_instances(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.bags.iter().flat_map(|b| b.instances.iter())
    }

    pub fn positive_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.label == 1)
    }

    pub fn negative_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.label == 0)
    }

    /// Fraction of instances that carry an oracle label.
    pub fn oracle_coverage(&self) -> f64 {
        let n = self.n_instances();
        if n == 0 {
            return 1.0;
        }
        self.instances().filter(|i| i.has_oracle_label()).count() as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    /// Bag label disagrees with the max over its instance labels.
    LabelMismatch { bag_id: u64, bag_label: u8, max_instance_label: u8 },
    /// Some instance labels are missing, so the bag cannot be checked.
    Unverifiable { bag_id: u64, missing: usize },
}

/// Checks `Y == max_j y_j` for every bag.
pub fn validate_bag_consistency(dataset: &DomainDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    for bag in &dataset.bags {
        let missing = bag.instances.iter().filter(|i| i.oracle_label.is_none()).count();
        if missing > 0 {
            out.push(Violation::Unverifiable {
                bag_id: bag.id,
                missing,
            });
            continue;
        }
        let max_label = bag
            .instances
            .iter()
            .filter_map(|i| i.oracle_label)
            .max()
            .unwrap_or(0);
        if max_label != bag.label {
            out.push(Violation::LabelMismatch {
                bag_id: bag.id,
                bag_label: bag.label,
                max_instance_label: max_label,
            });
        }
    }
    out
}

/// Copy of `dataset` with every target instance label removed.
pub fn training_view(dataset: &DomainDataset) -> DomainDataset {
    DomainDataset {
        bags: dataset.bags.iter().map(Bag::stripped).collect(),
        split: dataset.split,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    PositiveBag,
    NegativeBag,
}

/// One pseudo-label fed to the instance loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    pub instance: InstanceRef,
    pub label: u8,
    /// Mixed score of the assigned class. Negative-bag samples are certain
    /// negatives and carry 1.0.
    pub mix_score: f64,
    pub epoch: usize,
    pub origin: LabelOrigin,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(id: u64, domain: Domain, label: u8, labels: &[u8]) -> Bag {
        let members = labels
            .iter()
            .enumerate()
            .map(|(j, &y)| (vec![j as f64, id as f64], Some(y)))
            .collect();
        Bag::new(id, domain, label, members).unwrap()
    }

    #[test]
    fn consistent_bags_pass() {
        let ds = DomainDataset::new(
            vec![
                bag(0, Domain::Source, 1, &[0, 0, 1]),
                bag(1, Domain::Source, 0, &[0, 0, 0]),
            ],
            Split::Train,
        )
        .unwrap();
        assert!(validate_bag_consistency(&ds).is_empty());
    }

    #[test]
    fn mismatched_bag_is_reported_once() {
        let ds = DomainDataset::new(vec![bag(3, Domain::Source, 0, &[0, 1, 0])], Split::Train)
            .unwrap();
        assert_eq!(
            validate_bag_consistency(&ds),
            vec![Violation::LabelMismatch {
                bag_id: 3,
                bag_label: 0,
                max_instance_label: 1
            }]
        );
    }

    #[test]
    fn missing_labels_are_unverifiable() {
        let ds = DomainDataset::new(vec![bag(0, Domain::Target, 1, &[0, 1])], Split::Train)
            .unwrap();
        let view = training_view(&ds);
        assert_eq!(
            validate_bag_consistency(&view),
            vec![Violation::Unverifiable {
                bag_id: 0,
                missing: 2
            }]
        );
    }

    #[test]
    fn training_view_strips_target_only() {
        let ds = DomainDataset::new(
            vec![
                bag(0, Domain::Source, 1, &[0, 1]),
                bag(1, Domain::Target, 1, &[1, 0]),
            ],
            Split::Train,
        )
        .unwrap();
        let view = training_view(&ds);
        assert_eq!(view.bags()[0], ds.bags()[0]);
        assert!(view.bags()[1].instances().iter().all(|i| !i.has_oracle_label()));
        assert_eq!(view.bags()[1].label(), 1);
        // original untouched, view idempotent
        assert_eq!(ds.bags()[1].instances()[0].oracle_label, Some(1));
        assert_eq!(training_view(&view), view);
    }

    #[test]
    fn source_dataset_view_is_identity() {
        let ds = DomainDataset::new(vec![bag(0, Domain::Source, 0, &[0, 0])], Split::Train)
            .unwrap();
        assert_eq!(training_view(&ds), ds);
        assert_eq!(ds.oracle_coverage(), 1.0);
    }

    #[test]
    fn bag_rejects_bad_input() {
        assert!(Bag::new(0, Domain::Source, 0, vec![]).is_err());
        assert!(Bag::new(0, Domain::Source, 2, vec![(vec![0.0], Some(0))]).is_err());
        assert!(Bag::new(0, Domain::Source, 0, vec![(vec![0.0], None)]).is_err());
        assert!(
            Bag::new(0, Domain::Target, 0, vec![(vec![0.0], None), (vec![0.0, 1.0], None)])
                .is_err()
        );
    }

    #[test]
    fn audit_counts_target_reads_only() {
        label_audit::reset();
        let s = bag(0, Domain::Source, 1, &[1]);
        let t = bag(1, Domain::Target, 1, &[1]);
        let _ = s.instances()[0].oracle_label();
        assert_eq!(label_audit::target_reads(), 0);
        let _ = t.instances()[0].oracle_label();
        assert_eq!(label_audit::target_reads(), 1);
        let stripped = t.stripped();
        let _ = stripped.instances()[0].oracle_label();
        assert_eq!(label_audit::target_reads(), 1);
    }

    #[test]
    fn counts_are_derived() {
        let ds = DomainDataset::new(
            vec![
                bag(0, Domain::Target, 1, &[0, 1, 0]),
                bag(1, Domain::Target, 0, &[0]),
            ],
            Split::Test,
        )
        .unwrap();
        assert_eq!(ds.instance_counts(), vec![3, 1]);
        assert_eq!(ds.n_instances(), 4);
        assert_eq!(ds.positive_bags().count(), 1);
        assert!(DomainDataset::new(
            vec![bag(0, Domain::Target, 0, &[0]), bag(0, Domain::Target, 0, &[0])],
            Split::Test
        )
        .is_err());
    }
}
