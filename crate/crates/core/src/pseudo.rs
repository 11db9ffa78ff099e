//! Confidence-weighted pseudo-labeling of target instances.
//!
//! Each round mixes the bag head's attention score and the instance heads'
//! prediction into one score per target instance, keeps the confident
//! candidates from positive bags under a growing cap `τ`, and pads the set
//! with an equal number of certain negatives sampled from negative bags.

use log::warn;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pr_auc;
use crate::model::Dist;
use crate::rng::{self, streams};
use crate::types::{InstanceRef, LabelOrigin, PseudoLabelAssignment};

/// PR-AUC of each head on labeled source validation instances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePair {
    pub c_b: f64,
    pub c_i: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Epochs over which `τ` ramps from `n_min` to `n_max`.
    pub ramp_epochs: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub a_p: usize,
    pub a_n: usize,
}

impl ScheduleConfig {
    /// `A_p = A_n = 1`, `τ` from `n_tpi/10` to `n_tpi/4`.
    pub fn pathology(n_tpi: usize) -> Self {
        Self {
            ramp_epochs: 20,
            n_min: (n_tpi / 10).max(1),
            n_max: (n_tpi / 4).max(1),
            a_p: 1,
            a_n: 1,
        }
    }

    /// `A_p = 1`, `A_n = 3`, `τ` from `n_tpi/30` to `n_tpi/10`.
    pub fn digits(n_tpi: usize) -> Self {
        Self {
            ramp_epochs: 20,
            n_min: (n_tpi / 30).max(1),
            n_max: (n_tpi / 10).max(1),
            a_p: 1,
            a_n: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ramp_epochs == 0 || self.n_min == 0 || self.a_p == 0 || self.a_n == 0 {
            return Err(Error::InvalidConfig("schedule values must be positive".into()));
        }
        if self.n_min > self.n_max {
            return Err(Error::InvalidConfig(format!(
                "schedule n_min {} exceeds n_max {}",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }
}

/// `τ(m) = min(N_min + ⌊m (N_max - N_min) / M⌋, N_max)`.
pub fn schedule_tau(epoch: usize, cfg: &ScheduleConfig) -> usize {
    let span = cfg.n_max.saturating_sub(cfg.n_min);
    let ramp = epoch.saturating_mul(span) / cfg.ramp_epochs.max(1);
    (cfg.n_min + ramp).min(cfg.n_max)
}

/// PR-AUC of the bag-head scores and of the instance-head scores. A head
/// whose PR-AUC is undefined (no positives) gets 0.5.
pub fn confidence_scores(bag_scores: &[f64], inst_scores: &[f64], labels: &[u8]) -> Result<ConfidencePair> {
    let score = |s: &[f64], which: &str| match pr_auc(s, labels) {
        Ok(v) => Ok(v),
        Err(Error::Undefined(_)) => {
            warn!("{which} confidence undefined on source validation; using 0.5");
            Ok(0.5)
        }
        Err(e) => Err(e),
    };
    Ok(ConfidencePair {
        c_b: score(bag_scores, "bag-head")?,
        c_i: score(inst_scores, "instance-head")?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixRule {
    /// `(c_B p_B + c_I p_I) / (c_B + c_I)`.
    #[default]
    Confidence,
    /// `p_B + p_I`, ignoring the confidences.
    PlainSum,
}

/// Mixed score per instance. `attention` holds the bag-head score
/// `p_B(y=1|x)` and `inst` the instance-head distribution.
pub fn mix_scores(attention: &[f64], inst: &[Dist], conf: ConfidencePair, rule: MixRule) -> Vec<Dist> {
    assert_eq!(attention.len(), inst.len());
    let (wb, wi) = match rule {
        MixRule::PlainSum => (1.0, 1.0),
        MixRule::Confidence => {
            let total = conf.c_b + conf.c_i;
            if total > 0.0 {
                (conf.c_b / total, conf.c_i / total)
            } else {
                warn!("both confidences are zero; mixing with equal weights");
                (0.5, 0.5)
            }
        }
    };
    attention
        .iter()
        .zip(inst)
        .map(|(&a, p)| [wb * (1.0 - a) + wi * p[0], wb * a + wi * p[1]])
        .collect()
}

/// A target instance from a positive bag with its mixed score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub instance: InstanceRef,
    pub p_m: Dist,
}

fn is_positive_candidate(p: Dist) -> bool {
    p[0] <= p[1] && p[1] >= 0.5
}

fn is_negative_candidate(p: Dist) -> bool {
    p[1] <= p[0] && p[0] >= 0.5
}

/// Top `a_p·τ` positive and `a_n·τ` negative candidates by mixed score,
/// ties broken by instance order. Instances meeting both candidate rules
/// are skipped.
pub fn select_pseudo_labels(
    candidates: &[Candidate],
    tau: usize,
    a_p: usize,
    a_n: usize,
    epoch: usize,
) -> Vec<PseudoLabelAssignment> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for c in candidates {
        match (is_positive_candidate(c.p_m), is_negative_candidate(c.p_m)) {
            (true, false) => pos.push(c),
            (false, true) => neg.push(c),
            _ => {}
        }
    }
    let pick = |mut list: Vec<&Candidate>, class: usize, quota: usize| {
        list.sort_by(|a, b| {
            b.p_m[class]
                .total_cmp(&a.p_m[class])
                .then(a.instance.cmp(&b.instance))
        });
        list.into_iter()
            .take(quota)
            .map(|c| PseudoLabelAssignment {
                instance: c.instance,
                label: class as u8,
                mix_score: c.p_m[class],
                epoch,
                origin: LabelOrigin::PositiveBag,
            })
            .collect::<Vec<_>>()
    };
    let mut out = pick(pos, 1, a_p.saturating_mul(tau));
    out.extend(pick(neg, 0, a_n.saturating_mul(tau)));
    out
}

/// Uniform sample without replacement of `min(count, pool)` negative-bag
/// instances, returned in instance order and labeled 0.
pub fn balance_negative_bag_sample(
    pool: &[InstanceRef],
    count: usize,
    seed: u64,
    epoch: usize,
) -> Vec<PseudoLabelAssignment> {
    let amount = count.min(pool.len());
    let mut rng = rng::stream(seed.wrapping_add((epoch as u64) << 32), streams::NEGATIVE_SAMPLE);
    let mut picked: Vec<InstanceRef> = index::sample(&mut rng, pool.len(), amount)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort();
    picked
        .into_iter()
        .map(|instance| PseudoLabelAssignment {
            instance,
            label: 0,
            mix_score: 1.0,
            epoch,
            origin: LabelOrigin::NegativeBag,
        })
        .collect()
}

/// How many target instances the centroid rule labels per class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CentroidQuota {
    /// This fraction of the instances nearest to each centroid.
    Fraction(f64),
    /// At most this many per class, indexed by label.
    Count([usize; 2]),
}

/// Labels target instances by their nearest source class centroid, keeping
/// the closest ones per class. Equidistant points go to the negative class.
/// A class with no source instances is skipped.
pub fn centroid_pseudo_labels(
    source_features: &[&[f64]],
    source_labels: &[u8],
    target: &[(InstanceRef, &[f64])],
    quota: CentroidQuota,
    epoch: usize,
) -> Vec<PseudoLabelAssignment> {
    assert_eq!(source_features.len(), source_labels.len());
    let dim = source_features.first().map_or(0, |f| f.len());
    let mut centroids: [Option<Vec<f64>>; 2] = [None, None];
    for class in 0..2u8 {
        let members: Vec<&[f64]> = source_features
            .iter()
            .zip(source_labels)
            .filter(|(_, &y)| y == class)
            .map(|(f, _)| *f)
            .collect();
        if members.is_empty() {
            warn!("no source instances of class {class}; skipping its centroid");
            continue;
        }
        let mut c = vec![0.0; dim];
        for m in &members {
            for (ci, v) in c.iter_mut().zip(m.iter()) {
                *ci += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= members.len() as f64);
        centroids[class as usize] = Some(c);
    }
    let dist = |c: &Option<Vec<f64>>, x: &[f64]| {
        c.as_ref().map_or(f64::INFINITY, |c| {
            c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
    };
    let mut per_class: [Vec<(f64, InstanceRef)>; 2] = [Vec::new(), Vec::new()];
    for (id, x) in target {
        let d0 = dist(&centroids[0], x);
        let d1 = dist(&centroids[1], x);
        if d0.is_infinite() && d1.is_infinite() {
            continue;
        }
        if d1 < d0 {
            per_class[1].push((d1, *id));
        } else {
            per_class[0].push((d0, *id));
        }
    }
    let mut out = Vec::new();
    for class in [1usize, 0] {
        let list = &mut per_class[class];
        list.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = match quota {
            CentroidQuota::Fraction(f) => (f.clamp(0.0, 1.0) * list.len() as f64).floor() as usize,
            CentroidQuota::Count(c) => c[class].min(list.len()),
        };
        out.extend(list.iter().take(keep).map(|&(d, instance)| PseudoLabelAssignment {
            instance,
            label: class as u8,
            mix_score: 1.0 / (1.0 + d),
            epoch,
            origin: LabelOrigin::PositiveBag,
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            ramp_epochs: 20,
            n_min: 10,
            n_max: 40,
            a_p: 1,
            a_n: 1,
        }
    }

    fn r(bag: u64, i: usize) -> InstanceRef {
        InstanceRef {
            bag_id: bag,
            index_in_bag: i,
        }
    }

    #[test]
    fn tau_examples() {
        assert_eq!(schedule_tau(0, &cfg()), 10);
        assert_eq!(schedule_tau(10, &cfg()), 25);
        assert_eq!(schedule_tau(20, &cfg()), 40);
        assert_eq!(schedule_tau(500, &cfg()), 40);
        // 10 + 30/20 = 11.5 floors to 11
        assert_eq!(schedule_tau(1, &cfg()), 11);
    }

    #[test]
    fn presets() {
        let p = ScheduleConfig::pathology(400);
        assert_eq!((p.n_min, p.n_max, p.a_p, p.a_n, p.ramp_epochs), (40, 100, 1, 1, 20));
        let d = ScheduleConfig::digits(300);
        assert_eq!((d.n_min, d.n_max, d.a_p, d.a_n), (10, 30, 1, 3));
        assert!(ScheduleConfig { n_min: 5, n_max: 4, ..cfg() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn tau_monotone_and_bounded(n_min in 1usize..50, extra in 0usize..100, ramp in 1usize..40, m in 0usize..200) {
            let c = ScheduleConfig { ramp_epochs: ramp, n_min, n_max: n_min + extra, a_p: 1, a_n: 1 };
            let t = schedule_tau(m, &c);
            prop_assert!(t >= c.n_min && t <= c.n_max);
            prop_assert!(schedule_tau(m + 1, &c) >= t);
            if m >= ramp {
                prop_assert_eq!(t, c.n_max);
            }
        }

        #[test]
        fn mixed_scores_are_distributions(a in 0.0f64..=1.0, p in 0.0f64..=1.0, cb in 0.0f64..=1.0, ci in 0.0f64..=1.0) {
            let m = mix_scores(&[a], &[[1.0 - p, p]], ConfidencePair { c_b: cb, c_i: ci }, MixRule::Confidence)[0];
            prop_assert!((m[0] + m[1] - 1.0).abs() < 1e-12);
            prop_assert!(m[1] >= a.min(p) - 1e-12 && m[1] <= a.max(p) + 1e-12);
        }
    }

    #[test]
    fn mix_examples() {
        let m = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.8, c_i: 0.4 }, MixRule::Confidence);
        assert!((m[0][1] - 0.7).abs() < 1e-12);
        let m = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.0, c_i: 0.4 }, MixRule::Confidence);
        assert!((m[0][1] - 0.3).abs() < 1e-12);
        let m = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.6, c_i: 0.6 }, MixRule::Confidence);
        assert!((m[0][1] - 0.6).abs() < 1e-12);
        let m = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.0, c_i: 0.0 }, MixRule::Confidence);
        assert!((m[0][1] - 0.6).abs() < 1e-12);
        let m = mix_scores(&[0.9], &[[0.7, 0.3]], ConfidencePair { c_b: 0.8, c_i: 0.4 }, MixRule::PlainSum);
        assert!((m[0][1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn confidence_examples() {
        let labels = [1, 0, 1, 0];
        let perfect = [0.9, 0.1, 0.8, 0.2];
        let c = confidence_scores(&perfect, &perfect, &labels).unwrap();
        assert_eq!((c.c_b, c.c_i), (1.0, 1.0));
        let c = confidence_scores(&perfect, &perfect, &[0, 0, 0, 0]).unwrap();
        assert_eq!((c.c_b, c.c_i), (0.5, 0.5));

        let mut g = rng::stream(5, 0);
        let labels: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        let perfect: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
        let random: Vec<f64> = (0..10_000).map(|_| g.random::<f64>()).collect();
        let c = confidence_scores(&perfect, &random, &labels).unwrap();
        assert_eq!(c.c_b, 1.0);
        assert!((c.c_i - 0.5).abs() < 0.05);
    }

    #[test]
    fn selection_tie_break_and_quota() {
        let cands: Vec<Candidate> = (0..8)
            .rev()
            .map(|i| Candidate {
                instance: r(i / 3, (i % 3) as usize),
                p_m: [0.1, 0.9],
            })
            .collect();
        let sel = select_pseudo_labels(&cands, 5, 1, 1, 3);
        assert_eq!(sel.len(), 5);
        let ids: Vec<InstanceRef> = sel.iter().map(|a| a.instance).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(ids[0], r(0, 0));
        assert!(sel.iter().all(|a| a.label == 1 && a.epoch == 3));
    }

    #[test]
    fn boundary_is_skipped_and_quota_is_a_cap() {
        let half: Vec<Candidate> = (0..4)
            .map(|i| Candidate {
                instance: r(0, i),
                p_m: [0.5, 0.5],
            })
            .collect();
        assert!(select_pseudo_labels(&half, 10, 1, 1, 0).is_empty());

        let few = [
            Candidate { instance: r(1, 0), p_m: [0.2, 0.8] },
            Candidate { instance: r(1, 1), p_m: [0.7, 0.3] },
            Candidate { instance: r(1, 2), p_m: [0.95, 0.05] },
        ];
        let sel = select_pseudo_labels(&few, 10, 1, 3, 0);
        assert_eq!(sel.len(), 3);
        assert_eq!(sel[1].instance, r(1, 2));
        assert!(select_pseudo_labels(&[], 10, 1, 1, 0).is_empty());
    }

    #[test]
    fn negative_sampling() {
        let pool: Vec<InstanceRef> = (0..20).map(|i| r(7, i)).collect();
        assert!(balance_negative_bag_sample(&pool, 0, 1, 0).is_empty());
        assert_eq!(balance_negative_bag_sample(&pool, 50, 1, 0).len(), 20);
        let a = balance_negative_bag_sample(&pool, 6, 1, 0);
        let b = balance_negative_bag_sample(&pool, 6, 1, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.iter().all(|x| x.label == 0 && x.origin == LabelOrigin::NegativeBag));
        let mut ids: Vec<_> = a.iter().map(|x| x.instance).collect();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert_ne!(a, balance_negative_bag_sample(&pool, 6, 1, 1));
    }

    #[test]
    fn centroid_rules() {
        let src = [vec![0.0, 0.0], vec![0.0, 2.0], vec![4.0, 0.0], vec![4.0, 2.0]];
        let src_refs: Vec<&[f64]> = src.iter().map(|v| v.as_slice()).collect();
        let labels = [0, 0, 1, 1];
        let tgt = [vec![4.0, 1.0], vec![2.0, 1.0], vec![0.5, 1.0]];
        let t: Vec<(InstanceRef, &[f64])> = tgt.iter().enumerate().map(|(i, v)| (r(0, i), v.as_slice())).collect();
        let out = centroid_pseudo_labels(&src_refs, &labels, &t, CentroidQuota::Fraction(1.0), 0);
        let find = |i| out.iter().find(|a| a.instance == r(0, i)).unwrap().label;
        assert_eq!(find(0), 1);
        assert_eq!(find(1), 0);
        assert_eq!(find(2), 0);
        let only_pos = centroid_pseudo_labels(&src_refs[2..], &labels[2..], &t, CentroidQuota::Count([5, 5]), 0);
        assert!(only_pos.iter().all(|a| a.label == 1));
    }

    #[test]
    fn centroid_precision_on_separated_clusters() {
        let mut g = rng::stream(8, 0);
        let mut pt = |cx: f64| vec![cx + g.random_range(-1.0..1.0), g.random_range(-1.0..1.0)];
        let src: Vec<Vec<f64>> = (0..200).map(|i| pt(if i % 2 == 0 { -5.0 } else { 5.0 })).collect();
        let src_labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let tgt: Vec<Vec<f64>> = (0..200).map(|i| pt(if i % 4 == 0 { 5.5 } else { -4.5 })).collect();
        let tgt_labels: Vec<u8> = (0..200).map(|i| (i % 4 == 0) as u8).collect();
        let src_refs: Vec<&[f64]> = src.iter().map(|v| v.as_slice()).collect();
        let t: Vec<(InstanceRef, &[f64])> = tgt.iter().enumerate().map(|(i, v)| (r(1, i), v.as_slice())).collect();
        let out = centroid_pseudo_labels(&src_refs, &src_labels, &t, CentroidQuota::Fraction(0.5), 0);
        let correct = out
            .iter()
            .filter(|a| tgt_labels[a.instance.index_in_bag] == a.label)
            .count();
        assert!(correct as f64 / out.len() as f64 >= 0.95);
    }
}
