//! Synthetic two-domain instance populations and bag construction.
//!
//! Instances come from a per-class Gaussian mixture. The target domain is an
//! affine image of the same process (rotation in the first two axes, uniform
//! scale, translation), which gives a tunable domain gap with exact labels.
//!
//! Bags are built either randomly (variable size, a normally distributed
//! number of positives per positive bag) or by clustering groups of target
//! instances and keeping the best-scored members of every cluster.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansParams};
use crate::rng::{self, round_half_away, streams};
use crate::types::{Bag, Domain, DomainDataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Full covariance, row-major `dim x dim`. Must be positive definite.
    pub cov: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl GaussianComponent {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { std * std } else { 0.0 }).collect())
            .collect();
        Self {
            mean,
            cov,
            weight: 1.0,
        }
    }

    pub fn diagonal(mean: Vec<f64>, stds: &[f64]) -> Self {
        let d = mean.len();
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { stds[i] * stds[i] } else { 0.0 }).collect())
            .collect();
        Self {
            mean,
            cov,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassGeometry {
    pub positive: Vec<GaussianComponent>,
    pub negative: Vec<GaussianComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Rotation of the (x0, x1) plane, degrees counter-clockwise.
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation_deg: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        if x.len() >= 2 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v = *v * self.scale + t;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub dim: usize,
    pub domain_shift: DomainShift,
    pub class_geometry: ClassGeometry,
    pub positive_rate: f64,
    pub n_source_instances: usize,
    pub n_target_instances: usize,
}

impl Default for GeneratorConfig {
    /// Two-dimensional benchmark: one compact positive blob, three broad
    /// negative blobs and a small negative look-alike beside the positive
    /// blob. The target is rotated by 30 degrees and shifted.
    fn default() -> Self {
        Self {
            seed: 2024,
            dim: 2,
            domain_shift: DomainShift {
                rotation_deg: 30.0,
                translation: vec![0.6, -0.4],
                scale: 1.0,
            },
            class_geometry: ClassGeometry {
                positive: vec![GaussianComponent::diagonal(vec![2.0, 0.0], &[0.4, 0.6])],
                negative: vec![
                    GaussianComponent::isotropic(vec![-1.4, 0.0], 0.7),
                    GaussianComponent::isotropic(vec![0.4, 1.6], 0.6),
                    GaussianComponent::isotropic(vec![0.4, -1.6], 0.6),
                    // Small negative blob right next to the positive one.
                    GaussianComponent {
                        mean: vec![2.2, -1.5],
                        cov: vec![vec![0.15, 0.0], vec![0.0, 0.15]],
                        weight: 0.3,
                    },
                ],
            },
            positive_rate: 0.2,
            n_source_instances: 4000,
            n_target_instances: 6000,
        }
    }
}

/// Labelled, not-yet-bagged instances of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePool {
    pub domain: Domain,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl InstancePool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Splits into the first `n` instances and the rest.
    pub fn split_at(&self, n: usize) -> (InstancePool, InstancePool) {
        let n = n.min(self.len());
        (
            InstancePool {
                domain: self.domain,
                features: self.features[..n].to_vec(),
                labels: self.labels[..n].to_vec(),
            },
            InstancePool {
                domain: self.domain,
                features: self.features[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }
}

fn cholesky(cov: &[Vec<f64>], dim: usize) -> Option<Vec<Vec<f64>>> {
    if cov.len() != dim || cov.iter().any(|r| r.len() != dim) {
        return None;
    }
    let mut l = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..=i {
            if (cov[i][j] - cov[j][i]).abs() > 1e-12 {
                return None;
            }
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = cov[i][i] - s;
                if d <= 1e-12 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (cov[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

struct Sampler {
    components: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    cumulative: Vec<f64>,
}

impl Sampler {
    fn new(components: &[GaussianComponent], dim: usize, class: &str) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig(format!("{class} class has no components")));
        }
        let mut out = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: c.mean.len(),
                });
            }
            let chol = cholesky(&c.cov, dim).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "{class} component {i} has a degenerate or malformed covariance"
                ))
            })?;
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{class} component {i} needs a positive weight"
                )));
            }
            acc += c.weight;
            cumulative.push(acc);
            out.push((c.mean.clone(), chol));
        }
        for v in &mut cumulative {
            *v /= acc;
        }
        Ok(Self {
            components: out,
            cumulative,
        })
    }

    fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.components.len() - 1);
        let (mean, chol) = &self.components[idx];
        let z: Vec<f64> = (0..mean.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        mean.iter()
            .enumerate()
            .map(|(i, m)| m + (0..=i).map(|k| chol[i][k] * z[k]).sum::<f64>())
            .collect()
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dim must be positive".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::InvalidConfig("positive_rate must lie in (0, 1)".into()));
        }
        if self.domain_shift.translation.len() != self.dim {
            return Err(Error::InvalidConfig("translation must have length dim".into()));
        }
        if !(self.domain_shift.scale > 0.0 && self.domain_shift.scale.is_finite()) {
            return Err(Error::InvalidConfig("scale must be positive".into()));
        }
        Sampler::new(&self.class_geometry.positive, self.dim, "positive")?;
        Sampler::new(&self.class_geometry.negative, self.dim, "negative")?;
        Ok(())
    }
}

/// Draws labelled source and target pools. Target features are the
/// configured shift applied to draws from the same class-conditional process.
pub fn generate_instances(cfg: &GeneratorConfig) -> Result<(InstancePool, InstancePool)> {
    cfg.validate()?;
    let pos = Sampler::new(&cfg.class_geometry.positive, cfg.dim, "positive")?;
    let neg = Sampler::new(&cfg.class_geometry.negative, cfg.dim, "negative")?;

    let draw = |n: usize, stream: u64, domain: Domain| {
        let mut rng = rng::stream(cfg.seed, stream);
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = u8::from(rng.random::<f64>() < cfg.positive_rate);
            let mut x = if y == 1 { pos.sample(&mut rng) } else { neg.sample(&mut rng) };
            if domain == Domain::Target {
                cfg.domain_shift.apply(&mut x);
            }
            features.push(x);
            labels.push(y);
        }
        InstancePool {
            domain,
            features,
            labels,
        }
    };
    Ok((
        draw(cfg.n_source_instances, streams::SOURCE_POOL, Domain::Source),
        draw(cfg.n_target_instances, streams::TARGET_POOL, Domain::Target),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BagMode {
    Random,
    Clustered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BagBuildConfig {
    pub mode: BagMode,
    pub bag_size_mean: f64,
    pub bag_size_std: f64,
    pub positives_per_posbag_mean: f64,
    pub positives_per_posbag_std: f64,
    pub k_clusters: usize,
    pub per_cluster_take: usize,
    pub fixed_bag_size: usize,
    /// Clustered mode: instances per group (one group plays the role of a slide).
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Clustered mode: fraction of positives inside a positive group.
    #[serde(default = "default_group_positive_fraction")]
    pub group_positive_fraction: f64,
}

fn default_group_size() -> usize {
    90
}

fn default_group_positive_fraction() -> f64 {
    0.1
}

pub const MIN_BAG_SIZE: usize = 2;

impl Default for BagBuildConfig {
    /// Random bags: size ~ N(10, variance 2), positives ~ N(1, variance 1).
    fn default() -> Self {
        Self {
            mode: BagMode::Random,
            bag_size_mean: 10.0,
            bag_size_std: 2f64.sqrt(),
            positives_per_posbag_mean: 1.0,
            positives_per_posbag_std: 1.0,
            k_clusters: 10,
            per_cluster_take: 3,
            fixed_bag_size: 30,
            group_size: default_group_size(),
            group_positive_fraction: default_group_positive_fraction(),
        }
    }
}

impl BagBuildConfig {
    pub fn clustered() -> Self {
        Self {
            mode: BagMode::Clustered,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            BagMode::Random => {
                if !(self.bag_size_std >= 0.0 && self.positives_per_posbag_std >= 0.0) {
                    return Err(Error::InvalidConfig("standard deviations must be >= 0".into()));
                }
            }
            BagMode::Clustered => {
                if self.k_clusters == 0 || self.per_cluster_take == 0 {
                    return Err(Error::InvalidConfig(
                        "k_clusters and per_cluster_take must be positive".into(),
                    ));
                }
                if self.k_clusters * self.per_cluster_take != self.fixed_bag_size {
                    return Err(Error::InvalidConfig(format!(
                        "clustered bags need k_clusters * per_cluster_take == fixed_bag_size \
                         ({} * {} != {})",
                        self.k_clusters, self.per_cluster_take, self.fixed_bag_size
                    )));
                }
            }
        }
        Ok(())
    }
}

fn pool_indices(pool: &InstancePool, label: u8, rng: &mut rng::Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool.labels[i] == label).collect();
    idx.shuffle(rng);
    idx
}

/// Random bags: sizes from the rounded normal (floored at [`MIN_BAG_SIZE`]),
/// positive bags get `max(1, rounded draw)` positives, negative bags none.
/// Positive and negative bags alternate while both remain.
pub fn build_bags_random(
    pool: &InstancePool,
    cfg: &BagBuildConfig,
    n_positive_bags: usize,
    n_negative_bags: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Bag>> {
    cfg.validate()?;
    let stream = match pool.domain {
        Domain::Source => streams::SOURCE_BAGS,
        Domain::Target => streams::TARGET_BAGS,
    };
    let mut rng = rng::stream(seed, stream);
    let size_dist = Normal::new(cfg.bag_size_mean, cfg.bag_size_std)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let pos_dist = Normal::new(cfg.positives_per_posbag_mean, cfg.positives_per_posbag_std)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let mut positives = pool_indices(pool, 1, &mut rng).into_iter();
    let mut negatives = pool_indices(pool, 0, &mut rng).into_iter();

    let mut order = Vec::with_capacity(n_positive_bags + n_negative_bags);
    let (mut p, mut n) = (n_positive_bags, n_negative_bags);
    while p > 0 || n > 0 {
        if p > 0 {
            order.push(1u8);
            p -= 1;
        }
        if n > 0 {
            order.push(0u8);
            n -= 1;
        }
    }

    let mut bags = Vec::with_capacity(order.len());
    for (i, &label) in order.iter().enumerate() {
        let size = round_half_away(size_dist.sample(&mut rng)).max(MIN_BAG_SIZE as i64) as usize;
        let n_pos = if label == 1 {
            (round_half_away(pos_dist.sample(&mut rng)).max(1) as usize).min(size)
        } else {
            0
        };
        let mut members = Vec::with_capacity(size);
        for _ in 0..n_pos {
            let j = positives.next().ok_or(Error::PoolExhausted { built: bags.len() })?;
            members.push(j);
        }
        for _ in n_pos..size {
            let j = negatives.next().ok_or(Error::PoolExhausted { built: bags.len() })?;
            members.push(j);
        }
        members.shuffle(&mut rng);
        let members = members
            .into_iter()
            .map(|j| (pool.features[j].clone(), Some(pool.labels[j])))
            .collect();
        bags.push(Bag::new(first_id + i as u64, pool.domain, label, members)?);
    }
    Ok(bags)
}

/// A set of instances sharing one weak label (the analogue of a slide).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceGroup {
    pub label: u8,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

/// Splits a pool into positive groups (holding `group_positive_fraction`
/// positives, at least one) and all-negative groups.
pub fn make_groups(
    pool: &InstancePool,
    cfg: &BagBuildConfig,
    n_positive_groups: usize,
    n_negative_groups: usize,
    seed: u64,
) -> Result<Vec<InstanceGroup>> {
    let mut rng = rng::stream(seed, streams::TARGET_BAGS);
    let mut positives = pool_indices(pool, 1, &mut rng).into_iter();
    let mut negatives = pool_indices(pool, 0, &mut rng).into_iter();
    let n_pos = (round_half_away(cfg.group_positive_fraction * cfg.group_size as f64).max(1)
        as usize)
        .min(cfg.group_size);
    let mut groups = Vec::new();
    for g in 0..n_positive_groups + n_negative_groups {
        let label = u8::from(g < n_positive_groups);
        let k_pos = if label == 1 { n_pos } else { 0 };
        let mut idx = Vec::with_capacity(cfg.group_size);
        for _ in 0..k_pos {
            idx.push(positives.next().ok_or(Error::PoolExhausted { built: g })?);
        }
        for _ in k_pos..cfg.group_size {
            idx.push(negatives.next().ok_or(Error::PoolExhausted { built: g })?);
        }
        idx.shuffle(&mut rng);
        groups.push(InstanceGroup {
            label,
            features: idx.iter().map(|&j| pool.features[j].clone()).collect(),
            labels: idx.iter().map(|&j| pool.labels[j]).collect(),
        });
    }
    Ok(groups)
}

/// Supplies the feature space for clustering and a positive score per instance.
pub trait InstanceScorer {
    fn embed(&self, group: &InstanceGroup) -> Vec<Vec<f64>>;
    fn score(&self, group: &InstanceGroup) -> Vec<f64>;
}

/// Scores with the true labels and clusters raw features.
pub struct OracleScorer;

impl InstanceScorer for OracleScorer {
    fn embed(&self, group: &InstanceGroup) -> Vec<Vec<f64>> {
        group.features.clone()
    }

    fn score(&self, group: &InstanceGroup) -> Vec<f64> {
        group.labels.iter().map(|&y| f64::from(y)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteredBags {
    pub bags: Vec<Bag>,
    pub skipped_groups: Vec<usize>,
}

/// Positive groups: k-means on embedded features, then the
/// `per_cluster_take` best-scored members of every cluster form one bag of
/// `fixed_bag_size`, labelled positive. Clusters with too few members are
/// topped up with the best remaining instances of the group. Negative groups
/// are cut into as many random fixed-size bags as fit.
pub fn build_bags_clustered(
    groups: &[InstanceGroup],
    scorer: &dyn InstanceScorer,
    cfg: &BagBuildConfig,
    seed: u64,
    first_id: u64,
) -> Result<ClusteredBags> {
    if cfg.mode != BagMode::Clustered {
        return Err(Error::InvalidConfig("build_bags_clustered needs clustered mode".into()));
    }
    cfg.validate()?;
    let mut rng = rng::stream(seed, streams::TARGET_BAGS);
    let mut bags = Vec::new();
    let mut skipped = Vec::new();
    let mut next_id = first_id;

    for (gi, group) in groups.iter().enumerate() {
        let n = group.labels.len();
        if n < cfg.fixed_bag_size {
            warn!(
                "skipping group {gi}: {n} instances < bag size {}",
                cfg.fixed_bag_size
            );
            skipped.push(gi);
            continue;
        }
        let member_lists: Vec<Vec<usize>> = if group.label == 1 {
            let emb = scorer.embed(group);
            let scores = scorer.score(group);
            let fit = kmeans(&emb, &KMeansParams::new(cfg.k_clusters, seed.wrapping_add(gi as u64)))?;
            let by_score = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
            let mut chosen = Vec::with_capacity(cfg.fixed_bag_size);
            let mut taken = vec![false; n];
            for c in 0..cfg.k_clusters {
                let mut members: Vec<usize> = fit.members(c).collect();
                members.sort_by(by_score);
                for &j in members.iter().take(cfg.per_cluster_take) {
                    chosen.push(j);
                    taken[j] = true;
                }
            }
            if chosen.len() < cfg.fixed_bag_size {
                let mut rest: Vec<usize> = (0..n).filter(|&j| !taken[j]).collect();
                rest.sort_by(by_score);
                chosen.extend(rest.into_iter().take(cfg.fixed_bag_size - chosen.len()));
            }
            vec![chosen]
        } else {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.chunks_exact(cfg.fixed_bag_size).map(<[usize]>::to_vec).collect()
        };
        for members in member_lists {
            let members = members
                .into_iter()
                .map(|j| (group.features[j].clone(), Some(group.labels[j])))
                .collect();
            bags.push(Bag::new(next_id, Domain::Target, group.label, members)?);
            next_id += 1;
        }
    }
    info!(
        "clustered construction: {} bags from {} groups ({} skipped)",
        bags.len(),
        groups.len(),
        skipped.len()
    );
    Ok(ClusteredBags {
        bags,
        skipped_groups: skipped,
    })
}

/// Fraction of positive-labelled bags that truly contain a positive.
pub fn measure_bag_label_confidence(bags: &[Bag]) -> Result<f64> {
    let mut n_pos_bags = 0usize;
    let mut hits = 0usize;
    for bag in bags.iter().filter(|b| b.label() == 1) {
        n_pos_bags += 1;
        let mut any = false;
        for inst in bag.instances() {
            match inst.oracle_label() {
                Some(1) => any = true,
                Some(_) => {}
                None => return Err(Error::Undefined("bag confidence needs oracle labels")),
            }
        }
        hits += usize::from(any);
    }
    if n_pos_bags == 0 {
        return Err(Error::Undefined("no positive bags"));
    }
    Ok(hits as f64 / n_pos_bags as f64)
}

/// Bag counts per split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub source_train_bags: usize,
    pub source_val_bags: usize,
    pub target_train_bags: usize,
    pub target_test_bags: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            source_train_bags: 200,
            source_val_bags: 60,
            target_train_bags: 200,
            target_test_bags: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    pub source_bags: BagBuildConfig,
    pub target_bags: BagBuildConfig,
    pub splits: SplitSizes,
}

/// The four datasets one experiment uses.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentData {
    pub source_train: DomainDataset,
    pub source_val: DomainDataset,
    pub target_train: DomainDataset,
    pub target_test: DomainDataset,
}

pub const SOURCE_TRAIN_ID_BASE: u64 = 0;
pub const SOURCE_VAL_ID_BASE: u64 = 1_000_000;
pub const TARGET_TRAIN_ID_BASE: u64 = 2_000_000;
pub const TARGET_TEST_ID_BASE: u64 = 3_000_000;

fn split_pool(pool: &InstancePool, first: usize, second: usize) -> (InstancePool, InstancePool) {
    let n = pool.len() * first / (first + second).max(1);
    pool.split_at(n)
}

/// Generates pools and builds balanced bags for every split. Clustered
/// target construction needs a `scorer`.
pub fn build_experiment_data(
    cfg: &DataConfig,
    scorer: Option<&dyn InstanceScorer>,
) -> Result<ExperimentData> {
    let (source, target) = generate_instances(&cfg.generator)?;
    let seed = cfg.generator.seed;
    let s = &cfg.splits;

    let (src_train, src_val) = split_pool(&source, s.source_train_bags, s.source_val_bags);
    let half = |n: usize| (n - n / 2, n / 2);
    let (p, n) = half(s.source_train_bags);
    let source_train = build_bags_random(&src_train, &cfg.source_bags, p, n, seed, SOURCE_TRAIN_ID_BASE)?;
    let (p, n) = half(s.source_val_bags);
    let source_val =
        build_bags_random(&src_val, &cfg.source_bags, p, n, seed ^ 0x5a5a, SOURCE_VAL_ID_BASE)?;

    let (tgt_train, tgt_test) = split_pool(&target, s.target_train_bags, s.target_test_bags);
    let target_split = |pool: &InstancePool, n_bags: usize, salt: u64, base: u64| -> Result<Vec<Bag>> {
        let (p, n) = half(n_bags);
        match cfg.target_bags.mode {
            BagMode::Random => build_bags_random(pool, &cfg.target_bags, p, n, seed ^ salt, base),
            BagMode::Clustered => {
                let scorer = scorer.ok_or_else(|| {
                    Error::InvalidConfig("clustered target bags need a scorer".into())
                })?;
                let per_neg_group = (cfg.target_bags.group_size / cfg.target_bags.fixed_bag_size).max(1);
                let groups = make_groups(pool, &cfg.target_bags, p, n.div_ceil(per_neg_group), seed ^ salt)?;
                Ok(build_bags_clustered(&groups, scorer, &cfg.target_bags, seed ^ salt, base)?.bags)
            }
        }
    };
    let target_train = target_split(&tgt_train, s.target_train_bags, 0, TARGET_TRAIN_ID_BASE)?;
    let target_test = target_split(&tgt_test, s.target_test_bags, 0xa5a5, TARGET_TEST_ID_BASE)?;

    Ok(ExperimentData {
        source_train: DomainDataset::new(source_train, Split::Train)?,
        source_val: DomainDataset::new(source_val, Split::Validation)?,
        target_train: DomainDataset::new(target_train, Split::Train)?,
        target_test: DomainDataset::new(target_test, Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_bag_consistency;

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_source_instances: 2000,
            n_target_instances: 2000,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_instances(&small_cfg()).unwrap();
        let b = generate_instances(&small_cfg()).unwrap();
        assert_eq!(a, b);
        let mut other = small_cfg();
        other.seed += 1;
        assert_ne!(generate_instances(&other).unwrap().0, a.0);
    }

    #[test]
    fn degenerate_covariance_is_rejected() {
        let mut cfg = small_cfg();
        cfg.class_geometry.positive[0].cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(generate_instances(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = small_cfg();
        cfg.class_geometry.negative[0].cov = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!(generate_instances(&cfg).is_err());
    }

    #[test]
    fn identity_shift_matches_populations() {
        let mut cfg = small_cfg();
        cfg.domain_shift = DomainShift::identity(2);
        cfg.n_source_instances = 5000;
        cfg.n_target_instances = 5000;
        let (s, t) = generate_instances(&cfg).unwrap();
        for axis in 0..2 {
            let stats = |p: &InstancePool| {
                let n = p.len() as f64;
                let m = p.features.iter().map(|x| x[axis]).sum::<f64>() / n;
                let v = p.features.iter().map(|x| (x[axis] - m).powi(2)).sum::<f64>() / (n - 1.0);
                (m, v / n)
            };
            let (ms, vs) = stats(&s);
            let (mt, vt) = stats(&t);
            assert!((ms - mt).abs() < 3.0 * (vs + vt).sqrt(), "axis {axis}: {ms} vs {mt}");
        }
    }

    #[test]
    fn half_turn_swaps_class_hemispheres() {
        let cfg = GeneratorConfig {
            class_geometry: ClassGeometry {
                positive: vec![GaussianComponent::isotropic(vec![2.0, 0.0], 0.3)],
                negative: vec![GaussianComponent::isotropic(vec![-2.0, 0.0], 0.3)],
            },
            domain_shift: DomainShift {
                rotation_deg: 180.0,
                translation: vec![0.0, 0.0],
                scale: 1.0,
            },
            positive_rate: 0.5,
            ..small_cfg()
        };
        let (s, t) = generate_instances(&cfg).unwrap();
        let mean_x = |p: &InstancePool, y: u8| {
            let xs: Vec<f64> = (0..p.len()).filter(|&i| p.labels[i] == y).map(|i| p.features[i][0]).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!(mean_x(&s, 1) > 1.5 && mean_x(&s, 0) < -1.5);
        assert!(mean_x(&t, 1) < -1.5 && mean_x(&t, 0) > 1.5);
    }

    #[test]
    fn positive_count_within_binomial_band() {
        // n = 10000, p = 0.1: mean 1000, sd = sqrt(10000 * 0.1 * 0.9) = 30.
        let cfg = GeneratorConfig {
            positive_rate: 0.1,
            n_source_instances: 10_000,
            n_target_instances: 10,
            ..small_cfg()
        };
        let (s, _) = generate_instances(&cfg).unwrap();
        let k = s.positives() as f64;
        assert!((k - 1000.0).abs() <= 90.0, "positives = {k}");
    }

    #[test]
    fn random_bag_sizes_follow_configured_normal() {
        let cfg = GeneratorConfig {
            positive_rate: 0.3,
            n_source_instances: 40_000,
            n_target_instances: 10,
            ..small_cfg()
        };
        let (s, _) = generate_instances(&cfg).unwrap();
        let bags = build_bags_random(&s, &BagBuildConfig::default(), 1000, 1000, 5, 0).unwrap();
        assert_eq!(bags.len(), 2000);
        let mean = bags.iter().map(|b| b.len() as f64).sum::<f64>() / 2000.0;
        assert!((mean - 10.0).abs() <= 0.2, "mean size {mean}");
        assert!(bags.iter().all(|b| b.len() >= MIN_BAG_SIZE));
        assert_eq!(bags.iter().filter(|b| b.label() == 1).count(), 1000);
        let ds = DomainDataset::new(bags, Split::Train).unwrap();
        assert!(validate_bag_consistency(&ds).is_empty());
    }

    #[test]
    fn positive_count_clamps_to_one() {
        let (s, _) = generate_instances(&small_cfg()).unwrap();
        let cfg = BagBuildConfig {
            positives_per_posbag_mean: -5.0,
            positives_per_posbag_std: 0.0,
            ..BagBuildConfig::default()
        };
        let bags = build_bags_random(&s, &cfg, 20, 0, 1, 0).unwrap();
        for b in &bags {
            let k = b.instances().iter().filter(|i| i.oracle_label() == Some(1)).count();
            assert_eq!(k, 1);
        }
    }

    #[test]
    fn exhaustion_reports_progress() {
        let (s, _) = generate_instances(&small_cfg()).unwrap();
        let (tiny, _) = s.split_at(100);
        match build_bags_random(&tiny, &BagBuildConfig::default(), 50, 50, 1, 0) {
            Err(Error::PoolExhausted { built }) => assert!(built > 0 && built < 100),
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn clustered_config_must_tile_bag() {
        let cfg = BagBuildConfig {
            per_cluster_take: 4,
            ..BagBuildConfig::clustered()
        };
        assert!(cfg.validate().is_err());
        assert!(BagBuildConfig::clustered().validate().is_ok());
    }

    #[test]
    fn oracle_clustered_bags_are_sized_and_confident() {
        let (_, t) = generate_instances(&small_cfg()).unwrap();
        let cfg = BagBuildConfig::clustered();
        let groups = make_groups(&t, &cfg, 6, 3, 11).unwrap();
        let out = build_bags_clustered(&groups, &OracleScorer, &cfg, 11, 0).unwrap();
        let pos: Vec<Bag> = out.bags.iter().filter(|b| b.label() == 1).cloned().collect();
        assert_eq!(pos.len(), 6);
        assert!(pos.iter().all(|b| b.len() == 30));
        assert_eq!(measure_bag_label_confidence(&out.bags).unwrap(), 1.0);
        // 90 negatives per group -> 3 bags each
        assert_eq!(out.bags.iter().filter(|b| b.label() == 0).count(), 9);
        // no duplicate instances inside a positive bag
        for b in &pos {
            let mut seen: Vec<Vec<u64>> = b
                .instances()
                .iter()
                .map(|i| i.features().iter().map(|v| v.to_bits()).collect())
                .collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), 30);
        }
    }

    #[test]
    fn small_groups_are_skipped() {
        let group = InstanceGroup {
            label: 1,
            features: vec![vec![0.0, 0.0]; 10],
            labels: vec![1; 10],
        };
        let out = build_bags_clustered(&[group], &OracleScorer, &BagBuildConfig::clustered(), 0, 0)
            .unwrap();
        assert!(out.bags.is_empty());
        assert_eq!(out.skipped_groups, vec![0]);
    }

    #[test]
    fn bag_confidence_edges() {
        let pos = Bag::new(0, Domain::Target, 1, vec![(vec![0.0], Some(1)), (vec![0.0], Some(0))]).unwrap();
        let fake = Bag::new(1, Domain::Target, 1, vec![(vec![0.0], Some(0))]).unwrap();
        let neg = Bag::new(2, Domain::Target, 0, vec![(vec![0.0], Some(0))]).unwrap();
        assert_eq!(measure_bag_label_confidence(&[pos.clone(), neg.clone()]).unwrap(), 1.0);
        assert_eq!(measure_bag_label_confidence(std::slice::from_ref(&fake)).unwrap(), 0.0);
        assert_eq!(measure_bag_label_confidence(&[pos, fake]).unwrap(), 0.5);
        assert!(measure_bag_label_confidence(&[neg]).is_err());
    }

    #[test]
    fn experiment_data_is_consistent() {
        let data = build_experiment_data(&DataConfig::default(), None).unwrap();
        for ds in [&data.source_train, &data.source_val, &data.target_train, &data.target_test] {
            assert!(validate_bag_consistency(ds).is_empty());
        }
        assert_eq!(data.source_train.n_bags(), 200);
        assert_eq!(data.target_test.n_bags(), 100);
        assert_eq!(data.source_train.oracle_coverage(), 1.0);
        assert_eq!(build_experiment_data(&DataConfig::default(), None).unwrap(), data);
    }
}
