//! Instance-level evaluation: accuracy, PR-AUC (average precision) and
//! plot-ready score maps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Dist;

/// Argmax decision; a tie goes to the negative class.
pub fn decide(p: Dist) -> u8 {
    (p[1] > p[0]) as u8
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    if a == 0 {
        return Err(Error::Undefined("metric over an empty input"));
    }
    Ok(())
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Recall restricted to instances whose label is `class`.
pub fn per_class_accuracy(preds: &[u8], labels: &[u8], class: u8) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &l) in preds.iter().zip(labels) {
        if l == class {
            total += 1;
            hit += (p == class) as usize;
        }
    }
    if total == 0 {
        return Err(Error::Undefined("class absent from labels"));
    }
    Ok(hit as f64 / total as f64)
}

/// Average precision. Items are visited by descending score; each block of
/// tied scores is processed at once and its positives all receive the
/// precision at the end of the block.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 {
        return Err(Error::Undefined("PR-AUC without positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_pos = 0;
        while i < order.len() && scores[order[i]].total_cmp(&s).is_eq() {
            block_pos += (labels[order[i]] == 1) as usize;
            seen += 1;
            i += 1;
        }
        tp += block_pos;
        if block_pos > 0 {
            ap += block_pos as f64 * tp as f64 / seen as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// A 2-D linear projection: `y = A (x - mean)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub mean: Vec<f64>,
    /// Two rows of length D.
    pub axes: [Vec<f64>; 2],
}

impl Projection {
    pub fn apply(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, axis) in out.iter_mut().zip(&self.axes) {
            *o = axis.iter().zip(x.iter().zip(&self.mean)).map(|(a, (v, m))| a * (v - m)).sum();
        }
        out
    }
}

/// Identity for 2-D data; otherwise the top two principal components, each
/// signed so its largest-magnitude loading is positive. Needs at least one
/// point.
pub fn fit_projection(points: &[&[f64]]) -> Result<Option<Projection>> {
    let Some(first) = points.first() else {
        return Err(Error::Undefined("projection of no points"));
    };
    let d = first.len();
    if d == 2 {
        return Ok(None);
    }
    if d < 2 {
        return Err(Error::InvalidDataset("projection needs at least 2 dimensions".into()));
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p.iter()) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / n;
            }
        }
    }
    let (values, vectors) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v: Vec<f64> = (0..d).map(|r| vectors[r][order[k]]).collect();
        let lead = v
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(_, x)| x)
            .unwrap_or(1.0);
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok(Some(Projection {
        mean,
        axes: [axis(0), axis(1)],
    }))
}

/// Cyclic Jacobi rotations on a symmetric matrix; returns eigenvalues and the
/// eigenvectors as columns.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreMapRow {
    pub bag_id: u64,
    pub index_in_bag: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub oracle_label: Option<u8>,
}

/// One point of a score map before projection.
#[derive(Clone, Copy, Debug)]
pub struct ScoredPoint<'a> {
    pub bag_id: u64,
    pub index_in_bag: usize,
    pub features: &'a [f64],
    pub score: f64,
    pub oracle_label: Option<u8>,
}

pub fn export_score_map(points: &[ScoredPoint]) -> Result<Vec<ScoreMapRow>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let feats: Vec<&[f64]> = points.iter().map(|p| p.features).collect();
    let proj = fit_projection(&feats)?;
    Ok(points
        .iter()
        .map(|p| {
            let [x, y] = match &proj {
                None => [p.features[0], p.features[1]],
                Some(pr) => pr.apply(p.features),
            };
            ScoreMapRow {
                bag_id: p.bag_id,
                index_in_bag: p.index_in_bag,
                x,
                y,
                score: p.score,
                oracle_label: p.oracle_label,
            }
        })
        .collect())
}
