//! Bag, instance and discrepancy losses, plus the composed training
//! objectives with their parameter scopes.
//!
//! All batch losses are means over the batch. Probabilities are clamped at
//! [`EPS`] before the log.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::model::{softmax2, AttentionBagHead, Dist, InstanceHeads, Mlp, MlpTrace, ModelBundle, Params};

pub const EPS: f64 = 1e-12;
/// Number of classes in the discrepancy normalization.
pub const N_CLASSES: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidConfig(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }
}

/// A batch-mean loss; `empty` is set when the batch had no items and the
/// value was defined as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub empty: bool,
}

fn nll(pred: Dist, y: u8) -> f64 {
    -pred[y as usize].max(EPS).ln()
}

/// `-log pred[y]`, clamped.
pub fn bag_loss(pred: Dist, y: u8) -> f64 {
    nll(pred, y)
}

pub fn mean_nll(preds: &[Dist], labels: &[u8]) -> BatchLoss {
    assert_eq!(preds.len(), labels.len(), "predictions and labels differ in length");
    if preds.is_empty() {
        return BatchLoss {
            value: 0.0,
            empty: true,
        };
    }
    let sum: f64 = preds.iter().zip(labels).map(|(p, &y)| nll(*p, y)).sum();
    BatchLoss {
        value: sum / preds.len() as f64,
        empty: false,
    }
}

pub fn bag_batch_loss(preds: &[Dist], labels: &[u8]) -> BatchLoss {
    mean_nll(preds, labels)
}

pub fn instance_loss(preds: &[Dist], labels: &[u8]) -> BatchLoss {
    mean_nll(preds, labels)
}

/// `(1/C) Σ_c |p1_c - p2_c|` for one instance.
pub fn discrepancy(p1: Dist, p2: Dist) -> f64 {
    ((p1[0] - p2[0]).abs() + (p1[1] - p2[1]).abs()) / N_CLASSES
}

/// Batch mean of [`discrepancy`]; 0 for an empty batch.
pub fn discrepancy_loss(p1: &[Dist], p2: &[Dist]) -> f64 {
    assert_eq!(p1.len(), p2.len());
    if p1.is_empty() {
        return 0.0;
    }
    p1.iter().zip(p2).map(|(a, b)| discrepancy(*a, *b)).sum::<f64>() / p1.len() as f64
}

/// Gradient of the clamped NLL with respect to the two logits.
pub fn nll_logit_grad(pred: Dist, y: u8) -> [f64; 2] {
    let y = y as usize;
    if pred[y] <= EPS {
        return [0.0, 0.0];
    }
    let mut g = pred;
    g[y] -= 1.0;
    g
}

/// Pulls a gradient on probabilities back through the softmax.
fn softmax_backward(p: Dist, dp: [f64; 2]) -> [f64; 2] {
    let dot = p[0] * dp[0] + p[1] * dp[1];
    [p[0] * (dp[0] - dot), p[1] * (dp[1] - dot)]
}

/// Gradients of [`discrepancy`] with respect to each head's logits.
pub fn discrepancy_logit_grads(p1: Dist, p2: Dist) -> ([f64; 2], [f64; 2]) {
    let s = |d: f64| {
        if d > 0.0 {
            1.0 / N_CLASSES
        } else if d < 0.0 {
            -1.0 / N_CLASSES
        } else {
            0.0
        }
    };
    let d1 = [s(p1[0] - p2[0]), s(p1[1] - p2[1])];
    let d2 = [-d1[0], -d1[1]];
    (softmax_backward(p1, d1), softmax_backward(p2, d2))
}

/// A bag as an `(K, D)` matrix with its weak label.
#[derive(Clone, Debug, PartialEq)]
pub struct BagInput {
    pub x: Array2<f64>,
    pub label: u8,
}

/// Which parameter groups an objective may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope {
    pub encoder: bool,
    pub bag_head: bool,
    pub instance_heads: bool,
}

impl Scope {
    pub const ALL: Scope = Scope {
        encoder: true,
        bag_head: true,
        instance_heads: true,
    };
}

/// The three alternating objectives of the adaptation phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// `λ L_I + (1-λ)(L_B^t + L_B^s)` over encoder, bag head and both heads.
    Joint,
    /// `λ (L_I - L_adv)` over the two instance heads only.
    HeadDiscrepancy,
    /// `λ L_adv` over the encoder only.
    EncoderDiscrepancy,
}

impl Objective {
    pub fn scope(self) -> Scope {
        match self {
            Objective::Joint => Scope::ALL,
            Objective::HeadDiscrepancy => Scope {
                encoder: false,
                bag_head: false,
                instance_heads: true,
            },
            Objective::EncoderDiscrepancy => Scope {
                encoder: true,
                bag_head: false,
                instance_heads: false,
            },
        }
    }
}

/// Gradient buffers shaped like a [`ModelBundle`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub encoder: Mlp,
    pub bag_head: AttentionBagHead,
    pub heads: Vec<Mlp>,
}

impl Gradients {
    pub fn zeros(model: &ModelBundle) -> Self {
        Self {
            encoder: model.encoder.zeros_like(),
            bag_head: model.bag_head.zeros_like(),
            heads: model.heads.as_slice().iter().map(|h| h.zeros_like()).collect(),
        }
    }
}

/// Encoder pass that keeps the trace only when the encoder is in scope.
struct Encoded {
    features: Array2<f64>,
    trace: Option<MlpTrace>,
}

fn encode_for(model: &ModelBundle, x: ArrayView2<f64>, scope: Scope) -> Encoded {
    if scope.encoder {
        let trace = model.encoder.forward_trace(x);
        Encoded {
            features: trace.output().clone(),
            trace: Some(trace),
        }
    } else {
        Encoded {
            features: model.encoder.forward(x),
            trace: None,
        }
    }
}

fn backprop_encoder(model: &ModelBundle, enc: &Encoded, dfeat: Array2<f64>, grads: &mut Gradients) {
    if let Some(trace) = &enc.trace {
        model.encoder.backward(trace, dfeat, &mut grads.encoder);
    }
}

/// `weight * mean_b CE(bag_head(G(X_b)), Y_b)`; returns the unweighted mean.
pub fn bag_term(
    model: &ModelBundle,
    bags: &[&BagInput],
    weight: f64,
    scope: Scope,
    grads: &mut Gradients,
) -> BatchLoss {
    if bags.is_empty() {
        return BatchLoss {
            value: 0.0,
            empty: true,
        };
    }
    let n = bags.len() as f64;
    let mut sum = 0.0;
    for bag in bags {
        let enc = encode_for(model, bag.x.view(), scope);
        let trace = model.bag_head.forward(enc.features.view());
        sum += nll(trace.probs, bag.label);
        if weight == 0.0 || !(scope.encoder || scope.bag_head) {
            continue;
        }
        let g = nll_logit_grad(trace.probs, bag.label);
        let dlogits = [g[0] * weight / n, g[1] * weight / n];
        let mut scratch;
        let head_grad = if scope.bag_head {
            &mut grads.bag_head
        } else {
            scratch = model.bag_head.zeros_like();
            &mut scratch
        };
        let dfeat = model.bag_head.backward(enc.features.view(), &trace, dlogits, head_grad);
        backprop_encoder(model, &enc, dfeat, grads);
    }
    BatchLoss {
        value: sum / n,
        empty: false,
    }
}

/// `weight * Σ_heads mean CE(head(G(x)), y)`; returns the unweighted sum of
/// per-head means.
pub fn instance_term(
    model: &ModelBundle,
    x: ArrayView2<f64>,
    labels: &[u8],
    weight: f64,
    scope: Scope,
    grads: &mut Gradients,
) -> BatchLoss {
    assert_eq!(x.nrows(), labels.len());
    if labels.is_empty() {
        return BatchLoss {
            value: 0.0,
            empty: true,
        };
    }
    let n = labels.len() as f64;
    let enc = encode_for(model, x, scope);
    let mut dfeat = Array2::zeros(enc.features.raw_dim());
    let mut total = 0.0;
    for (hi, head) in model.heads.as_slice().into_iter().enumerate() {
        let trace = head.forward_trace(enc.features.view());
        let logits = trace.output();
        let mut dlogits = Array2::zeros(logits.raw_dim());
        let mut sum = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = softmax2([logits[[i, 0]], logits[[i, 1]]]);
            sum += nll(p, y);
            let g = nll_logit_grad(p, y);
            dlogits[[i, 0]] = g[0] * weight / n;
            dlogits[[i, 1]] = g[1] * weight / n;
        }
        total += sum / n;
        if weight != 0.0 && (scope.instance_heads || scope.encoder) {
            let mut scratch;
            let hg = if scope.instance_heads {
                &mut grads.heads[hi]
            } else {
                scratch = head.zeros_like();
                &mut scratch
            };
            dfeat += &head.backward(&trace, dlogits, hg);
        }
    }
    if weight != 0.0 {
        backprop_encoder(model, &enc, dfeat, grads);
    }
    BatchLoss {
        value: total,
        empty: false,
    }
}

/// `weight * mean L_adv` between the twin heads on `x`; returns the
/// unweighted mean. Errors when the model has a single head.
pub fn discrepancy_term(
    model: &ModelBundle,
    x: ArrayView2<f64>,
    weight: f64,
    scope: Scope,
    grads: &mut Gradients,
) -> Result<f64> {
    let InstanceHeads::Twin(h1, h2) = &model.heads else {
        return Err(Error::InvalidConfig("discrepancy needs twin instance heads".into()));
    };
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let n = x.nrows() as f64;
    let enc = encode_for(model, x, scope);
    let t1 = h1.forward_trace(enc.features.view());
    let t2 = h2.forward_trace(enc.features.view());
    let (l1, l2) = (t1.output(), t2.output());
    let mut d1 = Array2::zeros(l1.raw_dim());
    let mut d2 = Array2::zeros(l2.raw_dim());
    let mut sum = 0.0;
    for i in 0..x.nrows() {
        let p1 = softmax2([l1[[i, 0]], l1[[i, 1]]]);
        let p2 = softmax2([l2[[i, 0]], l2[[i, 1]]]);
        sum += discrepancy(p1, p2);
        let (g1, g2) = discrepancy_logit_grads(p1, p2);
        for c in 0..2 {
            d1[[i, c]] = g1[c] * weight / n;
            d2[[i, c]] = g2[c] * weight / n;
        }
    }
    if weight != 0.0 && (scope.instance_heads || scope.encoder) {
        let (mut s1, mut s2);
        let (g1, g2) = if scope.instance_heads {
            let (a, b) = grads.heads.split_at_mut(1);
            (&mut a[0], &mut b[0])
        } else {
            s1 = h1.zeros_like();
            s2 = h2.zeros_like();
            (&mut s1, &mut s2)
        };
        let mut dfeat = h1.backward(&t1, d1, g1);
        dfeat += &h2.backward(&t2, d2, g2);
        backprop_encoder(model, &enc, dfeat, grads);
    }
    Ok(sum / n)
}

/// Inputs for one adaptation-phase minibatch.
#[derive(Clone, Copy, Debug)]
pub struct Step2Batch<'a> {
    /// Source instances, pseudo-labeled target instances and negative-bag
    /// samples, stacked.
    pub labeled_x: ArrayView2<'a, f64>,
    pub labels: &'a [u8],
    /// Target instances for the discrepancy terms.
    pub target_x: ArrayView2<'a, f64>,
    pub source_bags: &'a [&'a BagInput],
    pub target_bags: &'a [&'a BagInput],
}

/// Unweighted components seen while evaluating an objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub bag_source: f64,
    pub bag_target: f64,
    pub instance: f64,
    pub instance_empty: bool,
    pub discrepancy: f64,
}

/// Value and in-scope gradient of one objective.
pub fn objective_gradients(
    model: &ModelBundle,
    objective: Objective,
    batch: &Step2Batch,
    lambda: f64,
) -> Result<(f64, Components, Gradients)> {
    let scope = objective.scope();
    let mut grads = Gradients::zeros(model);
    let mut c = Components::default();
    let value = match objective {
        Objective::Joint => {
            let li = instance_term(model, batch.labeled_x, batch.labels, lambda, scope, &mut grads);
            let bt = bag_term(model, batch.target_bags, 1.0 - lambda, scope, &mut grads);
            let bs = bag_term(model, batch.source_bags, 1.0 - lambda, scope, &mut grads);
            c.instance = li.value;
            c.instance_empty = li.empty;
            c.bag_target = bt.value;
            c.bag_source = bs.value;
            lambda * li.value + (1.0 - lambda) * (bt.value + bs.value)
        }
        Objective::HeadDiscrepancy => {
            let li = instance_term(model, batch.labeled_x, batch.labels, lambda, scope, &mut grads);
            let adv = discrepancy_term(model, batch.target_x, -lambda, scope, &mut grads)?;
            c.instance = li.value;
            c.instance_empty = li.empty;
            c.discrepancy = adv;
            lambda * (li.value - adv)
        }
        Objective::EncoderDiscrepancy => {
            let adv = discrepancy_term(model, batch.target_x, lambda, scope, &mut grads)?;
            c.discrepancy = adv;
            lambda * adv
        }
    };
    Ok((value, c, grads))
}

/// Values of the three objectives on one batch, without gradients.
pub fn step2_objectives(model: &ModelBundle, batch: &Step2Batch, lambda: f64) -> Result<(f64, f64, f64)> {
    let mut out = [0.0; 3];
    let none = Scope {
        encoder: false,
        bag_head: false,
        instance_heads: false,
    };
    let mut grads = Gradients::zeros(model);
    let li = instance_term(model, batch.labeled_x, batch.labels, 0.0, none, &mut grads).value;
    let bt = bag_term(model, batch.target_bags, 0.0, none, &mut grads).value;
    let bs = bag_term(model, batch.source_bags, 0.0, none, &mut grads).value;
    let adv = discrepancy_term(model, batch.target_x, 0.0, none, &mut grads)?;
    out[0] = lambda * li + (1.0 - lambda) * (bt + bs);
    out[1] = lambda * (li - adv);
    out[2] = lambda * adv;
    Ok((out[0], out[1], out[2]))
}
