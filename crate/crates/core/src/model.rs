//! Encoder, attention bag head and instance heads, with explicit backward
//! passes.
//!
//! Shapes: instance batches are `(n, D)` row matrices, encoder features are
//! `(n, H)`. Every head ends in a two-class distribution `[p(y=0), p(y=1)]`.
//!
//! Gradient buffers reuse the parameter types: the gradient of a [`Linear`]
//! is a [`Linear`] of the same shape, which keeps the optimizer and the
//! scope bookkeeping uniform.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, streams};

/// Two-class distribution `[p(y=0), p(y=1)]`.
pub type Dist = [f64; 2];

pub fn softmax2(logits: [f64; 2]) -> Dist {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Flat access to trainable parameters, in a fixed visiting order.
pub trait Params: Clone {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |s| s.fill(0.0));
        z
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                actual: flat.len(),
            });
        }
        let mut pos = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        });
        Ok(())
    }

    /// SHA-256 over the little-endian parameter bytes.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit(&mut |s| {
            for v in s {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the output `y`.
    fn backprop(self, y: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Tanh => grad.zip_mut_with(y, |g, &y| *g *= 1.0 - y * y),
            Activation::Relu => grad.zip_mut_with(y, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform in `±1/sqrt(in)` for weights and bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(outputs, |_| rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &dy.t().dot(&x);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.weight.as_slice().expect("standard layout"));
        f(self.bias.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.weight.as_slice_mut().expect("standard layout"));
        f(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Stack of linear layers with a hidden and an output activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Activations recorded by [`Mlp::forward_trace`]; `values[0]` is the input
/// and `values[i + 1]` the activated output of layer `i`.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub values: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.values.last().expect("trace holds the input at least")
    }
}

impl Mlp {
    pub fn init(widths: &[usize], hidden: Activation, output: Activation, rng: &mut rng::Rng) -> Self {
        let layers = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut cur = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(cur.view());
            self.activation(i).apply(&mut cur);
        }
        cur
    }

    pub fn forward_trace(&self, x: ArrayView2<f64>) -> MlpTrace {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(values[i].view());
            self.activation(i).apply(&mut y);
            values.push(y);
        }
        MlpTrace { values }
    }

    /// Backpropagates `dout` (gradient w.r.t. the activated output).
    pub fn backward(&self, trace: &MlpTrace, dout: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = dout;
        for i in (0..self.layers.len()).rev() {
            self.activation(i).backprop(&trace.values[i + 1], &mut d);
            d = self.layers[i].backward(trace.values[i].view(), d.view(), &mut grad.layers[i]);
        }
        d
    }
}

impl Params for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            l.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Row-wise softmax over instance-head logits.
pub fn softmax_rows(logits: &Array2<f64>) -> Vec<Dist> {
    logits
        .rows()
        .into_iter()
        .map(|r| softmax2([r[0], r[1]]))
        .collect()
}

/// Gated attention pooling with sigmoid weights
/// `a_j = sigmoid(w · tanh(V h_j))`, bag feature `z = (Σ_j a_j h_j) / K`,
/// then one linear layer to two-class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBagHead {
    /// `(L, H)`
    pub v: Array2<f64>,
    /// `(L,)`
    pub w: Array1<f64>,
    pub classifier: Linear,
}

/// Intermediate values of one bag forward pass.
#[derive(Clone, Debug)]
pub struct BagTrace {
    /// `tanh(H V^T)`, shape `(K, L)`
    pub gate: Array2<f64>,
    pub attention: Array1<f64>,
    pub pooled: Array1<f64>,
    pub probs: Dist,
}

impl AttentionBagHead {
    pub fn init(feature_dim: usize, attention_dim: usize, rng: &mut rng::Rng) -> Self {
        let vb = 1.0 / (feature_dim as f64).sqrt();
        let wb = 1.0 / (attention_dim as f64).sqrt();
        Self {
            v: Array2::from_shape_fn((attention_dim, feature_dim), |_| rng.random_range(-vb..vb)),
            w: Array1::from_shape_fn(attention_dim, |_| rng.random_range(-wb..wb)),
            classifier: Linear::init(feature_dim, 2, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.v.ncols()
    }

    /// Per-instance weights in `(0, 1)`; each depends only on its own row.
    pub fn attention(&self, features: ArrayView2<f64>) -> Array1<f64> {
        let gate = features.dot(&self.v.t()).mapv(f64::tanh);
        gate.dot(&self.w).mapv(sigmoid)
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> BagTrace {
        let k = features.nrows() as f64;
        let gate = features.dot(&self.v.t()).mapv(f64::tanh);
        let attention = gate.dot(&self.w).mapv(sigmoid);
        // Fixed summation order over instances.
        let mut pooled = Array1::zeros(features.ncols());
        for (a, h) in attention.iter().zip(features.rows()) {
            pooled.scaled_add(*a, &h);
        }
        pooled /= k;
        let logits = self.classifier.weight.dot(&pooled) + &self.classifier.bias;
        BagTrace {
            gate,
            attention,
            pooled,
            probs: softmax2([logits[0], logits[1]]),
        }
    }

    /// Given `dL/dlogits`, accumulates parameter gradients and returns
    /// `dL/dfeatures` with shape `(K, H)`.
    pub fn backward(
        &self,
        features: ArrayView2<f64>,
        trace: &BagTrace,
        dlogits: [f64; 2],
        grad: &mut AttentionBagHead,
    ) -> Array2<f64> {
        let k = features.nrows() as f64;
        let dl = ArrayView1::from(&dlogits[..]);
        for o in 0..2 {
            grad.classifier
                .weight
                .row_mut(o)
                .scaled_add(dlogits[o], &trace.pooled);
            grad.classifier.bias[o] += dlogits[o];
        }
        let dz = self.classifier.weight.t().dot(&dl);

        // z = Σ a_j h_j / K
        let mut dfeat = Array2::zeros(features.raw_dim());
        for (j, mut row) in dfeat.rows_mut().into_iter().enumerate() {
            row.scaled_add(trace.attention[j] / k, &dz);
        }
        let da = features.dot(&dz) / k;
        let ds: Array1<f64> = &da * &trace.attention.mapv(|a| a * (1.0 - a));
        // s = gate · w
        grad.w += &trace.gate.t().dot(&ds);
        let mut dpre = Array2::from_shape_fn(trace.gate.raw_dim(), |(j, l)| ds[j] * self.w[l]);
        dpre.zip_mut_with(&trace.gate, |d, &g| *d *= 1.0 - g * g);
        grad.v += &dpre.t().dot(&features);
        dfeat += &dpre.dot(&self.v);
        dfeat
    }
}

impl Params for AttentionBagHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.v.as_slice().expect("standard layout"));
        f(self.w.as_slice().expect("standard layout"));
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.v.as_slice_mut().expect("standard layout"));
        f(self.w.as_slice_mut().expect("standard layout"));
        self.classifier.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub attention_dim: usize,
    pub head_hidden: usize,
    pub encoder_activation: Activation,
    pub head_activation: Activation,
}

impl ArchSpec {
    pub fn for_input(input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::default()
        }
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.encoder_hidden);
        w.push(self.feature_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths().contains(&0) || self.attention_dim == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            encoder_hidden: vec![64],
            feature_dim: 64,
            attention_dim: 64,
            head_hidden: 32,
            encoder_activation: Activation::Tanh,
            head_activation: Activation::Relu,
        }
    }
}

pub fn init_encoder(arch: &ArchSpec, rng: &mut rng::Rng) -> Mlp {
    Mlp::init(&arch.encoder_widths(), arch.encoder_activation, arch.encoder_activation, rng)
}

pub fn init_instance_head(arch: &ArchSpec, rng: &mut rng::Rng) -> Mlp {
    Mlp::init(
        &[arch.feature_dim, arch.head_hidden, 2],
        arch.head_activation,
        Activation::Identity,
        rng,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub enum InstanceHeads {
    /// One head (Step-1 pretraining head, or a plain supervised classifier).
    Single(Mlp),
    /// Two heads trained against each other on the discrepancy loss.
    Twin(Mlp, Mlp),
}

impl InstanceHeads {
    pub fn as_slice(&self) -> Vec<&Mlp> {
        match self {
            InstanceHeads::Single(h) => vec![h],
            InstanceHeads::Twin(a, b) => vec![a, b],
        }
    }

    pub fn as_mut_slice(&mut self) -> Vec<&mut Mlp> {
        match self {
            InstanceHeads::Single(h) => vec![h],
            InstanceHeads::Twin(a, b) => vec![a, b],
        }
    }

    pub fn is_twin(&self) -> bool {
        matches!(self, InstanceHeads::Twin(..))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: ArchSpec,
    pub encoder: Mlp,
    pub bag_head: AttentionBagHead,
    pub heads: InstanceHeads,
}

impl ModelBundle {
    /// Fresh encoder, bag head and a single instance head.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, streams::INIT_STEP1);
        let encoder = init_encoder(arch, &mut rng);
        let bag_head = AttentionBagHead::init(arch.feature_dim, arch.attention_dim, &mut rng);
        let head = init_instance_head(arch, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            encoder,
            bag_head,
            heads: InstanceHeads::Single(head),
        })
    }

    /// Encodes rows of `x`; errors on a dimension mismatch.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        encode(&self.encoder, x)
    }

    /// Instance prediction: the single head, or the average of the twins.
    pub fn instance_probs(&self, features: ArrayView2<f64>) -> Vec<Dist> {
        match &self.heads {
            InstanceHeads::Single(h) => instance_predict_batch(h, features),
            InstanceHeads::Twin(a, b) => {
                let pa = instance_predict_batch(a, features);
                let pb = instance_predict_batch(b, features);
                pa.iter().zip(&pb).map(|(p, q)| average(*p, *q)).collect()
            }
        }
    }

    pub fn encoder_hash(&self) -> String {
        self.encoder.param_hash()
    }

    pub fn bag_head_hash(&self) -> String {
        self.bag_head.param_hash()
    }

    pub fn heads_hash(&self) -> String {
        let mut h = Sha256::new();
        for head in self.heads.as_slice() {
            h.update(head.param_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn full_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.encoder_hash());
        h.update(self.bag_head_hash());
        h.update(self.heads_hash());
        hex::encode(h.finalize())
    }
}

pub fn encode(encoder: &Mlp, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != encoder.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: encoder.input_dim(),
            actual: x.ncols(),
        });
    }
    Ok(encoder.forward(x))
}

pub fn attention_weights(head: &AttentionBagHead, features: ArrayView2<f64>) -> Result<Array1<f64>> {
    check_features(head.feature_dim(), features)?;
    Ok(head.attention(features))
}

pub fn bag_predict(head: &AttentionBagHead, features: ArrayView2<f64>) -> Result<Dist> {
    check_features(head.feature_dim(), features)?;
    Ok(head.forward(features).probs)
}

fn check_features(expected: usize, features: ArrayView2<f64>) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::InvalidDataset("empty bag".into()));
    }
    if features.ncols() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: features.ncols(),
        });
    }
    Ok(())
}

pub fn instance_predict(head: &Mlp, feature: ArrayView1<f64>) -> Result<Dist> {
    if feature.len() != head.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.input_dim(),
            actual: feature.len(),
        });
    }
    let x = feature.insert_axis(Axis(0));
    Ok(instance_predict_batch(head, x)[0])
}

pub fn instance_predict_batch(head: &Mlp, features: ArrayView2<f64>) -> Vec<Dist> {
    softmax_rows(&head.forward(features))
}

pub fn average(p: Dist, q: Dist) -> Dist {
    [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0]
}

pub fn instance_predict_avg(head1: &Mlp, head2: &Mlp, feature: ArrayView1<f64>) -> Result<Dist> {
    Ok(average(instance_predict(head1, feature)?, instance_predict(head2, feature)?))
}

/// Stacks feature rows into an `(n, D)` matrix.
pub fn to_matrix<'a, I>(rows: I, dim: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), dim);
        flat.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), flat).expect("row lengths match dim")
}

const CHECKPOINT_FORMAT: &str = "milda-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arch: ArchSpec,
    heads: String,
    encoder: Vec<f64>,
    bag_head: Vec<f64>,
    instance_heads: Vec<Vec<f64>>,
}

impl ModelBundle {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            heads: if self.heads.is_twin() { "twin" } else { "single" }.into(),
            encoder: self.encoder.to_flat(),
            bag_head: self.bag_head.to_flat(),
            instance_heads: self.heads.as_slice().iter().map(|h| h.to_flat()).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Restores a checkpoint; when `expected` is given the stored architecture
    /// must match it exactly.
    pub fn from_checkpoint_json(json: &str, expected: Option<&ArchSpec>) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(json)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        if let Some(exp) = expected {
            if exp != &file.arch {
                return Err(Error::ArchMismatch(format!(
                    "expected {exp:?}, checkpoint has {:?}",
                    file.arch
                )));
            }
        }
        let mut bundle = ModelBundle::init(&file.arch, 0)?;
        bundle.encoder.set_flat(&file.encoder)?;
        bundle.bag_head.set_flat(&file.bag_head)?;
        let mut rng = rng::stream(0, streams::INIT_TWIN_A);
        bundle.heads = match (file.heads.as_str(), file.instance_heads.as_slice()) {
            ("single", [h]) => {
                let mut head = init_instance_head(&file.arch, &mut rng);
                head.set_flat(h)?;
                InstanceHeads::Single(head)
            }
            ("twin", [a, b]) => {
                let mut ha = init_instance_head(&file.arch, &mut rng);
                let mut hb = init_instance_head(&file.arch, &mut rng);
                ha.set_flat(a)?;
                hb.set_flat(b)?;
                InstanceHeads::Twin(ha, hb)
            }
            (kind, heads) => {
                return Err(Error::Format(format!(
                    "checkpoint head kind {kind} with {} parameter sets",
                    heads.len()
                )))
            }
        };
        Ok(bundle)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path, expected: Option<&ArchSpec>) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?, expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn arch() -> ArchSpec {
        ArchSpec {
            input_dim: 3,
            encoder_hidden: vec![5],
            feature_dim: 4,
            attention_dim: 3,
            head_hidden: 6,
            encoder_activation: Activation::Tanh,
            head_activation: Activation::Relu,
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let mut b = ModelBundle::init(&arch(), 1).unwrap();
        let last = b.encoder.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let h = b.encode(array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]].view()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let b = ModelBundle::init(&arch(), 2).unwrap();
        let x = array![[1e3, -1e3, 0.0], [1e3, -1e3, 0.0]];
        let h = b.encode(x.view()).unwrap();
        assert_eq!(h.row(0), h.row(1));
        assert!(h.iter().all(|v| v.is_finite()));
        assert!(matches!(
            b.encode(array![[1.0, 2.0]].view()),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn zero_w_gives_half_attention() {
        let mut b = ModelBundle::init(&arch(), 3).unwrap();
        b.bag_head.w.fill(0.0);
        let h = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.0, 0.5, 2.0]];
        let a = attention_weights(&b.bag_head, h.view()).unwrap();
        assert!(a.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn attention_closed_form_two_instances() {
        // V = [[1, 0], [0, 2]], w = [0.5, -1]
        let head = AttentionBagHead {
            v: array![[1.0, 0.0], [0.0, 2.0]],
            w: array![0.5, -1.0],
            classifier: Linear {
                weight: array![[0.3, -0.2], [-0.1, 0.4]],
                bias: array![0.05, -0.05],
            },
        };
        let h = array![[0.2, -0.3], [1.0, 0.4]];
        let a = attention_weights(&head, h.view()).unwrap();
        let expect = |h0: f64, h1: f64| {
            let s = 0.5 * (1.0 * h0).tanh() - (2.0 * h1).tanh();
            1.0 / (1.0 + (-s).exp())
        };
        assert!((a[0] - expect(0.2, -0.3)).abs() < 1e-12);
        assert!((a[1] - expect(1.0, 0.4)).abs() < 1e-12);

        // bag prediction from the same numbers
        let (a0, a1) = (expect(0.2, -0.3), expect(1.0, 0.4));
        let z = [(a0 * 0.2 + a1 * 1.0) / 2.0, (a0 * -0.3 + a1 * 0.4) / 2.0];
        let l0 = 0.3 * z[0] - 0.2 * z[1] + 0.05;
        let l1 = -0.1 * z[0] + 0.4 * z[1] - 0.05;
        let p1 = l1.exp() / (l0.exp() + l1.exp());
        let p = bag_predict(&head, h.view()).unwrap();
        assert!((p[1] - p1).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bag_prediction_is_permutation_invariant() {
        let b = ModelBundle::init(&arch(), 4).unwrap();
        let h = array![[0.1, 0.2, 0.3, 0.4], [-0.5, 0.1, 0.0, 0.9], [0.7, -0.7, 0.2, 0.1]];
        let shuffled = array![[0.7, -0.7, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4], [-0.5, 0.1, 0.0, 0.9]];
        let p = bag_predict(&b.bag_head, h.view()).unwrap();
        let q = bag_predict(&b.bag_head, shuffled.view()).unwrap();
        assert!((p[1] - q[1]).abs() < 1e-9);
        let a = attention_weights(&b.bag_head, h.view()).unwrap();
        let a2 = attention_weights(&b.bag_head, shuffled.view()).unwrap();
        assert_eq!(a[2], a2[0]);
    }

    #[test]
    fn duplicated_instance_matches_single() {
        let b = ModelBundle::init(&arch(), 5).unwrap();
        let one = array![[0.3, -0.1, 0.8, 0.2]];
        let many = Array2::from_shape_fn((7, 4), |(_, j)| one[[0, j]]);
        let p = bag_predict(&b.bag_head, one.view()).unwrap();
        let q = bag_predict(&b.bag_head, many.view()).unwrap();
        assert!((p[1] - q[1]).abs() < 1e-12);
        assert!(bag_predict(&b.bag_head, Array2::<f64>::zeros((0, 4)).view()).is_err());
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let b = ModelBundle::init(&arch(), 6).unwrap();
        let InstanceHeads::Single(mut head) = b.heads else { unreachable!() };
        let out = head.layers.last_mut().unwrap();
        out.weight.fill(0.0);
        out.bias.fill(0.0);
        let p = instance_predict(&head, array![1.0, 2.0, 3.0, 4.0].view()).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn tiny_head_closed_form() {
        let head = Mlp {
            layers: vec![
                Linear {
                    weight: array![[1.0, -1.0]],
                    bias: array![0.5],
                },
                Linear {
                    weight: array![[2.0], [-1.0]],
                    bias: array![0.0, 0.25],
                },
            ],
            hidden: Activation::Relu,
            output: Activation::Identity,
        };
        // hidden = relu(0.3 - (-0.4) + 0.5) = 1.2; logits = (2.4, -0.95)
        let p = instance_predict(&head, array![0.3, -0.4].view()).unwrap();
        let e0 = 2.4f64.exp();
        let e1 = (-0.95f64).exp();
        assert!((p[0] - e0 / (e0 + e1)).abs() < 1e-12);
        assert!((p[1] - e1 / (e0 + e1)).abs() < 1e-12);
    }

    #[test]
    fn averaged_heads() {
        let b = ModelBundle::init(&arch(), 7).unwrap();
        let InstanceHeads::Single(head) = &b.heads else { unreachable!() };
        let x = array![0.1, 0.2, -0.3, 0.4];
        let p = instance_predict(head, x.view()).unwrap();
        assert_eq!(instance_predict_avg(head, head, x.view()).unwrap(), p);
        assert_eq!(average([1.0, 0.0], [0.0, 1.0]), [0.5, 0.5]);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut b = ModelBundle::init(&arch(), 8).unwrap();
        let mut rng = rng::stream(1, 1);
        b.heads = InstanceHeads::Twin(init_instance_head(&b.arch, &mut rng), init_instance_head(&b.arch, &mut rng));
        let json = b.to_checkpoint_json().unwrap();
        let back = ModelBundle::from_checkpoint_json(&json, Some(&arch())).unwrap();
        assert_eq!(back, b);
        let other = ArchSpec {
            head_hidden: 7,
            ..arch()
        };
        assert!(matches!(
            ModelBundle::from_checkpoint_json(&json, Some(&other)),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax2([1000.0, -1000.0]);
        assert_eq!(p, [1.0, 0.0]);
        assert!((sigmoid(-800.0)).is_finite());
    }
}
