//! Central finite-difference checks of the analytic gradients.
//!
//! Each check draws a small random architecture and input, computes the
//! cross-entropy of one prediction, and compares the backpropagated gradient
//! over every encoder and head parameter with `(f(θ+h) - f(θ-h)) / 2h`.

use ndarray::{Array1, Array2};
use rand::Rng as _;

use crate::losses::{bag_loss, nll_logit_grad};
use crate::model::{
    bag_predict, encode, instance_predict, init_encoder, init_instance_head, Activation, ArchSpec,
    AttentionBagHead, Mlp, Params,
};
use crate::rng;

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub arch: ArchSpec,
    pub n_params: usize,
    /// `‖g_analytic - g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`
    pub relative_error: f64,
    /// Largest per-parameter absolute difference.
    pub max_abs_diff: f64,
}

/// A small random architecture and input for check number `seed`.
pub fn random_case(seed: u64) -> (ArchSpec, Array2<f64>, u8, rng::Rng) {
    let mut r = rng::stream(seed, 0x6c);
    let input_dim = r.random_range(2..=5);
    let depth = r.random_range(1..=2);
    let arch = ArchSpec {
        input_dim,
        encoder_hidden: (0..depth).map(|_| r.random_range(3..=6)).collect(),
        feature_dim: r.random_range(3..=6),
        attention_dim: r.random_range(2..=5),
        head_hidden: r.random_range(2..=5),
        encoder_activation: Activation::Tanh,
        head_activation: Activation::Relu,
    };
    let k = r.random_range(2..=6);
    let x = Array2::from_shape_fn((k, input_dim), |_| r.random_range(-2.0..2.0));
    let y = r.random_range(0..=1u8);
    (arch, x, y, r)
}

fn compare(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric)).max(f64::MIN_POSITIVE);
    let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    (norm(&diff) / denom, max_abs)
}

/// Numeric gradient of `f` over the flat parameters of `(a, b)`.
fn numeric<A: Params, B: Params>(a: &A, b: &B, f: &dyn Fn(&A, &B) -> f64) -> Vec<f64> {
    let fa = a.to_flat();
    let fb = b.to_flat();
    let mut out = Vec::with_capacity(fa.len() + fb.len());
    let mut a2 = a.clone();
    for i in 0..fa.len() {
        let mut v = fa.clone();
        v[i] += STEP;
        a2.set_flat(&v).expect("same length");
        let plus = f(&a2, b);
        v[i] -= 2.0 * STEP;
        a2.set_flat(&v).expect("same length");
        let minus = f(&a2, b);
        out.push((plus - minus) / (2.0 * STEP));
    }
    let mut b2 = b.clone();
    for i in 0..fb.len() {
        let mut v = fb.clone();
        v[i] += STEP;
        b2.set_flat(&v).expect("same length");
        let plus = f(a, &b2);
        v[i] -= 2.0 * STEP;
        b2.set_flat(&v).expect("same length");
        let minus = f(a, &b2);
        out.push((plus - minus) / (2.0 * STEP));
    }
    out
}

/// Checks `-ln bag_predict(encode(x))[y]` over encoder and bag-head parameters.
pub fn check_bag_predict(seed: u64) -> GradCheck {
    let (arch, x, y, mut r) = random_case(seed);
    let encoder = init_encoder(&arch, &mut r);
    let head = AttentionBagHead::init(arch.feature_dim, arch.attention_dim, &mut r);
    let loss = |enc: &Mlp, h: &AttentionBagHead| {
        let feats = encode(enc, x.view()).expect("dims match");
        bag_loss(bag_predict(h, feats.view()).expect("non-empty bag"), y)
    };

    let trace = encoder.forward_trace(x.view());
    let feats = trace.output().clone();
    let bag = head.forward(feats.view());
    let mut g_head = head.zeros_like();
    let dfeat = head.backward(feats.view(), &bag, nll_logit_grad(bag.probs, y), &mut g_head);
    let mut g_enc = encoder.zeros_like();
    encoder.backward(&trace, dfeat, &mut g_enc);

    let mut analytic = g_enc.to_flat();
    analytic.extend(g_head.to_flat());
    let num = numeric(&encoder, &head, &loss);
    let (relative_error, max_abs_diff) = compare(&analytic, &num);
    GradCheck {
        n_params: analytic.len(),
        arch,
        relative_error,
        max_abs_diff,
    }
}

/// Checks `-ln instance_predict(encode(x_0))[y]` over encoder and
/// instance-head parameters.
pub fn check_instance_predict(seed: u64) -> GradCheck {
    let (arch, x, y, mut r) = random_case(seed);
    let encoder = init_encoder(&arch, &mut r);
    let head = init_instance_head(&arch, &mut r);
    let row = x.row(0).to_owned().insert_axis(ndarray::Axis(0));
    let loss = |enc: &Mlp, h: &Mlp| {
        let feats = encode(enc, row.view()).expect("dims match");
        bag_loss(instance_predict(h, feats.row(0)).expect("dims match"), y)
    };

    let trace = encoder.forward_trace(row.view());
    let feats = trace.output().clone();
    let head_trace = head.forward_trace(feats.view());
    let logits = head_trace.output();
    let p = crate::model::softmax2([logits[[0, 0]], logits[[0, 1]]]);
    let dlogits = Array1::from(nll_logit_grad(p, y).to_vec()).insert_axis(ndarray::Axis(0));
    let mut g_head = head.zeros_like();
    let dfeat = head.backward(&head_trace, dlogits, &mut g_head);
    let mut g_enc = encoder.zeros_like();
    encoder.backward(&trace, dfeat, &mut g_enc);

    let mut analytic = g_enc.to_flat();
    analytic.extend(g_head.to_flat());
    let num = numeric(&encoder, &head, &loss);
    let (relative_error, max_abs_diff) = compare(&analytic, &num);
    GradCheck {
        n_params: analytic.len(),
        arch,
        relative_error,
        max_abs_diff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_random_configurations_agree() {
        for seed in 0..20 {
            let b = check_bag_predict(seed);
            assert!(b.relative_error <= 1e-4, "bag seed {seed}: {b:?}");
            let i = check_instance_predict(seed);
            assert!(i.relative_error <= 1e-4, "instance seed {seed}: {i:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let (rel, _) = compare(&[1.0, 2.0], &[1.0, 2.01]);
        assert!(rel > 1e-4);
        let (rel, max) = compare(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!((rel, max), (0.0, 0.0));
    }
}
