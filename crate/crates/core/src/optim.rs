//! Adam over any [`Params`] value.

use crate::model::Params;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step<P: Params>(&mut self, params: &mut P, grad: &P) {
        let g = grad.to_flat();
        if self.m.len() != g.len() {
            self.m = vec![0.0; g.len()];
            self.v = vec![0.0; g.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut(&mut |slice| {
            for p in slice.iter_mut() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
                i += 1;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Linear;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Linear {
            weight: array![[1.0, -1.0]],
            bias: array![0.0],
        };
        let g = Linear {
            weight: array![[3.0, -0.5]],
            bias: array![0.0],
        };
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g);
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.weight[[0, 1]] + 0.9).abs() < 1e-6);
        assert_eq!(p.bias[0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Linear {
            weight: array![[4.0, -3.0]],
            bias: array![2.0],
        };
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.to_flat().iter().all(|v| v.abs() < 1e-2));
    }
}
