//! Small dense building blocks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Affine map `y = W x + b`, `W` stored row-major with shape `out x inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            out,
            inp,
            w: vec![0.0; out * inp],
            b: vec![0.0; out],
        }
    }

    /// Gaussian weights with the given std, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(out: usize, inp: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Linear {
            out,
            inp,
            w: (0..out * inp).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; out],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Linear::zeros(n, n);
        for i in 0..n {
            l.w[i * n + i] = 1.0;
        }
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        self.w
            .chunks_exact(self.inp)
            .zip(&self.b)
            .map(|(row, b)| dot(row, x) + b)
            .collect()
    }

    /// Accumulates parameter gradients for `dy` at input `x` into `grad`
    /// and, if requested, adds `W^T dy` into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            let row = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            axpy(g, x, row);
        }
        if let Some(dx) = dx {
            for (o, &g) in dy.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, &self.w[o * self.inp..(o + 1) * self.inp], dx);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w
            .iter_mut()
            .chain(self.b.iter_mut())
            .for_each(|v| *v *= s);
    }

    /// `self -= lr * grad`.
    pub fn step(&mut self, grad: &Linear, lr: f64) {
        axpy(-lr, &grad.w, &mut self.w);
        axpy(-lr, &grad.b, &mut self.b);
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`.
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn relu_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}
