//! Minimal dense 3-layer network with hand-written backpropagation:
//! tanh hidden layers, sigmoid outputs, flat parameter storage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Mlp {
    pub din: usize,
    pub h1: usize,
    pub h2: usize,
    pub dout: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

pub(crate) struct MlpBuffer {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub out: Vec<f64>,
    d3: Vec<f64>,
    d2: Vec<f64>,
    d1: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl MlpGrads {
    pub fn zero(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2.fill(0.0);
        self.w3.fill(0.0);
        self.b3.fill(0.0);
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp {
    pub fn init(din: usize, h1: usize, h2: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            din,
            h1,
            h2,
            dout,
            w1: xavier(rng, din, h1, h1 * din),
            b1: vec![0.0; h1],
            w2: xavier(rng, h1, h2, h2 * h1),
            b2: vec![0.0; h2],
            w3: xavier(rng, h2, dout, dout * h2),
            b3: vec![0.0; dout],
        }
    }

    pub fn buffer(&self) -> MlpBuffer {
        MlpBuffer {
            a1: vec![0.0; self.h1],
            a2: vec![0.0; self.h2],
            out: vec![0.0; self.dout],
            d3: vec![0.0; self.dout],
            d2: vec![0.0; self.h2],
            d1: vec![0.0; self.h1],
        }
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
            w3: vec![0.0; self.w3.len()],
            b3: vec![0.0; self.b3.len()],
        }
    }

    pub fn forward(&self, x: &[f64], buf: &mut MlpBuffer) {
        debug_assert_eq!(x.len(), self.din);
        for i in 0..self.h1 {
            let row = &self.w1[i * self.din..(i + 1) * self.din];
            let z: f64 = self.b1[i] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            buf.a1[i] = z.tanh();
        }
        for i in 0..self.h2 {
            let row = &self.w2[i * self.h1..(i + 1) * self.h1];
            let z: f64 = self.b2[i] + row.iter().zip(&buf.a1).map(|(w, v)| w * v).sum::<f64>();
            buf.a2[i] = z.tanh();
        }
        for o in 0..self.dout {
            let row = &self.w3[o * self.h2..(o + 1) * self.h2];
            let z: f64 = self.b3[o] + row.iter().zip(&buf.a2).map(|(w, v)| w * v).sum::<f64>();
            buf.out[o] = sigmoid(z);
        }
    }

    /// Accumulate parameter gradients for `dL/d out` into `grads`.
    /// `forward` must have filled `buf` for the same `x`.
    pub fn backward(&self, x: &[f64], buf: &mut MlpBuffer, g_out: &[f64], grads: &mut MlpGrads) {
        debug_assert_eq!(g_out.len(), self.dout);
        // output layer: sigmoid derivative, then skip zero rows (the loss
        // touches only a couple of output units per example)
        for o in 0..self.dout {
            buf.d3[o] = g_out[o] * buf.out[o] * (1.0 - buf.out[o]);
        }
        buf.d2.fill(0.0);
        for o in 0..self.dout {
            let d = buf.d3[o];
            if d == 0.0 {
                continue;
            }
            grads.b3[o] += d;
            let grow = &mut grads.w3[o * self.h2..(o + 1) * self.h2];
            let wrow = &self.w3[o * self.h2..(o + 1) * self.h2];
            for j in 0..self.h2 {
                grow[j] += d * buf.a2[j];
                buf.d2[j] += wrow[j] * d;
            }
        }
        for j in 0..self.h2 {
            buf.d2[j] *= 1.0 - buf.a2[j] * buf.a2[j];
        }
        buf.d1.fill(0.0);
        for i in 0..self.h2 {
            let d = buf.d2[i];
            if d == 0.0 {
                continue;
            }
            grads.b2[i] += d;
            let grow = &mut grads.w2[i * self.h1..(i + 1) * self.h1];
            let wrow = &self.w2[i * self.h1..(i + 1) * self.h1];
            for j in 0..self.h1 {
                grow[j] += d * buf.a1[j];
                buf.d1[j] += wrow[j] * d;
            }
        }
        for j in 0..self.h1 {
            buf.d1[j] *= 1.0 - buf.a1[j] * buf.a1[j];
        }
        for i in 0..self.h1 {
            let d = buf.d1[i];
            if d == 0.0 {
                continue;
            }
            grads.b1[i] += d;
            let grow = &mut grads.w1[i * self.din..(i + 1) * self.din];
            for (g, v) in grow.iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }

    /// Gradient-descent step: `param -= scale * grad`.
    pub fn apply(&mut self, grads: &MlpGrads, scale: f64) {
        for (p, g) in self.w1.iter_mut().zip(&grads.w1) {
            *p -= scale * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grads.b1) {
            *p -= scale * g;
        }
        for (p, g) in self.w2.iter_mut().zip(&grads.w2) {
            *p -= scale * g;
        }
        for (p, g) in self.b2.iter_mut().zip(&grads.b2) {
            *p -= scale * g;
        }
        for (p, g) in self.w3.iter_mut().zip(&grads.w3) {
            *p -= scale * g;
        }
        for (p, g) in self.b3.iter_mut().zip(&grads.b3) {
            *p -= scale * g;
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    fn slot(&self, index: usize) -> (usize, usize) {
        // (which tensor, offset) over [w1, b1, w2, b2, w3, b3]
        let sizes = [
            self.w1.len(),
            self.b1.len(),
            self.w2.len(),
            self.b2.len(),
            self.w3.len(),
            self.b3.len(),
        ];
        let mut rest = index;
        for (tensor, &s) in sizes.iter().enumerate() {
            if rest < s {
                return (tensor, rest);
            }
            rest -= s;
        }
        panic!("parameter index {index} out of range {}", self.param_count());
    }

    pub fn get_param(&self, index: usize) -> f64 {
        match self.slot(index) {
            (0, i) => self.w1[i],
            (1, i) => self.b1[i],
            (2, i) => self.w2[i],
            (3, i) => self.b2[i],
            (4, i) => self.w3[i],
            (5, i) => self.b3[i],
            _ => unreachable!(),
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        match self.slot(index) {
            (0, i) => self.w1[i] = value,
            (1, i) => self.b1[i] = value,
            (2, i) => self.w2[i] = value,
            (3, i) => self.b2[i] = value,
            (4, i) => self.w3[i] = value,
            (5, i) => self.b3[i] = value,
            _ => unreachable!(),
        }
    }

    pub fn grad_param(grads: &MlpGrads, index: usize, shape: &Mlp) -> f64 {
        match shape.slot(index) {
            (0, i) => grads.w1[i],
            (1, i) => grads.b1[i],
            (2, i) => grads.w2[i],
            (3, i) => grads.b2[i],
            (4, i) => grads.w3[i],
            (5, i) => grads.b3[i],
            _ => unreachable!(),
        }
    }
}
