//! Minimal dense network with hand-written backprop.
//!
//! The policy and value networks are two-hidden-layer perceptrons over a
//! 2-dimensional observation, small enough that explicit gradients are
//! cheaper and more transparent than an autodiff dependency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::{real, Real};

/// Fully connected layer, `y = W x + b`, weights row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        // Xavier-uniform
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| real::<T>(rng.gen_range(-limit..limit)))
            .collect();
        let b = vec![T::zero(); rows];
        Self { rows, cols, w, b }
    }

    fn forward(&self, x: &[T], out: &mut Vec<T>) {
        debug_assert_eq!(x.len(), self.cols);
        out.clear();
        for r in 0..self.rows {
            let row = &self.w[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.b[r];
            for (wi, xi) in row.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            out.push(acc);
        }
    }
}

/// Perceptron with tanh hidden activations and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

/// Per-layer activations kept for the backward pass. `acts[0]` is the input,
/// `acts[i+1]` the output of layer `i` (post-tanh except for the last layer).
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pub acts: Vec<Vec<T>>,
}

/// Gradients with the same shapes as [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads<T> {
    pub w: Vec<Vec<T>>,
    pub b: Vec<Vec<T>>,
}

impl<T: Real> Mlp<T> {
    /// `dims` lists layer widths input-first, e.g. `[2, 64, 64, 1]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|io| Dense::init(io[1], io[0], rng))
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> MlpGrads<T> {
        MlpGrads {
            w: self.layers.iter().map(|l| vec![T::zero(); l.w.len()]).collect(),
            b: self.layers.iter().map(|l| vec![T::zero(); l.b.len()]).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, MlpCache<T>) {
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        acts.push(x.to_vec());
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward(&cur, &mut out);
            if i + 1 < n {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            acts.push(out.clone());
            cur = out;
        }
        (cur, MlpCache { acts })
    }

    /// Scalar forward for single-output networks, without keeping a cache.
    pub fn forward_scalar(&self, x: &[T]) -> T {
        debug_assert_eq!(self.output_dim(), 1);
        let n = self.layers.len();
        let mut cur = x.to_vec();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut out);
            if i + 1 < n {
                for v in &mut out {
                    *v = v.tanh();
                }
            }
            std::mem::swap(&mut cur, &mut out);
        }
        cur[0]
    }

    /// Accumulates gradients for one sample given `d_out = dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache<T>, d_out: &[T], grads: &mut MlpGrads<T>) {
        let n = self.layers.len();
        let mut delta = d_out.to_vec();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let out = &cache.acts[i + 1];
            let input = &cache.acts[i];
            // dL/dz: tanh derivative on hidden layers, identity on the last.
            let dz: Vec<T> = if i + 1 < n {
                delta
                    .iter()
                    .zip(out)
                    .map(|(&d, &a)| d * (T::one() - a * a))
                    .collect()
            } else {
                delta.clone()
            };
            let gw = &mut grads.w[i];
            let gb = &mut grads.b[i];
            for r in 0..layer.rows {
                gb[r] = gb[r] + dz[r];
                let base = r * layer.cols;
                for c in 0..layer.cols {
                    gw[base + c] = gw[base + c] + dz[r] * input[c];
                }
            }
            if i > 0 {
                let mut dx = vec![T::zero(); layer.cols];
                for r in 0..layer.rows {
                    let base = r * layer.cols;
                    for (c, dxc) in dx.iter_mut().enumerate() {
                        *dxc = *dxc + layer.w[base + c] * dz[r];
                    }
                }
                delta = dx;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn write_flat(&self, out: &mut Vec<T>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    pub fn read_flat(&mut self, src: &[T], at: &mut usize) {
        for l in &mut self.layers {
            l.w.copy_from_slice(&src[*at..*at + l.w.len()]);
            *at += l.w.len();
            l.b.copy_from_slice(&src[*at..*at + l.b.len()]);
            *at += l.b.len();
        }
    }
}

impl<T: Real> MlpGrads<T> {
    pub fn write_flat(&self, out: &mut Vec<T>) {
        for (w, b) in self.w.iter().zip(&self.b) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for w in &mut self.w {
            for v in w {
                *v = *v * s;
            }
        }
        for b in &mut self.b {
            for v in b {
                *v = *v * s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_hand_computation() {
        // 2 -> 2 -> 1 with known weights.
        let l0 = Dense {
            rows: 2,
            cols: 2,
            w: vec![0.5, -1.0, 2.0, 0.25],
            b: vec![0.1, -0.2],
        };
        let l1 = Dense {
            rows: 1,
            cols: 2,
            w: vec![1.5, -0.5],
            b: vec![0.05],
        };
        let net = Mlp { layers: vec![l0, l1] };
        let x = [0.3f64, -0.6];
        let h0 = (0.5 * 0.3 + (-1.0) * (-0.6) + 0.1).tanh();
        let h1 = (2.0 * 0.3 + 0.25 * (-0.6) - 0.2).tanh();
        let expected = 1.5 * h0 - 0.5 * h1 + 0.05;
        let (out, _) = net.forward(&x);
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((net.forward_scalar(&x) - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = Mlp::<f64>::init(&[2, 4, 1], &mut rng);
        let x = [0.7, -0.2];
        // Loss = output itself; gradient of output wrt every parameter.
        let (_, cache) = net.forward(&x);
        let mut grads = net.zeros_like();
        net.backward(&cache, &[1.0], &mut grads);

        let mut flat = Vec::new();
        net.write_flat(&mut flat);
        let mut flat_grads = Vec::new();
        grads.write_flat(&mut flat_grads);

        let h = 1e-6;
        for k in 0..flat.len() {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let mut at = 0;
            net.read_flat(&plus, &mut at);
            let fp = net.forward_scalar(&x);
            at = 0;
            net.read_flat(&minus, &mut at);
            let fm = net.forward_scalar(&x);
            at = 0;
            net.read_flat(&flat, &mut at);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - flat_grads[k]).abs() < 1e-7,
                "param {k}: fd={fd} analytic={}",
                flat_grads[k]
            );
        }
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::init(&[2, 8, 8, 1], &mut rng);
        let mut flat = Vec::new();
        net.write_flat(&mut flat);
        assert_eq!(flat.len(), net.param_count());
        let mut copy = net.clone();
        let mut at = 0;
        copy.read_flat(&flat, &mut at);
        assert_eq!(copy, net);
    }
}
