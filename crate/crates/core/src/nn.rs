//! Small dense and convolutional building blocks with hand-written backward passes.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::rng;

/// Fully connected layer, weights row-major `out x in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, r: &mut rng::Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self { inputs, outputs, weight: rng::normal_vec(r, inputs * outputs, std), bias: vec![0.0; outputs] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| dot(&self.weight[o * self.inputs..(o + 1) * self.inputs], x) + self.bias[o])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Accumulates parameter gradients into `grad` (weights then bias) and returns d/dx.
    fn backward(&self, x: &[f64], gy: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        let mut gx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = gy[o];
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut gw[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }
}

/// Multilayer perceptron with tanh hidden units and a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations of one forward pass: `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
pub struct MlpTape {
    pub acts: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("non-empty tape")
    }
}

impl Mlp {
    pub fn new(widths: &[usize], r: &mut rng::Rng) -> Self {
        Self { layers: widths.windows(2).map(|w| Dense::new(w[0], w[1], r)).collect() }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if l < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn forward_tape(&self, x: &[f64]) -> MlpTape {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = layer.forward(acts.last().expect("input"));
            if l < last {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(h);
        }
        MlpTape { acts }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Accumulates parameter gradients into `grad` and returns d/dinput.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.param_count();
        }
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gi, a) in g.iter_mut().zip(&tape.acts[l + 1]) {
                    *gi *= 1.0 - a * a;
                }
            }
            let layer = &self.layers[l];
            let slot = &mut grad[offsets[l]..offsets[l] + layer.param_count()];
            g = layer.backward(&tape.acts[l], &g, slot);
        }
        g
    }

    /// d/dinput of `<grad_out, forward(x)>` without parameter gradients.
    pub fn input_vjp(&self, tape: &MlpTape, grad_out: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l < last {
                for (gi, a) in g.iter_mut().zip(&tape.acts[l + 1]) {
                    *gi *= 1.0 - a * a;
                }
            }
            let layer = &self.layers[l];
            let mut gx = vec![0.0; layer.inputs];
            for o in 0..layer.outputs {
                if g[o] == 0.0 {
                    continue;
                }
                let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                for (x, w) in gx.iter_mut().zip(row) {
                    *x += g[o] * w;
                }
            }
            g = gx;
        }
        g
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            v.extend_from_slice(&layer.weight);
            v.extend_from_slice(&layer.bias);
        }
        v
    }

    pub fn set_params(&mut self, v: &[f64]) {
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            layer.weight.copy_from_slice(&v[off..off + nw]);
            off += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&v[off..off + nb]);
            off += nb;
        }
    }

    /// Applies an update to parameters in the flat order of [`Mlp::params`].
    pub fn apply_update(&mut self, update: &[f64]) {
        let mut off = 0;
        for layer in &mut self.layers {
            for w in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *w += update[off];
                off += 1;
            }
        }
    }
}

/// Adam with bias correction; `step` returns the additive update.
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
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        grad.iter()
            .enumerate()
            .map(|(i, g)| {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                -self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

/// Adam whose second-moment estimate is shared by all entries of a column
/// block, so each column moves along its own averaged gradient direction.
#[derive(Clone, Debug)]
pub struct ColumnAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    rows: usize,
    cols: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ColumnAdam {
    /// For a row-major `rows x cols` parameter matrix.
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, rows, cols, m: vec![0.0; rows * cols], v: vec![0.0; cols], t: 0 }
    }

    pub fn step(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut col_sq = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                col_sq[c] += grad[r * self.cols + c].powi(2);
            }
        }
        for c in 0..self.cols {
            self.v[c] = self.beta2 * self.v[c] + (1.0 - self.beta2) * col_sq[c] / self.rows as f64;
        }
        let mut out = vec![0.0; grad.len()];
        for (i, g) in grad.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let c = i % self.cols;
            out[i] = -self.lr * (self.m[i] / c1) / ((self.v[c] / c2).sqrt() + self.eps);
        }
        out
    }
}

/// Principal components of row-sample data, found by subspace iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `components x dim`, orthonormal rows, scaled to unit output variance.
    pub projection: Vec<f64>,
    pub components: usize,
}

impl Pca {
    /// Fits `components` whitened directions. `data` holds `n` rows of length `dim`.
    pub fn fit(data: &[Vec<f64>], components: usize, iterations: usize, r: &mut rng::Rng) -> Self {
        use nalgebra::DMatrix;
        let n = data.len();
        let dim = data[0].len();
        let mut mean = vec![0.0; dim];
        for row in data {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let x = DMatrix::from_fn(n, dim, |i, j| data[i][j] - mean[j]);
        let mut q = crate::linalg::orthonormalize_columns(&DMatrix::from_vec(
            dim,
            components,
            rng::normal_vec(r, dim * components, 1.0),
        ));
        for _ in 0..iterations {
            let y = &x * &q;
            q = crate::linalg::orthonormalize_columns(&(x.transpose() * y));
        }
        // Rayleigh-Ritz to sort and align components.
        let y = &x * &q;
        let small = (y.transpose() * &y) / n as f64;
        let eig = nalgebra::SymmetricEigen::new(small);
        let mut order: Vec<usize> = (0..components).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = q * &eig.eigenvectors;
        let mut projection = vec![0.0; components * dim];
        for (k, &c) in order.iter().enumerate() {
            let scale = 1.0 / eig.eigenvalues[c].max(1e-12).sqrt();
            for j in 0..dim {
                projection[k * dim + j] = basis[(j, c)] * scale;
            }
        }
        Self { dim, mean, projection, components }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        (0..self.components).map(|k| dot(&self.projection[k * self.dim..(k + 1) * self.dim], &centered)).collect()
    }

    pub fn transform_vjp(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (k, gk) in g.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&self.projection[k * self.dim..(k + 1) * self.dim]) {
                *o += gk * p;
            }
        }
        out
    }
}

/// Channel-planar feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

/// 3x3 convolution with zero padding, weights `[out][in][3][3]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv3 {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3 {
    pub fn new(inputs: usize, outputs: usize, r: &mut rng::Rng) -> Self {
        let std = (1.0 / (9.0 * inputs as f64)).sqrt();
        Self { inputs, outputs, weight: rng::normal_vec(r, outputs * inputs * 9, std), bias: rng::normal_vec(r, outputs, 0.1) }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let s = x.size;
        let mut out = vec![0.0; self.outputs * s * s];
        for o in 0..self.outputs {
            let plane = &mut out[o * s * s..(o + 1) * s * s];
            plane.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.inputs {
                let src = &x.data[i * s * s..(i + 1) * s * s];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = self.weight[((o * self.inputs + i) * 3 + ky) * 3 + kx];
                        for y in 0..s {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= s as isize {
                                continue;
                            }
                            let srow = &src[sy as usize * s..(sy as usize + 1) * s];
                            let drow = &mut plane[y * s..(y + 1) * s];
                            let (x0, x1) = match kx {
                                0 => (1, s),
                                1 => (0, s),
                                _ => (0, s - 1),
                            };
                            for xx in x0..x1 {
                                drow[xx] += w * srow[xx + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        FeatureMap { channels: self.outputs, size: s, data: out }
    }

    /// d/dinput given d/doutput (weights frozen).
    pub fn input_vjp(&self, g: &FeatureMap) -> FeatureMap {
        let s = g.size;
        let mut out = vec![0.0; self.inputs * s * s];
        for o in 0..self.outputs {
            let gplane = &g.data[o * s * s..(o + 1) * s * s];
            for i in 0..self.inputs {
                let dst = &mut out[i * s * s..(i + 1) * s * s];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let w = self.weight[((o * self.inputs + i) * 3 + ky) * 3 + kx];
                        for y in 0..s {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= s as isize {
                                continue;
                            }
                            let grow = &gplane[y * s..(y + 1) * s];
                            let drow = &mut dst[sy as usize * s..(sy as usize + 1) * s];
                            let (x0, x1) = match kx {
                                0 => (1, s),
                                1 => (0, s),
                                _ => (0, s - 1),
                            };
                            for xx in x0..x1 {
                                drow[xx + kx - 1] += w * grow[xx];
                            }
                        }
                    }
                }
            }
        }
        FeatureMap { channels: self.inputs, size: s, data: out }
    }
}

/// 2x2 average pooling.
pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let s = x.size / 2;
    let mut out = vec![0.0; x.channels * s * s];
    for c in 0..x.channels {
        for y in 0..s {
            for xx in 0..s {
                out[(c * s + y) * s + xx] = 0.25
                    * (x.at(c, 2 * y, 2 * xx) + x.at(c, 2 * y, 2 * xx + 1) + x.at(c, 2 * y + 1, 2 * xx) + x.at(c, 2 * y + 1, 2 * xx + 1));
            }
        }
    }
    FeatureMap { channels: x.channels, size: s, data: out }
}

pub fn avg_pool2_vjp(g: &FeatureMap) -> FeatureMap {
    let s = g.size * 2;
    let mut out = vec![0.0; g.channels * s * s];
    for c in 0..g.channels {
        for y in 0..s {
            for x in 0..s {
                out[(c * s + y) * s + x] = 0.25 * g.at(c, y / 2, x / 2);
            }
        }
    }
    FeatureMap { channels: g.channels, size: s, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], idx: &[usize]) {
        let h = 1e-5;
        for &i in idx {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "index {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng::seeded(1);
        let mlp = Mlp::new(&[5, 7, 4], &mut r);
        let x = rng::normal_vec(&mut r, 5, 1.0);
        let probe = rng::normal_vec(&mut r, 4, 1.0);
        let tape = mlp.forward_tape(&x);
        let mut grad = vec![0.0; mlp.param_count()];
        let gx = mlp.backward(&tape, &probe, &mut grad);
        assert_eq!(gx, mlp.input_vjp(&tape, &probe));
        fd_check(|xx| dot(&probe, &mlp.forward(xx)), &x, &gx, &[0, 2, 4]);
        let params = mlp.params();
        let f = |p: &[f64]| {
            let mut m = mlp.clone();
            m.set_params(p);
            dot(&probe, &m.forward(&x))
        };
        fd_check(f, &params, &grad, &[0, 10, 34, 40, params.len() - 1]);
    }

    #[test]
    fn conv_and_pool_adjoints() {
        let mut r = rng::seeded(2);
        let conv = Conv3::new(2, 3, &mut r);
        let x = FeatureMap { channels: 2, size: 6, data: rng::normal_vec(&mut r, 72, 1.0) };
        let g = FeatureMap { channels: 3, size: 6, data: rng::normal_vec(&mut r, 108, 1.0) };
        let y = conv.forward(&x);
        let zero = conv.forward(&FeatureMap { channels: 2, size: 6, data: vec![0.0; 72] });
        let lin: Vec<f64> = y.data.iter().zip(&zero.data).map(|(a, b)| a - b).collect();
        let gx = conv.input_vjp(&g);
        assert!((dot(&lin, &g.data) - dot(&x.data, &gx.data)).abs() < 1e-10);

        let gp = FeatureMap { channels: 2, size: 3, data: rng::normal_vec(&mut r, 18, 1.0) };
        let lhs = dot(&avg_pool2(&x).data, &gp.data);
        let rhs = dot(&x.data, &avg_pool2_vjp(&gp).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pca_whitens_dominant_directions() {
        let mut r = rng::seeded(3);
        let data: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z = rng::normal_vec(&mut r, 3, 1.0);
                vec![5.0 * z[0], 2.0 * z[1], 0.1 * z[2], 5.0 * z[0] + 0.01 * z[2]]
            })
            .collect();
        let pca = Pca::fit(&data, 2, 10, &mut r);
        let proj: Vec<Vec<f64>> = data.iter().map(|d| pca.transform(d)).collect();
        for k in 0..2 {
            let var = proj.iter().map(|p| p[k] * p[k]).sum::<f64>() / 2000.0;
            assert!((var - 1.0).abs() < 1e-6, "component {k} variance {var}");
        }
    }

    #[test]
    fn column_adam_keeps_column_direction() {
        let mut opt = ColumnAdam::new(3, 2, 0.1);
        let g = vec![1.0, 0.0, 2.0, 5.0, -1.0, 0.0];
        let u = opt.step(&g);
        // column 0 update is parallel to (1, 2, -1)
        assert!((u[2] / u[0] - 2.0).abs() < 1e-9 && (u[4] / u[0] + 1.0).abs() < 1e-9);
        assert_eq!(u[5], 0.0);
    }
}
