//! LSTM cell, batch normalization and affine layers with explicit backward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Gate weights of one LSTM direction. Gate rows are stacked in the order
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H x input_dim`.
    pub w: Matrix,
    /// `4H x H`.
    pub u: Matrix,
    /// `4H`.
    pub b: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmParams {
            w: Matrix::zeros(4 * hidden, input_dim),
            u: Matrix::zeros(4 * hidden, hidden),
            b: vec![0.0; 4 * hidden],
        }
    }

    /// Uniform weights in `+/- 1/sqrt(H)`, forget-gate bias 1, other biases 0.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden);
        p.w.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        p.u.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        p.b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.b.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Activations kept from one cell step.
#[derive(Debug, Clone)]
pub struct CellCache {
    /// Activated gates `[i | f | g | o]`.
    pub gates: Vec<f64>,
    pub c: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub h: Vec<f64>,
}

pub(crate) fn cell_forward_cached(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> CellCache {
    let hd = p.hidden();
    let mut gates = p.b.clone();
    for (r, z) in gates.iter_mut().enumerate() {
        *z += dot(p.w.row(r), x) + dot(p.u.row(r), h_prev);
    }
    for (k, z) in gates.iter_mut().enumerate() {
        *z = if (2 * hd..3 * hd).contains(&k) { z.tanh() } else { sigmoid(*z) };
    }
    let (i, rest) = gates.split_at(hd);
    let (f, rest) = rest.split_at(hd);
    let (g, o) = rest.split_at(hd);
    let c: Vec<f64> = (0..hd).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hd).map(|k| o[k] * tanh_c[k]).collect();
    CellCache { gates, c, tanh_c, h }
}

/// One LSTM step: `c = f*c_prev + i*g`, `h = o*tanh(c)`.
pub fn lstm_cell_forward(x: &[f64], h_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> (Vec<f64>, Vec<f64>) {
    let cache = cell_forward_cached(x, h_prev, c_prev, p);
    (cache.h, cache.c)
}

/// Gradients flowing out of one cell step.
pub struct CellGrads {
    pub dx: Vec<f64>,
    pub dh_prev: Vec<f64>,
    pub dc_prev: Vec<f64>,
}

/// Backpropagates `dh`, `dc` (total gradients on this step's outputs) and
/// accumulates parameter gradients into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn lstm_cell_backward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    cache: &CellCache,
    dh: &[f64],
    dc: &[f64],
    p: &LstmParams,
    grads: &mut LstmParams,
) -> CellGrads {
    let hd = p.hidden();
    let g8 = &cache.gates;
    let mut dz = vec![0.0; 4 * hd];
    let mut dc_prev = vec![0.0; hd];
    for k in 0..hd {
        let (i, f, g, o) = (g8[k], g8[hd + k], g8[2 * hd + k], g8[3 * hd + k]);
        let tc = cache.tanh_c[k];
        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
        dz[k] = dct * g * i * (1.0 - i);
        dz[hd + k] = dct * c_prev[k] * f * (1.0 - f);
        dz[2 * hd + k] = dct * i * (1.0 - g * g);
        dz[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
        dc_prev[k] = dct * f;
    }
    let mut dx = vec![0.0; p.input_dim()];
    let mut dh_prev = vec![0.0; hd];
    for (r, &d) in dz.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        axpy(d, x, grads.w.row_mut(r));
        axpy(d, h_prev, grads.u.row_mut(r));
        grads.b[r] += d;
        axpy(d, p.w.row(r), &mut dx);
        axpy(d, p.u.row(r), &mut dh_prev);
    }
    CellGrads { dx, dh_prev, dc_prev }
}

/// Cached pass of one direction over a sequence, indexed in input time order.
pub struct DirectionCache {
    pub steps: Vec<CellCache>,
    pub reverse: bool,
}

/// Runs one direction from zero state. With `reverse` the sequence is read
/// back to front; outputs stay aligned with the input frames.
pub fn direction_forward(x: &Matrix, p: &LstmParams, reverse: bool) -> DirectionCache {
    let hd = p.hidden();
    let t_len = x.rows();
    let zeros = vec![0.0; hd];
    let mut steps: Vec<Option<CellCache>> = (0..t_len).map(|_| None).collect();
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    let mut prev: Option<usize> = None;
    for t in order {
        let (h_prev, c_prev) = match prev {
            Some(q) => {
                let s = steps[q].as_ref().expect("previous step computed");
                (s.h.as_slice(), s.c.as_slice())
            }
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        let cache = cell_forward_cached(x.row(t), h_prev, c_prev, p);
        steps[t] = Some(cache);
        prev = Some(t);
    }
    DirectionCache {
        steps: steps.into_iter().map(|s| s.expect("all steps computed")).collect(),
        reverse,
    }
}

/// Backpropagation through time for one direction. `dh_out` holds the
/// gradient on each step's output `h`; returns the gradient on the input.
pub fn direction_backward(
    x: &Matrix,
    cache: &DirectionCache,
    dh_out: &Matrix,
    p: &LstmParams,
    grads: &mut LstmParams,
) -> Matrix {
    let hd = p.hidden();
    let t_len = x.rows();
    let zeros = vec![0.0; hd];
    let mut dx = Matrix::zeros(t_len, p.input_dim());
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    // walk against the direction of the forward recursion
    let order: Vec<usize> = if cache.reverse { (0..t_len).collect() } else { (0..t_len).rev().collect() };
    for &t in &order {
        let prev = if cache.reverse {
            (t + 1 < t_len).then_some(t + 1)
        } else {
            t.checked_sub(1)
        };
        let (h_prev, c_prev) = match prev {
            Some(q) => (cache.steps[q].h.as_slice(), cache.steps[q].c.as_slice()),
            None => (zeros.as_slice(), zeros.as_slice()),
        };
        let dh: Vec<f64> = dh_out.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let g = lstm_cell_backward(x.row(t), h_prev, c_prev, &cache.steps[t], &dh, &dc_next, p, grads);
        dx.row_mut(t).copy_from_slice(&g.dx);
        dh_next = g.dh_prev;
        dc_next = g.dc_prev;
    }
    dx
}

/// Per-feature batch normalization with running statistics for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of running-statistics updates applied so far.
    pub updates: u64,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics over every frame of every sequence in the batch.
    Train,
    /// Running statistics.
    Eval,
}

/// Saved state for the batch-norm backward pass.
pub struct BnCache {
    pub xhat: Vec<Matrix>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            updates: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for d in 0..self.dim() {
            self.running_mean[d] = momentum * self.running_mean[d] + (1.0 - momentum) * mean[d];
            self.running_var[d] = momentum * self.running_var[d] + (1.0 - momentum) * var[d];
        }
        self.updates += 1;
    }

    pub fn forward(&self, xs: &[Matrix], mode: BnMode) -> Result<(Vec<Matrix>, BnCache)> {
        let dim = self.dim();
        let (mean, var) = match mode {
            BnMode::Train => {
                let n: usize = xs.iter().map(Matrix::rows).sum();
                if n == 0 {
                    return Err(Error::invalid("batch normalization over zero frames"));
                }
                let mut mean = vec![0.0; dim];
                for x in xs {
                    for row in x.iter_rows() {
                        axpy(1.0, row, &mut mean);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; dim];
                for x in xs {
                    for row in x.iter_rows() {
                        for d in 0..dim {
                            let c = row[d] - mean[d];
                            var[d] += c * c;
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            BnMode::Eval => {
                if self.updates == 0 {
                    return Err(Error::invalid(
                        "batch norm has no running statistics; train before evaluating",
                    ));
                }
                (self.running_mean.clone(), self.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xh = Matrix::zeros(x.rows(), dim);
            let mut y = Matrix::zeros(x.rows(), dim);
            for t in 0..x.rows() {
                for d in 0..dim {
                    let v = (x[(t, d)] - mean[d]) * inv_std[d];
                    xh[(t, d)] = v;
                    y[(t, d)] = self.gamma[d] * v + self.beta[d];
                }
            }
            xhat.push(xh);
            out.push(y);
        }
        Ok((out, BnCache { xhat, inv_std, mean, var }))
    }

    /// Training-mode backward: returns input gradients, accumulates
    /// `dgamma`, `dbeta`.
    pub fn backward(&self, cache: &BnCache, dys: &[Matrix], dgamma: &mut [f64], dbeta: &mut [f64]) -> Vec<Matrix> {
        let dim = self.dim();
        let n: usize = dys.iter().map(Matrix::rows).sum();
        let mut sum_dxhat = vec![0.0; dim];
        let mut sum_dxhat_xhat = vec![0.0; dim];
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            for t in 0..dy.rows() {
                for d in 0..dim {
                    let g = dy[(t, d)];
                    dbeta[d] += g;
                    dgamma[d] += g * xh[(t, d)];
                    let dxh = g * self.gamma[d];
                    sum_dxhat[d] += dxh;
                    sum_dxhat_xhat[d] += dxh * xh[(t, d)];
                }
            }
        }
        let nf = n as f64;
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = Matrix::zeros(dy.rows(), dim);
                for t in 0..dy.rows() {
                    for d in 0..dim {
                        let dxh = dy[(t, d)] * self.gamma[d];
                        dx[(t, d)] = cache.inv_std[d] / nf
                            * (nf * dxh - sum_dxhat[d] - xh[(t, d)] * sum_dxhat_xhat[d]);
                    }
                }
                dx
            })
            .collect()
    }
}

/// Affine map `y = W x + b` applied to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Matrix::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut l = Self::zeros(input, output);
        l.w.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        l
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.b.len()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), self.output_dim());
        for t in 0..x.rows() {
            let xr = x.row(t);
            for (o, yo) in y.row_mut(t).iter_mut().enumerate() {
                *yo = self.b[o] + dot(self.w.row(o), xr);
            }
        }
        y
    }

    pub fn backward(&self, x: &Matrix, dy: &Matrix, grads: &mut Linear) -> Matrix {
        let mut dx = Matrix::zeros(x.rows(), self.input_dim());
        for t in 0..x.rows() {
            let xr = x.row(t);
            for (o, &g) in dy.row(t).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g, xr, grads.w.row_mut(o));
                grads.b[o] += g;
                axpy(g, self.w.row(o), dx.row_mut(t));
            }
        }
        dx
    }
}

pub fn tanh_matrix(x: &Matrix) -> Matrix {
    Matrix::from_vec(x.rows(), x.cols(), x.as_slice().iter().map(|v| v.tanh()).collect())
}

/// Gradient through `y = tanh(z)` given `y`.
pub fn tanh_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    Matrix::from_vec(
        y.rows(),
        y.cols(),
        y.as_slice().iter().zip(dy.as_slice()).map(|(a, g)| g * (1.0 - a * a)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmParams {
        let mut p = LstmParams::zeros(input, hidden);
        p.w.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        p.u.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
        p.b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        p
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_cell() {
        let p = LstmParams::zeros(3, 4);
        let (h, c) = lstm_cell_forward(&[0.3, -0.1, 2.0], &[0.5; 4], &[0.0; 4], &p);
        assert!(h.iter().all(|v| *v == 0.0));
        assert!(c.iter().all(|v| *v == 0.0));

        let v = [1.0, -2.0, 0.4, 3.0];
        let (h, c) = lstm_cell_forward(&[0.3, -0.1, 2.0], &[0.5; 4], &v, &p);
        for k in 0..4 {
            assert_eq!(c[k], 0.5 * v[k]);
            assert!((h[k] - 0.5 * (0.5 * v[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn cell_state_growth_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_params(3, 5, &mut rng);
            let c_prev: Vec<f64> = rand_vec(5, &mut rng).iter().map(|v| 4.0 * v).collect();
            let (h, c) = lstm_cell_forward(&rand_vec(3, &mut rng), &rand_vec(5, &mut rng), &c_prev, &p);
            for k in 0..5 {
                assert!(c[k].abs() <= c_prev[k].abs() + 1.0);
                assert!(h[k].is_finite());
            }
        }
    }

    /// Full Jacobian of (h, c) w.r.t. (x, h_prev, c_prev) against central differences.
    #[test]
    fn cell_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ni, hd) = (3, 4);
        let p = random_params(ni, hd, &mut rng);
        let x = rand_vec(ni, &mut rng);
        let h0 = rand_vec(hd, &mut rng);
        let c0 = rand_vec(hd, &mut rng);
        let cache = cell_forward_cached(&x, &h0, &c0, &p);
        let delta = 1e-5;
        let mut worst = 0.0f64;
        for out in 0..2 * hd {
            let mut dh = vec![0.0; hd];
            let mut dc = vec![0.0; hd];
            if out < hd {
                dh[out] = 1.0;
            } else {
                dc[out - hd] = 1.0;
            }
            let mut g = LstmParams::zeros(ni, hd);
            let an = lstm_cell_backward(&x, &h0, &c0, &cache, &dh, &dc, &p, &mut g);
            let pick = |(h, c): (Vec<f64>, Vec<f64>)| if out < hd { h[out] } else { c[out - hd] };
            let analytic: Vec<f64> = an.dx.iter().chain(&an.dh_prev).chain(&an.dc_prev).copied().collect();
            for (j, a) in analytic.iter().enumerate() {
                let bump = |s: f64| {
                    let (mut xx, mut hh, mut cc) = (x.clone(), h0.clone(), c0.clone());
                    match j {
                        j if j < ni => xx[j] += s,
                        j if j < ni + hd => hh[j - ni] += s,
                        j => cc[j - ni - hd] += s,
                    }
                    pick(lstm_cell_forward(&xx, &hh, &cc, &p))
                };
                let num = (bump(delta) - bump(-delta)) / (2.0 * delta);
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn batchnorm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bn = BatchNorm::new(3);
        let xs: Vec<Matrix> = (0..3)
            .map(|b| Matrix::from_vec(5 + b, 3, (0..(5 + b) * 3).map(|_| rng.gen_range(-3.0..7.0)).collect()))
            .collect();
        let (ys, _) = bn.forward(&xs, BnMode::Train).unwrap();
        let n: f64 = ys.iter().map(|y| y.rows() as f64).sum();
        for d in 0..3 {
            let vals: Vec<f64> = ys.iter().flat_map(|y| (0..y.rows()).map(move |t| y[(t, d)])).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-10);
            assert!((std - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_constant_and_standard_inputs() {
        let bn = BatchNorm::new(2);
        let x = Matrix::from_vec(4, 2, vec![5.0, 1.0, 5.0, -1.0, 5.0, 1.0, 5.0, -1.0]);
        let (y, _) = bn.forward(std::slice::from_ref(&x), BnMode::Train).unwrap();
        for t in 0..4 {
            assert_eq!(y[0][(t, 0)], 0.0);
            // already zero mean, unit variance
            assert!((y[0][(t, 1)] - x[(t, 1)]).abs() < 1e-5);
        }
        assert!(bn.forward(&[x], BnMode::Eval).is_err());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm::new(1);
        bn.update_running(&[2.0], &[4.0], 0.9);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - 1.3).abs() < 1e-15);
        let (y, _) = bn.forward(&[Matrix::from_vec(1, 1, vec![0.2])], BnMode::Eval).unwrap();
        assert!(y[0][(0, 0)].abs() < 1e-15);
    }
}
