use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Components whose weight falls below this are re-seeded.
pub const MIN_WEIGHT: f64 = 1e-8;
/// Variance floor relative to the global per-dimension variance.
pub const VARIANCE_FLOOR_RATIO: f64 = 1e-4;
/// Absolute floor so constant dimensions stay usable.
pub const MIN_VARIANCE: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"DRVG";
const VERSION: u32 = 1;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureModel {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
}

impl GaussianMixtureModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.rows() != m || variances.rows() != m || means.cols() != variances.cols() || means.cols() == 0 {
            return Err(Error::invalid("inconsistent mixture shapes"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("mixture weights must form a simplex"));
        }
        if !means.is_finite() || variances.as_slice().iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("mixture means must be finite and variances positive"));
        }
        Ok(GaussianMixtureModel { weights, means, variances })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    pub fn variances(&self) -> &Matrix {
        &self.variances
    }

    fn scorer(&self) -> Scorer<'_> {
        let d = self.dim();
        let mut log_norm = Vec::with_capacity(self.components());
        let mut inv_var = Vec::with_capacity(self.components() * d);
        for k in 0..self.components() {
            let var = self.variances.row(k);
            let log_det: f64 = var.iter().map(|v| v.ln()).sum();
            let w = self.weights[k];
            let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            log_norm.push(lw - 0.5 * (d as f64 * (2.0 * PI).ln() + log_det));
            inv_var.extend(var.iter().map(|v| 1.0 / v));
        }
        Scorer {
            log_norm,
            inv_var,
            means: &self.means,
        }
    }

    /// Log density of one frame.
    pub fn log_likelihood(&self, x: &[f64]) -> f64 {
        let s = self.scorer();
        let mut buf = vec![0.0; self.components()];
        s.log_densities(x, &mut buf);
        log_sum_exp(&buf)
    }

    /// Mean per-frame log density.
    pub fn average_log_likelihood(&self, frames: &Matrix) -> Result<f64> {
        self.check_frames(frames)?;
        if frames.rows() == 0 {
            return Err(Error::invalid("no frames to score"));
        }
        let s = self.scorer();
        let mut buf = vec![0.0; self.components()];
        let total: f64 = frames
            .iter_rows()
            .map(|x| {
                s.log_densities(x, &mut buf);
                log_sum_exp(&buf)
            })
            .sum();
        Ok(total / frames.rows() as f64)
    }

    fn check_frames(&self, frames: &Matrix) -> Result<()> {
        if frames.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "frames are {}-dimensional, model is {}-dimensional",
                frames.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Zeroth and first order statistics under the component posteriors,
    /// plus second order ones when `second` is set.
    fn statistics(&self, frames: &Matrix, second: bool) -> Stats {
        let (m, d) = (self.components(), self.dim());
        let s = self.scorer();
        let mut st = Stats {
            n: vec![0.0; m],
            f: Matrix::zeros(m, d),
            s: Matrix::zeros(if second { m } else { 0 }, d),
            log_likelihood: 0.0,
        };
        let mut buf = vec![0.0; m];
        for x in frames.iter_rows() {
            s.log_densities(x, &mut buf);
            let total = log_sum_exp(&buf);
            st.log_likelihood += total;
            for k in 0..m {
                let g = (buf[k] - total).exp();
                if g == 0.0 {
                    continue;
                }
                st.n[k] += g;
                let fk = st.f.row_mut(k);
                for (a, v) in fk.iter_mut().zip(x) {
                    *a += g * v;
                }
                if second {
                    let sk = st.s.row_mut(k);
                    for (a, v) in sk.iter_mut().zip(x) {
                        *a += g * v * v;
                    }
                }
            }
        }
        st
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.components() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.weights.iter().chain(self.means.as_slice()).chain(self.variances.as_slice()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::format("not a mixture model file"));
        }
        let word = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != VERSION as usize {
            return Err(Error::format(format!("unsupported mixture file version {}", word(4))));
        }
        let (m, d) = (word(8), word(12));
        let n = m
            .checked_mul(d)
            .and_then(|md| md.checked_mul(2))
            .and_then(|v| v.checked_add(m))
            .ok_or_else(|| Error::format("mixture dimensions overflow"))?;
        if buf.len() != 16 + 8 * n {
            return Err(Error::format("mixture file has the wrong length"));
        }
        let vals: Vec<f64> = buf[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let weights = vals[..m].to_vec();
        let means = Matrix::from_vec(m, d, vals[m..m + m * d].to_vec());
        let variances = Matrix::from_vec(m, d, vals[m + m * d..].to_vec());
        GaussianMixtureModel::new(weights, means, variances).map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Scorer<'a> {
    log_norm: Vec<f64>,
    inv_var: Vec<f64>,
    means: &'a Matrix,
}

impl Scorer<'_> {
    fn log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        for (k, o) in out.iter_mut().enumerate() {
            let mu = self.means.row(k);
            let iv = &self.inv_var[k * d..(k + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let diff = x[j] - mu[j];
                q += diff * diff * iv[j];
            }
            *o = self.log_norm[k] - 0.5 * q;
        }
    }
}

struct Stats {
    n: Vec<f64>,
    f: Matrix,
    s: Matrix,
    log_likelihood: f64,
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Settings for background-model training.
#[derive(Debug, Clone, PartialEq)]
pub struct UbmConfig {
    pub components: usize,
    pub em_iterations: usize,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            components: 64,
            em_iterations: 20,
            seed: 0,
        }
    }
}

/// A trained background model and the mean per-frame log-likelihood before
/// each EM iteration and after the last one.
#[derive(Debug, Clone)]
pub struct UbmTraining {
    pub model: GaussianMixtureModel,
    pub log_likelihoods: Vec<f64>,
    pub resets: usize,
}

fn global_moments(frames: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = frames.rows() as f64;
    let d = frames.cols();
    let mut mean = vec![0.0; d];
    for x in frames.iter_rows() {
        mean.iter_mut().zip(x).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; d];
    for x in frames.iter_rows() {
        for j in 0..d {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn kmeans_pp(frames: &Matrix, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = frames.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut dist: Vec<f64> = frames.iter_rows().map(|x| sq_dist(x, frames.row(chosen[0]))).collect();
    while chosen.len() < m {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.gen_range(0..n)
        };
        chosen.push(next);
        for (i, x) in frames.iter_rows().enumerate() {
            dist[i] = dist[i].min(sq_dist(x, frames.row(next)));
        }
    }
    chosen
}

/// Initial mixture from a hard assignment of every frame to its nearest seed.
fn initial_model(frames: &Matrix, seeds: &[usize], floor: &[f64]) -> Result<GaussianMixtureModel> {
    let (m, d) = (seeds.len(), frames.cols());
    let centres = Matrix::from_rows(&seeds.iter().map(|&i| frames.row(i).to_vec()).collect::<Vec<_>>());
    let mut n = vec![0.0f64; m];
    let mut f = Matrix::zeros(m, d);
    let mut s = Matrix::zeros(m, d);
    for x in frames.iter_rows() {
        let k = (0..m)
            .min_by(|&a, &b| sq_dist(x, centres.row(a)).total_cmp(&sq_dist(x, centres.row(b))))
            .expect("at least one component");
        n[k] += 1.0;
        for j in 0..d {
            f[(k, j)] += x[j];
            s[(k, j)] += x[j] * x[j];
        }
    }
    let total = frames.rows() as f64;
    let mut means = Matrix::zeros(m, d);
    let mut vars = Matrix::zeros(m, d);
    let mut weights = vec![0.0; m];
    for k in 0..m {
        // every seed is its own nearest centre unless duplicated
        let nk = n[k].max(1.0);
        weights[k] = nk;
        for j in 0..d {
            let mu = if n[k] > 0.0 { f[(k, j)] / nk } else { centres[(k, j)] };
            means.row_mut(k)[j] = mu;
            let var = if n[k] > 0.0 { s[(k, j)] / nk - mu * mu } else { 0.0 };
            vars.row_mut(k)[j] = var.max(floor[j]);
        }
    }
    let wsum: f64 = weights.iter().sum();
    debug_assert!(wsum >= total);
    weights.iter_mut().for_each(|w| *w /= wsum);
    GaussianMixtureModel::new(weights, means, vars)
}

/// Trains a diagonal background model with k-means++ seeding and EM.
///
/// The log-likelihood must not decrease between iterations (beyond 1e-8
/// relative) unless a degenerate component was re-seeded in between.
pub fn train_ubm(frames: &Matrix, cfg: &UbmConfig) -> Result<UbmTraining> {
    let (n, d, m) = (frames.rows(), frames.cols(), cfg.components);
    if m == 0 || d == 0 {
        return Err(Error::invalid("mixture needs at least one component and dimension"));
    }
    if n < 10 * m {
        return Err(Error::invalid(format!(
            "{n} frames is too few for {m} components (need at least {})",
            10 * m
        )));
    }
    if !frames.is_finite() {
        return Err(Error::invalid("training frames contain non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (_, global_var) = global_moments(frames);
    let floor: Vec<f64> = global_var
        .iter()
        .map(|v| (v * VARIANCE_FLOOR_RATIO).max(MIN_VARIANCE))
        .collect();
    let seeds = kmeans_pp(frames, m, &mut rng);
    let mut model = initial_model(frames, &seeds, &floor)?;

    let mut history: Vec<f64> = Vec::with_capacity(cfg.em_iterations + 1);
    let mut resets = 0;
    let mut reset_last = false;
    for it in 0..=cfg.em_iterations {
        let st = model.statistics(frames, true);
        let ll = st.log_likelihood / n as f64;
        if !ll.is_finite() {
            return Err(Error::numerical(format!("log-likelihood diverged at EM iteration {it}")));
        }
        if let Some(&prev) = history.last() {
            if !reset_last && ll < prev - 1e-8 * prev.abs().max(1.0) {
                return Err(Error::numerical(format!(
                    "EM log-likelihood decreased at iteration {it}: {prev} -> {ll}"
                )));
            }
        }
        debug!("EM iteration {it}: mean log-likelihood {ll:.6}");
        history.push(ll);
        if it == cfg.em_iterations {
            break;
        }
        reset_last = false;
        let mut weights = vec![0.0; m];
        let mut means = Matrix::zeros(m, d);
        let mut vars = Matrix::zeros(m, d);
        for k in 0..m {
            let nk = st.n[k];
            if nk / (n as f64) < MIN_WEIGHT {
                let pick = rng.gen_range(0..n);
                warn!("EM iteration {it}: component {k} degenerate, reset to frame {pick}");
                resets += 1;
                reset_last = true;
                weights[k] = MIN_WEIGHT;
                means.row_mut(k).copy_from_slice(frames.row(pick));
                vars.row_mut(k).copy_from_slice(&global_var);
                for j in 0..d {
                    vars.row_mut(k)[j] = vars[(k, j)].max(floor[j]);
                }
                continue;
            }
            weights[k] = nk / n as f64;
            for j in 0..d {
                let mu = st.f[(k, j)] / nk;
                means.row_mut(k)[j] = mu;
                vars.row_mut(k)[j] = (st.s[(k, j)] / nk - mu * mu).max(floor[j]);
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);
        model = GaussianMixtureModel::new(weights, means, vars)?;
    }
    Ok(UbmTraining {
        model,
        log_likelihoods: history,
        resets,
    })
}

/// Mean-only MAP adaptation with relevance factor `relevance`. Weights and
/// variances are copied from the background model.
pub fn map_adapt(ubm: &GaussianMixtureModel, frames: &Matrix, relevance: f64) -> Result<GaussianMixtureModel> {
    if !(relevance >= 0.0) || !relevance.is_finite() {
        return Err(Error::invalid("relevance factor must be finite and non-negative"));
    }
    ubm.check_frames(frames)?;
    if frames.rows() == 0 {
        return Ok(ubm.clone());
    }
    let st = ubm.statistics(frames, false);
    let mut means = ubm.means.clone();
    for k in 0..ubm.components() {
        let nk = st.n[k];
        if nk + relevance == 0.0 {
            continue;
        }
        for j in 0..ubm.dim() {
            means.row_mut(k)[j] = (st.f[(k, j)] + relevance * ubm.means[(k, j)]) / (nk + relevance);
        }
    }
    GaussianMixtureModel::new(ubm.weights.clone(), means, ubm.variances.clone())
}

/// Average per-frame log-likelihood ratio of `frames` between the speaker
/// model and the background model.
pub fn llr_score(frames: &Matrix, speaker: &GaussianMixtureModel, ubm: &GaussianMixtureModel) -> Result<f64> {
    if speaker.components() != ubm.components() || speaker.dim() != ubm.dim() {
        return Err(Error::invalid("speaker and background models differ in shape"));
    }
    if frames.rows() == 0 {
        return Err(Error::invalid("cannot score an empty utterance"));
    }
    ubm.check_frames(frames)?;
    let (ss, us) = (speaker.scorer(), ubm.scorer());
    let mut a = vec![0.0; ubm.components()];
    let mut b = vec![0.0; ubm.components()];
    let mut total = 0.0;
    for x in frames.iter_rows() {
        ss.log_densities(x, &mut a);
        us.log_densities(x, &mut b);
        total += log_sum_exp(&a) - log_sum_exp(&b);
    }
    let score = total / frames.rows() as f64;
    if !score.is_finite() {
        return Err(Error::numerical("non-finite verification score"));
    }
    Ok(score)
}
