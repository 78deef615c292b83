use rand::Rng;

use super::layers::{
    direction_backward, direction_forward, tanh_backward, tanh_matrix, BatchNorm, BnCache, BnMode,
    DirectionCache, Linear, LstmParams,
};
use super::{NetworkConfig, SecondaryTarget};
use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-6;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Mean and population standard deviation over all rows, std floored at 1e-6.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>, dim: usize) -> Self {
        let mats: Vec<&Matrix> = mats.into_iter().collect();
        let n: usize = mats.iter().map(|m| m.rows()).sum();
        if n == 0 {
            return Self::identity(dim);
        }
        let mut mean = vec![0.0; dim];
        for m in &mats {
            for row in m.iter_rows() {
                mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut var = vec![0.0; dim];
        for m in &mats {
            for row in m.iter_rows() {
                for d in 0..dim {
                    var[d] += (row[d] - mean[d]).powi(2);
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for t in 0..out.rows() {
            for (d, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean[d]) / self.std[d];
            }
        }
        out
    }

    pub fn invert(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for t in 0..out.rows() {
            for (d, v) in out.row_mut(t).iter_mut().enumerate() {
                *v = *v * self.std[d] + self.mean[d];
            }
        }
        out
    }
}

/// One bidirectional layer and the batch norm that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayer {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub bn: BatchNorm,
}

/// Concatenated forward and backward hidden states, one row per frame.
pub fn blstm_layer_forward(x: &Matrix, fwd: &LstmParams, bwd: &LstmParams) -> Matrix {
    let f = direction_forward(x, fwd, false);
    let b = direction_forward(x, bwd, true);
    concat_directions(&f, &b, fwd.hidden())
}

fn concat_directions(f: &DirectionCache, b: &DirectionCache, hd: usize) -> Matrix {
    let t_len = f.steps.len();
    let mut out = Matrix::zeros(t_len, 2 * hd);
    for t in 0..t_len {
        let row = out.row_mut(t);
        row[..hd].copy_from_slice(&f.steps[t].h);
        row[hd..].copy_from_slice(&b.steps[t].h);
    }
    out
}

/// Complete parameter set plus the input and target standardizers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLabelNetwork {
    pub config: NetworkConfig,
    pub layers: Vec<BlstmLayer>,
    pub primary: Linear,
    pub secondary_hidden: Vec<Linear>,
    pub secondary_out: Option<Linear>,
    pub input_norm: Standardizer,
    pub target1_norm: Standardizer,
    pub target2_norm: Option<Standardizer>,
}

/// Gradient of every trainable tensor, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
    pub primary: Linear,
    pub secondary_hidden: Vec<Linear>,
    pub secondary_out: Option<Linear>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            for d in [&l.fwd, &l.bwd] {
                v.push(d.w.as_slice());
                v.push(d.u.as_slice());
                v.push(&d.b);
            }
            v.push(&l.gamma);
            v.push(&l.beta);
        }
        v.push(self.primary.w.as_slice());
        v.push(&self.primary.b);
        for h in self.secondary_hidden.iter().chain(&self.secondary_out) {
            v.push(h.w.as_slice());
            v.push(&h.b);
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            for d in [&mut l.fwd, &mut l.bwd] {
                v.push(d.w.as_mut_slice());
                v.push(d.u.as_mut_slice());
                v.push(&mut d.b);
            }
            v.push(&mut l.gamma);
            v.push(&mut l.beta);
        }
        v.push(self.primary.w.as_mut_slice());
        v.push(&mut self.primary.b);
        for h in self.secondary_hidden.iter_mut().chain(&mut self.secondary_out) {
            v.push(h.w.as_mut_slice());
            v.push(&mut h.b);
        }
        v
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Activations cached by a batch forward pass.
pub struct ForwardPass {
    /// Standardized primary predictions, one matrix per sequence.
    pub pred1: Vec<Matrix>,
    pub pred2: Option<Vec<Matrix>>,
    /// Batch mean and variance of every batch-norm layer (train mode).
    pub bn_stats: Vec<(Vec<f64>, Vec<f64>)>,
    inputs: Vec<Matrix>,
    layers: Vec<LayerPass>,
    /// Per sequence: activations entering each secondary layer (top output first).
    sec_acts: Vec<Vec<Matrix>>,
}

struct LayerPass {
    fwd: Vec<DirectionCache>,
    bwd: Vec<DirectionCache>,
    bn: BnCache,
    output: Vec<Matrix>,
}

impl DualLabelNetwork {
    /// Randomly initialized network with identity standardizers.
    pub fn new(config: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let h = config.cells;
        let layers = (0..config.n_layers)
            .map(|l| {
                let input = if l == 0 { config.input_dim } else { 2 * h };
                BlstmLayer {
                    fwd: LstmParams::init(input, h, rng),
                    bwd: LstmParams::init(input, h, rng),
                    bn: BatchNorm::new(2 * h),
                }
            })
            .collect();
        let primary = Linear::init(2 * h, FeatureKind::Mfb31.dim(), rng);
        let mut secondary_hidden = Vec::new();
        let mut width = 2 * h;
        for &d in &config.secondary_hidden_dims {
            secondary_hidden.push(Linear::init(width, d, rng));
            width = d;
        }
        let secondary_out = match config.secondary {
            SecondaryTarget::None => None,
            s => Some(Linear::init(width, s.dim(), rng)),
        };
        let target2_norm = config.secondary.kind().map(|k| Standardizer::identity(k.dim()));
        Ok(DualLabelNetwork {
            layers,
            primary,
            secondary_hidden,
            secondary_out,
            input_norm: Standardizer::identity(config.input_dim),
            target1_norm: Standardizer::identity(FeatureKind::Mfb31.dim()),
            target2_norm,
            config,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    fwd: LstmParams::zeros(l.fwd.input_dim(), l.fwd.hidden()),
                    bwd: LstmParams::zeros(l.bwd.input_dim(), l.bwd.hidden()),
                    gamma: vec![0.0; l.bn.dim()],
                    beta: vec![0.0; l.bn.dim()],
                })
                .collect(),
            primary: Linear::zeros(self.primary.input_dim(), self.primary.output_dim()),
            secondary_hidden: self
                .secondary_hidden
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            secondary_out: self
                .secondary_out
                .as_ref()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim())),
        }
    }

    /// Named trainable tensors in the fixed order shared with [`Gradients::slices`].
    pub fn param_slices(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (dir, d) in [("fwd", &l.fwd), ("bwd", &l.bwd)] {
                v.push((format!("layer{i}.{dir}.w"), d.w.as_slice()));
                v.push((format!("layer{i}.{dir}.u"), d.u.as_slice()));
                v.push((format!("layer{i}.{dir}.b"), &d.b));
            }
            v.push((format!("layer{i}.bn.gamma"), &l.bn.gamma));
            v.push((format!("layer{i}.bn.beta"), &l.bn.beta));
        }
        v.push(("primary.w".into(), self.primary.w.as_slice()));
        v.push(("primary.b".into(), &self.primary.b));
        for (i, h) in self.secondary_hidden.iter().enumerate() {
            v.push((format!("secondary.hidden{i}.w"), h.w.as_slice()));
            v.push((format!("secondary.hidden{i}.b"), &h.b));
        }
        if let Some(o) = &self.secondary_out {
            v.push(("secondary.out.w".into(), o.w.as_slice()));
            v.push(("secondary.out.b".into(), &o.b));
        }
        v
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            for d in [&mut l.fwd, &mut l.bwd] {
                v.push(d.w.as_mut_slice());
                v.push(d.u.as_mut_slice());
                v.push(&mut d.b);
            }
            v.push(&mut l.bn.gamma);
            v.push(&mut l.bn.beta);
        }
        v.push(self.primary.w.as_mut_slice());
        v.push(&mut self.primary.b);
        for h in self.secondary_hidden.iter_mut().chain(&mut self.secondary_out) {
            v.push(h.w.as_mut_slice());
            v.push(&mut h.b);
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.param_slices().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.param_slices().iter().all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    /// Forward pass over standardized input sequences. Train mode uses batch
    /// statistics and reports them in [`ForwardPass::bn_stats`]; it does not
    /// touch the running statistics.
    pub fn forward_batch(&self, inputs: &[Matrix], mode: BnMode, with_secondary: bool) -> Result<ForwardPass> {
        for x in inputs {
            if x.cols() != self.config.input_dim {
                return Err(Error::invalid(format!(
                    "network input has {} dims, expected {}",
                    x.cols(),
                    self.config.input_dim
                )));
            }
        }
        let hd = self.config.cells;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let below: &[Matrix] = if l == 0 { inputs } else { &layers.last().map(|p: &LayerPass| &p.output).expect("layer below")[..] };
            let fwd: Vec<DirectionCache> = below.iter().map(|x| direction_forward(x, &layer.fwd, false)).collect();
            let bwd: Vec<DirectionCache> = below.iter().map(|x| direction_forward(x, &layer.bwd, true)).collect();
            let concat: Vec<Matrix> = fwd.iter().zip(&bwd).map(|(f, b)| concat_directions(f, b, hd)).collect();
            let (output, bn) = layer.bn.forward(&concat, mode)?;
            bn_stats.push((bn.mean.clone(), bn.var.clone()));
            layers.push(LayerPass { fwd, bwd, bn, output });
        }
        let top: &[Matrix] = match layers.last() {
            Some(p) => &p.output,
            None => inputs,
        };
        let pred1: Vec<Matrix> = top.iter().map(|x| self.primary.forward(x)).collect();
        let mut sec_acts = Vec::new();
        let pred2 = match (&self.secondary_out, with_secondary) {
            (Some(out), true) => {
                let mut preds = Vec::with_capacity(top.len());
                for x in top {
                    let mut acts = vec![x.clone()];
                    for hl in &self.secondary_hidden {
                        let a = tanh_matrix(&hl.forward(acts.last().expect("activation")));
                        acts.push(a);
                    }
                    preds.push(out.forward(acts.last().expect("activation")));
                    sec_acts.push(acts);
                }
                Some(preds)
            }
            _ => None,
        };
        Ok(ForwardPass {
            pred1,
            pred2,
            bn_stats,
            inputs: inputs.to_vec(),
            layers,
            sec_acts,
        })
    }

    /// Backpropagation through time for a train-mode pass, given loss
    /// gradients on the standardized predictions.
    pub fn backward(&self, pass: &ForwardPass, d1: &[Matrix], d2: Option<&[Matrix]>) -> Result<Gradients> {
        let mut g = self.zero_gradients();
        let hd = self.config.cells;
        let top: &[Matrix] = match pass.layers.last() {
            Some(p) => &p.output,
            None => &pass.inputs,
        };
        let mut dtop: Vec<Matrix> = top
            .iter()
            .zip(d1)
            .map(|(x, d)| self.primary.backward(x, d, &mut g.primary))
            .collect();
        if let (Some(out), Some(d2)) = (&self.secondary_out, d2) {
            let gout = g.secondary_out.as_mut().expect("secondary gradient slot");
            for (s, acts) in pass.sec_acts.iter().enumerate() {
                let mut da = out.backward(acts.last().expect("activation"), &d2[s], gout);
                for (k, hl) in self.secondary_hidden.iter().enumerate().rev() {
                    let dz = tanh_backward(&acts[k + 1], &da);
                    da = hl.backward(&acts[k], &dz, &mut g.secondary_hidden[k]);
                }
                dtop[s].as_mut_slice().iter_mut().zip(da.as_slice()).for_each(|(a, b)| *a += b);
            }
        }
        let mut dout = dtop;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let lp = &pass.layers[l];
            let lg = &mut g.layers[l];
            let dpre = layer.bn.backward(&lp.bn, &dout, &mut lg.gamma, &mut lg.beta);
            let below: &[Matrix] = if l == 0 { &pass.inputs } else { &pass.layers[l - 1].output };
            dout = below
                .iter()
                .enumerate()
                .map(|(s, x)| {
                    let t_len = x.rows();
                    let mut dh_f = Matrix::zeros(t_len, hd);
                    let mut dh_b = Matrix::zeros(t_len, hd);
                    for t in 0..t_len {
                        let row = dpre[s].row(t);
                        dh_f.row_mut(t).copy_from_slice(&row[..hd]);
                        dh_b.row_mut(t).copy_from_slice(&row[hd..]);
                    }
                    let mut dx = direction_backward(x, &lp.fwd[s], &dh_f, &layer.fwd, &mut lg.fwd);
                    let dxb = direction_backward(x, &lp.bwd[s], &dh_b, &layer.bwd, &mut lg.bwd);
                    dx.as_mut_slice().iter_mut().zip(dxb.as_slice()).for_each(|(a, b)| *a += b);
                    dx
                })
                .collect();
        }
        if !g.is_finite() {
            return Err(Error::numerical("non-finite gradient in backward pass"));
        }
        Ok(g)
    }

    /// Eval-mode inference on raw log-Mel frames. Returns de-standardized
    /// primary output and, when the network has one, the secondary output
    /// (pitch in Hz, spectrogram in log magnitude).
    pub fn forward_dual(&self, input: &FeatureMatrix) -> Result<(FeatureMatrix, Option<FeatureMatrix>)> {
        self.run(input, true)
    }

    pub(crate) fn run(&self, input: &FeatureMatrix, with_secondary: bool) -> Result<(FeatureMatrix, Option<FeatureMatrix>)> {
        if input.kind() != FeatureKind::Mfb31 {
            return Err(Error::invalid(format!(
                "network input must be mfb31 features, got {}",
                input.kind()
            )));
        }
        let shift = input.frame_shift();
        if input.frames() == 0 {
            let empty2 = match (with_secondary, self.config.secondary.kind()) {
                (true, Some(k)) => Some(FeatureMatrix::new(k, Matrix::zeros(0, k.dim()), shift)?),
                _ => None,
            };
            return Ok((FeatureMatrix::new(FeatureKind::Mfb31, Matrix::zeros(0, 31), shift)?, empty2));
        }
        let x = self.input_norm.apply(input.data());
        let pass = self.forward_batch(std::slice::from_ref(&x), BnMode::Eval, with_secondary)?;
        let mut pred1 = pass.pred1;
        let y1 = self.target1_norm.invert(&pred1.remove(0));
        if !y1.is_finite() {
            return Err(Error::numerical("network produced non-finite primary output"));
        }
        let primary = FeatureMatrix::new(FeatureKind::Mfb31, y1, shift)?;
        let secondary = match (pass.pred2, self.config.secondary.kind(), &self.target2_norm) {
            (Some(mut p2), Some(kind), Some(norm)) => {
                let mut y2 = norm.invert(&p2.remove(0));
                if kind == FeatureKind::Pitch1 {
                    y2.as_mut_slice().iter_mut().for_each(|v| *v *= self.config.pitch_scale);
                }
                if !y2.is_finite() {
                    return Err(Error::numerical("network produced non-finite secondary output"));
                }
                Some(FeatureMatrix::new(kind, y2, shift)?)
            }
            _ => None,
        };
        Ok((primary, secondary))
    }
}
