use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{clip_global_norm, Adam};
use super::checkpoint::Checkpoint;
use super::layers::BnMode;
use super::loss::mse_grad;
use super::network::{DualLabelNetwork, Gradients, Standardizer};
use super::{NetworkConfig, SecondaryTarget, TrainingPair};
use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Standardized, padding-free sequences ready for a forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Matrix>,
    pub target1: Vec<Matrix>,
    pub target2: Option<Vec<Matrix>>,
}

impl Batch {
    /// Drops masked frames and applies the network's standardizers.
    pub fn from_pairs(pairs: &[&TrainingPair], net: &DualLabelNetwork) -> Result<Batch> {
        let secondary = net.config.secondary;
        let mut inputs = Vec::with_capacity(pairs.len());
        let mut target1 = Vec::with_capacity(pairs.len());
        let mut target2 = Vec::with_capacity(pairs.len());
        for p in pairs {
            p.validate(secondary)?;
            let n = p.valid_frames();
            inputs.push(net.input_norm.apply(&p.input.data().slice_rows(0, n)));
            target1.push(net.target1_norm.apply(&p.target1.data().slice_rows(0, n)));
            if let (Some(t2), Some(norm)) = (&p.target2, &net.target2_norm) {
                let raw = scaled_secondary(t2, &net.config).slice_rows(0, n);
                target2.push(norm.apply(&raw));
            }
        }
        let target2 = match secondary {
            SecondaryTarget::None => None,
            _ if target2.len() == pairs.len() => Some(target2),
            _ => return Err(Error::invalid(format!("pairs lack the {secondary} target"))),
        };
        if inputs.iter().all(|m| m.rows() == 0) {
            return Err(Error::invalid("batch has no valid frames"));
        }
        Ok(Batch { inputs, target1, target2 })
    }

    pub fn frames(&self) -> usize {
        self.inputs.iter().map(Matrix::rows).sum()
    }
}

fn scaled_secondary(t2: &FeatureMatrix, cfg: &NetworkConfig) -> Matrix {
    let mut m = t2.data().clone();
    if t2.kind() == FeatureKind::Pitch1 {
        m.as_mut_slice().iter_mut().for_each(|v| *v /= cfg.pitch_scale);
    }
    m
}

/// Loss of a batch under the given batch-norm mode.
pub(crate) fn batch_loss(net: &DualLabelNetwork, batch: &Batch, mode: BnMode, weights: (f64, f64)) -> Result<f64> {
    let with_sec = batch.target2.is_some();
    let pass = net.forward_batch(&batch.inputs, mode, with_sec)?;
    let (l1, _) = mse_grad(&pass.pred1, &batch.target1, weights.0);
    let l2 = match (&pass.pred2, &batch.target2) {
        (Some(p), Some(t)) => mse_grad(p, t, weights.1).0,
        _ => 0.0,
    };
    Ok(l1 + l2)
}

/// Train-mode loss, gradients and the batch-norm statistics of the pass.
pub(crate) fn batch_gradients(
    net: &DualLabelNetwork,
    batch: &Batch,
    weights: (f64, f64),
) -> Result<(f64, Gradients, Vec<(Vec<f64>, Vec<f64>)>)> {
    let with_sec = batch.target2.is_some();
    let pass = net.forward_batch(&batch.inputs, BnMode::Train, with_sec)?;
    let (l1, d1) = mse_grad(&pass.pred1, &batch.target1, weights.0);
    let (l2, d2) = match (&pass.pred2, &batch.target2) {
        (Some(p), Some(t)) => {
            let (l, d) = mse_grad(p, t, weights.1);
            (l, Some(d))
        }
        _ => (0.0, None),
    };
    let grads = net.backward(&pass, &d1, d2.as_deref())?;
    Ok((l1 + l2, grads, pass.bn_stats))
}

/// Losses recorded after each epoch. Epoch 0 is the untrained network,
/// evaluated with batch statistics since no running statistics exist yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

fn fit_standardizers(net: &mut DualLabelNetwork, pairs: &[&TrainingPair]) {
    let valid = |m: &FeatureMatrix, p: &TrainingPair| m.data().slice_rows(0, p.valid_frames());
    let inputs: Vec<Matrix> = pairs.iter().map(|p| valid(&p.input, p)).collect();
    let t1: Vec<Matrix> = pairs.iter().map(|p| valid(&p.target1, p)).collect();
    net.input_norm = Standardizer::fit(&inputs, net.config.input_dim);
    net.target1_norm = Standardizer::fit(&t1, FeatureKind::Mfb31.dim());
    if let Some(kind) = net.config.secondary.kind() {
        let t2: Vec<Matrix> = pairs
            .iter()
            .filter_map(|p| {
                p.target2
                    .as_ref()
                    .map(|t| scaled_secondary(t, &net.config).slice_rows(0, p.valid_frames()))
            })
            .collect();
        net.target2_norm = Some(Standardizer::fit(&t2, kind.dim()));
    }
}

/// Length-sorted batches of a shuffled index set, in shuffled batch order.
fn make_batches(indices: &[usize], lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

struct Run<'a> {
    net: DualLabelNetwork,
    pairs: &'a [TrainingPair],
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    lengths: Vec<usize>,
}

impl Run<'_> {
    fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let refs: Vec<&TrainingPair> = idx.iter().map(|&i| &self.pairs[i]).collect();
        Batch::from_pairs(&refs, &self.net)
    }

    fn val_loss(&self, mode: BnMode) -> Result<Option<f64>> {
        if self.val_idx.is_empty() {
            return Ok(None);
        }
        let b = self.batch(&self.val_idx)?;
        batch_loss(&self.net, &b, mode, self.net.config.loss_weights).map(Some)
    }

    fn initial_losses(&self, rng: &mut ChaCha8Rng) -> Result<EpochLoss> {
        let cfg = &self.net.config;
        let batches = make_batches(&self.train_idx, &self.lengths, cfg.batch_size, rng);
        let mut total = 0.0;
        for idx in &batches {
            total += batch_loss(&self.net, &self.batch(idx)?, BnMode::Train, cfg.loss_weights)?;
        }
        Ok(EpochLoss {
            epoch: 0,
            train_loss: total / batches.len() as f64,
            val_loss: self.val_loss(BnMode::Train)?,
        })
    }

    fn epoch(&mut self, epoch: usize, opt: &mut Adam, rng: &mut ChaCha8Rng) -> Result<EpochLoss> {
        let cfg = self.net.config.clone();
        let batches = make_batches(&self.train_idx, &self.lengths, cfg.batch_size, rng);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let batch = self.batch(idx)?;
            let (loss, mut grads, stats) = batch_gradients(&self.net, &batch, cfg.loss_weights).map_err(|e| match e {
                Error::Numerical(m) => Error::numerical(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!("loss diverged at epoch {epoch}, batch {b}")));
            }
            clip_global_norm(grads.slices_mut(), cfg.grad_clip);
            opt.step(self.net.param_slices_mut(), grads.slices(), cfg.learning_rate);
            for (layer, (mean, var)) in self.net.layers.iter_mut().zip(&stats) {
                layer.bn.update_running(mean, var, cfg.bn_momentum);
            }
            if !self.net.params_finite() {
                return Err(Error::numerical(format!(
                    "non-finite parameters after epoch {epoch}, batch {b}"
                )));
            }
            total += loss;
        }
        let record = EpochLoss {
            epoch,
            train_loss: total / batches.len() as f64,
            val_loss: self.val_loss(BnMode::Eval)?,
        };
        info!(
            "epoch {epoch}: train {:.5} val {}",
            record.train_loss,
            record.val_loss.map_or("-".to_string(), |v| format!("{v:.5}"))
        );
        Ok(record)
    }
}

fn check_pairs(pairs: &[TrainingPair], cfg: &NetworkConfig) -> Result<Vec<usize>> {
    if pairs.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    for (i, p) in pairs.iter().enumerate() {
        p.validate(cfg.secondary)
            .map_err(|e| Error::invalid(format!("training pair {i}: {e}")))?;
        if cfg.secondary != SecondaryTarget::None && p.target2.is_none() {
            return Err(Error::invalid(format!("training pair {i} lacks the {} target", cfg.secondary)));
        }
    }
    Ok(pairs.iter().map(TrainingPair::valid_frames).collect())
}

/// Trains a network from scratch. Deterministic for a given seed: the seed
/// drives initialization, the validation split and the batch order.
pub fn train(pairs: &[TrainingPair], config: &NetworkConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let lengths = check_pairs(pairs, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..pairs.len()).collect();
    all.shuffle(&mut rng);
    let n_val = if pairs.len() >= 2 {
        ((config.val_fraction * pairs.len() as f64).floor() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let val_idx = all[..n_val].to_vec();
    let mut train_idx = all[n_val..].to_vec();
    train_idx.sort_unstable();

    let mut net = DualLabelNetwork::new(config.clone(), &mut rng)?;
    let train_refs: Vec<&TrainingPair> = train_idx.iter().map(|&i| &pairs[i]).collect();
    fit_standardizers(&mut net, &train_refs);
    debug!("network with {} parameters", net.parameter_count());

    let mut run = Run {
        net,
        pairs,
        train_idx,
        val_idx,
        lengths,
    };
    let mut history = vec![run.initial_losses(&mut rng)?];
    let sizes: Vec<usize> = run.net.param_slices().iter().map(|(_, s)| s.len()).collect();
    let mut opt = Adam::new(&sizes, config.beta1, config.beta2, config.adam_eps);
    for epoch in 1..=config.epochs {
        history.push(run.epoch(epoch, &mut opt, &mut rng)?);
    }
    Ok(Checkpoint {
        network: run.net,
        history,
        seed,
    })
}

/// Continues training a checkpoint for `epochs` more epochs on all pairs
/// with fresh optimizer state. Zero epochs returns an identical checkpoint.
pub fn train_more(ckpt: &Checkpoint, pairs: &[TrainingPair], epochs: usize, seed: u64) -> Result<Checkpoint> {
    if epochs == 0 {
        return Ok(ckpt.clone());
    }
    let cfg = ckpt.network.config.clone();
    let lengths = check_pairs(pairs, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = Run {
        net: ckpt.network.clone(),
        pairs,
        train_idx: (0..pairs.len()).collect(),
        val_idx: Vec::new(),
        lengths,
    };
    let sizes: Vec<usize> = run.net.param_slices().iter().map(|(_, s)| s.len()).collect();
    let mut opt = Adam::new(&sizes, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = ckpt.history.clone();
    let start = history.last().map_or(0, |h| h.epoch);
    for e in 1..=epochs {
        history.push(run.epoch(start + e, &mut opt, &mut rng)?);
    }
    Ok(Checkpoint {
        network: run.net,
        history,
        seed: ckpt.seed,
    })
}

/// Dereverberated log-Mel frames: primary head only, eval-mode batch norm.
pub fn enhance(input: &FeatureMatrix, net: &DualLabelNetwork) -> Result<FeatureMatrix> {
    net.run(input, false).map(|(primary, _)| primary)
}
