use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::BnMode;
use super::network::DualLabelNetwork;
use super::train::{batch_gradients, batch_loss, Batch};
use super::{NetworkConfig, SecondaryTarget};
use crate::error::Result;
use crate::matrix::Matrix;

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_DELTA: f64 = 1e-5;
/// Largest accepted relative error.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    /// Largest relative error within each parameter tensor, in parameter order.
    pub per_tensor: Vec<(String, f64)>,
    pub parameters_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the train-mode gradient of `batch` with central differences for
/// every parameter of `net`.
pub fn check_gradients(net: &DualLabelNetwork, batch: &Batch, delta: f64) -> Result<GradCheckReport> {
    let weights = net.config.loss_weights;
    let (_, grads, _) = batch_gradients(net, batch, weights)?;
    let analytic: Vec<Vec<f64>> = grads.slices().into_iter().map(<[f64]>::to_vec).collect();
    let names: Vec<String> = net.param_slices().into_iter().map(|(n, _)| n).collect();

    let mut probe = net.clone();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..analytic[t].len() {
            let original = probe.param_slices_mut()[t][i];
            probe.param_slices_mut()[t][i] = original + delta;
            let plus = batch_loss(&probe, batch, BnMode::Train, weights)?;
            probe.param_slices_mut()[t][i] = original - delta;
            let minus = batch_loss(&probe, batch, BnMode::Train, weights)?;
            probe.param_slices_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * delta);
            worst = worst.max(relative_error(analytic[t][i], numeric));
            checked += 1;
        }
        per_tensor.push((name.clone(), worst));
    }
    let (worst_tensor, max_rel_error) = per_tensor
        .iter()
        .fold((String::new(), 0.0f64), |(wn, wv), (n, v)| if *v > wv { (n.clone(), *v) } else { (wn, wv) });
    Ok(GradCheckReport {
        max_rel_error,
        worst_tensor,
        per_tensor,
        parameters_checked: checked,
    })
}

/// Configuration of the network used by [`grad_check`]: two layers of four
/// cells with a spectrogram head.
pub fn grad_check_config() -> NetworkConfig {
    let mut cfg = NetworkConfig::tiny(SecondaryTarget::Spec100);
    cfg.n_layers = 2;
    cfg.cells = 4;
    cfg.secondary_hidden_dims = vec![6];
    cfg.loss_weights = (0.5, 0.5);
    cfg
}

/// Random standardized batch of `n` sequences of `frames` frames each.
pub(crate) fn random_batch(cfg: &NetworkConfig, n: usize, frames: usize, rng: &mut impl Rng) -> Batch {
    let mut mat = |cols: usize| Matrix::from_vec(frames, cols, (0..frames * cols).map(|_| rng.gen_range(-1.5..1.5)).collect());
    let mut inputs = Vec::new();
    let mut target1 = Vec::new();
    let mut target2 = Vec::new();
    for _ in 0..n {
        inputs.push(mat(cfg.input_dim));
        target1.push(mat(31));
        target2.push(mat(cfg.secondary.dim()));
    }
    Batch {
        inputs,
        target1,
        target2: (cfg.secondary != SecondaryTarget::None).then_some(target2),
    }
}

/// Gradient check of the dual-head spectrogram network on a random batch of
/// two three-frame sequences.
pub fn grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = grad_check_config();
    let net = DualLabelNetwork::new(cfg.clone(), &mut rng)?;
    let batch = random_batch(&cfg, 2, 3, &mut rng);
    check_gradients(&net, &batch, GRAD_CHECK_DELTA)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FeatureKind, FeatureMatrix};
    use crate::nnet::TrainingPair;

    #[test]
    fn seven_passes() {
        let r = grad_check(7).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.per_tensor.len(), 2 * 8 + 2 + 4);
    }

    #[test]
    fn pitch_head_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = NetworkConfig::tiny(SecondaryTarget::Pitch1);
        cfg.cells = 3;
        cfg.loss_weights = (0.5, 0.5);
        let net = DualLabelNetwork::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 2, 4, &mut rng);
        let r = check_gradients(&net, &batch, GRAD_CHECK_DELTA).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn padding_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = grad_check_config();
        cfg.secondary = SecondaryTarget::Mfb31;
        cfg.secondary_hidden_dims.clear();
        let net = DualLabelNetwork::new(cfg.clone(), &mut rng).unwrap();
        let raw = random_batch(&cfg, 2, 4, &mut rng);
        let fm = |m: &Matrix| FeatureMatrix::new(FeatureKind::Mfb31, m.clone(), 0.01).unwrap();
        let pairs: Vec<TrainingPair> = (0..2)
            .map(|i| {
                let t2 = raw.target2.as_ref().map(|t| fm(&t[i]));
                TrainingPair::new(fm(&raw.inputs[i]), fm(&raw.target1[i]), t2).unwrap()
            })
            .collect();
        let mut padded = pairs.clone();
        padded[0].pad(3);
        padded[1].pad(1);
        let a = Batch::from_pairs(&pairs.iter().collect::<Vec<_>>(), &net).unwrap();
        let b = Batch::from_pairs(&padded.iter().collect::<Vec<_>>(), &net).unwrap();
        let (la, ga, _) = batch_gradients(&net, &a, cfg.loss_weights).unwrap();
        let (lb, gb, _) = batch_gradients(&net, &b, cfg.loss_weights).unwrap();
        assert!((la - lb).abs() <= 1e-12);
        for (x, y) in ga.slices().iter().zip(gb.slices()) {
            assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12));
        }
    }

    #[test]
    fn unit_weights_double_every_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = grad_check_config();
        let net = DualLabelNetwork::new(cfg.clone(), &mut rng).unwrap();
        let batch = random_batch(&cfg, 2, 3, &mut rng);
        let (l_half, g_half, _) = batch_gradients(&net, &batch, (0.5, 0.5)).unwrap();
        let (l_one, g_one, _) = batch_gradients(&net, &batch, (1.0, 1.0)).unwrap();
        assert_eq!(l_one, 2.0 * l_half);
        for (h, o) in g_half.slices().iter().zip(g_one.slices()) {
            assert!(h.iter().zip(o.iter()).all(|(h, o)| *o == 2.0 * h));
        }
    }

    #[test]
    fn zero_loss_gives_zero_head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = grad_check_config();
        let net = DualLabelNetwork::new(cfg.clone(), &mut rng).unwrap();
        let mut batch = random_batch(&cfg, 2, 3, &mut rng);
        let pass = net.forward_batch(&batch.inputs, BnMode::Train, true).unwrap();
        batch.target1 = pass.pred1.clone();
        batch.target2 = pass.pred2.clone();
        let (loss, g, _) = batch_gradients(&net, &batch, cfg.loss_weights).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.primary.w.as_slice().iter().chain(&g.primary.b).all(|v| *v == 0.0));
        let out = g.secondary_out.unwrap();
        assert!(out.w.as_slice().iter().all(|v| *v == 0.0));
        assert!(g.secondary_hidden.iter().all(|l| l.w.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 0.1).abs() < 1e-12);
    }
}
