//! Dual-target bidirectional LSTM for feature-domain dereverberation.
//!
//! A stack of BLSTM layers, each followed by batch normalization, feeds two
//! heads: a linear map to the clean 31-band log-Mel frame (the output used at
//! enhancement time) and an auxiliary head predicting either the clean pitch
//! or the clean 100-bin spectrogram. Training minimizes
//! `w1 * MSE(primary) + w2 * MSE(secondary)`.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod loss;
mod network;
mod train;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{lstm_cell_forward, BatchNorm, BnMode, Linear, LstmParams};
pub use loss::{loss_dual, mse_masked};
pub use network::{blstm_layer_forward, DualLabelNetwork, Gradients, Standardizer};
pub use train::{enhance, train, train_more, Batch, EpochLoss};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};

/// Auxiliary training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SecondaryTarget {
    /// Single-target network.
    None,
    Pitch1,
    Spec100,
    /// Secondary head predicting the primary target again (ablation).
    Mfb31,
}

impl SecondaryTarget {
    pub fn kind(self) -> Option<FeatureKind> {
        match self {
            SecondaryTarget::None => None,
            SecondaryTarget::Pitch1 => Some(FeatureKind::Pitch1),
            SecondaryTarget::Spec100 => Some(FeatureKind::Spec100),
            SecondaryTarget::Mfb31 => Some(FeatureKind::Mfb31),
        }
    }

    pub fn dim(self) -> usize {
        self.kind().map_or(0, FeatureKind::dim)
    }
}

impl fmt::Display for SecondaryTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SecondaryTarget::None => "none",
            SecondaryTarget::Pitch1 => "pitch",
            SecondaryTarget::Spec100 => "spec",
            SecondaryTarget::Mfb31 => "mfb",
        })
    }
}

impl FromStr for SecondaryTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SecondaryTarget::None),
            "pitch" | "pitch1" => Ok(SecondaryTarget::Pitch1),
            "spec" | "spec100" => Ok(SecondaryTarget::Spec100),
            "mfb" | "mfb31" => Ok(SecondaryTarget::Mfb31),
            other => Err(Error::invalid(format!("unknown secondary target '{other}'"))),
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub n_layers: usize,
    /// LSTM cells per direction; each layer emits `2 * cells` values per frame.
    pub cells: usize,
    pub input_dim: usize,
    pub secondary: SecondaryTarget,
    /// Hidden tanh layers in front of the spectrogram head.
    pub secondary_hidden_dims: Vec<usize>,
    /// `(primary, secondary)` loss weights.
    pub loss_weights: (f64, f64),
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of training pairs held out for the validation loss.
    pub val_fraction: f64,
    pub bn_momentum: f64,
    /// Pitch targets are divided by this many Hz before standardization.
    pub pitch_scale: f64,
}

impl NetworkConfig {
    /// Desk-scale default: 4 layers of 32 cells per direction.
    pub fn new(secondary: SecondaryTarget) -> Self {
        let (loss_weights, hidden) = match secondary {
            SecondaryTarget::None => ((1.0, 0.0), vec![]),
            SecondaryTarget::Spec100 => ((0.5, 0.5), vec![64, 64]),
            _ => ((0.5, 0.5), vec![]),
        };
        NetworkConfig {
            n_layers: 4,
            cells: 32,
            input_dim: FeatureKind::Mfb31.dim(),
            secondary,
            secondary_hidden_dims: hidden,
            loss_weights,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            epochs: 20,
            batch_size: 4,
            val_fraction: 0.1,
            bn_momentum: 0.9,
            pitch_scale: 500.0,
        }
    }

    /// Two layers of 32 cells, used by the reference training schedule.
    pub fn tiny(secondary: SecondaryTarget) -> Self {
        NetworkConfig {
            n_layers: 2,
            ..Self::new(secondary)
        }
    }

    /// Full-size architecture: 4 layers, 256 cells, 256-unit spectrogram hidden layers.
    pub fn full_scale(secondary: SecondaryTarget) -> Self {
        let mut c = Self::new(secondary);
        c.cells = 256;
        if secondary == SecondaryTarget::Spec100 {
            c.secondary_hidden_dims = vec![256, 256];
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.cells == 0 {
            return Err(Error::invalid("network needs at least one layer and one cell"));
        }
        if self.input_dim != FeatureKind::Mfb31.dim() {
            return Err(Error::invalid(format!(
                "network input must be {}-dimensional, configured {}",
                FeatureKind::Mfb31.dim(),
                self.input_dim
            )));
        }
        let (w1, w2) = self.loss_weights;
        if (w1 + w2 - 1.0).abs() > 1e-12 || w1 < 0.0 || w2 < 0.0 {
            return Err(Error::invalid(format!(
                "loss weights ({w1}, {w2}) must be non-negative and sum to 1"
            )));
        }
        if self.secondary == SecondaryTarget::None && w1 != 1.0 {
            return Err(Error::invalid("a single-target network must weight the primary loss by 1"));
        }
        let wants_hidden = self.secondary == SecondaryTarget::Spec100;
        if wants_hidden == self.secondary_hidden_dims.is_empty() {
            return Err(Error::invalid(
                "hidden secondary layers are required for, and only for, the spectrogram target",
            ));
        }
        if self.secondary_hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.batch_size == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("batch size must be positive and val fraction in [0, 1)"));
        }
        if !(self.learning_rate > 0.0 && self.grad_clip > 0.0 && self.pitch_scale > 0.0) {
            return Err(Error::invalid("learning rate, clip norm and pitch scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("batch-norm momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.secondary_hidden_dims.iter().map(|d| d.to_string()).collect();
        let mut m = BTreeMap::new();
        m.insert("n_layers", self.n_layers.to_string());
        m.insert("cells", self.cells.to_string());
        m.insert("input_dim", self.input_dim.to_string());
        m.insert("secondary", self.secondary.to_string());
        m.insert("secondary_hidden_dims", hidden.join(","));
        m.insert("loss_w1", format!("{:?}", self.loss_weights.0));
        m.insert("loss_w2", format!("{:?}", self.loss_weights.1));
        m.insert("learning_rate", format!("{:?}", self.learning_rate));
        m.insert("beta1", format!("{:?}", self.beta1));
        m.insert("beta2", format!("{:?}", self.beta2));
        m.insert("adam_eps", format!("{:?}", self.adam_eps));
        m.insert("grad_clip", format!("{:?}", self.grad_clip));
        m.insert("epochs", self.epochs.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("val_fraction", format!("{:?}", self.val_fraction));
        m.insert("bn_momentum", format!("{:?}", self.bn_momentum));
        m.insert("pitch_scale", format!("{:?}", self.pitch_scale));
        m.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad config line '{line}'")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<&String> {
            m.get(k).ok_or_else(|| Error::format(format!("missing config key '{k}'")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("bad value '{v}' for '{k}'")))
        }
        let hidden_text = get("secondary_hidden_dims")?;
        let secondary_hidden_dims = if hidden_text.is_empty() {
            vec![]
        } else {
            hidden_text
                .split(',')
                .map(|d| num("secondary_hidden_dims", d.trim()))
                .collect::<Result<_>>()?
        };
        let cfg = NetworkConfig {
            n_layers: num("n_layers", get("n_layers")?)?,
            cells: num("cells", get("cells")?)?,
            input_dim: num("input_dim", get("input_dim")?)?,
            secondary: get("secondary")?.parse()?,
            secondary_hidden_dims,
            loss_weights: (num("loss_w1", get("loss_w1")?)?, num("loss_w2", get("loss_w2")?)?),
            learning_rate: num("learning_rate", get("learning_rate")?)?,
            beta1: num("beta1", get("beta1")?)?,
            beta2: num("beta2", get("beta2")?)?,
            adam_eps: num("adam_eps", get("adam_eps")?)?,
            grad_clip: num("grad_clip", get("grad_clip")?)?,
            epochs: num("epochs", get("epochs")?)?,
            batch_size: num("batch_size", get("batch_size")?)?,
            val_fraction: num("val_fraction", get("val_fraction")?)?,
            bn_momentum: num("bn_momentum", get("bn_momentum")?)?,
            pitch_scale: num("pitch_scale", get("pitch_scale")?)?,
        };
        Ok(cfg)
    }
}

/// One utterance: reverberant input frames and the aligned clean targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: FeatureMatrix,
    pub target1: FeatureMatrix,
    pub target2: Option<FeatureMatrix>,
    /// Frame validity. Valid frames must form a prefix; the rest is padding.
    pub mask: Vec<bool>,
}

impl TrainingPair {
    /// Pair with every frame valid.
    pub fn new(input: FeatureMatrix, target1: FeatureMatrix, target2: Option<FeatureMatrix>) -> Result<Self> {
        let mask = vec![true; input.frames()];
        let pair = TrainingPair {
            input,
            target1,
            target2,
            mask,
        };
        pair.check_shapes()?;
        Ok(pair)
    }

    fn check_shapes(&self) -> Result<()> {
        let t = self.input.frames();
        if self.input.kind() != FeatureKind::Mfb31 || self.target1.kind() != FeatureKind::Mfb31 {
            return Err(Error::invalid("training input and primary target must be mfb31"));
        }
        let t2 = self.target2.as_ref().map_or(t, FeatureMatrix::frames);
        if self.target1.frames() != t || t2 != t || self.mask.len() != t {
            return Err(Error::invalid(format!(
                "training pair frame counts differ: input {t}, target1 {}, target2 {t2}, mask {}",
                self.target1.frames(),
                self.mask.len()
            )));
        }
        Ok(())
    }

    /// Checks shapes, kinds and the prefix form of the mask.
    pub fn validate(&self, secondary: SecondaryTarget) -> Result<()> {
        self.check_shapes()?;
        let have = self.target2.as_ref().map(FeatureMatrix::kind);
        if have != secondary.kind() && secondary != SecondaryTarget::None {
            return Err(Error::invalid(format!(
                "secondary target is {have:?}, network expects {secondary}"
            )));
        }
        let valid = self.valid_frames();
        if self.mask[valid..].iter().any(|m| *m) {
            return Err(Error::invalid("mask must mark a prefix of valid frames"));
        }
        Ok(())
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().take_while(|m| **m).count()
    }

    /// Appends `n` masked all-zero frames.
    pub fn pad(&mut self, n: usize) {
        fn extend(m: &FeatureMatrix, n: usize) -> FeatureMatrix {
            let mut rows: Vec<Vec<f64>> = m.data().iter_rows().map(<[f64]>::to_vec).collect();
            let filler = vec![0.0; m.dim()];
            rows.extend(std::iter::repeat_n(filler, n));
            FeatureMatrix::new(m.kind(), crate::matrix::Matrix::from_rows(&rows), m.frame_shift())
                .expect("padding keeps shapes")
        }
        self.input = extend(&self.input, n);
        self.target1 = extend(&self.target1, n);
        self.target2 = self.target2.as_ref().map(|m| extend(m, n));
        self.mask.extend(std::iter::repeat_n(false, n));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        for s in [SecondaryTarget::None, SecondaryTarget::Pitch1, SecondaryTarget::Spec100, SecondaryTarget::Mfb31] {
            let c = NetworkConfig::tiny(s);
            c.validate().unwrap();
            assert_eq!(NetworkConfig::from_text(&c.to_text()).unwrap(), c);
        }
        NetworkConfig::full_scale(SecondaryTarget::Spec100).validate().unwrap();
        assert_eq!(NetworkConfig::full_scale(SecondaryTarget::Pitch1).cells, 256);
    }

    #[test]
    fn config_invariants() {
        let mut c = NetworkConfig::tiny(SecondaryTarget::Pitch1);
        c.loss_weights = (0.7, 0.7);
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(SecondaryTarget::Pitch1);
        c.secondary_hidden_dims = vec![8, 8];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(SecondaryTarget::Spec100);
        c.secondary_hidden_dims.clear();
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::tiny(SecondaryTarget::None);
        c.loss_weights = (0.5, 0.5);
        assert!(c.validate().is_err());
    }
}
