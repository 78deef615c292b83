//! Feature-domain speech dereverberation with dual-target recurrent networks.
//!
//! The crate covers the whole experimental loop:
//!
//! - [`dsp`]: log-Mel, spectrogram and MFCC features, energy VAD
//! - [`pitch`]: NCCF + dynamic-programming f0 tracker for the pitch target
//! - [`reverb`]: synthetic room impulse responses and convolution
//! - [`nnet`]: bidirectional LSTM with batch norm and two output heads,
//!   trained by hand-written backpropagation through time
//! - [`sv`]: GMM-UBM speaker verification and equal error rate
//! - [`harness`]: synthetic speakers, corpus manifests and the
//!   clean/reverberant condition grid

pub mod dsp;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod nnet;
pub mod pitch;
pub mod reverb;
pub mod sv;

pub use dsp::{FeatureKind, FeatureMatrix, FrameParams, Waveform};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nnet::{Checkpoint, DualLabelNetwork, NetworkConfig, SecondaryTarget};
pub use pitch::{PitchConfig, PitchTrack};
pub use reverb::RoomImpulseResponse;
pub use sv::{Condition, GaussianMixtureModel, TrialScores};
