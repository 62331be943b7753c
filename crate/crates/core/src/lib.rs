//! Accent domain expansion for a joint CTC/attention sequence recognizer.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: define-by-run reverse-mode differentiation over `f64` tensors.
//! * [`model`]: the shared encoder, CTC head and attention decoder, their
//!   named parameter registry, freeze policies and checkpoints.
//! * [`losses`]: CTC, label-smoothed cross-entropy, the hybrid objective and
//!   the WCA/KLD regularizers.
//! * [`trainer`]: optimizers, the Noam schedule, epoch splitting and the
//!   first-order MAML loop next to the fine-tuning baselines.
//! * [`synth`]: synthetic source/accent domains and the dataset file format.
//! * [`eval`]: CTC decoding, CER, the experiment grid and report rendering.
//! * [`oracle`]: brute-force reference implementations.
//! * [`selftest`]: oracle and gradient checks run by `accent-expand selftest`.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod selftest;
pub mod synth;
pub mod trainer;

pub use autodiff::{Graph, Tensor, Var};
