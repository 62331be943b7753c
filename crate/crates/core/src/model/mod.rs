//! Joint CTC/attention recognizer: a shared transformer encoder over stacked
//! frames, a linear CTC head, and an autoregressive decoder with
//! cross-attention. Parameters live in a [`ParameterRegistry`] under stable
//! hierarchical names.

mod checkpoint;
mod network;
mod registry;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use network::{EncoderOutput, Forward};
pub use registry::{apply_freeze_policy, Binder, FreezePolicy, ParamGrads, ParameterRegistry};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};

/// Index of the CTC blank symbol.
pub const BLANK: usize = 0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter name {0:?}")]
    UnknownParameter(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("feature dimension mismatch: model expects {expected}, input has {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("input of {frames} frames is shorter than the frame stack of {frame_stack}")]
    TooShort { frames: usize, frame_stack: usize },
    #[error("label symbol {symbol} is not a regular vocabulary symbol (1..={max})")]
    LabelOutOfVocabulary { symbol: usize, max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint integrity check failed: stored crc {stored:08x}, computed {computed:08x}")]
    Integrity { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub num_heads: usize,
    /// Regular symbols plus blank (index 0) and the shared sos/eos (last index).
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frame_stack: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_encoder_blocks: 4,
            num_decoder_blocks: 2,
            model_dim: 32,
            ff_dim: 64,
            num_heads: 2,
            vocab_size: 12,
            feature_dim: 8,
            frame_stack: 2,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < 3 {
            return bad(format!("vocab_size {} < 3", self.vocab_size));
        }
        if self.num_encoder_blocks == 0 || self.num_decoder_blocks == 0 {
            return bad("encoder and decoder need at least one block".into());
        }
        if self.ff_dim == 0 || self.feature_dim == 0 || self.frame_stack == 0 {
            return bad("ff_dim, feature_dim and frame_stack must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Index of the shared start/end-of-sequence symbol.
    pub fn sos_eos(&self) -> usize {
        self.vocab_size - 1
    }

    /// Largest regular (non-control) symbol.
    pub fn max_symbol(&self) -> usize {
        self.vocab_size - 2
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub params: ParameterRegistry,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

fn add_linear(
    reg: &mut ParameterRegistry,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<(), ModelError> {
    reg.insert(format!("{prefix}.weight"), glorot(rng, fan_in, fan_out))?;
    reg.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn add_norm(reg: &mut ParameterRegistry, prefix: &str, dim: usize) -> Result<(), ModelError> {
    reg.insert(format!("{prefix}.gain"), Tensor::filled(&[dim], 1.0))?;
    reg.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]))?;
    Ok(())
}

fn add_attention(
    reg: &mut ParameterRegistry,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dim: usize,
) -> Result<(), ModelError> {
    for proj in ["q", "k", "v", "o"] {
        add_linear(reg, rng, &format!("{prefix}.{proj}"), dim, dim)?;
    }
    Ok(())
}

/// Builds a freshly initialized model. Initialization is a pure function of
/// `(config, rng_seed)`.
pub fn build_model(config: &ModelConfig, rng_seed: u64) -> Result<AsrModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut reg = ParameterRegistry::new();
    let (d, ff, v) = (config.model_dim, config.ff_dim, config.vocab_size);

    add_linear(&mut reg, &mut rng, "encoder.input", config.feature_dim * config.frame_stack, d)?;
    for b in 1..=config.num_encoder_blocks {
        let p = format!("encoder.block{b}");
        add_norm(&mut reg, &format!("{p}.norm1"), d)?;
        add_attention(&mut reg, &mut rng, &format!("{p}.attn"), d)?;
        add_norm(&mut reg, &format!("{p}.norm2"), d)?;
        add_linear(&mut reg, &mut rng, &format!("{p}.ff1"), d, ff)?;
        add_linear(&mut reg, &mut rng, &format!("{p}.ff2"), ff, d)?;
    }
    add_norm(&mut reg, "encoder.final_norm", d)?;
    add_linear(&mut reg, &mut rng, "ctc", d, v)?;

    reg.insert("decoder.embedding.weight", glorot(&mut rng, v, d))?;
    for b in 1..=config.num_decoder_blocks {
        let p = format!("decoder.block{b}");
        add_norm(&mut reg, &format!("{p}.norm1"), d)?;
        add_attention(&mut reg, &mut rng, &format!("{p}.self_attn"), d)?;
        add_norm(&mut reg, &format!("{p}.norm2"), d)?;
        add_attention(&mut reg, &mut rng, &format!("{p}.cross_attn"), d)?;
        add_norm(&mut reg, &format!("{p}.norm3"), d)?;
        add_linear(&mut reg, &mut rng, &format!("{p}.ff1"), d, ff)?;
        add_linear(&mut reg, &mut rng, &format!("{p}.ff2"), ff, d)?;
    }
    add_norm(&mut reg, "decoder.final_norm", d)?;
    add_linear(&mut reg, &mut rng, "decoder.output", d, v)?;

    Ok(AsrModel {
        config: config.clone(),
        params: reg,
    })
}

impl AsrModel {
    /// Eval-mode CTC log-posteriors for one utterance.
    pub fn ctc_log_probs(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = crate::autodiff::Graph::new();
        let mut fwd = Forward::new(&mut g, &self.config, Binder::new(&self.params, false), None);
        let enc = fwd.encode(features)?;
        let logits = fwd.ctc_logits(&enc)?;
        let lp = g.log_softmax(logits);
        Ok(g.tensor(lp))
    }
}
