use rand_chacha::ChaCha8Rng;

use super::{Binder, ModelConfig, ModelError, BLANK};
use crate::autodiff::{Graph, Tensor, Var};

/// Encoder states `H` for one utterance: `frames × model_dim`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub frames: usize,
}

/// One forward pass over a graph. Dropout is active only when an RNG is
/// supplied (train mode).
pub struct Forward<'g, 'r> {
    g: &'g mut Graph,
    cfg: &'g ModelConfig,
    params: Binder<'r>,
    rng: Option<&'g mut ChaCha8Rng>,
}

fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Stacks `frame_stack` consecutive frames into one row, zero-padding the tail.
pub(crate) fn stack_frames(features: &Tensor, frame_stack: usize) -> (usize, Vec<f64>) {
    let (t, f) = (features.rows(), features.cols());
    let u = t.div_ceil(frame_stack);
    let mut out = vec![0.0; u * f * frame_stack];
    out[..t * f].copy_from_slice(features.data());
    (u, out)
}

impl<'g, 'r> Forward<'g, 'r> {
    pub fn new(
        g: &'g mut Graph,
        cfg: &'g ModelConfig,
        params: Binder<'r>,
        rng: Option<&'g mut ChaCha8Rng>,
    ) -> Self {
        Self { g, cfg, params, rng }
    }

    pub fn graph(&mut self) -> &mut Graph {
        self.g
    }

    pub fn binder(&self) -> &Binder<'r> {
        &self.params
    }

    pub fn into_binder(self) -> Binder<'r> {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn p(&mut self, name: &str) -> Result<Var, ModelError> {
        self.params.get(self.g, name)
    }

    fn dropout(&mut self, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) => self.g.dropout(x, self.cfg.dropout, rng),
            None => x,
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let y = self.g.matmul(x, w)?;
        Ok(self.g.add(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let gain = self.p(&format!("{prefix}.gain"))?;
        let bias = self.p(&format!("{prefix}.bias"))?;
        Ok(self.g.layer_norm(x, gain, bias, self.cfg.layer_norm_eps)?)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = self.g.relu(h);
        let h = self.dropout(h);
        self.linear(h, &format!("{prefix}.ff2"))
    }

    /// Multi-head attention of `query` rows over `memory` rows. `mask` is an
    /// additive constant applied to the scores before the softmax.
    fn attention(&mut self, query: Var, memory: Var, prefix: &str, mask: Option<Var>) -> Result<Var, ModelError> {
        let q = self.linear(query, &format!("{prefix}.q"))?;
        let k = self.linear(memory, &format!("{prefix}.k"))?;
        let v = self.linear(memory, &format!("{prefix}.v"))?;
        let heads = self.cfg.num_heads;
        let dh = self.cfg.model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.g.slice(q, 1, h * dh, dh)?;
            let kh = self.g.slice(k, 1, h * dh, dh)?;
            let vh = self.g.slice(v, 1, h * dh, dh)?;
            let kt = self.g.transpose(kh)?;
            let scores = self.g.matmul(qh, kt)?;
            let mut scores = self.g.scale(scores, scale);
            if let Some(m) = mask {
                scores = self.g.add(scores, m)?;
            }
            let weights = self.g.softmax(scores);
            let weights = self.dropout(weights);
            outs.push(self.g.matmul(weights, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { self.g.concat(&outs, 1)? };
        self.linear(joined, &format!("{prefix}.o"))
    }

    /// Shared encoder: frame stacking, input projection, positional encoding,
    /// pre-norm self-attention/feed-forward blocks and a final layer norm.
    pub fn encode(&mut self, features: &Tensor) -> Result<EncoderOutput, ModelError> {
        let cfg = self.cfg;
        if features.shape().len() != 2 || features.cols() != cfg.feature_dim {
            return Err(ModelError::FeatureDim {
                expected: cfg.feature_dim,
                got: features.cols(),
            });
        }
        if features.rows() < cfg.frame_stack {
            return Err(ModelError::TooShort {
                frames: features.rows(),
                frame_stack: cfg.frame_stack,
            });
        }
        let (u, stacked) = stack_frames(features, cfg.frame_stack);
        let x = self.g.constant(vec![u, cfg.feature_dim * cfg.frame_stack], stacked)?;
        let h = self.linear(x, "encoder.input")?;
        let pe = self.g.constant(vec![u, cfg.model_dim], positional_encoding(u, cfg.model_dim))?;
        let h = self.g.add(h, pe)?;
        let mut h = self.dropout(h);
        for b in 1..=cfg.num_encoder_blocks {
            let p = format!("encoder.block{b}");
            let a = self.norm(h, &format!("{p}.norm1"))?;
            let a = self.attention(a, a, &format!("{p}.attn"), None)?;
            let a = self.dropout(a);
            h = self.g.add(h, a)?;
            let f = self.norm(h, &format!("{p}.norm2"))?;
            let f = self.feed_forward(f, &p)?;
            let f = self.dropout(f);
            h = self.g.add(h, f)?;
        }
        let hidden = self.norm(h, "encoder.final_norm")?;
        Ok(EncoderOutput { hidden, frames: u })
    }

    /// Unnormalized CTC scores, `frames × vocab_size`.
    pub fn ctc_logits(&mut self, enc: &EncoderOutput) -> Result<Var, ModelError> {
        self.linear(enc.hidden, "ctc")
    }

    /// Teacher-forced decoder scores, `(labels.len() + 1) × vocab_size`. Row
    /// `t` predicts token `t` of `labels ++ [eos]` from `sos ++ labels[..t]`.
    pub fn aed_logits(&mut self, enc: &EncoderOutput, labels: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let max = cfg.max_symbol();
        if let Some(&bad) = labels.iter().find(|&&s| s == BLANK || s > max) {
            return Err(ModelError::LabelOutOfVocabulary { symbol: bad, max });
        }
        let mut tokens = Vec::with_capacity(labels.len() + 1);
        tokens.push(cfg.sos_eos());
        tokens.extend_from_slice(labels);
        let n = tokens.len();
        let table = self.p("decoder.embedding.weight")?;
        let emb = self.g.embedding(table, &tokens)?;
        let pe = self.g.constant(vec![n, cfg.model_dim], positional_encoding(n, cfg.model_dim))?;
        let h = self.g.add(emb, pe)?;
        let mut h = self.dropout(h);

        let mask = if n > 1 {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in i + 1..n {
                    m[i * n + j] = -1e9;
                }
            }
            Some(self.g.constant(vec![n, n], m)?)
        } else {
            None
        };
        for b in 1..=cfg.num_decoder_blocks {
            let p = format!("decoder.block{b}");
            let a = self.norm(h, &format!("{p}.norm1"))?;
            let a = self.attention(a, a, &format!("{p}.self_attn"), mask)?;
            let a = self.dropout(a);
            h = self.g.add(h, a)?;
            let c = self.norm(h, &format!("{p}.norm2"))?;
            let c = self.attention(c, enc.hidden, &format!("{p}.cross_attn"), None)?;
            let c = self.dropout(c);
            h = self.g.add(h, c)?;
            let f = self.norm(h, &format!("{p}.norm3"))?;
            let f = self.feed_forward(f, &p)?;
            let f = self.dropout(f);
            h = self.g.add(h, f)?;
        }
        let h = self.norm(h, "decoder.final_norm")?;
        self.linear(h, "decoder.output")
    }
}
