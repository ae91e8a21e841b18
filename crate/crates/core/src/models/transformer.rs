//! Post-norm encoder-decoder transformer over the raw 27 channels, with the
//! decoder fed the same sequence as the encoder and a per-step linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier_init, ParamStore, Scalar, Tape, Tensor, Var};
use crate::{NUM_CHANNELS, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub input_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub dim_feedforward: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub window: usize,
    /// Add fixed sinusoidal position encodings to the standardized inputs.
    pub positional_encoding: bool,
    /// Mask every attention block so step `t` only sees steps `≤ t`.
    pub causal: bool,
    pub layer_norm_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            input_dim: NUM_CHANNELS,
            num_heads: 9,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            dim_feedforward: 64,
            dropout: 0.1,
            num_classes: NUM_CLASSES,
            window: 64,
            positional_encoding: true,
            causal: true,
            layer_norm_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != NUM_CHANNELS {
            return Err(Error::config(
                "model.input_dim",
                format!("must be {NUM_CHANNELS}"),
            ));
        }
        if self.num_heads == 0 || !self.input_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "model.num_heads",
                format!(
                    "input_dim {} must be divisible by num_heads {}",
                    self.input_dim, self.num_heads
                ),
            ));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(
                "model.num_classes",
                format!("must be {NUM_CLASSES}"),
            ));
        }
        if self.num_encoder_layers == 0 || self.num_decoder_layers == 0 {
            return Err(Error::config(
                "model.num_layers",
                "encoder and decoder need at least one layer",
            ));
        }
        if self.dim_feedforward == 0 {
            return Err(Error::config("model.dim_feedforward", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must be in [0, 1)"));
        }
        if self.window == 0 {
            return Err(Error::config("model.window", "must be at least 1"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::config("model.layer_norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let d = self.input_dim;
        let f = self.dim_feedforward;
        let attn = 4 * (d * d + d);
        let ff = d * f + f + f * d + d;
        let norm = 2 * d;
        let enc = attn + ff + 2 * norm;
        let dec = 2 * attn + ff + 3 * norm;
        self.num_encoder_layers * enc
            + self.num_decoder_layers * dec
            + 2 * norm
            + d * self.num_classes
            + self.num_classes
    }
}

/// Sinusoidal encodings, `steps × dim` row-major: even columns `sin`, odd
/// columns `cos`, frequency `10000^(−2i/dim)` for pair `i`.
pub fn positional_encoding(steps: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; steps * dim];
    for t in 0..steps {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    fn build<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        inp: usize,
        out: usize,
        p: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: p.add(format!("{name}.weight"), xavier_init(&[inp, out], rng)),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    fn apply<T: Scalar>(&self, p: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(p, self.weight);
        let b = tape.param(p, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

impl Norm {
    fn build<T: Scalar>(name: &str, dim: usize, p: &mut ParamStore<T>) -> Self {
        Self {
            gain: p.add(format!("{name}.gain"), Tensor::full(&[dim], T::one())),
            bias: p.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn apply<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        eps: f64,
    ) -> Result<Var> {
        let g = tape.param(p, self.gain);
        let b = tape.param(p, self.bias);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    fn build<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        d: usize,
        p: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::build(&format!("{name}.q"), d, d, p, rng),
            k: Linear::build(&format!("{name}.k"), d, d, p, rng),
            v: Linear::build(&format!("{name}.v"), d, d, p, rng),
            out: Linear::build(&format!("{name}.out"), d, d, p, rng),
        }
    }

    fn apply<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        query: Var,
        memory: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.apply(p, tape, query)?;
        let k = self.k.apply(p, tape, memory)?;
        let v = self.v.apply(p, tape, memory)?;
        let a = tape.attention(q, k, v, heads, causal)?;
        self.out.apply(p, tape, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn apply<T: Scalar, R: Rng + ?Sized>(
        &self,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        dropout: f64,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let h = self.up.apply(p, tape, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout, rng)?;
        self.down.apply(p, tape, h)
    }
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ff: FeedForward,
    norm2: Norm,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff: FeedForward,
    norm3: Norm,
}

#[derive(Debug, Clone)]
pub(super) struct TransformerLayout {
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    head: Linear,
}

fn residual<T: Scalar, R: Rng + ?Sized>(
    p: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: Var,
    sub: Var,
    norm: &Norm,
    cfg: &TransformerConfig,
    rng: Option<&mut R>,
) -> Result<Var> {
    let sub = tape.dropout(sub, cfg.dropout, rng)?;
    let sum = tape.add(x, sub)?;
    norm.apply(p, tape, sum, cfg.layer_norm_eps)
}

impl TransformerLayout {
    pub(super) fn build<T: Scalar, R: Rng + ?Sized>(
        cfg: &TransformerConfig,
        p: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let d = cfg.input_dim;
        let f = cfg.dim_feedforward;
        let ff = |name: &str, p: &mut ParamStore<T>, rng: &mut R| FeedForward {
            up: Linear::build(&format!("{name}.ff.up"), d, f, p, rng),
            down: Linear::build(&format!("{name}.ff.down"), f, d, p, rng),
        };
        let encoder = (0..cfg.num_encoder_layers)
            .map(|i| {
                let name = format!("encoder.{i}");
                EncoderLayer {
                    attn: Attention::build(&format!("{name}.self_attn"), d, p, rng),
                    norm1: Norm::build(&format!("{name}.norm1"), d, p),
                    ff: ff(&name, p, rng),
                    norm2: Norm::build(&format!("{name}.norm2"), d, p),
                }
            })
            .collect();
        let encoder_norm = Norm::build("encoder.norm", d, p);
        let decoder = (0..cfg.num_decoder_layers)
            .map(|i| {
                let name = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: Attention::build(&format!("{name}.self_attn"), d, p, rng),
                    norm1: Norm::build(&format!("{name}.norm1"), d, p),
                    cross_attn: Attention::build(&format!("{name}.cross_attn"), d, p, rng),
                    norm2: Norm::build(&format!("{name}.norm2"), d, p),
                    ff: ff(&name, p, rng),
                    norm3: Norm::build(&format!("{name}.norm3"), d, p),
                }
            })
            .collect();
        let decoder_norm = Norm::build("decoder.norm", d, p);
        let head = Linear::build("head", d, cfg.num_classes, p, rng);
        Self {
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            head,
        }
    }

    pub(super) fn encode<T: Scalar, R: Rng + ?Sized>(
        &self,
        cfg: &TransformerConfig,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.encoder {
            let a = layer.attn.apply(p, tape, h, h, cfg.num_heads, cfg.causal)?;
            h = residual(p, tape, h, a, &layer.norm1, cfg, rng.as_deref_mut())?;
            let f = layer
                .ff
                .apply(p, tape, h, cfg.dropout, rng.as_deref_mut())?;
            h = residual(p, tape, h, f, &layer.norm2, cfg, rng.as_deref_mut())?;
        }
        self.encoder_norm.apply(p, tape, h, cfg.layer_norm_eps)
    }

    pub(super) fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        cfg: &TransformerConfig,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let memory = self.encode(cfg, p, tape, x, rng.as_deref_mut())?;
        let mut h = x;
        for layer in &self.decoder {
            let a = layer
                .self_attn
                .apply(p, tape, h, h, cfg.num_heads, cfg.causal)?;
            h = residual(p, tape, h, a, &layer.norm1, cfg, rng.as_deref_mut())?;
            let c = layer
                .cross_attn
                .apply(p, tape, h, memory, cfg.num_heads, cfg.causal)?;
            h = residual(p, tape, h, c, &layer.norm2, cfg, rng.as_deref_mut())?;
            let f = layer
                .ff
                .apply(p, tape, h, cfg.dropout, rng.as_deref_mut())?;
            h = residual(p, tape, h, f, &layer.norm3, cfg, rng.as_deref_mut())?;
        }
        let h = self.decoder_norm.apply(p, tape, h, cfg.layer_norm_eps)?;
        self.head.apply(p, tape, h)
    }
}
