//! Stacked Elman RNN baseline with a per-step linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier_init, ParamStore, Scalar, Tape, Tensor, Var};
use crate::{NUM_CHANNELS, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RnnConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub num_classes: usize,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self {
            input_dim: NUM_CHANNELS,
            hidden: 512,
            layers: 10,
            num_classes: NUM_CLASSES,
        }
    }
}

impl RnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != NUM_CHANNELS {
            return Err(Error::config(
                "model.input_dim",
                format!("must be {NUM_CHANNELS}"),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("model.layers", "must be at least 1"));
        }
        if self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be at least 1"));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::config(
                "model.num_classes",
                format!("must be {NUM_CLASSES}"),
            ));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        let h = self.hidden;
        let first = self.input_dim * h + h * h + h;
        let rest = (self.layers - 1) * (2 * h * h + h);
        first + rest + h * self.num_classes + self.num_classes
    }
}

#[derive(Debug, Clone, Copy)]
struct RnnLayer {
    w_in: usize,
    w_rec: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
pub(super) struct RnnLayout {
    layers: Vec<RnnLayer>,
    head_weight: usize,
    head_bias: usize,
}

impl RnnLayout {
    pub(super) fn build<T: Scalar, R: Rng + ?Sized>(
        cfg: &RnnConfig,
        p: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|i| {
                let inp = if i == 0 { cfg.input_dim } else { h };
                RnnLayer {
                    w_in: p.add(format!("rnn.{i}.w_in"), xavier_init(&[inp, h], rng)),
                    w_rec: p.add(format!("rnn.{i}.w_rec"), xavier_init(&[h, h], rng)),
                    bias: p.add(format!("rnn.{i}.bias"), Tensor::zeros(&[h])),
                }
            })
            .collect();
        Self {
            layers,
            head_weight: p.add("head.weight", xavier_init(&[h, cfg.num_classes], rng)),
            head_bias: p.add("head.bias", Tensor::zeros(&[cfg.num_classes])),
        }
    }

    pub(super) fn forward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let w_in = tape.param(p, layer.w_in);
            let w_rec = tape.param(p, layer.w_rec);
            let bias = tape.param(p, layer.bias);
            let xw = tape.matmul(h, w_in)?;
            let xw = tape.add_row(xw, bias)?;
            h = tape.tanh_recurrence(xw, w_rec)?;
        }
        let w = tape.param(p, self.head_weight);
        let b = tape.param(p, self.head_bias);
        let y = tape.matmul(h, w)?;
        tape.add_row(y, b)
    }
}
