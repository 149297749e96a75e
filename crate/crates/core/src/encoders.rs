//! Modality-specific encoders and their linear classifiers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autograd::{Graph, ParamStore, Tensor, Var};
use crate::config::{ModelConfig, EHR_FEATURES};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, ResidualBlock, StackedLstm};

/// Stacked LSTM over `T×76` rows; the latent is the top layer's last hidden state.
#[derive(Clone, Debug)]
pub struct EhrEncoder {
    pub lstm: StackedLstm,
}

impl EhrEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        EhrEncoder {
            lstm: StackedLstm::new(
                store,
                name,
                cfg.ehr_input,
                cfg.ehr_hidden,
                cfg.ehr_layers,
                cfg.ehr_dropout,
                rng,
            ),
        }
    }

    pub fn out_features(&self) -> usize {
        self.lstm.hidden_size()
    }

    /// `B×T×76 → B×m`.
    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != EHR_FEATURES {
            return Err(Error::dim(format!(
                "time-series encoder expects B×T×{EHR_FEATURES} input, got {s:?}"
            )));
        }
        self.lstm.forward(g, x)
    }

    /// Encodes series of possibly different lengths. Series of equal length
    /// run as one batch; rows come back in input order.
    pub fn encode<'g>(&self, g: &'g Graph<'_>, series: &[&Tensor]) -> Result<Var<'g>> {
        if series.is_empty() {
            return Err(Error::invalid("no time series to encode"));
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in series.iter().enumerate() {
            let shape = s.shape();
            if shape.len() != 2 || shape[1] != EHR_FEATURES {
                return Err(Error::dim(format!(
                    "time series must be T×{EHR_FEATURES}, got {shape:?}"
                )));
            }
            groups.entry(shape[0]).or_default().push(i);
        }
        let mut parts = Vec::with_capacity(groups.len());
        for rows in groups.values() {
            let items: Vec<&Tensor> = rows.iter().map(|&i| series[i]).collect();
            let v = self.forward(g, g.constant(Tensor::stack(&items)?))?;
            parts.push((v, rows.as_slice()));
        }
        if parts.len() == 1 && parts[0].1.iter().enumerate().all(|(i, &r)| i == r) {
            return Ok(parts[0].0);
        }
        Var::merge_rows(series.len(), &parts)
    }
}

/// Residual convolutional stack, global average pooling and a linear map to
/// `n` features.
#[derive(Clone, Debug)]
pub struct CxrEncoder {
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub head: Linear,
    pub channels: usize,
    pub image_size: usize,
}

impl CxrEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let stem = Conv2d::new(store, &format!("{name}.stem"), cfg.image_channels, cfg.cxr_widths[0], 3, 1, rng);
        let mut blocks = Vec::new();
        let mut width = cfg.cxr_widths[0];
        for (s, &out) in cfg.cxr_widths.iter().enumerate() {
            for b in 0..cfg.cxr_blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(store, &format!("{name}.s{s}.b{b}"), width, out, stride, rng));
                width = out;
            }
        }
        let head = Linear::new(store, &format!("{name}.head"), width, cfg.cxr_features, rng);
        CxrEncoder {
            stem,
            blocks,
            head,
            channels: cfg.image_channels,
            image_size: cfg.image_size,
        }
    }

    pub fn out_features(&self) -> usize {
        self.head.out_features
    }

    /// `B×C×H×W → B×n`.
    pub fn forward<'g>(&self, g: &'g Graph<'_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let expected = [self.channels, self.image_size, self.image_size];
        if s.len() != 4 || s[1..] != expected {
            return Err(Error::dim(format!(
                "image encoder expects B×{}×{}×{} input, got {s:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        let mut y = self.stem.forward(g, x)?.relu();
        for block in &self.blocks {
            y = block.forward(g, y)?;
        }
        self.head.forward(g, y.global_avg_pool()?)
    }

    pub fn encode<'g>(&self, g: &'g Graph<'_>, images: &[&Tensor]) -> Result<Var<'g>> {
        if images.is_empty() {
            return Err(Error::invalid("no images to encode"));
        }
        self.forward(g, g.constant(Tensor::stack(images)?))
    }
}

/// Linear layer whose sigmoid outputs are per-label probabilities.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, features: usize, labels: usize, rng: &mut R) -> Self {
        Classifier {
            linear: Linear::new(store, name, features, labels, rng),
        }
    }

    pub fn labels(&self) -> usize {
        self.linear.out_features
    }

    pub fn logits<'g>(&self, g: &'g Graph<'_>, v: Var<'g>) -> Result<Var<'g>> {
        self.linear.forward(g, v)
    }

    pub fn classify<'g>(&self, g: &'g Graph<'_>, v: Var<'g>) -> Result<Var<'g>> {
        Ok(self.logits(g, v)?.sigmoid())
    }
}
