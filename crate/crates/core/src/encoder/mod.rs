//! Bidirectional transformer encoder with a masked-token head and a regression
//! head, plus the pre-training and fine-tuning loops that drive it.
//!
//! Hidden states are row-major `L × d` matrices (one row per position), so the
//! projections read `Q = H · W_Q` with `W_Q` stored as `d × d`.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub mod artifact;
pub mod model;
pub mod optim;
pub mod train;

pub use artifact::{load_model, save_model};
pub use model::{
    embed, encoder_layer, forward, mlm_loss, regression_forward, AttentionRecord, ForwardOutput,
    MaskedSequence,
};
pub use optim::{adamw_update, lr_at, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{
    finetune, predict, pretrain, write_log, EncoderModel, EpochLog, FineTuneOptions,
    FineTuneResult, Pretrained, Split,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("step {t} outside 1..={total}")]
    StepOutOfRange { t: usize, total: usize },
    #[error("batch has no masked positions")]
    NoMaskedPositions,
    #[error("{0}")]
    Data(String),
    #[error("model artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            max_len: 64,
            vocab_size: 0,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("n_layers, n_heads, d_model and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size <= crate::tokenize::RESERVED_TOKENS.len() {
            return bad("vocab_size must exceed the reserved tokens".into());
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Which part of an unselected layer is frozen during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FreezeScope {
    /// Attention, feed-forward and both layer norms.
    #[default]
    Block,
    /// Only `W_Q`, `W_K`, `W_V`, `W_O`.
    AttentionOnly,
}

/// Layers (1-based) that stay trainable during fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSelection {
    All,
    Layers(BTreeSet<usize>),
}

impl LayerSelection {
    /// Parses `all` or a comma-separated list such as `11,12` or `9-12`.
    pub fn parse(text: &str) -> Result<Self, EncoderError> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        let mut set = BTreeSet::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || EncoderError::Config(format!("bad layer selection '{part}'"));
            if let Some((a, b)) = part.split_once('-') {
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|_| bad())?,
                    b.trim().parse().map_err(|_| bad())?,
                );
                if a == 0 || a > b {
                    return Err(bad());
                }
                set.extend(a..=b);
            } else {
                let v: usize = part.parse().map_err(|_| bad())?;
                if v == 0 {
                    return Err(bad());
                }
                set.insert(v);
            }
        }
        Ok(Self::Layers(set))
    }

    pub fn flags(&self, n_layers: usize) -> Result<Vec<bool>, EncoderError> {
        match self {
            Self::All => Ok(vec![true; n_layers]),
            Self::Layers(set) => {
                if let Some(&bad) = set.iter().find(|&&l| l == 0 || l > n_layers) {
                    return Err(EncoderError::Config(format!(
                        "layer {bad} outside 1..={n_layers}"
                    )));
                }
                Ok((1..=n_layers).map(|l| set.contains(&l)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// 1-based layer indices receiving weight decay; `None` means the last three.
    pub decayed_layers: Option<BTreeSet<usize>>,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub freeze_scope: FreezeScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-5,
            weight_decay: 0.02,
            decayed_layers: None,
            warmup_fraction: 0.1,
            epochs: 10,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 0,
            freeze_scope: FreezeScope::Block,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EncoderError::Config(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(EncoderError::Config(
                "warmup_fraction must lie in [0, 1]".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(EncoderError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return Err(EncoderError::Config(
                "grad_clip must be positive, weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn decayed_set(&self, n_layers: usize) -> BTreeSet<usize> {
        match &self.decayed_layers {
            Some(s) => s.clone(),
            None => (n_layers.saturating_sub(2).max(1)..=n_layers).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Attention,
    FeedForward,
    LayerNorm,
    MlmHead,
    RegressionHead,
}

/// Name, owning layer (1-based) and kind of a parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: Option<usize>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub w_1: Tensor,
    pub b_1: Tensor,
    pub w_2: Tensor,
    pub b_2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_FIELDS: [(&str, ParamKind); 12] = [
    ("w_q", ParamKind::Attention),
    ("w_k", ParamKind::Attention),
    ("w_v", ParamKind::Attention),
    ("w_o", ParamKind::Attention),
    ("w_1", ParamKind::FeedForward),
    ("b_1", ParamKind::FeedForward),
    ("w_2", ParamKind::FeedForward),
    ("b_2", ParamKind::FeedForward),
    ("ln1_gamma", ParamKind::LayerNorm),
    ("ln1_beta", ParamKind::LayerNorm),
    ("ln2_gamma", ParamKind::LayerNorm),
    ("ln2_beta", ParamKind::LayerNorm),
];

impl LayerParams {
    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            w_q: Tensor::zeros(&[d, d]),
            w_k: Tensor::zeros(&[d, d]),
            w_v: Tensor::zeros(&[d, d]),
            w_o: Tensor::zeros(&[d, d]),
            w_1: Tensor::zeros(&[d, d_ff]),
            b_1: Tensor::zeros(&[d_ff]),
            w_2: Tensor::zeros(&[d_ff, d]),
            b_2: Tensor::zeros(&[d]),
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.ln2_gamma,
            &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// Every trainable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub segment_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub mlm_weight: Tensor,
    pub mlm_bias: Tensor,
    pub reg_weight: Tensor,
    pub reg_bias: Tensor,
}

impl EncoderParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embedding: Tensor::zeros(&[cfg.vocab_size, d]),
            positional_embedding: Tensor::zeros(&[cfg.max_len, d]),
            segment_embedding: Tensor::zeros(&[d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams::zeros(d, cfg.d_ff))
                .collect(),
            mlm_weight: Tensor::zeros(&[d, cfg.vocab_size]),
            mlm_bias: Tensor::zeros(&[cfg.vocab_size]),
            reg_weight: Tensor::zeros(&[d]),
            reg_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.fill(0.0));
        z
    }

    /// Visits tensors in declaration order, which is also the artifact order.
    pub fn for_each(&self, mut f: impl FnMut(&ParamInfo, &Tensor)) {
        for (info, t) in self.infos().iter().zip(self.flat()) {
            f(info, t);
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&ParamInfo, &mut Tensor)) {
        let infos = self.infos();
        for (info, t) in infos.iter().zip(self.flat_mut()) {
            f(info, t);
        }
    }

    /// Visits `(self, other)` tensor pairs; both must share a layout.
    pub fn zip_mut(
        &mut self,
        other: &EncoderParams,
        mut f: impl FnMut(&ParamInfo, &mut Tensor, &Tensor),
    ) {
        let infos = self.infos();
        for ((info, a), b) in infos.iter().zip(self.flat_mut()).zip(other.flat()) {
            f(info, a, b);
        }
    }

    pub fn add_assign(&mut self, other: &EncoderParams) {
        self.zip_mut(other, |_, a, b| a.add_assign(b));
    }

    pub fn scale_assign(&mut self, s: f64) {
        self.for_each_mut(|_, t| t.scale_assign(s));
    }

    pub fn infos(&self) -> Vec<ParamInfo> {
        let mut out = vec![
            info("token_embedding", None, ParamKind::Embedding),
            info("positional_embedding", None, ParamKind::Embedding),
            info("segment_embedding", None, ParamKind::Embedding),
        ];
        for l in 1..=self.layers.len() {
            for (name, kind) in LAYER_FIELDS {
                out.push(ParamInfo {
                    name: format!("layers.{l}.{name}"),
                    layer: Some(l),
                    kind,
                });
            }
        }
        out.push(info("mlm_weight", None, ParamKind::MlmHead));
        out.push(info("mlm_bias", None, ParamKind::MlmHead));
        out.push(info("reg_weight", None, ParamKind::RegressionHead));
        out.push(info("reg_bias", None, ParamKind::RegressionHead));
        out
    }

    fn flat(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.token_embedding,
            &self.positional_embedding,
            &self.segment_embedding,
        ];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend([
            &self.mlm_weight,
            &self.mlm_bias,
            &self.reg_weight,
            &self.reg_bias,
        ]);
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.positional_embedding,
            &mut self.segment_embedding,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend([
            &mut self.mlm_weight,
            &mut self.mlm_bias,
            &mut self.reg_weight,
            &mut self.reg_bias,
        ]);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.flat().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
    }
}

fn info(name: &str, layer: Option<usize>, kind: ParamKind) -> ParamInfo {
    ParamInfo {
        name: name.to_string(),
        layer,
        kind,
    }
}

/// Encoder parameters plus per-layer trainability.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    /// Indexed by layer − 1.
    pub trainable: Vec<bool>,
    pub freeze_scope: FreezeScope,
}

pub const INIT_STD: f64 = 0.02;

impl EncoderState {
    /// Normal(0, 0.02) weights, zero biases and β, unit γ.
    pub fn init(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = EncoderParams::zeros(&config);
        params.for_each_mut(|info, t| {
            let is_bias = info.name.ends_with("bias")
                || info.name.ends_with("b_1")
                || info.name.ends_with("b_2");
            if info.name.ends_with("gamma") {
                t.fill(1.0);
            } else if info.name.ends_with("beta") || is_bias || info.name == "segment_embedding" {
                t.fill(0.0);
            } else {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = normal.sample(&mut rng));
            }
        });
        Ok(Self {
            trainable: vec![true; config.n_layers],
            config,
            params,
            freeze_scope: FreezeScope::Block,
        })
    }

    /// Zeroes both output heads.
    pub fn zero_heads(&mut self) {
        self.params.mlm_weight.fill(0.0);
        self.params.mlm_bias.fill(0.0);
        self.params.reg_weight.fill(0.0);
        self.params.reg_bias.fill(0.0);
    }

    /// Whether the optimizer may update a parameter.
    pub fn is_trainable(&self, info: &ParamInfo) -> bool {
        match info.layer {
            None => true,
            Some(l) => {
                self.trainable[l - 1]
                    || (self.freeze_scope == FreezeScope::AttentionOnly
                        && info.kind != ParamKind::Attention)
            }
        }
    }

    pub fn set_layer_selection(
        &mut self,
        selection: &LayerSelection,
        scope: FreezeScope,
    ) -> Result<(), EncoderError> {
        self.trainable = selection.flags(self.config.n_layers)?;
        self.freeze_scope = scope;
        Ok(())
    }

    /// Copies of the parameters of a layer (1-based), for freeze checks.
    pub fn layer_snapshot(&self, layer: usize) -> LayerParams {
        self.params.layers[layer - 1].clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            n_layers: 3,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_len: 6,
            vocab_size: 10,
            mask_prob: 0.15,
            seed: 1,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(EncoderConfig {
            n_heads: 3,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(EncoderConfig {
            vocab_size: 4,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_fraction: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn init_shapes_and_conventions() {
        let s = EncoderState::init(tiny()).unwrap();
        let p = &s.params;
        assert_eq!(p.token_embedding.shape(), &[10, 8]);
        assert_eq!(p.positional_embedding.shape(), &[6, 8]);
        assert_eq!(p.layers.len(), 3);
        assert_eq!(p.layers[0].w_1.shape(), &[8, 16]);
        assert_eq!(p.layers[0].w_2.shape(), &[16, 8]);
        assert_eq!(p.mlm_weight.shape(), &[8, 10]);
        assert!(p.layers[0].ln1_gamma.data().iter().all(|v| *v == 1.0));
        assert!(p.layers[0].b_1.data().iter().all(|v| *v == 0.0));
        assert!(p.mlm_bias.data().iter().all(|v| *v == 0.0));
        let w = p.layers[1].w_q.data();
        let std = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(std > 0.01 && std < 0.04);
        assert_eq!(s.trainable, vec![true; 3]);
        assert_eq!(EncoderState::init(tiny()).unwrap(), s);
        assert_eq!(p.infos().len(), 3 + 12 * 3 + 4);
    }

    #[test]
    fn layer_selection_parsing() {
        assert_eq!(LayerSelection::parse("all").unwrap(), LayerSelection::All);
        let s = LayerSelection::parse("11,12").unwrap();
        assert_eq!(s, LayerSelection::Layers([11, 12].into_iter().collect()));
        assert_eq!(
            LayerSelection::parse("9-12").unwrap(),
            LayerSelection::Layers((9..=12).collect())
        );
        assert_eq!(
            LayerSelection::parse("").unwrap(),
            LayerSelection::Layers(BTreeSet::new())
        );
        assert!(LayerSelection::parse("0").is_err());
        assert!(LayerSelection::parse("x").is_err());
        assert_eq!(s.flags(12).unwrap()[10..], [true, true]);
        assert!(s.flags(4).is_err());
    }

    #[test]
    fn freeze_scope_controls_trainability() {
        let mut s = EncoderState::init(tiny()).unwrap();
        s.set_layer_selection(
            &LayerSelection::Layers([3].into_iter().collect()),
            FreezeScope::Block,
        )
        .unwrap();
        let infos = s.params.infos();
        let l1_ffn = infos.iter().find(|i| i.name == "layers.1.w_1").unwrap();
        let l1_q = infos.iter().find(|i| i.name == "layers.1.w_q").unwrap();
        let l3_q = infos.iter().find(|i| i.name == "layers.3.w_q").unwrap();
        let emb = infos.iter().find(|i| i.name == "token_embedding").unwrap();
        assert!(!s.is_trainable(l1_ffn) && !s.is_trainable(l1_q));
        assert!(s.is_trainable(l3_q) && s.is_trainable(emb));
        s.freeze_scope = FreezeScope::AttentionOnly;
        assert!(s.is_trainable(l1_ffn) && !s.is_trainable(l1_q));
    }

    #[test]
    fn default_decay_is_last_three_layers() {
        let t = TrainConfig::default();
        assert_eq!(t.decayed_set(12), [10, 11, 12].into_iter().collect());
        assert_eq!(t.decayed_set(4), [2, 3, 4].into_iter().collect());
        assert_eq!(t.decayed_set(2), [1, 2].into_iter().collect());
    }
}
