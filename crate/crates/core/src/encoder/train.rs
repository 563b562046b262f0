//! Masked-token pre-training and k-fold regression fine-tuning.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::model::{mlm_loss_and_grads, regression_loss_and_grads};
use super::{
    adamw_update, mlm_loss, regression_forward, AdamW, EncoderConfig, EncoderError, EncoderState,
    LayerSelection, MaskedSequence, TrainConfig, INIT_STD,
};
use crate::chem::Composition;
use crate::datagen::CorpusEntry;
use crate::dataset::DatasetRow;
use crate::evaluate::{
    fit_scaler, fold_scalers, kfold_split, metrics, FoldReport, Metrics, ScalerParams,
};
use crate::numerics::Tensor;
use crate::tokenize::{build_vocab, compose_input, encode, mask_tokens, TokenSequence, Vocabulary};

const STREAM_SPLIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_VAL_MASK: u64 = 4;
const STREAM_VOCAB_GROWTH: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Encoder weights plus everything needed to turn a composition into its input:
/// the vocabulary, the feature scaler (absent in composition-only mode) and,
/// after fine-tuning, the target scaler.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub state: EncoderState,
    pub vocab: Vocabulary,
    pub feature_scaler: Option<ScalerParams>,
    pub target_scaler: Option<ScalerParams>,
}

impl EncoderModel {
    pub fn uses_features(&self) -> bool {
        self.feature_scaler.is_some()
    }

    /// Input text: canonical composition, then standardized and quantized features if the model uses them.
    pub fn input_text(&self, c: &Composition, features: &[f64]) -> Result<String, EncoderError> {
        input_text(c, features, self.feature_scaler.as_ref())
    }

    pub fn encode(&self, c: &Composition, features: &[f64]) -> Result<TokenSequence, EncoderError> {
        Ok(encode(
            &self.input_text(c, features)?,
            &self.vocab,
            self.state.config.max_len,
        ))
    }
}

fn input_text(
    c: &Composition,
    features: &[f64],
    scaler: Option<&ScalerParams>,
) -> Result<String, EncoderError> {
    let scaled = scaler.map(|s| s.apply(features));
    compose_input(c, scaled.as_deref()).map_err(|e| EncoderError::Data(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// One line of the training log: `epoch,split,loss[,mse,mae,r2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Validation => "validation",
        };
        let mut s = format!("{},{split},{}", self.epoch, self.loss);
        if let Some(m) = self.metrics {
            let r2 = m.r2.map(|r| r.to_string()).unwrap_or_default();
            s.push_str(&format!(",{},{},{r2}", m.mse, m.mae));
        }
        s
    }
}

pub fn write_log<W: Write>(mut out: W, logs: &[EpochLog]) -> std::io::Result<()> {
    for l in logs {
        writeln!(out, "{}", l.line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// Checkpoint with the lowest validation loss.
    pub model: EncoderModel,
    pub history: Vec<EpochLog>,
    pub best_validation_loss: f64,
}

/// Masks until at least one position is hidden. Callers guarantee a maskable token exists.
fn mask_nonempty(seq: &TokenSequence, p: f64, rng: &mut ChaCha8Rng) -> MaskedSequence {
    loop {
        let (seq, labels) = mask_tokens(seq, p, rng);
        if !labels.is_empty() {
            return MaskedSequence { seq, labels };
        }
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// MLM pre-training on an 80/20 seeded split. Validation masks are drawn once,
/// so validation losses are comparable across epochs; epoch 0 is the untrained model.
pub fn pretrain(
    corpus: &[CorpusEntry],
    with_features: bool,
    cfg: &EncoderConfig,
    tcfg: &TrainConfig,
) -> Result<Pretrained, EncoderError> {
    tcfg.validate()?;
    if corpus.len() < tcfg.batch_size || corpus.len() < 2 {
        return Err(EncoderError::Data(format!(
            "corpus of {} rows is smaller than one batch of {}",
            corpus.len(),
            tcfg.batch_size
        )));
    }
    if cfg.mask_prob <= 0.0 {
        return Err(EncoderError::Config(
            "mask_prob must be positive for pre-training".into(),
        ));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream(tcfg.seed, STREAM_SPLIT));
    let n_val = ((corpus.len() as f64 * 0.2).round() as usize).clamp(1, corpus.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let feature_scaler = if with_features {
        let rows: Vec<[f64; 14]> = train_idx
            .iter()
            .map(|&i| corpus[i].features.to_array())
            .collect();
        Some(fit_scaler(&rows).map_err(|e| EncoderError::Data(e.to_string()))?)
    } else {
        None
    };
    let texts: Vec<String> = corpus
        .iter()
        .map(|e| {
            input_text(
                &e.composition,
                &e.features.to_array(),
                feature_scaler.as_ref(),
            )
        })
        .collect::<Result<_, _>>()?;
    let vocab = build_vocab(&texts).map_err(|e| EncoderError::Data(e.to_string()))?;
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        ..*cfg
    };
    let mut state = EncoderState::init(cfg)?;
    let seqs: Vec<TokenSequence> = texts
        .iter()
        .map(|t| encode(t, &vocab, cfg.max_len))
        .collect();
    if let Some(i) = seqs.iter().position(|s| s.valid_len() < 2) {
        return Err(EncoderError::Data(format!(
            "corpus row {i} has no maskable token"
        )));
    }

    let mut val_rng = stream(tcfg.seed, STREAM_VAL_MASK);
    let val_batch: Vec<MaskedSequence> = val_idx
        .iter()
        .map(|&i| mask_nonempty(&seqs[i], cfg.mask_prob, &mut val_rng))
        .collect();

    let mut history = Vec::new();
    let initial = mlm_loss(&val_batch, &state)?;
    history.push(EpochLog {
        epoch: 0,
        split: Split::Validation,
        loss: initial,
        metrics: None,
    });
    let mut best = (initial, state.clone());

    let total = tcfg.epochs * steps_per_epoch(train_idx.len(), tcfg.batch_size);
    let mut opt = AdamW::new(&state.params);
    let mut shuffle_rng = stream(tcfg.seed, STREAM_SHUFFLE);
    let mut mask_rng = stream(tcfg.seed, STREAM_MASK);
    let mut train_order = train_idx.to_vec();
    let mut t = 0;
    for epoch in 1..=tcfg.epochs {
        train_order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for chunk in train_order.chunks(tcfg.batch_size) {
            let batch: Vec<MaskedSequence> = chunk
                .iter()
                .map(|&i| mask_nonempty(&seqs[i], cfg.mask_prob, &mut mask_rng))
                .collect();
            let (loss, grads) = mlm_loss_and_grads(&batch, &state)?;
            t += 1;
            adamw_update(&mut state, &grads, &mut opt, tcfg, t, total)?;
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        history.push(EpochLog {
            epoch,
            split: Split::Train,
            loss: loss_sum / count as f64,
            metrics: None,
        });
        let val = mlm_loss(&val_batch, &state)?;
        history.push(EpochLog {
            epoch,
            split: Split::Validation,
            loss: val,
            metrics: None,
        });
        if val < best.0 {
            best = (val, state.clone());
        }
    }
    Ok(Pretrained {
        model: EncoderModel {
            state: best.1,
            vocab,
            feature_scaler,
            target_scaler: None,
        },
        history,
        best_validation_loss: best.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOptions {
    pub folds: usize,
    /// Layers that keep training; the rest are frozen per `TrainConfig::freeze_scope`.
    pub layers: LayerSelection,
    /// Append standardized numeric features to the composition tokens.
    pub use_features: bool,
    pub split_seed: u64,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            layers: LayerSelection::All,
            use_features: true,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub reports: Vec<FoldReport>,
    /// Best-validation checkpoint of each fold.
    pub models: Vec<EncoderModel>,
    pub logs: Vec<Vec<EpochLog>>,
    /// Fold with the lowest standardized validation MSE.
    pub best_fold: usize,
}

impl FineTuneResult {
    pub fn best_model(&self) -> &EncoderModel {
        &self.models[self.best_fold]
    }
}

/// Resizes token embeddings and the masked-token head to a grown vocabulary.
/// Existing rows are kept; new ones are drawn like a fresh initialization.
fn grow_vocab(state: &mut EncoderState, new_size: usize, seed: u64) {
    let old = state.config.vocab_size;
    if new_size <= old {
        return;
    }
    let d = state.config.d_model;
    let mut rng = stream(seed, STREAM_VOCAB_GROWTH);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut emb = state.params.token_embedding.data().to_vec();
    emb.extend((0..(new_size - old) * d).map(|_| normal.sample(&mut rng)));
    let mut head = Tensor::zeros(&[d, new_size]);
    for r in 0..d {
        let row = head.row_mut(r);
        row[..old].copy_from_slice(state.params.mlm_weight.row(r));
        for v in &mut row[old..] {
            *v = normal.sample(&mut rng);
        }
    }
    let mut bias = state.params.mlm_bias.data().to_vec();
    bias.resize(new_size, 0.0);
    state.params.token_embedding = Tensor::from_vec(&[new_size, d], emb).expect("sized above");
    state.params.mlm_weight = head;
    state.params.mlm_bias = Tensor::from_vec(&[new_size], bias).expect("sized above");
    state.config.vocab_size = new_size;
}

fn predict_scaled(state: &EncoderState, seqs: &[&TokenSequence]) -> Result<Vec<f64>, EncoderError> {
    seqs.par_iter()
        .map(|s| regression_forward(s, state))
        .collect()
}

/// K-fold fine-tuning. Scalers are fit on each training split only; the vocabulary
/// is the pre-trained one (or empty) extended with tokens from the training split.
pub fn finetune(
    rows: &[DatasetRow],
    pretrained: Option<&EncoderModel>,
    opts: &FineTuneOptions,
    cfg: &EncoderConfig,
    tcfg: &TrainConfig,
) -> Result<FineTuneResult, EncoderError> {
    tcfg.validate()?;
    let folds = kfold_split(rows.len(), opts.folds, opts.split_seed)
        .map_err(|e| EncoderError::Data(e.to_string()))?;
    let data_err = |e: crate::evaluate::EvalError| EncoderError::Data(e.to_string());

    let mut reports = Vec::with_capacity(folds.len());
    let mut models = Vec::with_capacity(folds.len());
    let mut logs = Vec::with_capacity(folds.len());
    for (k, fold) in folds.iter().enumerate() {
        let (fs, ts) = fold_scalers(rows, fold, opts.use_features).map_err(data_err)?;
        let texts: Vec<String> = rows
            .iter()
            .map(|r| input_text(&r.composition, &r.features, fs.as_ref()))
            .collect::<Result<_, _>>()?;
        let train_texts: Vec<&str> = fold.train.iter().map(|&i| texts[i].as_str()).collect();

        let (mut vocab, mut state) = match pretrained {
            Some(m) => (m.vocab.clone(), m.state.clone()),
            None => {
                let v = build_vocab(&train_texts).map_err(|e| EncoderError::Data(e.to_string()))?;
                let s = EncoderState::init(EncoderConfig {
                    vocab_size: v.len(),
                    ..*cfg
                })?;
                (v, s)
            }
        };
        vocab.extend_with(&train_texts);
        grow_vocab(&mut state, vocab.len(), tcfg.seed);
        state.set_layer_selection(&opts.layers, tcfg.freeze_scope)?;

        let seqs: Vec<TokenSequence> = texts
            .iter()
            .map(|t| encode(t, &vocab, state.config.max_len))
            .collect();
        let z: Vec<f64> = rows.iter().map(|r| ts.apply_value(0, r.target)).collect();
        let val_seqs: Vec<&TokenSequence> = fold.validation.iter().map(|&i| &seqs[i]).collect();
        let val_z: Vec<f64> = fold.validation.iter().map(|&i| z[i]).collect();

        let total = tcfg.epochs * steps_per_epoch(fold.train.len(), tcfg.batch_size);
        let mut opt = AdamW::new(&state.params);
        let mut shuffle_rng = stream(tcfg.seed, STREAM_SHUFFLE);
        let mut order = fold.train.clone();
        let mut log = Vec::new();
        let mut best: Option<(f64, EncoderState)> = None;
        let mut t = 0;
        for epoch in 1..=tcfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let (mut loss_sum, mut count) = (0.0, 0usize);
            for chunk in order.chunks(tcfg.batch_size) {
                let batch: Vec<(TokenSequence, f64)> =
                    chunk.iter().map(|&i| (seqs[i].clone(), z[i])).collect();
                let (loss, grads) = regression_loss_and_grads(&batch, &state)?;
                t += 1;
                adamw_update(&mut state, &grads, &mut opt, tcfg, t, total)?;
                loss_sum += loss * chunk.len() as f64;
                count += chunk.len();
            }
            log.push(EpochLog {
                epoch,
                split: Split::Train,
                loss: loss_sum / count as f64,
                metrics: None,
            });
            let pred = predict_scaled(&state, &val_seqs)?;
            let m = metrics(&pred, &val_z).map_err(data_err)?;
            log.push(EpochLog {
                epoch,
                split: Split::Validation,
                loss: m.mse,
                metrics: Some(m),
            });
            if best.as_ref().is_none_or(|(b, _)| m.mse < *b) {
                best = Some((m.mse, state.clone()));
            }
        }
        let (_, state) = best.expect("at least one epoch");
        let pred = predict_scaled(&state, &val_seqs)?;
        let predictions: Vec<f64> = pred.iter().map(|p| ts.invert_value(0, *p)).collect();
        let actuals: Vec<f64> = fold.validation.iter().map(|&i| rows[i].target).collect();
        reports.push(
            FoldReport::new(k, fold, predictions, actuals, fs.clone(), ts.clone())
                .map_err(data_err)?,
        );
        models.push(EncoderModel {
            state,
            vocab,
            feature_scaler: fs,
            target_scaler: Some(ts),
        });
        logs.push(log);
    }
    let best_fold = reports
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.scaled_metrics.mse.total_cmp(&b.1.scaled_metrics.mse))
        .map(|(i, _)| i)
        .expect("at least one fold");
    Ok(FineTuneResult {
        reports,
        models,
        logs,
        best_fold,
    })
}

/// Original-scale predictions: standardize features, forward, then `ŷ·σ + μ`.
pub fn predict(model: &EncoderModel, rows: &[DatasetRow]) -> Result<Vec<f64>, EncoderError> {
    let ts = model.target_scaler.as_ref().ok_or_else(|| {
        EncoderError::Data("model has no target scaler; fine-tune it first".into())
    })?;
    rows.par_iter()
        .map(|r| {
            let seq = model.encode(&r.composition, &r.features)?;
            Ok(ts.invert_value(0, regression_forward(&seq, &model.state)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{ElementTable, PairEnthalpyTable};
    use crate::datagen::{generate_corpus, GeneratorConfig};

    fn corpus(n: usize) -> Vec<CorpusEntry> {
        let cfg = GeneratorConfig {
            corpus_size: n,
            seed: 5,
            ..Default::default()
        };
        generate_corpus(
            &cfg,
            &ElementTable::bundled(),
            &PairEnthalpyTable::bundled(),
        )
        .unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_len: 24,
            vocab_size: 0,
            mask_prob: 0.15,
            seed: 3,
        }
    }

    #[test]
    fn pretrain_checkpoint_is_argmin_and_deterministic() {
        let c = corpus(40);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let a = pretrain(&c, true, &small(), &tcfg).unwrap();
        let val: Vec<f64> = a
            .history
            .iter()
            .filter(|l| l.split == Split::Validation)
            .map(|l| l.loss)
            .collect();
        assert_eq!(val.len(), 4);
        assert!(val.iter().all(|v| a.best_validation_loss <= *v));
        let b = pretrain(&c, true, &small(), &tcfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert!(pretrain(&c[..4], true, &small(), &tcfg).is_err());
    }

    #[test]
    fn log_line_format() {
        let l = EpochLog {
            epoch: 2,
            split: Split::Validation,
            loss: 0.5,
            metrics: Some(Metrics {
                mse: 0.5,
                mae: 0.25,
                r2: None,
            }),
        };
        assert_eq!(l.line(), "2,validation,0.5,0.5,0.25,");
    }
}
