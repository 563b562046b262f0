//! Forward and backward passes.
//!
//! Passes run over the valid (unpadded) prefix of a sequence only. Padding is
//! excluded from every attention softmax, so valid positions are unaffected by
//! it and dropping the pad rows changes nothing that reaches a loss.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{EncoderError, EncoderParams, EncoderState, LayerParams};
use crate::numerics::{
    add_row_broadcast, concat_last, concat_last_backward, cross_entropy, gelu, gelu_backward,
    layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, softmax_rows,
    softmax_rows_backward, sum_rows, LayerNormCache, Tensor,
};
use crate::tokenize::TokenSequence;

/// Samples per gradient-accumulation chunk. Fixed, so results do not depend on thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Tensor,
    q_heads: Vec<Tensor>,
    k_heads: Vec<Tensor>,
    v_heads: Vec<Tensor>,
    attn: Vec<Tensor>,
    concat: Tensor,
    ln1: LayerNormCache,
    h1: Tensor,
    ff_pre: Tensor,
    ff_act: Tensor,
    ln2: LayerNormCache,
}

impl LayerCache {
    /// Per-head attention weights `α` (rows = queries).
    pub fn attention(&self) -> &[Tensor] {
        &self.attn
    }
}

fn split_heads(x: &Tensor, n_heads: usize) -> Vec<Tensor> {
    let dk = x.cols() / n_heads;
    concat_last_backward(x, &vec![dk; n_heads])
}

/// One encoder block: multi-head self-attention, residual + layer norm,
/// GELU feed-forward, residual + layer norm. `key_mask` marks valid columns.
pub fn layer_forward(
    h: &Tensor,
    p: &LayerParams,
    key_mask: &[bool],
    n_heads: usize,
) -> Result<(Tensor, LayerCache), EncoderError> {
    let d = h.cols();
    let dk = d / n_heads;
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

    let q_heads = split_heads(&matmul(h, &p.w_q)?, n_heads);
    let k_heads = split_heads(&matmul(h, &p.w_k)?, n_heads);
    let v_heads = split_heads(&matmul(h, &p.w_v)?, n_heads);

    let mut attn = Vec::with_capacity(n_heads);
    let mut z_heads = Vec::with_capacity(n_heads);
    for ((q, k), v) in q_heads.iter().zip(&k_heads).zip(&v_heads) {
        let mut scores = matmul_nt(q, k)?;
        scores.scale_assign(inv_sqrt_dk);
        let a = softmax_rows(&scores, key_mask)?;
        z_heads.push(matmul(&a, v)?);
        attn.push(a);
    }
    let concat = concat_last(&z_heads)?;
    let z = matmul(&concat, &p.w_o)?;

    let mut res1 = h.clone();
    res1.add_assign(&z);
    let (h1, ln1) = layer_norm(&res1, &p.ln1_gamma, &p.ln1_beta)?;

    let ff_pre = add_row_broadcast(&matmul(&h1, &p.w_1)?, &p.b_1)?;
    let ff_act = gelu(&ff_pre);
    let ff = add_row_broadcast(&matmul(&ff_act, &p.w_2)?, &p.b_2)?;

    let mut res2 = h1.clone();
    res2.add_assign(&ff);
    let (out, ln2) = layer_norm(&res2, &p.ln2_gamma, &p.ln2_beta)?;

    Ok((
        out,
        LayerCache {
            input: h.clone(),
            q_heads,
            k_heads,
            v_heads,
            attn,
            concat,
            ln1,
            h1,
            ff_pre,
            ff_act,
            ln2,
        },
    ))
}

/// Accumulates parameter gradients into `g` and returns the gradient w.r.t. the layer input.
pub fn layer_backward(
    p: &LayerParams,
    c: &LayerCache,
    d_out: &Tensor,
    g: &mut LayerParams,
) -> Result<Tensor, EncoderError> {
    let n_heads = c.attn.len();
    let dk = c.q_heads[0].cols();
    let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();

    let (d_res2, dg2, db2) = layer_norm_backward(&c.ln2, &p.ln2_gamma, d_out);
    g.ln2_gamma.add_assign(&dg2);
    g.ln2_beta.add_assign(&db2);

    // feed-forward branch
    g.w_2.add_assign(&matmul_tn(&c.ff_act, &d_res2)?);
    g.b_2.add_assign(&sum_rows(&d_res2));
    let d_act = matmul_nt(&d_res2, &p.w_2)?;
    let d_pre = gelu_backward(&c.ff_pre, &d_act);
    g.w_1.add_assign(&matmul_tn(&c.h1, &d_pre)?);
    g.b_1.add_assign(&sum_rows(&d_pre));
    let mut d_h1 = matmul_nt(&d_pre, &p.w_1)?;
    d_h1.add_assign(&d_res2);

    let (d_res1, dg1, db1) = layer_norm_backward(&c.ln1, &p.ln1_gamma, &d_h1);
    g.ln1_gamma.add_assign(&dg1);
    g.ln1_beta.add_assign(&db1);

    // attention branch
    g.w_o.add_assign(&matmul_tn(&c.concat, &d_res1)?);
    let d_concat = matmul_nt(&d_res1, &p.w_o)?;
    let d_z_heads = concat_last_backward(&d_concat, &vec![dk; n_heads]);
    let mut dq = Vec::with_capacity(n_heads);
    let mut dk_heads = Vec::with_capacity(n_heads);
    let mut dv = Vec::with_capacity(n_heads);
    for (h, dz) in d_z_heads.iter().enumerate() {
        let a = &c.attn[h];
        let d_a = matmul_nt(dz, &c.v_heads[h])?;
        dv.push(matmul_tn(a, dz)?);
        let mut d_scores = softmax_rows_backward(a, &d_a);
        d_scores.scale_assign(inv_sqrt_dk);
        dq.push(matmul(&d_scores, &c.k_heads[h])?);
        dk_heads.push(matmul_tn(&d_scores, &c.q_heads[h])?);
    }
    let dq = concat_last(&dq)?;
    let dkk = concat_last(&dk_heads)?;
    let dv = concat_last(&dv)?;
    g.w_q.add_assign(&matmul_tn(&c.input, &dq)?);
    g.w_k.add_assign(&matmul_tn(&c.input, &dkk)?);
    g.w_v.add_assign(&matmul_tn(&c.input, &dv)?);

    let mut d_in = d_res1;
    d_in.add_assign(&matmul_nt(&dq, &p.w_q)?);
    d_in.add_assign(&matmul_nt(&dkk, &p.w_k)?);
    d_in.add_assign(&matmul_nt(&dv, &p.w_v)?);
    Ok(d_in)
}

/// Runs one encoder block and returns the new hidden states and per-head attention.
pub fn encoder_layer(
    h: &Tensor,
    p: &LayerParams,
    key_mask: &[bool],
    n_heads: usize,
) -> Result<(Tensor, Vec<Tensor>), EncoderError> {
    let (out, cache) = layer_forward(h, p, key_mask, n_heads)?;
    Ok((out, cache.attn))
}

fn check_ids(ids: &[u32], vocab_size: usize) -> Result<(), EncoderError> {
    match ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(EncoderError::TokenOutOfRange { id, vocab_size }),
        None => Ok(()),
    }
}

fn embed_ids(ids: &[u32], p: &EncoderParams) -> Tensor {
    let d = p.segment_embedding.len();
    let mut h = Tensor::zeros(&[ids.len(), d]);
    for (i, &id) in ids.iter().enumerate() {
        let row = h.row_mut(i);
        let e = p.token_embedding.row(id as usize);
        let pos = p.positional_embedding.row(i);
        for j in 0..d {
            row[j] = e[j] + pos[j] + p.segment_embedding.data()[j];
        }
    }
    h
}

/// `H⁰ = E_t + E_pos + E_seg` over the full padded length.
pub fn embed(seq: &TokenSequence, state: &EncoderState) -> Result<Tensor, EncoderError> {
    check_ids(&seq.ids, state.config.vocab_size)?;
    if seq.ids.len() > state.config.max_len {
        return Err(EncoderError::Data(format!(
            "sequence length {} exceeds max_len {}",
            seq.ids.len(),
            state.config.max_len
        )));
    }
    Ok(embed_ids(&seq.ids, &state.params))
}

/// Last-forward attention weights, one `L × L` matrix per layer and head.
/// Rows and columns past the valid prefix are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Tensor>>,
}

pub struct ForwardOutput {
    /// Final hidden states for the valid prefix (`n × d`).
    pub hidden: Tensor,
    pub caches: Vec<LayerCache>,
    ids: Vec<u32>,
}

impl ForwardOutput {
    pub fn valid_len(&self) -> usize {
        self.ids.len()
    }

    /// Pads each head's `n × n` attention to `max_len × max_len`.
    pub fn attention_record(&self, max_len: usize) -> AttentionRecord {
        let n = self.ids.len();
        let layers = self
            .caches
            .iter()
            .map(|c| {
                c.attn
                    .iter()
                    .map(|a| {
                        let mut full = Tensor::zeros(&[max_len, max_len]);
                        for i in 0..n {
                            full.row_mut(i)[..n].copy_from_slice(a.row(i));
                        }
                        full
                    })
                    .collect()
            })
            .collect();
        AttentionRecord { layers }
    }
}

pub fn forward(state: &EncoderState, seq: &TokenSequence) -> Result<ForwardOutput, EncoderError> {
    let n = seq.valid_len();
    if n == 0 {
        return Err(EncoderError::Data("sequence has no valid positions".into()));
    }
    if seq.ids.len() > state.config.max_len {
        return Err(EncoderError::Data(format!(
            "sequence length {} exceeds max_len {}",
            seq.ids.len(),
            state.config.max_len
        )));
    }
    let ids = seq.ids[..n].to_vec();
    check_ids(&ids, state.config.vocab_size)?;
    let mask = vec![true; n];
    let mut h = embed_ids(&ids, &state.params);
    let mut caches = Vec::with_capacity(state.config.n_layers);
    for layer in &state.params.layers {
        let (next, cache) = layer_forward(&h, layer, &mask, state.config.n_heads)?;
        caches.push(cache);
        h = next;
    }
    Ok(ForwardOutput {
        hidden: h,
        caches,
        ids,
    })
}

/// Backpropagates `d_hidden` (gradient w.r.t. the final hidden states) into `grads`.
pub fn backward(
    state: &EncoderState,
    out: &ForwardOutput,
    d_hidden: Tensor,
    grads: &mut EncoderParams,
) -> Result<(), EncoderError> {
    let mut d = d_hidden;
    for (l, cache) in out.caches.iter().enumerate().rev() {
        d = layer_backward(&state.params.layers[l], cache, &d, &mut grads.layers[l])?;
    }
    let dim = d.cols();
    for (i, &id) in out.ids.iter().enumerate() {
        let src = d.row(i);
        let e = grads.token_embedding.row_mut(id as usize);
        for j in 0..dim {
            e[j] += src[j];
        }
        let p = grads.positional_embedding.row_mut(i);
        for j in 0..dim {
            p[j] += src[j];
        }
        let s = grads.segment_embedding.data_mut();
        for j in 0..dim {
            s[j] += src[j];
        }
    }
    Ok(())
}

/// A corrupted sequence and the original ids at its masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub seq: TokenSequence,
    pub labels: BTreeMap<usize, u32>,
}

/// Summed cross-entropy at the masked positions of one sequence, times `scale`,
/// with gradients accumulated into `grads` when given.
fn mlm_sample(
    state: &EncoderState,
    ms: &MaskedSequence,
    scale: f64,
    grads: Option<&mut EncoderParams>,
) -> Result<f64, EncoderError> {
    if ms.labels.is_empty() {
        return Ok(0.0);
    }
    let out = forward(state, &ms.seq)?;
    let d = state.config.d_model;
    let positions: Vec<usize> = ms.labels.keys().copied().collect();
    let targets: Vec<u32> = ms.labels.values().copied().collect();
    check_ids(&targets, state.config.vocab_size)?;
    let k = positions.len();
    let mut selected = Tensor::zeros(&[k, d]);
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= out.valid_len() {
            return Err(EncoderError::Data(format!(
                "masked position {pos} outside the valid prefix"
            )));
        }
        selected.row_mut(r).copy_from_slice(out.hidden.row(pos));
    }
    let logits = add_row_broadcast(
        &matmul(&selected, &state.params.mlm_weight)?,
        &state.params.mlm_bias,
    )?;
    let local: Vec<usize> = (0..k).collect();
    let (mean_ce, mut d_logits) = cross_entropy(&logits, &targets, &local)?;
    let weight = k as f64 * scale;
    if let Some(g) = grads {
        d_logits.scale_assign(weight);
        g.mlm_weight.add_assign(&matmul_tn(&selected, &d_logits)?);
        g.mlm_bias.add_assign(&sum_rows(&d_logits));
        let d_sel = matmul_nt(&d_logits, &state.params.mlm_weight)?;
        let mut d_hidden = Tensor::zeros(&[out.valid_len(), d]);
        for (r, &pos) in positions.iter().enumerate() {
            d_hidden.row_mut(pos).copy_from_slice(d_sel.row(r));
        }
        backward(state, &out, d_hidden, g)?;
    }
    Ok(mean_ce * weight)
}

fn total_masked(batch: &[MaskedSequence]) -> Result<usize, EncoderError> {
    let total: usize = batch.iter().map(|m| m.labels.len()).sum();
    if total == 0 {
        Err(EncoderError::NoMaskedPositions)
    } else {
        Ok(total)
    }
}

/// Cross-entropy averaged over every masked position in the batch.
pub fn mlm_loss(batch: &[MaskedSequence], state: &EncoderState) -> Result<f64, EncoderError> {
    let scale = 1.0 / total_masked(batch)? as f64;
    let parts: Vec<f64> = batch
        .par_iter()
        .map(|m| mlm_sample(state, m, scale, None))
        .collect::<Result<_, _>>()?;
    Ok(parts.iter().sum())
}

/// Sums per-chunk results in chunk order; each chunk accumulates sequentially.
fn accumulate<T: Sync>(
    state: &EncoderState,
    items: &[T],
    f: impl Fn(&T, &mut EncoderParams) -> Result<f64, EncoderError> + Sync,
) -> Result<(f64, EncoderParams), EncoderError> {
    let partials: Vec<(f64, EncoderParams)> = items
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = state.params.zeros_like();
            let mut loss = 0.0;
            for item in chunk {
                loss += f(item, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_, EncoderError>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter
        .next()
        .unwrap_or_else(|| (0.0, state.params.zeros_like()));
    for (l, g) in iter {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

pub fn mlm_loss_and_grads(
    batch: &[MaskedSequence],
    state: &EncoderState,
) -> Result<(f64, EncoderParams), EncoderError> {
    let scale = 1.0 / total_masked(batch)? as f64;
    accumulate(state, batch, |m, g| mlm_sample(state, m, scale, Some(g)))
}

/// `ŷ = W_regᵀ h_CLS + b_reg`, in standardized target units.
pub fn regression_forward(seq: &TokenSequence, state: &EncoderState) -> Result<f64, EncoderError> {
    let out = forward(state, seq)?;
    Ok(regression_head(&out, state))
}

fn regression_head(out: &ForwardOutput, state: &EncoderState) -> f64 {
    let cls = out.hidden.row(0);
    cls.iter()
        .zip(state.params.reg_weight.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + state.params.reg_bias.data()[0]
}

/// Mean squared error over the batch and its gradients.
pub fn regression_loss_and_grads(
    batch: &[(TokenSequence, f64)],
    state: &EncoderState,
) -> Result<(f64, EncoderParams), EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::Data("empty regression batch".into()));
    }
    let n = batch.len() as f64;
    accumulate(state, batch, |(seq, y), g| {
        let out = forward(state, seq)?;
        let pred = regression_head(&out, state);
        let diff = pred - y;
        let d_pred = 2.0 * diff / n;
        let cls = out.hidden.row(0);
        for (gw, c) in g.reg_weight.data_mut().iter_mut().zip(cls) {
            *gw += d_pred * c;
        }
        g.reg_bias.data_mut()[0] += d_pred;
        let mut d_hidden = Tensor::zeros(&[out.valid_len(), state.config.d_model]);
        for (dh, w) in d_hidden
            .row_mut(0)
            .iter_mut()
            .zip(state.params.reg_weight.data())
        {
            *dh = d_pred * w;
        }
        backward(state, &out, d_hidden, g)?;
        Ok(diff * diff / n)
    })
}
