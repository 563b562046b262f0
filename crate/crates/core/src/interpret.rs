//! Element-pair attention maps from the last encoder layer.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::chem::Composition;
use crate::encoder::{forward, EncoderError, EncoderModel, EncoderState};
use crate::tokenize::TokenSequence;

/// Label of the pseudo-group collecting numeric feature tokens.
pub const FEATURES_LABEL: &str = "FEATURES";

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("composition produced no element tokens after encoding")]
    NoElements,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed attention file: {0}")]
    Format(String),
}

/// Symmetric element × element attention; the diagonal is masked (`None`).
#[derive(Debug, Clone, PartialEq)]
pub struct ElementAttentionMatrix {
    pub elements: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ElementAttentionMatrix {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[i][j]
    }
}

/// Last-layer attention averaged over heads, grouped by element (alphabetical),
/// averaged over each group pair, symmetrized and diagonal-masked. Feature
/// tokens form a trailing `FEATURES` group when `include_feature_tokens` is set.
pub fn element_attention(
    state: &EncoderState,
    seq: &TokenSequence,
    include_feature_tokens: bool,
) -> Result<ElementAttentionMatrix, InterpretError> {
    if seq.element_spans.is_empty() {
        return Err(InterpretError::NoElements);
    }
    let out = forward(state, seq)?;
    let n = out.valid_len();
    let heads = out
        .caches
        .last()
        .expect("validated config has at least one layer")
        .attention();

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (&pos, sym) in &seq.element_spans {
        if pos < n {
            groups
                .entry(sym.as_str().to_string())
                .or_default()
                .push(pos);
        }
    }
    if groups.is_empty() {
        return Err(InterpretError::NoElements);
    }
    let mut groups: Vec<(String, Vec<usize>)> = groups.into_iter().collect();
    if include_feature_tokens {
        let features: Vec<usize> = (1..n)
            .filter(|p| !seq.element_spans.contains_key(p))
            .collect();
        if !features.is_empty() {
            groups.push((FEATURES_LABEL.to_string(), features));
        }
    }

    let scale = 1.0 / heads.len() as f64;
    let mean = |i: usize, j: usize| heads.iter().map(|a| a.row(i)[j]).sum::<f64>() * scale;
    let g = groups.len();
    let mut reduced = vec![vec![0.0; g]; g];
    for (a, (_, rows)) in groups.iter().enumerate() {
        for (b, (_, cols)) in groups.iter().enumerate() {
            let total: f64 = rows
                .iter()
                .flat_map(|&i| cols.iter().map(move |&j| (i, j)))
                .map(|(i, j)| mean(i, j))
                .sum();
            reduced[a][b] = total / (rows.len() * cols.len()) as f64;
        }
    }
    let values = (0..g)
        .map(|a| {
            (0..g)
                .map(|b| (a != b).then(|| 0.5 * (reduced[a][b] + reduced[b][a])))
                .collect()
        })
        .collect();
    Ok(ElementAttentionMatrix {
        elements: groups.into_iter().map(|(name, _)| name).collect(),
        values,
    })
}

/// Encodes `c` the way the model was trained (`features` are ignored unless the
/// model uses them) and extracts its element attention.
pub fn composition_attention(
    model: &EncoderModel,
    c: &Composition,
    features: &[f64],
    include_feature_tokens: bool,
) -> Result<ElementAttentionMatrix, InterpretError> {
    let seq = model.encode(c, features)?;
    element_attention(&model.state, &seq, include_feature_tokens)
}

/// Heatmap grid: labels as header row and first column, masked cells empty.
pub fn export_attention<W: Write>(
    out: W,
    m: &ElementAttentionMatrix,
) -> Result<(), InterpretError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![String::new()];
    header.extend(m.elements.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in m.elements.iter().zip(&m.values) {
        let mut rec = vec![label.clone()];
        rec.extend(
            row.iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_attention<R: Read>(input: R) -> Result<ElementAttentionMatrix, InterpretError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(input);
    let mut records = r.records();
    let header = records
        .next()
        .ok_or_else(|| InterpretError::Format("empty file".into()))??;
    let elements: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut values = Vec::with_capacity(elements.len());
    for (i, rec) in records.enumerate() {
        let rec = rec?;
        if rec.len() != elements.len() + 1 || elements.get(i).map(String::as_str) != rec.get(0) {
            return Err(InterpretError::Format(format!(
                "row {} does not match the header",
                i + 2
            )));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|_| InterpretError::Format(format!("bad value '{cell}'")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        values.push(row);
    }
    if values.len() != elements.len() {
        return Err(InterpretError::Format(format!(
            "{} rows for {} labels",
            values.len(),
            elements.len()
        )));
    }
    Ok(ElementAttentionMatrix { elements, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tokenize::{build_vocab, encode};

    fn state(vocab_size: usize, seed: u64) -> EncoderState {
        EncoderState::init(EncoderConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_ff: 8,
            max_len: 8,
            vocab_size,
            mask_prob: 0.15,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn single_element_is_fully_masked() {
        let vocab = build_vocab(&["Fe1"]).unwrap();
        let seq = encode("Fe1", &vocab, 8);
        let m = element_attention(&state(vocab.len(), 1), &seq, false).unwrap();
        assert_eq!(m.elements, vec!["Fe"]);
        assert_eq!(m.values, vec![vec![None]]);
    }

    #[test]
    fn uniform_attention_gives_equal_entries() {
        let text = "Co1 Fe1 Ni1 Cr2";
        let vocab = build_vocab(&[text]).unwrap();
        let mut s = state(vocab.len(), 3);
        // zero query weights make every score 0, so each head is uniform
        s.params.layers[0].w_q = crate::numerics::Tensor::zeros(&[4, 4]);
        let m = element_attention(&s, &encode(text, &vocab, 8), false).unwrap();
        assert_eq!(m.elements, vec!["Co", "Cr", "Fe", "Ni"]);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!((m.get(i, j).unwrap() - 0.2).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn feature_pseudo_group_and_round_trip() {
        let text = "Fe1 Ni1 300 2.5";
        let vocab = build_vocab(&[text]).unwrap();
        let seq = encode(text, &vocab, 8);
        let s = state(vocab.len(), 5);
        let plain = element_attention(&s, &seq, false).unwrap();
        assert_eq!(plain.elements, vec!["Fe", "Ni"]);
        let with = element_attention(&s, &seq, true).unwrap();
        assert_eq!(with.elements, vec!["Fe", "Ni", FEATURES_LABEL]);

        let mut buf = Vec::new();
        export_attention(&mut buf, &plain).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], ",Fe,Ni");
        assert!(lines[1].starts_with("Fe,,"));
        assert!(lines[2].ends_with(','));
        assert_eq!(plain.get(0, 1), plain.get(1, 0));
        assert_eq!(read_attention(buf.as_slice()).unwrap(), plain);
    }

    #[test]
    fn rejects_sequences_without_elements() {
        let vocab = build_vocab(&["300 2.5"]).unwrap();
        let seq = encode("300 2.5", &vocab, 8);
        assert!(matches!(
            element_attention(&state(vocab.len(), 1), &seq, false),
            Err(InterpretError::NoElements)
        ));
    }
}
