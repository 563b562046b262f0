//! Whole-token vocabulary over composition strings and quantized numeric features.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chem::{format_number, split_formula, Composition, ElementSymbol};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const RESERVED_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("vocabulary file line {line}: {message}")]
    BadVocabFile { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED_TOKENS {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index
                .insert(token.to_string(), self.tokens.len() as u32);
            self.tokens.push(token.to_string());
        }
    }

    /// Appends unseen whitespace-separated tokens after the existing ids.
    pub fn extend_with<S: AsRef<str>>(&mut self, corpus: &[S]) {
        for text in corpus {
            for tok in text.as_ref().split_whitespace() {
                self.push(tok);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// SHA-256 over the newline-joined token list; identifies the id assignment.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        format!("{:x}", h.finalize())
    }

    /// One token per line; line number minus one is the id.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for t in &self.tokens {
            writeln!(out, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, TokenizeError> {
        let mut tokens = Vec::new();
        for line in input.lines() {
            tokens.push(line?);
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(TokenizeError::BadVocabFile {
                    line: i + 1,
                    message: format!("expected reserved token {reserved}"),
                });
            }
        }
        let mut v = Self::with_reserved();
        for (i, t) in tokens.iter().enumerate().skip(RESERVED_TOKENS.len()) {
            if t.is_empty() || t.contains(char::is_whitespace) || v.index.contains_key(t) {
                return Err(TokenizeError::BadVocabFile {
                    line: i + 1,
                    message: format!("invalid or duplicate token '{t}'"),
                });
            }
            v.push(t);
        }
        Ok(v)
    }
}

/// Reserved tokens followed by every distinct whitespace-separated token, in first-seen order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary, TokenizeError> {
    if corpus.is_empty() {
        return Err(TokenizeError::EmptyCorpus);
    }
    let mut v = Vocabulary::with_reserved();
    for text in corpus {
        for tok in text.as_ref().split_whitespace() {
            v.push(tok);
        }
    }
    Ok(v)
}

/// Rounds to three significant digits and renders with `format_number`.
pub fn quantize_number(x: f64) -> Result<String, TokenizeError> {
    if !x.is_finite() {
        return Err(TokenizeError::NonFinite(x));
    }
    if x == 0.0 {
        return Ok("0".into());
    }
    let rounded: f64 = format!("{x:.2e}")
        .parse()
        .expect("scientific literal parses");
    Ok(format_number(rounded))
}

/// Canonical composition string, then the quantized numeric values if any.
pub fn compose_input(c: &Composition, features: Option<&[f64]>) -> Result<String, TokenizeError> {
    let mut s = c.canonical_string();
    for v in features.unwrap_or(&[]) {
        s.push(' ');
        s.push_str(&quantize_number(*v)?);
    }
    Ok(s)
}

/// The element named by a single element-fraction token such as `Fe0.8`.
pub fn token_element(token: &str) -> Option<ElementSymbol> {
    if !token.starts_with(|c: char| c.is_ascii_uppercase()) {
        return None;
    }
    match split_formula(token) {
        Ok(mut pairs) if pairs.len() == 1 => Some(pairs.remove(0).0),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub element_spans: BTreeMap<usize, ElementSymbol>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of leading positions with mask 1.
    pub fn valid_len(&self) -> usize {
        self.attention_mask.iter().take_while(|&&m| m == 1).count()
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    let mut element_spans = BTreeMap::new();
    ids.push(CLS_ID);
    for tok in text.split_whitespace().take(max_len - 1) {
        if let Some(sym) = token_element(tok) {
            element_spans.insert(ids.len(), sym);
        }
        ids.push(vocab.id(tok));
    }
    let valid = ids.len();
    ids.resize(max_len, PAD_ID);
    let attention_mask = (0..max_len).map(|i| u8::from(i < valid)).collect();
    TokenSequence {
        ids,
        attention_mask,
        element_spans,
    }
}

/// Replaces each non-reserved real token with `[MASK]` with probability `mask_prob`.
/// Returns the corrupted sequence and the original ids at masked positions.
pub fn mask_tokens<R: Rng>(
    seq: &TokenSequence,
    mask_prob: f64,
    rng: &mut R,
) -> (TokenSequence, BTreeMap<usize, u32>) {
    assert!(
        (0.0..=1.0).contains(&mask_prob),
        "mask_prob must lie in [0, 1]"
    );
    let mut out = seq.clone();
    let mut labels = BTreeMap::new();
    for (pos, id) in out.ids.iter_mut().enumerate() {
        if seq.attention_mask[pos] == 0 || (*id as usize) < RESERVED_TOKENS.len() {
            continue;
        }
        if rng.gen::<f64>() < mask_prob {
            labels.insert(pos, *id);
            *id = MASK_ID;
        }
    }
    (out, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_composition, ElementTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn composes_mixed_feature_inputs() {
        let t = ElementTable::bundled();
        let c = parse_composition("Ni1 Co1.2 Fe0.8", &t).unwrap();
        assert_eq!(compose_input(&c, None).unwrap(), "Co1.2 Fe0.8 Ni1");
        assert_eq!(
            compose_input(&c, Some(&[300.0, 500.0])).unwrap(),
            "Co1.2 Fe0.8 Ni1 300 500"
        );
        let fe = parse_composition("Fe", &t).unwrap();
        assert_eq!(compose_input(&fe, None).unwrap(), "Fe1");
    }

    #[test]
    fn vocab_first_seen_order() {
        let v = build_vocab(&["Fe1 Ni1", "Ni1 Fe1 Co1"]).unwrap();
        assert_eq!(v.id("[PAD]"), 0);
        assert_eq!(v.id("[MASK]"), 3);
        assert_eq!(v.id("Fe1"), 4);
        assert_eq!(v.id("Ni1"), 5);
        assert_eq!(v.id("Co1"), 6);
        assert_eq!(v.len(), 7);
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), id);
        }
        assert!(matches!(
            build_vocab::<&str>(&[]),
            Err(TokenizeError::EmptyCorpus)
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&["Fe1 Ni1 13.4"]).unwrap();
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\n[MASK]\nFe1\n"));
        let back = Vocabulary::read(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocabulary::read("Fe1\n".as_bytes()).is_err());
    }

    #[test]
    fn encode_pads_and_truncates() {
        let v = build_vocab(&["Fe1 Ni1"]).unwrap();
        let s = encode("Fe1 Ni1", &v, 5);
        assert_eq!(s.ids, vec![CLS_ID, 4, 5, PAD_ID, PAD_ID]);
        assert_eq!(s.attention_mask, vec![1, 1, 1, 0, 0]);
        assert_eq!(s.element_spans.get(&1).unwrap().as_str(), "Fe");
        assert_eq!(s.element_spans.get(&2).unwrap().as_str(), "Ni");

        let empty = encode("", &v, 4);
        assert_eq!(empty.ids, vec![CLS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(empty.attention_mask, vec![1, 0, 0, 0]);

        let long = encode("Fe1 Ni1 Fe1 Ni1 Co1", &v, 3);
        assert_eq!(long.ids, vec![CLS_ID, 4, 5]);
        assert_eq!(long.attention_mask, vec![1, 1, 1]);
        assert_eq!(long.valid_len(), 3);

        let unk = encode("Co1 13.4", &v, 4);
        assert_eq!(unk.ids[1..3], [UNK_ID, UNK_ID]);
        assert_eq!(unk.element_spans.len(), 1);
    }

    #[test]
    fn masking_extremes() {
        let v = build_vocab(&["Fe1 Ni1 Co1"]).unwrap();
        let s = encode("Fe1 Ni1 Co1", &v, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (m0, l0) = mask_tokens(&s, 0.0, &mut rng);
        assert_eq!(m0, s);
        assert!(l0.is_empty());
        let (m1, l1) = mask_tokens(&s, 1.0, &mut rng);
        assert_eq!(
            m1.ids,
            vec![CLS_ID, MASK_ID, MASK_ID, MASK_ID, PAD_ID, PAD_ID]
        );
        assert_eq!(
            l1.into_iter().collect::<Vec<_>>(),
            vec![(1, 4), (2, 5), (3, 6)]
        );
    }

    #[test]
    fn masking_frequency_matches_binomial() {
        let v = build_vocab(&["Fe1 Ni1 Co1 Cr1 Mn1"]).unwrap();
        let s = encode("Fe1 Ni1 Co1 Cr1 Mn1", &v, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = 0.15;
        let trials = 10_000;
        let masked: usize = (0..trials)
            .map(|_| mask_tokens(&s, p, &mut rng).1.len())
            .sum();
        let n = (trials * 5) as f64;
        let se = (n * p * (1.0 - p)).sqrt();
        assert!((masked as f64 - n * p).abs() < 3.0 * se, "masked={masked}");
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_number(13.3814).unwrap(), "13.4");
        assert_eq!(quantize_number(0.0).unwrap(), "0");
        assert_eq!(quantize_number(-0.0).unwrap(), "0");
        assert_eq!(quantize_number(1811.0).unwrap(), "1810");
        assert_eq!(quantize_number(-0.53219).unwrap(), "-0.532");
        assert!(quantize_number(f64::NAN).is_err());
        assert!(quantize_number(f64::INFINITY).is_err());
    }

    proptest::proptest! {
        #[test]
        fn quantize_is_idempotent(x in -1e6f64..1e6) {
            let q = quantize_number(x).unwrap();
            let again = quantize_number(q.parse().unwrap()).unwrap();
            proptest::prop_assert_eq!(q, again);
        }

        #[test]
        fn mask_count_matches_token_count(n in 0usize..20, max_len in 2usize..16) {
            let text = vec!["Fe1"; n].join(" ");
            let v = build_vocab(&["Fe1"]).unwrap();
            let s = encode(&text, &v, max_len);
            let ones = s.attention_mask.iter().filter(|&&m| m == 1).count();
            proptest::prop_assert_eq!(ones, (n + 1).min(max_len));
            proptest::prop_assert_eq!(s.ids.len(), max_len);
        }
    }
}
