//! Synthetic pre-training corpus: unique weighted-random alloy compositions.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chem::{ChemError, Composition, ElementSymbol, ElementTable, PairEnthalpyTable};
use crate::featurize::{featurize, FeatureVector};

/// Attempts allowed per requested entry before giving up.
pub const RESAMPLE_FACTOR: usize = 100;

/// Decimal places kept on non-equimolar coefficients (matches `format_number`).
pub const COEFFICIENT_DECIMALS: i32 = 4;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error(
        "element count up to {requested} requested but only {available} elements can be sampled"
    )]
    TooManyElements { requested: usize, available: usize },
    #[error("only {found} of {wanted} unique compositions after {attempts} attempts")]
    Exhausted {
        found: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error(transparent)]
    Chem(#[from] ChemError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Per-element overrides; elements not listed keep weight 1.
    pub element_weights: BTreeMap<String, f64>,
    pub corpus_size: usize,
    pub equimolar_fraction: f64,
    pub element_count_range: (usize, usize),
    pub coefficient_range: (f64, f64),
    pub seed: u64,
    pub shards: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            element_weights: BTreeMap::new(),
            corpus_size: 6000,
            equimolar_fraction: 0.5,
            element_count_range: (4, 8),
            coefficient_range: (0.1, 2.0),
            seed: 0,
            shards: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::InvalidConfig(m.to_string()));
        if self.corpus_size == 0 {
            return bad("corpus_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.equimolar_fraction) {
            return bad("equimolar_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.element_count_range;
        if lo == 0 || lo > hi {
            return bad("element_count_range must satisfy 1 <= low <= high");
        }
        let (clo, chi) = self.coefficient_range;
        if !(clo > 0.0 && clo <= chi && chi.is_finite()) {
            return bad("coefficient_range must satisfy 0 < low <= high");
        }
        if self
            .element_weights
            .values()
            .any(|w| !(w.is_finite() && *w > 0.0))
        {
            return bad("element weights must be positive");
        }
        if self.shards == 0 {
            return bad("shards must be at least 1");
        }
        Ok(())
    }
}

/// Sampling weights resolved against a table, in alphabetical order.
#[derive(Debug, Clone)]
pub struct ElementSampler {
    elements: Vec<(ElementSymbol, f64)>,
}

impl ElementSampler {
    pub fn new(cfg: &GeneratorConfig, table: &ElementTable) -> Result<Self, DatagenError> {
        cfg.validate()?;
        for symbol in cfg.element_weights.keys() {
            table.lookup(symbol)?;
        }
        let elements: Vec<_> = table
            .symbols()
            .map(|s| {
                (
                    s.clone(),
                    cfg.element_weights.get(s.as_str()).copied().unwrap_or(1.0),
                )
            })
            .collect();
        let (_, hi) = cfg.element_count_range;
        if hi > elements.len() {
            return Err(DatagenError::TooManyElements {
                requested: hi,
                available: elements.len(),
            });
        }
        Ok(Self { elements })
    }

    /// Weighted draw of `k` distinct elements (successive draws renormalize over the remainder).
    fn draw_elements<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<ElementSymbol> {
        let mut pool = self.elements.clone();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = pool.iter().map(|(_, w)| w).sum();
            let mut u = rng.gen::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, (_, w)) in pool.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            out.push(pool.remove(pick).0);
        }
        out
    }
}

fn round_coefficient(x: f64) -> f64 {
    let scale = 10f64.powi(COEFFICIENT_DECIMALS);
    (x * scale).round() / scale
}

pub fn sample_composition<R: Rng>(
    cfg: &GeneratorConfig,
    sampler: &ElementSampler,
    rng: &mut R,
) -> Composition {
    let (lo, hi) = cfg.element_count_range;
    let k = rng.gen_range(lo..=hi);
    let elements = sampler.draw_elements(k, rng);
    let equimolar = rng.gen::<f64>() < cfg.equimolar_fraction;
    let (clo, chi) = cfg.coefficient_range;
    let entries = elements
        .into_iter()
        .map(|s| {
            let c = if equimolar {
                1.0
            } else {
                let v = round_coefficient(rng.gen_range(clo..=chi));
                if v > 0.0 {
                    v
                } else {
                    round_coefficient(clo).max(10f64.powi(-COEFFICIENT_DECIMALS))
                }
            };
            (s, c)
        })
        .collect();
    Composition::from_entries(entries).expect("sampled entries are distinct and positive")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub composition: Composition,
    pub canonical: String,
    pub features: FeatureVector,
}

/// Zero in any of these columns marks a degenerate entry.
fn passes_zero_filter(f: &FeatureVector) -> bool {
    f.mixing_entropy != 0.0 && f.melting_temp != 0.0 && f.mean_vec != 0.0
}

fn shard_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct ShardOutput {
    entries: Vec<CorpusEntry>,
    attempts: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_shard(
    cfg: &GeneratorConfig,
    sampler: &ElementSampler,
    t: &ElementTable,
    p: &PairEnthalpyTable,
    stream: u64,
    quota: usize,
    max_attempts: usize,
    seen: &HashSet<String>,
) -> Result<ShardOutput, DatagenError> {
    let mut rng = shard_rng(cfg.seed, stream);
    let mut local: HashSet<String> = HashSet::new();
    let mut entries = Vec::with_capacity(quota);
    let mut attempts = 0;
    while entries.len() < quota && attempts < max_attempts {
        attempts += 1;
        let c = sample_composition(cfg, sampler, &mut rng);
        let canonical = c.canonical_string();
        if seen.contains(&canonical) || local.contains(&canonical) {
            continue;
        }
        let features = featurize(&c, t, p)?;
        if !passes_zero_filter(&features) {
            continue;
        }
        local.insert(canonical.clone());
        entries.push(CorpusEntry {
            composition: c,
            canonical,
            features,
        });
    }
    Ok(ShardOutput { entries, attempts })
}

/// Generates exactly `cfg.corpus_size` unique, featurized compositions.
///
/// Shards draw from independent ChaCha streams `(seed, shard)`, are merged in
/// shard order with duplicates dropped, and any shortfall is topped up from a
/// further stream. The output depends only on the config.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<CorpusEntry>, DatagenError> {
    let sampler = ElementSampler::new(cfg, t)?;
    let budget = RESAMPLE_FACTOR * cfg.corpus_size;
    let shards = cfg.shards.min(cfg.corpus_size);
    let base = cfg.corpus_size / shards;
    let extra = cfg.corpus_size % shards;
    let empty = HashSet::new();

    let outputs: Vec<ShardOutput> = (0..shards)
        .into_par_iter()
        .map(|k| {
            let quota = base + usize::from(k < extra);
            let share = budget / shards;
            run_shard(cfg, &sampler, t, p, k as u64, quota, share, &empty)
        })
        .collect::<Result<_, _>>()?;

    let mut attempts = 0;
    let mut seen = HashSet::new();
    let mut corpus = Vec::with_capacity(cfg.corpus_size);
    for out in outputs {
        attempts += out.attempts;
        for e in out.entries {
            if seen.insert(e.canonical.clone()) {
                corpus.push(e);
            }
        }
    }
    if corpus.len() < cfg.corpus_size {
        let top_up = run_shard(
            cfg,
            &sampler,
            t,
            p,
            shards as u64,
            cfg.corpus_size - corpus.len(),
            budget.saturating_sub(attempts),
            &seen,
        )?;
        attempts += top_up.attempts;
        corpus.extend(top_up.entries);
    }
    if corpus.len() < cfg.corpus_size {
        return Err(DatagenError::Exhausted {
            found: corpus.len(),
            wanted: cfg.corpus_size,
            attempts,
        });
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::GAS_CONSTANT;

    fn cfg(size: usize) -> GeneratorConfig {
        GeneratorConfig {
            corpus_size: size,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn equimolar_draws_are_all_one() {
        let t = ElementTable::bundled();
        let c = GeneratorConfig {
            equimolar_fraction: 1.0,
            ..cfg(1)
        };
        let s = ElementSampler::new(&c, &t).unwrap();
        let mut rng = shard_rng(1, 0);
        for _ in 0..200 {
            let comp = sample_composition(&c, &s, &mut rng);
            assert!(comp.entries().iter().all(|(_, v)| *v == 1.0));
            assert!((4..=8).contains(&comp.len()));
        }
    }

    #[test]
    fn non_equimolar_coefficients_in_range_and_rounded() {
        let t = ElementTable::bundled();
        let c = GeneratorConfig {
            equimolar_fraction: 0.0,
            ..cfg(1)
        };
        let s = ElementSampler::new(&c, &t).unwrap();
        let mut rng = shard_rng(2, 0);
        for _ in 0..200 {
            let comp = sample_composition(&c, &s, &mut rng);
            for (_, v) in comp.entries() {
                assert!((0.1..=2.0).contains(v));
                assert_eq!(round_coefficient(*v), *v);
            }
        }
    }

    #[test]
    fn weighted_frequencies_follow_weights() {
        let t = ElementTable::bundled();
        let mut weights = BTreeMap::new();
        weights.insert("Fe".to_string(), 10.0);
        weights.insert("Sc".to_string(), 1.0);
        let c = GeneratorConfig {
            element_weights: weights,
            element_count_range: (1, 1),
            ..cfg(1)
        };
        let s = ElementSampler::new(&c, &t).unwrap();
        let mut rng = shard_rng(3, 0);
        let n = 100_000;
        let (mut fe, mut sc) = (0usize, 0usize);
        for _ in 0..n {
            let comp = sample_composition(&c, &s, &mut rng);
            match comp.entries()[0].0.as_str() {
                "Fe" => fe += 1,
                "Sc" => sc += 1,
                _ => {}
            }
        }
        // multinomial oracle: total weight 10 + 1 + 16 others
        let total = 27.0;
        let (p_fe, p_sc) = (10.0 / total, 1.0 / total);
        let nf = n as f64;
        let se_fe = (nf * p_fe * (1.0 - p_fe)).sqrt();
        let se_sc = (nf * p_sc * (1.0 - p_sc)).sqrt();
        assert!((fe as f64 - nf * p_fe).abs() < 3.0 * se_fe, "fe={fe}");
        assert!((sc as f64 - nf * p_sc).abs() < 3.0 * se_sc, "sc={sc}");
        let ratio = fe as f64 / sc as f64;
        // delta-method standard error of the ratio
        let se_ratio = ratio * ((1.0 - p_fe) / (nf * p_fe) + (1.0 - p_sc) / (nf * p_sc)).sqrt();
        assert!((ratio - 10.0).abs() < 3.0 * se_ratio, "ratio={ratio}");
    }

    #[test]
    fn corpus_is_unique_featurized_and_exact_size() {
        let t = ElementTable::bundled();
        let p = PairEnthalpyTable::bundled();
        let corpus = generate_corpus(&cfg(500), &t, &p).unwrap();
        assert_eq!(corpus.len(), 500);
        let distinct: HashSet<_> = corpus.iter().map(|e| &e.canonical).collect();
        assert_eq!(distinct.len(), 500);
        for e in &corpus {
            let back = crate::chem::parse_composition(&e.canonical, &t).unwrap();
            assert_eq!(back, e.composition);
            assert!(passes_zero_filter(&e.features));
            if e.composition.entries().iter().all(|(_, v)| *v == 1.0) {
                let n = e.composition.len() as f64;
                let exact = GAS_CONSTANT * n.ln();
                assert!((e.features.mixing_entropy - exact).abs() <= 1e-12 * exact);
            }
        }
    }

    #[test]
    fn single_entry_corpus() {
        let t = ElementTable::bundled();
        let p = PairEnthalpyTable::bundled();
        assert_eq!(generate_corpus(&cfg(1), &t, &p).unwrap().len(), 1);
    }

    #[test]
    fn deterministic_for_seed_and_shards() {
        let t = ElementTable::bundled();
        let p = PairEnthalpyTable::bundled();
        let c = GeneratorConfig {
            shards: 4,
            ..cfg(300)
        };
        let a = generate_corpus(&c, &t, &p).unwrap();
        let b = generate_corpus(&c, &t, &p).unwrap();
        assert_eq!(a, b);
        let other = generate_corpus(&GeneratorConfig { seed: 8, ..c }, &t, &p).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn rejects_bad_config() {
        let t = ElementTable::bundled();
        let too_many = GeneratorConfig {
            element_count_range: (4, 40),
            ..cfg(1)
        };
        assert!(matches!(
            ElementSampler::new(&too_many, &t),
            Err(DatagenError::TooManyElements { .. })
        ));
        let reversed = GeneratorConfig {
            element_count_range: (5, 4),
            ..cfg(1)
        };
        assert!(ElementSampler::new(&reversed, &t).is_err());
        let mut w = BTreeMap::new();
        w.insert("Fe".into(), 0.0);
        assert!(ElementSampler::new(
            &GeneratorConfig {
                element_weights: w,
                ..cfg(1)
            },
            &t
        )
        .is_err());
    }

    #[test]
    fn exhaustion_is_reported() {
        // two elements, exactly two elements per alloy, equimolar: only one distinct alloy exists
        let t = ElementTable::parse_str(
            &format!(
                "{}\nFe,8,1.83,126,211,82,1811,4.5,4.28,7.9\nNi,10,1.91,124,200,76,1728,5.15,4.44,7.64",
                crate::chem::ELEMENT_TABLE_HEADER.join(",")
            ),
            "t",
        )
        .unwrap();
        let p =
            PairEnthalpyTable::parse_str("element_a,element_b,dh_kj_mol\nFe,Ni,-2\n", "p").unwrap();
        let c = GeneratorConfig {
            element_count_range: (2, 2),
            equimolar_fraction: 1.0,
            ..cfg(3)
        };
        match generate_corpus(&c, &t, &p) {
            Err(DatagenError::Exhausted {
                found,
                wanted,
                attempts,
            }) => {
                assert_eq!((found, wanted), (1, 3));
                assert_eq!(attempts, 300);
            }
            other => panic!("{other:?}"),
        }
    }
}
