//! Thermodynamic descriptors of an alloy composition.
//!
//! All formulas are written in atomic fractions `x_i`. The pairwise sums run
//! over ordered pairs `i != j`, so every unordered pair contributes twice, and
//! `delta_r` is the fraction-weighted squared relative radius deviation times
//! 100, without a square root.

use std::io::Write;

use crate::chem::{ChemError, Composition, ElementRecord, ElementTable, PairEnthalpyTable};

/// Molar gas constant, J/(mol·K).
pub const GAS_CONSTANT: f64 = 8.314462618;

pub const FEATURE_COUNT: usize = 14;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "mean_vec",
    "delta_x",
    "delta_r",
    "young_modulus",
    "mixing_enthalpy",
    "mixing_entropy",
    "work_function",
    "shear_modulus",
    "modulus_mismatch",
    "shear_modulus_diff",
    "melting_temp",
    "cohesive_energy",
    "ionization_energy",
    "pauling_en_diff",
];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureVector {
    /// electrons/atom
    pub mean_vec: f64,
    pub delta_x: f64,
    /// percent
    pub delta_r: f64,
    /// GPa
    pub young_modulus: f64,
    /// kJ/mol
    pub mixing_enthalpy: f64,
    /// J/(mol·K)
    pub mixing_entropy: f64,
    /// eV
    pub work_function: f64,
    /// GPa
    pub shear_modulus: f64,
    pub modulus_mismatch: f64,
    pub shear_modulus_diff: f64,
    /// K
    pub melting_temp: f64,
    /// eV/atom
    pub cohesive_energy: f64,
    /// eV
    pub ionization_energy: f64,
    pub pauling_en_diff: f64,
}

impl FeatureVector {
    /// Values in `FEATURE_NAMES` order.
    pub fn to_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.mean_vec,
            self.delta_x,
            self.delta_r,
            self.young_modulus,
            self.mixing_enthalpy,
            self.mixing_entropy,
            self.work_function,
            self.shear_modulus,
            self.modulus_mismatch,
            self.shear_modulus_diff,
            self.melting_temp,
            self.cohesive_energy,
            self.ionization_energy,
            self.pauling_en_diff,
        ]
    }

    pub fn from_array(v: [f64; FEATURE_COUNT]) -> Self {
        Self {
            mean_vec: v[0],
            delta_x: v[1],
            delta_r: v[2],
            young_modulus: v[3],
            mixing_enthalpy: v[4],
            mixing_entropy: v[5],
            work_function: v[6],
            shear_modulus: v[7],
            modulus_mismatch: v[8],
            shear_modulus_diff: v[9],
            melting_temp: v[10],
            cohesive_energy: v[11],
            ionization_energy: v[12],
            pauling_en_diff: v[13],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMeans {
    pub mean_vec: f64,
    pub young_modulus: f64,
    pub work_function: f64,
    pub shear_modulus: f64,
    pub melting_temp: f64,
    pub cohesive_energy: f64,
    pub ionization_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationFeatures {
    pub delta_x: f64,
    pub delta_r: f64,
    pub modulus_mismatch: f64,
    pub shear_modulus_diff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseFeatures {
    pub mixing_enthalpy: f64,
    pub pauling_en_diff: f64,
}

fn records<'a>(c: &Composition, t: &'a ElementTable) -> Result<Vec<&'a ElementRecord>, ChemError> {
    c.symbols().map(|s| t.lookup(s.as_str())).collect()
}

fn weighted(x: &[f64], recs: &[&ElementRecord], prop: impl Fn(&ElementRecord) -> f64) -> f64 {
    x.iter().zip(recs).map(|(xi, r)| xi * prop(r)).sum()
}

pub fn weighted_means(c: &Composition, t: &ElementTable) -> Result<WeightedMeans, ChemError> {
    let recs = records(c, t)?;
    let x = c.atomic_fractions();
    Ok(WeightedMeans {
        mean_vec: weighted(&x, &recs, |r| r.vec),
        young_modulus: weighted(&x, &recs, |r| r.young_modulus),
        work_function: weighted(&x, &recs, |r| r.work_function),
        shear_modulus: weighted(&x, &recs, |r| r.shear_modulus),
        melting_temp: weighted(&x, &recs, |r| r.melting_temp),
        cohesive_energy: weighted(&x, &recs, |r| r.cohesive_energy),
        ionization_energy: weighted(&x, &recs, |r| r.ionization_energy),
    })
}

pub fn deviation_features(
    c: &Composition,
    t: &ElementTable,
) -> Result<DeviationFeatures, ChemError> {
    let recs = records(c, t)?;
    let x = c.atomic_fractions();
    let x_bar = weighted(&x, &recs, |r| r.electronegativity);
    let r_bar = weighted(&x, &recs, |r| r.atomic_radius);
    let g_bar = weighted(&x, &recs, |r| r.shear_modulus);

    let mut var_x = 0.0;
    let mut delta_r = 0.0;
    let mut modulus_mismatch = 0.0;
    let mut shear_modulus_diff = 0.0;
    for (xi, r) in x.iter().zip(&recs) {
        var_x += xi * (r.electronegativity - x_bar).powi(2);
        delta_r += xi * ((r.atomic_radius - r_bar) / r_bar).powi(2);
        modulus_mismatch +=
            xi * (2.0 * (r.shear_modulus - g_bar) / (r.shear_modulus + g_bar)).powi(2);
        shear_modulus_diff += xi * (1.0 - r.shear_modulus / g_bar).powi(2);
    }
    Ok(DeviationFeatures {
        delta_x: var_x.sqrt(),
        delta_r: delta_r * 100.0,
        modulus_mismatch,
        shear_modulus_diff,
    })
}

pub fn pairwise_features(
    c: &Composition,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<PairwiseFeatures, ChemError> {
    let recs = records(c, t)?;
    let x = c.atomic_fractions();
    let symbols: Vec<_> = c.symbols().collect();
    let mut mixing_enthalpy = 0.0;
    let mut pauling_en_diff = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i == j {
                continue;
            }
            let w = x[i] * x[j];
            mixing_enthalpy += w * p.get(symbols[i], symbols[j])?;
            pauling_en_diff += w * (recs[i].electronegativity - recs[j].electronegativity).powi(2);
        }
    }
    Ok(PairwiseFeatures {
        mixing_enthalpy,
        pauling_en_diff,
    })
}

/// Ideal configurational entropy `-R Σ x_i ln x_i`.
pub fn mixing_entropy(c: &Composition) -> f64 {
    let s: f64 = c
        .atomic_fractions()
        .iter()
        .filter(|&&xi| xi > 0.0)
        .map(|xi| xi * xi.ln())
        .sum();
    // -0.0 for a single element
    (-GAS_CONSTANT * s).max(0.0)
}

pub fn featurize(
    c: &Composition,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<FeatureVector, ChemError> {
    let m = weighted_means(c, t)?;
    let d = deviation_features(c, t)?;
    let pw = pairwise_features(c, t, p)?;
    Ok(FeatureVector {
        mean_vec: m.mean_vec,
        delta_x: d.delta_x,
        delta_r: d.delta_r,
        young_modulus: m.young_modulus,
        mixing_enthalpy: pw.mixing_enthalpy,
        mixing_entropy: mixing_entropy(c),
        work_function: m.work_function,
        shear_modulus: m.shear_modulus,
        modulus_mismatch: d.modulus_mismatch,
        shear_modulus_diff: d.shear_modulus_diff,
        melting_temp: m.melting_temp,
        cohesive_energy: m.cohesive_energy,
        ionization_energy: m.ionization_energy,
        pauling_en_diff: pw.pauling_en_diff,
    })
}

/// Writes the feature table: a `composition` column followed by the 14 features.
/// Values use Rust's shortest round-trip float formatting, so re-reading is lossless.
pub fn write_feature_csv<W: Write>(out: W, rows: &[(String, FeatureVector)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["composition"];
    header.extend(FEATURE_NAMES);
    w.write_record(&header)?;
    for (comp, f) in rows {
        let mut rec = vec![comp.clone()];
        rec.extend(f.to_array().iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
