//! Classical regressors on an expanded design matrix: the 14 features followed
//! by one atomic-fraction column per element seen in the dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetRow;
use crate::evaluate::{fit_scaler, fit_scaler_1d, kfold_split, EvalError, FoldReport};
use crate::featurize::FEATURE_NAMES;

pub mod gp;
pub mod knn;
pub mod tree;

pub use gp::{gp_fit, GpConfig, GpModel};
pub use knn::{knn_fit, knn_predict, KnnModel};
pub use tree::{
    gbr_fit, rf_fit, tree_fit, BoostConfig, Boosted, Forest, ForestConfig, Node, Tree, TreeConfig,
};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("Cholesky factorization failed at pivot {pivot} (value {value:e}); matrix is not positive definite")]
    Factorization { pivot: usize, value: f64 },
    #[error("{0}")]
    Data(String),
    #[error("unknown algorithm '{0}' (expected gp, rf, dt, gbr or knn)")]
    UnknownAlgorithm(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

/// Features first (unless `with_features` is false), then elements alphabetically.
/// Absent elements are 0.
pub fn expand_design_matrix(rows: &[DatasetRow], with_features: bool) -> DesignMatrix {
    let elements: BTreeSet<String> = rows
        .iter()
        .flat_map(|r| r.composition.symbols().map(|s| s.as_str().to_string()))
        .collect();
    let elements: Vec<String> = elements.into_iter().collect();
    let mut columns: Vec<String> = Vec::new();
    if with_features {
        columns.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    }
    columns.extend(elements.iter().cloned());
    let matrix = rows
        .iter()
        .map(|r| {
            let mut v = if with_features {
                r.features.to_vec()
            } else {
                Vec::new()
            };
            let mut fractions = vec![0.0; elements.len()];
            for ((sym, _), x) in r
                .composition
                .entries()
                .iter()
                .zip(r.composition.atomic_fractions())
            {
                let k = elements
                    .binary_search_by(|e| e.as_str().cmp(sym.as_str()))
                    .expect("element collected above");
                fractions[k] = x;
            }
            v.extend(fractions);
            v
        })
        .collect();
    DesignMatrix {
        columns,
        rows: matrix,
        target: rows.iter().map(|r| r.target).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gp,
    Rf,
    Dt,
    Gbr,
    Knn,
}

impl FromStr for Algorithm {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gp" => Ok(Self::Gp),
            "rf" => Ok(Self::Rf),
            "dt" | "tree" => Ok(Self::Dt),
            "gbr" => Ok(Self::Gbr),
            "knn" => Ok(Self::Knn),
            other => Err(BaselineError::UnknownAlgorithm(other.to_string())),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gp => "gp",
            Self::Rf => "rf",
            Self::Dt => "dt",
            Self::Gbr => "gbr",
            Self::Knn => "knn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub gp: GpConfig,
    pub rf: ForestConfig,
    pub dt: TreeConfig,
    pub gbr: BoostConfig,
    pub knn_k: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            rf: ForestConfig::default(),
            dt: TreeConfig::default(),
            gbr: BoostConfig::default(),
            knn_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Gp(GpModel),
    Rf(Forest),
    Dt(Tree),
    Gbr(Boosted),
    Knn(KnnModel),
}

pub fn fit(
    algo: Algorithm,
    x: &[Vec<f64>],
    y: &[f64],
    cfg: &BaselineConfig,
) -> Result<FittedModel, BaselineError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(BaselineError::Data(format!(
            "{} rows, {} targets",
            x.len(),
            y.len()
        )));
    }
    Ok(match algo {
        Algorithm::Gp => FittedModel::Gp(gp_fit(x, y, &cfg.gp)?),
        Algorithm::Rf => FittedModel::Rf(rf_fit(x, y, &cfg.rf)),
        Algorithm::Dt => FittedModel::Dt(tree_fit(x, y, &cfg.dt)),
        Algorithm::Gbr => FittedModel::Gbr(gbr_fit(x, y, &cfg.gbr)),
        Algorithm::Knn => FittedModel::Knn(knn_fit(x, y, cfg.knn_k.min(x.len()))?),
    })
}

impl FittedModel {
    pub fn predict(&self, q: &[f64]) -> f64 {
        match self {
            Self::Gp(m) => m.predict(q).0,
            Self::Rf(m) => m.predict(q),
            Self::Dt(m) => m.predict(q),
            Self::Gbr(m) => m.predict(q),
            Self::Knn(m) => m.predict(q),
        }
    }

    /// Human-readable description; tree topology for single trees.
    pub fn summary(&self, columns: &[String]) -> String {
        match self {
            Self::Gp(m) => m.summary(),
            Self::Rf(m) => m.summary(),
            Self::Dt(m) => format!("decision_tree\n{}", m.summary(columns)),
            Self::Gbr(m) => m.summary(),
            Self::Knn(m) => m.summary(),
        }
    }
}

/// K-fold evaluation on the design matrix. Columns and target are standardized
/// with scalers fit on each training split; predictions are mapped back to the
/// original target scale. Returns the fold reports and the last fold's model.
pub fn cross_validate(
    dm: &DesignMatrix,
    algo: Algorithm,
    cfg: &BaselineConfig,
    folds: usize,
    split_seed: u64,
) -> Result<(Vec<FoldReport>, FittedModel), BaselineError> {
    let splits = kfold_split(dm.rows.len(), folds, split_seed)?;
    let mut reports = Vec::with_capacity(splits.len());
    let mut last = None;
    for (k, fold) in splits.iter().enumerate() {
        let train_x: Vec<&Vec<f64>> = fold.train.iter().map(|&i| &dm.rows[i]).collect();
        let xs = fit_scaler(&train_x)?;
        let ts = fit_scaler_1d(&fold.train.iter().map(|&i| dm.target[i]).collect::<Vec<_>>())?;
        let x: Vec<Vec<f64>> = train_x.iter().map(|r| xs.apply(r)).collect();
        let y: Vec<f64> = fold
            .train
            .iter()
            .map(|&i| ts.apply_value(0, dm.target[i]))
            .collect();
        let model = fit(algo, &x, &y, cfg)?;
        let predictions: Vec<f64> = fold
            .validation
            .iter()
            .map(|&i| ts.invert_value(0, model.predict(&xs.apply(&dm.rows[i]))))
            .collect();
        let actuals = fold.validation.iter().map(|&i| dm.target[i]).collect();
        reports.push(FoldReport::new(
            k,
            fold,
            predictions,
            actuals,
            Some(xs),
            ts,
        )?);
        last = Some(model);
    }
    Ok((reports, last.expect("at least one fold")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{parse_composition, ElementTable};

    fn row(text: &str, target: f64) -> DatasetRow {
        DatasetRow {
            line: 0,
            composition: parse_composition(text, &ElementTable::bundled()).unwrap(),
            features: [0.0; 14],
            target,
        }
    }

    #[test]
    fn expands_element_fractions() {
        let rows = vec![row("Fe1 Ni1", 1.0), row("Co1 Ni3", 2.0)];
        let dm = expand_design_matrix(&rows, false);
        assert_eq!(dm.columns, vec!["Co", "Fe", "Ni"]);
        assert_eq!(dm.rows[0], vec![0.0, 0.5, 0.5]);
        assert_eq!(dm.rows[1], vec![0.25, 0.0, 0.75]);
        let full = expand_design_matrix(&rows[..1], true);
        assert_eq!(full.columns.len(), 16);
        assert_eq!(&full.columns[14..], &["Fe", "Ni"]);
    }

    #[test]
    fn algorithm_names() {
        for a in ["gp", "rf", "dt", "gbr", "knn"] {
            assert_eq!(a.parse::<Algorithm>().unwrap().to_string(), a);
        }
        assert!("svm".parse::<Algorithm>().is_err());
    }
}
