//! Python bindings: composition parsing, featurization, corpus generation,
//! evaluation helpers, trained-model prediction and attention maps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use hea_core::chem::{parse_composition, ElementTable, PairEnthalpyTable};
use hea_core::datagen::GeneratorConfig;
use hea_core::dataset::DatasetRow;
use hea_core::encoder::{load_model, predict, EncoderModel};
use hea_core::evaluate;
use hea_core::featurize::FEATURE_NAMES;
use hea_core::interpret::composition_attention;
use hea_core::tokenize::Vocabulary;

type Flagged = (usize, f64);
type AttentionRows = Vec<Vec<Option<f64>>>;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tables() -> (ElementTable, PairEnthalpyTable) {
    (ElementTable::bundled(), PairEnthalpyTable::bundled())
}

/// A validated composition in canonical (alphabetical) order.
#[pyclass(name = "Composition", frozen)]
struct PyComposition {
    inner: hea_core::chem::Composition,
}

#[pymethods]
impl PyComposition {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        let inner = parse_composition(text, &ElementTable::bundled()).map_err(err)?;
        Ok(Self { inner })
    }

    fn canonical(&self) -> String {
        self.inner.canonical_string()
    }

    fn elements(&self) -> Vec<String> {
        self.inner
            .symbols()
            .map(|s| s.as_str().to_string())
            .collect()
    }

    fn coefficients(&self) -> Vec<f64> {
        self.inner.entries().iter().map(|(_, c)| *c).collect()
    }

    fn atomic_fractions(&self) -> Vec<f64> {
        self.inner.atomic_fractions()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Composition('{}')", self.inner.canonical_string())
    }
}

/// The 14 descriptors of a composition, keyed by column name.
#[pyfunction]
fn featurize(text: &str) -> PyResult<BTreeMap<String, f64>> {
    let (t, p) = tables();
    let c = parse_composition(text, &t).map_err(err)?;
    let f = hea_core::featurize::featurize(&c, &t, &p).map_err(err)?;
    Ok(FEATURE_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(f.to_array())
        .collect())
}

#[pyfunction]
fn feature_names() -> Vec<&'static str> {
    FEATURE_NAMES.to_vec()
}

/// Canonical strings of a generated corpus.
#[pyfunction]
#[pyo3(signature = (size, seed=0, equimolar_fraction=0.5))]
fn generate_corpus(
    py: Python<'_>,
    size: usize,
    seed: u64,
    equimolar_fraction: f64,
) -> PyResult<Vec<String>> {
    let cfg = GeneratorConfig {
        corpus_size: size,
        seed,
        equimolar_fraction,
        ..Default::default()
    };
    let corpus = py
        .detach(|| {
            let (t, p) = tables();
            hea_core::datagen::generate_corpus(&cfg, &t, &p)
        })
        .map_err(err)?;
    Ok(corpus.into_iter().map(|e| e.canonical).collect())
}

/// `(mse, mae, r2)`; `r2` is `None` when the actuals are constant.
#[pyfunction]
fn metrics(pred: Vec<f64>, actual: Vec<f64>) -> PyResult<(f64, f64, Option<f64>)> {
    let m = evaluate::metrics(&pred, &actual).map_err(err)?;
    Ok((m.mse, m.mae, m.r2))
}

/// `(train, validation)` index lists per fold.
#[pyfunction]
fn kfold_split(n: usize, k: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Vec<usize>)>> {
    Ok(evaluate::kfold_split(n, k, seed)
        .map_err(err)?
        .into_iter()
        .map(|f| (f.train, f.validation))
        .collect())
}

/// Flagged `(index, z)` pairs and all z-scores.
#[pyfunction]
#[pyo3(signature = (values, threshold=3.0))]
fn zscore_outliers(values: Vec<f64>, threshold: f64) -> PyResult<(Vec<Flagged>, Vec<f64>)> {
    let r = evaluate::zscore_outliers(&values, threshold).map_err(err)?;
    Ok((r.flagged, r.z_scores))
}

/// A saved encoder with its vocabulary.
#[pyclass(name = "EncoderModel", frozen)]
struct PyEncoderModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyEncoderModel {
    #[staticmethod]
    fn load(model_path: &str, vocab_path: &str) -> PyResult<Self> {
        let vf = File::open(vocab_path).map_err(err)?;
        let vocab = Vocabulary::read(BufReader::new(vf)).map_err(err)?;
        let mf = File::open(model_path).map_err(err)?;
        let inner = load_model(BufReader::new(mf), &vocab).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.state.config.n_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn uses_features(&self) -> bool {
        self.inner.uses_features()
    }

    /// Predictions on the original target scale (needs a fine-tuned model).
    fn predict(&self, py: Python<'_>, compositions: Vec<String>) -> PyResult<Vec<f64>> {
        let (t, p) = tables();
        let rows = compositions
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let c = parse_composition(text, &t).map_err(err)?;
                let features = hea_core::featurize::featurize(&c, &t, &p)
                    .map_err(err)?
                    .to_array();
                Ok(DatasetRow {
                    line: i as u64 + 1,
                    composition: c,
                    features,
                    target: 0.0,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        py.detach(|| predict(&self.inner, &rows)).map_err(err)
    }

    /// Element labels and the symmetric attention matrix (`None` on the diagonal).
    #[pyo3(signature = (composition, include_feature_tokens=false))]
    fn attention(
        &self,
        composition: &str,
        include_feature_tokens: bool,
    ) -> PyResult<(Vec<String>, AttentionRows)> {
        let (t, p) = tables();
        let c = parse_composition(composition, &t).map_err(err)?;
        let features = if self.inner.uses_features() {
            hea_core::featurize::featurize(&c, &t, &p)
                .map_err(err)?
                .to_array()
                .to_vec()
        } else {
            Vec::new()
        };
        let m = composition_attention(&self.inner, &c, &features, include_feature_tokens)
            .map_err(err)?;
        Ok((m.elements, m.values))
    }
}

/// Runs a command-line invocation such as `["finetune", "--input", "data.csv"]`
/// and returns the run directory.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<String> {
    let mut all = vec!["hea".to_string()];
    all.extend(args);
    let dir = py
        .detach(|| hea_core::cli::run(all))
        .map_err(|e| PyValueError::new_err(format!("{e:#}")))?;
    Ok(dir.display().to_string())
}

#[pymodule]
fn hea(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyComposition>()?;
    m.add_class::<PyEncoderModel>()?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(kfold_split, m)?)?;
    m.add_function(wrap_pyfunction!(zscore_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
