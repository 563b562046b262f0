//! Dataset ingest: a `composition` column, an optional subset of the feature
//! columns (missing ones are computed) and a numeric target column.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::chem::{parse_composition, ChemError, Composition, ElementTable, PairEnthalpyTable};
use crate::datagen::CorpusEntry;
use crate::featurize::{featurize, FeatureVector, FEATURE_COUNT, FEATURE_NAMES};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("dataset has no rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("cannot open {path}")]
    Open {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    /// 1-based line in the source file (header is line 1).
    pub line: u64,
    pub composition: Composition,
    pub features: [f64; FEATURE_COUNT],
    pub target: f64,
}

struct Columns {
    composition: usize,
    features: [Option<usize>; FEATURE_COUNT],
    target: Option<usize>,
}

fn columns(headers: &csv::StringRecord, target: Option<&str>) -> Result<Columns, DatasetError> {
    let find = |name: &str| headers.iter().position(|h| h == name);
    let composition =
        find("composition").ok_or_else(|| DatasetError::MissingColumn("composition".into()))?;
    let mut features = [None; FEATURE_COUNT];
    for (slot, name) in features.iter_mut().zip(FEATURE_NAMES) {
        *slot = find(name);
    }
    let target = match target {
        Some(t) => Some(find(t).ok_or_else(|| DatasetError::MissingColumn(t.into()))?),
        None => None,
    };
    Ok(Columns {
        composition,
        features,
        target,
    })
}

fn parse_cell(
    rec: &csv::StringRecord,
    col: usize,
    name: &str,
    line: u64,
) -> Result<f64, DatasetError> {
    let text = rec.get(col).unwrap_or("");
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DatasetError::Row {
            line,
            message: format!("column '{name}': cannot parse '{text}' as a number"),
        }),
    }
}

fn read_rows<R: Read>(
    input: R,
    target: Option<&str>,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<DatasetRow>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let cols = columns(reader.headers()?, target)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let text = rec.get(cols.composition).unwrap_or("");
        let row_err = |e: ChemError| DatasetError::Row {
            line,
            message: e.to_string(),
        };
        let composition = parse_composition(text, t).map_err(row_err)?;
        let mut features = [0.0; FEATURE_COUNT];
        let mut missing = false;
        for (j, col) in cols.features.iter().enumerate() {
            match col {
                Some(c) => features[j] = parse_cell(&rec, *c, FEATURE_NAMES[j], line)?,
                None => missing = true,
            }
        }
        if missing {
            let computed = featurize(&composition, t, p).map_err(row_err)?.to_array();
            for (j, col) in cols.features.iter().enumerate() {
                if col.is_none() {
                    features[j] = computed[j];
                }
            }
        }
        let target = match cols.target {
            Some(c) => parse_cell(&rec, c, target.unwrap_or_default(), line)?,
            None => 0.0,
        };
        rows.push(DatasetRow {
            line,
            composition,
            features,
            target,
        });
    }
    if rows.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(rows)
}

/// Reads a labelled dataset from any reader.
pub fn read_dataset<R: Read>(
    input: R,
    target: &str,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<DatasetRow>, DatasetError> {
    read_rows(input, Some(target), t, p)
}

pub fn ingest_dataset(
    path: &Path,
    target: &str,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<DatasetRow>, DatasetError> {
    read_dataset(open(path)?, target, t, p)
}

/// Reads an unlabelled composition table, such as a generated corpus or a featurize output.
pub fn read_corpus<R: Read>(
    input: R,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<CorpusEntry>, DatasetError> {
    Ok(read_rows(input, None, t, p)?
        .into_iter()
        .map(|r| CorpusEntry {
            canonical: r.composition.canonical_string(),
            composition: r.composition,
            features: FeatureVector::from_array(r.features),
        })
        .collect())
}

pub fn ingest_corpus(
    path: &Path,
    t: &ElementTable,
    p: &PairEnthalpyTable,
) -> Result<Vec<CorpusEntry>, DatasetError> {
    read_corpus(open(path)?, t, p)
}

fn open(path: &Path) -> Result<std::fs::File, DatasetError> {
    std::fs::File::open(path).map_err(|source| DatasetError::Open {
        path: path.display().to_string(),
        source,
    })
}
