//! Composition parsing and elemental constant tables.
//!
//! A formula is a run of element tokens, each an uppercase letter with an
//! optional lowercase letter, optionally followed by a decimal coefficient.
//! Whitespace between tokens is ignored and a missing coefficient means 1.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

const BUNDLED_ELEMENTS: &str = include_str!("../data/elements.csv");
const BUNDLED_PAIRS: &str = include_str!("../data/pair_enthalpy.csv");

pub const ELEMENT_TABLE_HEADER: [&str; 10] = [
    "symbol",
    "vec",
    "electronegativity",
    "atomic_radius_pm",
    "young_gpa",
    "shear_gpa",
    "melting_k",
    "work_function_ev",
    "cohesive_ev",
    "ionization_ev",
];

pub const PAIR_TABLE_HEADER: [&str; 3] = ["element_a", "element_b", "dh_kj_mol"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("empty composition")]
    Empty,
    #[error("unknown element '{symbol}' (element table {version})")]
    UnknownElement { symbol: String, version: String },
    #[error("element '{0}' appears more than once")]
    DuplicateElement(String),
    #[error("invalid coefficient '{text}' for element '{symbol}'")]
    BadCoefficient { symbol: String, text: String },
    #[error("unexpected character '{ch}' at offset {offset} in '{input}'")]
    Syntax {
        input: String,
        offset: usize,
        ch: char,
    },
    #[error("no mixing enthalpy for pair {a}-{b} (pair table {version})")]
    MissingPair {
        a: String,
        b: String,
        version: String,
    },
    #[error("table {source_name}, line {line}: {message}")]
    Table {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("io error: {0}")]
    Io(String),
}

/// A chemical element symbol such as `Fe` or `V`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementSymbol(String);

impl ElementSymbol {
    /// Checks the lexical shape only; membership in a table is checked at parse time.
    pub fn new(symbol: &str) -> Option<Self> {
        let mut chars = symbol.chars();
        let first = chars.next()?;
        if !first.is_ascii_uppercase() {
            return None;
        }
        match (chars.next(), chars.next()) {
            (None, _) => Some(Self(symbol.to_string())),
            (Some(c), None) if c.is_ascii_lowercase() => Some(Self(symbol.to_string())),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ElementSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Renders a number with at most four fractional digits and no trailing zeros.
pub fn format_number(x: f64) -> String {
    let mut s = format!("{x:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// Splits a formula into raw `(symbol, coefficient)` pairs without consulting
/// any element table. Order and duplicates are preserved.
pub fn split_formula(text: &str) -> Result<Vec<(ElementSymbol, f64)>, ChemError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if !b.is_ascii_uppercase() {
            return Err(ChemError::Syntax {
                input: text.to_string(),
                offset: i,
                ch: text[i..].chars().next().unwrap_or('?'),
            });
        }
        let start = i;
        i += 1;
        if i < bytes.len() && bytes[i].is_ascii_lowercase() {
            i += 1;
        }
        let symbol = ElementSymbol(text[start..i].to_string());

        let num_start = i;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        let num = &text[num_start..i];
        let coefficient = if num.is_empty() {
            1.0
        } else {
            parse_coefficient(num).ok_or_else(|| ChemError::BadCoefficient {
                symbol: symbol.0.clone(),
                text: num.to_string(),
            })?
        };
        // a lowercase letter right after a coefficient ("Fe1e") is not a token start
        if i < bytes.len() && !(bytes[i].is_ascii_whitespace() || bytes[i].is_ascii_uppercase()) {
            return Err(ChemError::Syntax {
                input: text.to_string(),
                offset: i,
                ch: text[i..].chars().next().unwrap_or('?'),
            });
        }
        out.push((symbol, coefficient));
    }
    Ok(out)
}

fn parse_coefficient(num: &str) -> Option<f64> {
    let mut parts = num.splitn(2, '.');
    let int_part = parts.next()?;
    if int_part.is_empty() {
        return None;
    }
    if let Some(frac) = parts.next() {
        if frac.is_empty() || frac.contains('.') {
            return None;
        }
    }
    let value: f64 = num.parse().ok()?;
    (value.is_finite() && value > 0.0).then_some(value)
}

/// Ordered list of distinct elements with positive stoichiometric coefficients,
/// kept in alphabetical order by symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    entries: Vec<(ElementSymbol, f64)>,
}

impl Composition {
    /// Builds a composition from arbitrary-order entries, canonicalizing the order.
    pub fn from_entries(mut entries: Vec<(ElementSymbol, f64)>) -> Result<Self, ChemError> {
        if entries.is_empty() {
            return Err(ChemError::Empty);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(ChemError::DuplicateElement(w[0].0.to_string()));
            }
        }
        for (symbol, c) in &entries {
            if !(c.is_finite() && *c > 0.0) {
                return Err(ChemError::BadCoefficient {
                    symbol: symbol.to_string(),
                    text: c.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(ElementSymbol, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn symbols(&self) -> impl Iterator<Item = &ElementSymbol> {
        self.entries.iter().map(|(s, _)| s)
    }

    /// `x_i = f_i / Σ f_j` in canonical order.
    pub fn atomic_fractions(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|(_, c)| c).sum();
        self.entries.iter().map(|(_, c)| c / total).collect()
    }

    /// True when the raw coefficients already sum to one, i.e. the source
    /// probably stored atomic fractions rather than molar ratios.
    pub fn looks_normalized(&self) -> bool {
        let total: f64 = self.entries.iter().map(|(_, c)| c).sum();
        self.entries.len() > 1 && (total - 1.0).abs() < 1e-6
    }

    pub fn canonical_string(&self) -> String {
        self.entries
            .iter()
            .map(|(s, c)| format!("{}{}", s, format_number(*c)))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_string())
    }
}

/// Parses a formula and checks every symbol against `table`.
pub fn parse_composition(text: &str, table: &ElementTable) -> Result<Composition, ChemError> {
    if text.trim().is_empty() {
        return Err(ChemError::Empty);
    }
    let entries = split_formula(text)?;
    for (symbol, _) in &entries {
        table.lookup(symbol.as_str())?;
    }
    Composition::from_entries(entries)
}

pub fn canonical_string(c: &Composition) -> String {
    c.canonical_string()
}

pub fn atomic_fractions(c: &Composition) -> Vec<f64> {
    c.atomic_fractions()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementRecord {
    pub symbol: ElementSymbol,
    /// electrons/atom
    pub vec: f64,
    /// Pauling scale
    pub electronegativity: f64,
    /// pm
    pub atomic_radius: f64,
    /// GPa
    pub young_modulus: f64,
    /// GPa
    pub shear_modulus: f64,
    /// K
    pub melting_temp: f64,
    /// eV
    pub work_function: f64,
    /// eV/atom
    pub cohesive_energy: f64,
    /// eV
    pub ionization_energy: f64,
}

/// Strips `# version: ...` and blank lines, returning the version and the data rows
/// with their 1-based line numbers.
fn split_versioned(text: &str) -> (Option<String>, Vec<(usize, &str)>) {
    let mut version = None;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("version:") {
                version = Some(v.trim().to_string());
            }
            continue;
        }
        rows.push((idx + 1, trimmed));
    }
    (version, rows)
}

fn read_source(path: &Path) -> Result<String, ChemError> {
    let mut s = String::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| ChemError::Io(format!("{}: {e}", path.display())))?;
    Ok(s)
}

fn check_header(
    source_name: &str,
    rows: &[(usize, &str)],
    expected: &[&str],
) -> Result<(), ChemError> {
    let (line, header) = rows.first().ok_or_else(|| ChemError::Table {
        source_name: source_name.to_string(),
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != expected {
        return Err(ChemError::Table {
            source_name: source_name.to_string(),
            line: *line,
            message: format!(
                "expected header '{}', found '{}'",
                expected.join(","),
                header
            ),
        });
    }
    Ok(())
}

/// Per-element constants keyed by symbol. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct ElementTable {
    records: BTreeMap<ElementSymbol, ElementRecord>,
    version: String,
}

impl ElementTable {
    pub fn bundled() -> Self {
        Self::parse_str(BUNDLED_ELEMENTS, "bundled elements.csv")
            .expect("bundled element table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ChemError> {
        Self::parse_str(&read_source(path)?, &path.display().to_string())
    }

    pub fn parse_str(text: &str, source_name: &str) -> Result<Self, ChemError> {
        let (version, rows) = split_versioned(text);
        check_header(source_name, &rows, &ELEMENT_TABLE_HEADER)?;
        let table_err = |line: usize, message: String| ChemError::Table {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut records = BTreeMap::new();
        for &(line, row) in &rows[1..] {
            let cols: Vec<&str> = row.split(',').map(str::trim).collect();
            if cols.len() != ELEMENT_TABLE_HEADER.len() {
                return Err(table_err(
                    line,
                    format!("expected 10 columns, found {}", cols.len()),
                ));
            }
            let symbol = ElementSymbol::new(cols[0])
                .ok_or_else(|| table_err(line, format!("malformed symbol '{}'", cols[0])))?;
            let mut values = [0.0; 9];
            for (k, v) in values.iter_mut().enumerate() {
                let text = cols[k + 1];
                *v = text
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite() && *x > 0.0)
                    .ok_or_else(|| {
                        table_err(
                            line,
                            format!(
                                "{} must be a positive number, got '{text}'",
                                ELEMENT_TABLE_HEADER[k + 1]
                            ),
                        )
                    })?;
            }
            if values[0] < 1.0 {
                return Err(table_err(line, "vec must be at least 1".into()));
            }
            let record = ElementRecord {
                symbol: symbol.clone(),
                vec: values[0],
                electronegativity: values[1],
                atomic_radius: values[2],
                young_modulus: values[3],
                shear_modulus: values[4],
                melting_temp: values[5],
                work_function: values[6],
                cohesive_energy: values[7],
                ionization_energy: values[8],
            };
            if records.insert(symbol.clone(), record).is_some() {
                return Err(table_err(line, format!("duplicate element '{symbol}'")));
            }
        }
        Ok(Self {
            records,
            version: version.unwrap_or_else(|| "unversioned".into()),
        })
    }

    pub fn lookup(&self, symbol: &str) -> Result<&ElementRecord, ChemError> {
        ElementSymbol::new(symbol)
            .and_then(|s| self.records.get(&s))
            .ok_or_else(|| ChemError::UnknownElement {
                symbol: symbol.to_string(),
                version: self.version.clone(),
            })
    }

    pub fn contains(&self, symbol: &ElementSymbol) -> bool {
        self.records.contains_key(symbol)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Symbols in alphabetical order.
    pub fn symbols(&self) -> impl Iterator<Item = &ElementSymbol> {
        self.records.keys()
    }
}

pub fn lookup<'a>(table: &'a ElementTable, symbol: &str) -> Result<&'a ElementRecord, ChemError> {
    table.lookup(symbol)
}

/// Pairwise mixing enthalpies ΔH_ij in kJ/mol under unordered keys.
#[derive(Debug, Clone)]
pub struct PairEnthalpyTable {
    pairs: HashMap<(ElementSymbol, ElementSymbol), f64>,
    version: String,
}

fn pair_key(a: &ElementSymbol, b: &ElementSymbol) -> (ElementSymbol, ElementSymbol) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl PairEnthalpyTable {
    pub fn bundled() -> Self {
        Self::parse_str(BUNDLED_PAIRS, "bundled pair_enthalpy.csv")
            .expect("bundled pair table is valid")
    }

    pub fn load(path: &Path) -> Result<Self, ChemError> {
        Self::parse_str(&read_source(path)?, &path.display().to_string())
    }

    pub fn parse_str(text: &str, source_name: &str) -> Result<Self, ChemError> {
        let (version, rows) = split_versioned(text);
        check_header(source_name, &rows, &PAIR_TABLE_HEADER)?;
        let table_err = |line: usize, message: String| ChemError::Table {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut pairs = HashMap::new();
        for &(line, row) in &rows[1..] {
            let cols: Vec<&str> = row.split(',').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(table_err(
                    line,
                    format!("expected 3 columns, found {}", cols.len()),
                ));
            }
            let a = ElementSymbol::new(cols[0])
                .ok_or_else(|| table_err(line, format!("malformed symbol '{}'", cols[0])))?;
            let b = ElementSymbol::new(cols[1])
                .ok_or_else(|| table_err(line, format!("malformed symbol '{}'", cols[1])))?;
            let dh: f64 = cols[2]
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| table_err(line, format!("invalid enthalpy '{}'", cols[2])))?;
            if a == b {
                if dh != 0.0 {
                    return Err(table_err(line, format!("self pair {a}-{a} must be 0")));
                }
                continue;
            }
            if pairs.insert(pair_key(&a, &b), dh).is_some() {
                return Err(table_err(line, format!("duplicate pair {a}-{b}")));
            }
        }
        Ok(Self {
            pairs,
            version: version.unwrap_or_else(|| "unversioned".into()),
        })
    }

    /// ΔH_ij, symmetric in its arguments; ΔH_ii = 0.
    pub fn get(&self, a: &ElementSymbol, b: &ElementSymbol) -> Result<f64, ChemError> {
        if a == b {
            return Ok(0.0);
        }
        self.pairs
            .get(&pair_key(a, b))
            .copied()
            .ok_or_else(|| ChemError::MissingPair {
                a: a.to_string(),
                b: b.to_string(),
                version: self.version.clone(),
            })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Returns a copy with every ΔH_ij multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|(k, v)| (k.clone(), v * factor))
                .collect(),
            version: format!("{}*{}", self.version, factor),
        }
    }
}
