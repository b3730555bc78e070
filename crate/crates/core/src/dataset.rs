//! Tabular data: CSV ingestion, preprocessing and the weak-label split.
//!
//! Preprocessing fills missing numeric cells with the column mean, one-hot
//! encodes categorical columns (a missing category is its own value) and
//! min-max scales every resulting column to `[0, 1]`. Scaling statistics are
//! taken over the whole table before any split, so test rows influence the
//! ranges seen in training.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const MISSING_MARKERS: [&str; 6] = ["", "?", "NA", "NaN", "nan", "null"];
const LABEL_GUESSES: [&str; 6] = ["label", "class", "y", "target", "outlier", "anomaly"];
const CACHE_MAGIC: &[u8; 8] = b"WSADSET1";
const MISSING_CATEGORY: &str = "<missing>";

fn is_missing(cell: &str) -> bool {
    MISSING_MARKERS.contains(&cell.trim())
}

/// Column roles for a CSV file. Columns are named by header text, or by
/// zero-based index when there is no header (`"0"`, `"1"`, ...). Columns not
/// listed as categorical or numeric are numeric when every present cell
/// parses as a number and categorical otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    /// Label column; guessed from common names, else the last column.
    pub label: Option<String>,
    /// Label values meaning "anomaly".
    pub positive: Vec<String>,
    /// Label values meaning "normal"; `["*"]` accepts anything not positive.
    pub negative: Vec<String>,
    pub has_header: bool,
    pub categorical: Vec<String>,
    pub numeric: Vec<String>,
    pub ignore: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            label: None,
            positive: vec!["1".into()],
            negative: vec!["0".into()],
            has_header: true,
            categorical: Vec::new(),
            numeric: Vec::new(),
            ignore: Vec::new(),
        }
    }
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn label_value(&self, raw: &str) -> Option<bool> {
        let v = raw.trim();
        let matches = |set: &[String]| {
            set.iter().any(|s| {
                s == v || matches!((s.parse::<f64>(), v.parse::<f64>()), (Ok(a), Ok(b)) if a == b)
            })
        };
        if matches(&self.positive) {
            Some(true)
        } else if self.negative.iter().any(|s| s == "*") || matches(&self.negative) {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Number(f64),
    Text(String),
    Missing,
}

/// Feature cells before preprocessing, with the label split out.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Cell>>,
    pub labels: Vec<bool>,
}

impl RawTable {
    pub fn new(columns: Vec<Column>, rows: Vec<Vec<Cell>>, labels: Vec<bool>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::data(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(Error::data(format!(
                "row {} has {} cells, expected {}",
                i + 1,
                rows[i].len(),
                columns.len()
            )));
        }
        Ok(Self {
            columns,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn missing_count(&self) -> usize {
        self.rows
            .iter()
            .flatten()
            .filter(|c| matches!(c, Cell::Missing))
            .count()
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| format_err(path, e.to_string()))?;
    read_csv(BufReader::new(file), schema, path)
}

/// Parses CSV text from any reader; `origin` only labels error messages.
pub fn read_csv<R: Read>(reader: R, schema: &Schema, origin: &Path) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        records.push((line, rec));
    }
    let header: Vec<String> = if schema.has_header {
        if records.is_empty() {
            return Err(format_err(origin, "empty file"));
        }
        records
            .remove(0)
            .1
            .iter()
            .map(|s| s.trim().to_string())
            .collect()
    } else {
        let width = records.first().map_or(0, |r| r.1.len());
        (0..width).map(|i| i.to_string()).collect()
    };
    if records.is_empty() {
        return Err(format_err(origin, "no data rows"));
    }
    let width = header.len();
    for (line, rec) in &records {
        if rec.len() != width {
            return Err(format_err(
                origin,
                format!("line {line}: expected {width} columns, found {}", rec.len()),
            ));
        }
    }

    let position = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .or_else(|| {
                name.parse::<usize>()
                    .ok()
                    .filter(|&i| i < width && !schema.has_header)
            })
            .ok_or_else(|| format_err(origin, format!("unknown column '{name}'")))
    };
    let label_col = match &schema.label {
        Some(name) => position(name)?,
        None => header
            .iter()
            .position(|h| LABEL_GUESSES.contains(&h.to_ascii_lowercase().as_str()))
            .unwrap_or(width - 1),
    };
    let mut forced: BTreeMap<usize, ColumnKind> = BTreeMap::new();
    for name in &schema.categorical {
        forced.insert(position(name)?, ColumnKind::Categorical);
    }
    for name in &schema.numeric {
        forced.insert(position(name)?, ColumnKind::Numeric);
    }
    let ignored: BTreeSet<usize> = schema
        .ignore
        .iter()
        .map(|n| position(n))
        .collect::<Result<_>>()?;

    let feature_cols: Vec<usize> = (0..width)
        .filter(|&c| c != label_col && !ignored.contains(&c))
        .collect();
    let columns: Vec<Column> = feature_cols
        .iter()
        .map(|&c| {
            let kind = forced.get(&c).copied().unwrap_or_else(|| {
                let numeric = records
                    .iter()
                    .map(|(_, r)| &r[c])
                    .filter(|v| !is_missing(v))
                    .all(|v| v.trim().parse::<f64>().is_ok_and(f64::is_finite));
                if numeric {
                    ColumnKind::Numeric
                } else {
                    ColumnKind::Categorical
                }
            });
            Column {
                name: header[c].clone(),
                kind,
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for (line, rec) in &records {
        let raw_label = &rec[label_col];
        if is_missing(raw_label) {
            return Err(format_err(origin, format!("line {line}: missing label")));
        }
        let y = schema.label_value(raw_label).ok_or_else(|| {
            format_err(
                origin,
                format!(
                    "line {line}: label '{}' is neither positive nor negative",
                    raw_label.trim()
                ),
            )
        })?;
        labels.push(y);
        rows.push(
            feature_cols
                .iter()
                .zip(&columns)
                .map(|(&c, col)| {
                    let v = &rec[c];
                    if is_missing(v) {
                        return Cell::Missing;
                    }
                    match col.kind {
                        ColumnKind::Numeric => match v.trim().parse::<f64>() {
                            Ok(x) if x.is_finite() => Cell::Number(x),
                            _ => Cell::Missing,
                        },
                        ColumnKind::Categorical => Cell::Text(v.to_string()),
                    }
                })
                .collect(),
        );
    }
    RawTable::new(columns, rows, labels)
}

/// Preprocessed table: every feature in `[0, 1]`, no missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<bool>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<bool>, feature_names: Vec<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if features.cols() != feature_names.len() {
            return Err(Error::data(format!(
                "{} feature columns but {} names",
                features.cols(),
                feature_names.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::data("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            feature_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_anomalies(&self) -> usize {
        self.labels.iter().filter(|&&y| y).count()
    }

    pub fn rows(&self, indices: &[usize]) -> Matrix {
        self.features.select_rows(indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<bool> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Reinterprets the features as an all-numeric raw table.
    pub fn to_raw(&self) -> RawTable {
        let columns = self
            .feature_names
            .iter()
            .map(|n| Column {
                name: n.clone(),
                kind: ColumnKind::Numeric,
            })
            .collect();
        let rows = self
            .features
            .row_iter()
            .map(|r| r.iter().map(|&v| Cell::Number(v)).collect())
            .collect();
        RawTable {
            columns,
            rows,
            labels: self.labels.clone(),
        }
    }

    /// Flat binary cache: magic, u64 rows, u64 cols, row-major f64 features,
    /// one byte per label, then u64-length-prefixed UTF-8 feature names.
    /// Integers and floats are little-endian.
    pub fn write_cache<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.features.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
        let labels: Vec<u8> = self.labels.iter().map(|&y| u8::from(y)).collect();
        w.write_all(&labels)?;
        for name in &self.feature_names {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        self.write_cache(BufWriter::new(File::create(path)?))
    }

    pub fn read_cache<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |m: &str| format_err(origin, m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("truncated cache header"))?;
        if &magic != CACHE_MAGIC {
            return Err(bad("not a dataset cache (bad magic)"));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated cache"))?;
            Ok(u64::from_le_bytes(b))
        };
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let float_bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| bad("cache dimensions overflow"))?;
        if buf.len() < float_bytes + rows {
            return Err(bad("truncated cache body"));
        }
        let data = buf[..float_bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let labels = buf[float_bytes..float_bytes + rows]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(bad("label byte outside {0,1}")),
            })
            .collect::<Result<Vec<bool>>>()?;
        let mut rest = &buf[float_bytes + rows..];
        let mut names = Vec::with_capacity(cols);
        for _ in 0..cols {
            if rest.len() < 8 {
                return Err(bad("truncated feature names"));
            }
            let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
            rest = &rest[8..];
            if rest.len() < len {
                return Err(bad("truncated feature names"));
            }
            let name =
                std::str::from_utf8(&rest[..len]).map_err(|_| bad("feature name is not UTF-8"))?;
            names.push(name.to_string());
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after cache"));
        }
        Dataset::new(Matrix::from_vec(rows, cols, data)?, labels, names)
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        Self::read_cache(BufReader::new(File::open(path)?), path)
    }
}

/// Impute, one-hot encode and min-max scale.
pub fn preprocess(raw: &RawTable) -> Result<Dataset> {
    if raw.is_empty() {
        return Err(Error::data("cannot preprocess an empty table"));
    }
    let n = raw.len();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    for (c, col) in raw.columns.iter().enumerate() {
        match col.kind {
            ColumnKind::Numeric => {
                let mut values = Vec::with_capacity(n);
                let (mut sum, mut count) = (0.0, 0usize);
                for row in &raw.rows {
                    match &row[c] {
                        Cell::Number(v) => {
                            sum += v;
                            count += 1;
                            values.push(Some(*v));
                        }
                        Cell::Missing => values.push(None),
                        Cell::Text(t) => {
                            return Err(Error::data(format!(
                                "text '{t}' in numeric column '{}'",
                                col.name
                            )))
                        }
                    }
                }
                let mean = if count > 0 { sum / count as f64 } else { 0.0 };
                columns.push(values.into_iter().map(|v| v.unwrap_or(mean)).collect());
                names.push(col.name.clone());
            }
            ColumnKind::Categorical => {
                let value_of = |cell: &Cell| -> Option<String> {
                    match cell {
                        Cell::Text(t) => Some(t.clone()),
                        Cell::Number(v) => Some(v.to_string()),
                        Cell::Missing => None,
                    }
                };
                let present: BTreeSet<String> =
                    raw.rows.iter().filter_map(|r| value_of(&r[c])).collect();
                let mut categories: Vec<Option<String>> = present.into_iter().map(Some).collect();
                if raw.rows.iter().any(|r| matches!(r[c], Cell::Missing)) {
                    categories.push(None);
                }
                for cat in &categories {
                    columns.push(
                        raw.rows
                            .iter()
                            .map(|r| if value_of(&r[c]) == *cat { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    names.push(format!(
                        "{}={}",
                        col.name,
                        cat.as_deref().unwrap_or(MISSING_CATEGORY)
                    ));
                }
            }
        }
    }
    for col in &mut columns {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in col.iter_mut() {
            *v = if span > 0.0 {
                ((*v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    let d = columns.len();
    let mut data = vec![0.0; n * d];
    for (j, col) in columns.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            data[i * d + j] = v;
        }
    }
    Dataset::new(Matrix::from_vec(n, d, data)?, raw.labels.clone(), names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_labeled: usize,
    pub contamination: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_labeled: 30,
            contamination: 0.02,
            test_fraction: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.contamination) {
            return Err(Error::InvalidConfig(format!(
                "contamination must lie in [0, 1), got {}",
                self.contamination
            )));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "test fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

/// Row indices (into the source [`Dataset`]) for one weakly-labeled run.
/// All index lists are sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabelSplit {
    /// Training rows treated as normal, including hidden anomalies.
    pub train_unlabeled: Vec<usize>,
    pub train_labeled_anomalies: Vec<usize>,
    pub test: Vec<usize>,
    pub contamination_rate: f64,
    pub n_labeled: usize,
    pub n_labeled_requested: usize,
    /// True anomalies placed in the unlabeled pool.
    pub hidden_anomalies: usize,
    pub seed: u64,
}

impl WeakLabelSplit {
    /// Share of labeled anomalies among all training rows.
    pub fn labeled_fraction(&self) -> f64 {
        let train = self.train_unlabeled.len() + self.train_labeled_anomalies.len();
        self.n_labeled as f64 / train as f64
    }
}

/// Anomalies to hide among `normals` so they make up `rate` of the pool.
pub fn contamination_count(normals: usize, rate: f64) -> usize {
    (rate * normals as f64 / (1.0 - rate)).round() as usize
}

fn test_count(total: usize, fraction: f64) -> usize {
    let want = (fraction * total as f64).round() as usize;
    if total >= 2 {
        want.clamp(1, total - 1)
    } else {
        0
    }
}

/// Stratified train/test split, then labeled anomalies, then contamination.
/// Training anomalies left over after both draws are dropped.
pub fn make_weak_split(ds: &Dataset, cfg: &SplitConfig, rng: &mut Rng) -> Result<WeakLabelSplit> {
    cfg.validate()?;
    let mut normals: Vec<usize> = (0..ds.len()).filter(|&i| !ds.labels[i]).collect();
    let mut anomalies: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i]).collect();
    if anomalies.is_empty() {
        return Err(Error::data("dataset has no anomalies"));
    }
    if normals.len() < 2 {
        return Err(Error::data("dataset needs at least two normal rows"));
    }
    rng.shuffle(&mut normals);
    rng.shuffle(&mut anomalies);

    let test_normals = test_count(normals.len(), cfg.test_fraction);
    let test_anomalies = test_count(anomalies.len(), cfg.test_fraction);
    let mut test: Vec<usize> = normals[..test_normals]
        .iter()
        .chain(&anomalies[..test_anomalies])
        .copied()
        .collect();
    let train_normals = &normals[test_normals..];
    let train_anomalies = &anomalies[test_anomalies..];

    let n_labeled = cfg.n_labeled.min(train_anomalies.len());
    if n_labeled < cfg.n_labeled {
        log::warn!(
            "requested {} labeled anomalies but only {} are available for training; using {}",
            cfg.n_labeled,
            train_anomalies.len(),
            n_labeled
        );
    }
    let mut labeled = train_anomalies[..n_labeled].to_vec();
    let spare = &train_anomalies[n_labeled..];
    let wanted = contamination_count(train_normals.len(), cfg.contamination);
    let hidden = wanted.min(spare.len());
    if hidden < wanted {
        log::warn!(
            "contamination {} needs {wanted} hidden anomalies but only {} remain; using {hidden}",
            cfg.contamination,
            spare.len()
        );
    }
    let mut unlabeled: Vec<usize> = train_normals
        .iter()
        .chain(&spare[..hidden])
        .copied()
        .collect();
    unlabeled.sort_unstable();
    labeled.sort_unstable();
    test.sort_unstable();
    Ok(WeakLabelSplit {
        train_unlabeled: unlabeled,
        train_labeled_anomalies: labeled,
        test,
        contamination_rate: cfg.contamination,
        n_labeled,
        n_labeled_requested: cfg.n_labeled,
        hidden_anomalies: hidden,
        seed: rng.seed(),
    })
}

/// Loads a `.bin` cache, or a CSV preprocessed with an optional TOML schema.
pub fn load_dataset(path: &Path, schema: Option<&Path>) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "bin") {
        return Dataset::load_cache(path);
    }
    let schema = match schema {
        Some(p) => Schema::from_file(p)?,
        None => Schema::default(),
    };
    preprocess(&load_csv(path, &schema)?)
}
