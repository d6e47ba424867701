//! Observational samples, counterfactual queries and CSV ingestion.
//!
//! A dataset holds `N` rows of (treatment, covariates, outcome) plus a
//! split label. Datasets are validated on construction and immutable
//! afterwards, so they can be shared read-only between worker threads.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How treatment values are interpreted. Always declared, never inferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentMode {
    #[default]
    Binary,
    Continuous,
}

impl FromStr for TreatmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TreatmentMode::Binary),
            "continuous" => Ok(TreatmentMode::Continuous),
            other => Err(Error::Config(format!("unknown treatment mode '{other}'"))),
        }
    }
}

/// Binary treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Control, Arm::Treated];

    /// Maps an exact 0/1 treatment code to an arm.
    pub fn from_code(x: f64) -> Option<Arm> {
        if x == 0.0 {
            Some(Arm::Control)
        } else if x == 1.0 {
            Some(Arm::Treated)
        } else {
            None
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treated => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

/// Row split label. Serialized as `train`, `val` or `test`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split label '{other}'"))),
        }
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.63, val: 0.27, test: 0.10 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split ratios must sum to 1".into()));
        }
        Ok(())
    }

    /// Assigns labels to `n` rows by a seeded shuffle. Counts are
    /// `round(train*n)` and `round(val*n)`, the test split takes the rest.
    pub fn assign(&self, n: usize, seed: u64) -> Result<Vec<Split>> {
        self.validate()?;
        let n_train = ((self.train * n as f64).round() as usize).min(n);
        let n_val = ((self.val * n as f64).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut labels = vec![Split::Test; n];
        for (rank, &row) in order.iter().enumerate() {
            labels[row] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        Ok(labels)
    }
}

/// Column names carried along for CSV output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
}

impl ColumnNames {
    pub fn default_for(m: usize) -> Self {
        ColumnNames {
            treatment: "x".into(),
            outcome: "y".into(),
            covariates: (1..=m).map(|j| format!("z{j}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset {
    mode: TreatmentMode,
    treatments: Vec<f64>,
    covariates: Array2<f64>,
    outcomes: Vec<f64>,
    split: Vec<Split>,
    names: ColumnNames,
}

impl ObservationalDataset {
    pub fn new(
        mode: TreatmentMode,
        treatments: Vec<f64>,
        covariates: Array2<f64>,
        outcomes: Vec<f64>,
        split: Vec<Split>,
    ) -> Result<Self> {
        let names = ColumnNames::default_for(covariates.ncols());
        Self::with_names(mode, treatments, covariates, outcomes, split, names)
    }

    pub fn with_names(
        mode: TreatmentMode,
        treatments: Vec<f64>,
        covariates: Array2<f64>,
        outcomes: Vec<f64>,
        split: Vec<Split>,
        names: ColumnNames,
    ) -> Result<Self> {
        let ds = Self::unchecked(mode, treatments, covariates, outcomes, split, names);
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset where every row gets the same split label.
    pub fn all_train(mode: TreatmentMode, treatments: Vec<f64>, covariates: Array2<f64>, outcomes: Vec<f64>) -> Result<Self> {
        let n = treatments.len();
        Self::new(mode, treatments, covariates, outcomes, vec![Split::Train; n])
    }

    fn unchecked(
        mode: TreatmentMode,
        treatments: Vec<f64>,
        covariates: Array2<f64>,
        outcomes: Vec<f64>,
        split: Vec<Split>,
        names: ColumnNames,
    ) -> Self {
        let covariates = covariates.as_standard_layout().into_owned();
        ObservationalDataset { mode, treatments, covariates, outcomes, split, names }
    }

    fn validate(&self) -> Result<()> {
        let n = self.treatments.len();
        if n == 0 {
            return Err(Error::Validation("dataset must contain at least one row".into()));
        }
        if self.covariates.nrows() != n || self.outcomes.len() != n || self.split.len() != n {
            return Err(Error::Validation(format!(
                "column lengths disagree: treatments={n}, covariate rows={}, outcomes={}, split={}",
                self.covariates.nrows(),
                self.outcomes.len(),
                self.split.len()
            )));
        }
        if self.covariates.ncols() == 0 {
            return Err(Error::Validation("covariate dimension must be at least 1".into()));
        }
        if self.names.covariates.len() != self.covariates.ncols() {
            return Err(Error::Validation("covariate names do not match covariate dimension".into()));
        }
        if let Some(i) = self.treatments.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite treatment at row {i}")));
        }
        if let Some(i) = self.outcomes.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite outcome at row {i}")));
        }
        if let Some(((i, j), _)) = self.covariates.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite covariate at row {i}, column {j}")));
        }
        if self.mode == TreatmentMode::Binary {
            if let Some(i) = self.treatments.iter().position(|&v| Arm::from_code(v).is_none()) {
                return Err(Error::Validation(format!(
                    "treatment {} at row {i} is not 0 or 1 in binary mode",
                    self.treatments[i]
                )));
            }
            for arm in Arm::BOTH {
                let present = (0..n).any(|i| self.split[i] == Split::Train && self.treatments[i] == arm.code());
                if !present {
                    return Err(Error::Validation(format!(
                        "train split has no rows in arm {}",
                        arm.code()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> TreatmentMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatments.is_empty()
    }

    /// Covariate dimension `m`.
    pub fn dim(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    pub fn treatments(&self) -> &[f64] {
        &self.treatments
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn treatment(&self, i: usize) -> f64 {
        self.treatments[i]
    }

    pub fn outcome(&self, i: usize) -> f64 {
        self.outcomes[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.split[i]
    }

    /// Covariate vector of row `i`.
    pub fn z(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.covariates.as_slice().expect("standard layout")[i * m..(i + 1) * m]
    }

    /// Arm of row `i`; `None` in continuous mode.
    pub fn arm(&self, i: usize) -> Option<Arm> {
        match self.mode {
            TreatmentMode::Binary => Arm::from_code(self.treatments[i]),
            TreatmentMode::Continuous => None,
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Evidence for row `i` with the given counterfactual treatment.
    pub fn evidence(&self, i: usize, x_prime: f64) -> Evidence {
        Evidence {
            x: self.treatments[i],
            z: self.z(i).to_vec(),
            y: self.outcomes[i],
            x_prime,
        }
    }

    /// Copies the listed rows into a new dataset. Rows keep their labels.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Alignment("row selection is empty".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::Alignment(format!("row index {bad} out of range")));
        }
        let m = self.dim();
        let mut cov = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            cov.extend_from_slice(self.z(r));
        }
        Ok(Self::unchecked(
            self.mode,
            rows.iter().map(|&r| self.treatments[r]).collect(),
            Array2::from_shape_vec((rows.len(), m), cov).expect("shape"),
            rows.iter().map(|&r| self.outcomes[r]).collect(),
            rows.iter().map(|&r| self.split[r]).collect(),
            self.names.clone(),
        ))
    }

    /// Rows of one split as a standalone dataset.
    pub fn split_view(&self, split: Split) -> Result<Self> {
        let rows = self.indices_of(split);
        if rows.is_empty() {
            return Err(Error::Alignment(format!("split '{split}' is empty")));
        }
        self.select(&rows)
    }

    /// Replaces every split label.
    pub fn with_splits(&self, split: Vec<Split>) -> Result<Self> {
        Self::with_names(
            self.mode,
            self.treatments.clone(),
            self.covariates.clone(),
            self.outcomes.clone(),
            split,
            self.names.clone(),
        )
    }

    /// Same rows with every covariate passed through `scaler`.
    pub fn standardized(&self, scaler: &Standardizer) -> Result<Self> {
        if scaler.dim() != self.dim() {
            return Err(Error::Alignment("standardizer dimension mismatch".into()));
        }
        let mut cov = self.covariates.clone();
        for mut row in cov.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - scaler.mean[j]) / scaler.scale[j];
            }
        }
        Ok(Self::unchecked(
            self.mode,
            self.treatments.clone(),
            cov,
            self.outcomes.clone(),
            self.split.clone(),
            self.names.clone(),
        ))
    }
}

/// Per-coordinate centering and scaling fitted on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &ObservationalDataset) -> Self {
        let rows = ds.indices_of(Split::Train);
        let rows = if rows.is_empty() { (0..ds.len()).collect() } else { rows };
        let m = ds.dim();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; m];
        for &i in &rows {
            for (acc, v) in mean.iter_mut().zip(ds.z(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for &i in &rows {
            for ((acc, v), mu) in var.iter_mut().zip(ds.z(i)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        // Constant columns keep unit scale.
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (mu, s))| (v - mu) / s)
            .collect()
    }
}

/// One unit's factual triple plus the counterfactual treatment of a query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub x: f64,
    pub z: Vec<f64>,
    pub y: f64,
    pub x_prime: f64,
}

impl Evidence {
    pub fn new(x: f64, z: Vec<f64>, y: f64, x_prime: f64) -> Result<Self> {
        let ev = Evidence { x, z, y, x_prime };
        if !(x.is_finite() && y.is_finite() && x_prime.is_finite()) || ev.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("evidence contains non-finite values".into()));
        }
        Ok(ev)
    }

    /// Checks the query against a dataset's dimension and treatment mode.
    pub fn check_against(&self, ds: &ObservationalDataset) -> Result<()> {
        if self.z.len() != ds.dim() {
            return Err(Error::Validation(format!(
                "evidence has {} covariates, dataset has {}",
                self.z.len(),
                ds.dim()
            )));
        }
        if !(self.x.is_finite() && self.y.is_finite() && self.x_prime.is_finite())
            || self.z.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Validation("evidence contains non-finite values".into()));
        }
        if ds.mode() == TreatmentMode::Binary {
            let (Some(a), Some(b)) = (Arm::from_code(self.x), Arm::from_code(self.x_prime)) else {
                return Err(Error::Validation("binary-mode evidence treatments must be 0 or 1".into()));
            };
            if a == b {
                return Err(Error::Precondition("counterfactual treatment equals factual treatment".into()));
            }
        }
        Ok(())
    }

    /// Factual and target arms of a binary query.
    pub fn arms(&self) -> Result<(Arm, Arm)> {
        match (Arm::from_code(self.x), Arm::from_code(self.x_prime)) {
            (Some(a), Some(b)) if a != b => Ok((a, b)),
            (Some(_), Some(_)) => Err(Error::Precondition("counterfactual treatment equals factual treatment".into())),
            _ => Err(Error::Validation("binary-mode evidence treatments must be 0 or 1".into())),
        }
    }
}

/// Simulation ground truth, aligned row-by-row with a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomeTable {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl PotentialOutcomeTable {
    pub fn new(y0: Vec<f64>, y1: Vec<f64>) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::Alignment(format!("y0 has {} rows, y1 has {}", y0.len(), y1.len())));
        }
        Ok(PotentialOutcomeTable { y0, y1 })
    }

    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    pub fn get(&self, i: usize, arm: Arm) -> f64 {
        match arm {
            Arm::Control => self.y0[i],
            Arm::Treated => self.y1[i],
        }
    }

    pub fn ite(&self, i: usize) -> f64 {
        self.y1[i] - self.y0[i]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        PotentialOutcomeTable {
            y0: rows.iter().map(|&r| self.y0[r]).collect(),
            y1: rows.iter().map(|&r| self.y1[r]).collect(),
        }
    }
}

/// True iff every observed outcome equals the potential outcome of its arm
/// within 1e-12.
pub fn consistency_check(ds: &ObservationalDataset, table: &PotentialOutcomeTable) -> Result<bool> {
    if table.len() != ds.len() {
        return Err(Error::Alignment(format!(
            "dataset has {} rows, potential-outcome table has {}",
            ds.len(),
            table.len()
        )));
    }
    if ds.mode() != TreatmentMode::Binary {
        return Err(Error::Unsupported("consistency check needs binary treatments".into()));
    }
    Ok((0..ds.len()).all(|i| {
        let arm = ds.arm(i).expect("validated binary treatment");
        (ds.outcome(i) - table.get(i, arm)).abs() <= 1e-12
    }))
}

/// Maps CSV header names onto dataset columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// `None` takes every column that is not the treatment, outcome or split.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    #[serde(default)]
    pub split: Option<String>,
    #[serde(default)]
    pub mode: TreatmentMode,
    /// Columns never taken as covariates when `covariates` is `None`.
    #[serde(default)]
    pub exclude: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            treatment: "x".into(),
            outcome: "y".into(),
            covariates: None,
            split: Some("split".into()),
            mode: TreatmentMode::Binary,
            exclude: Vec::new(),
        }
    }
}

pub fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
}

pub fn parse_cell(record: &csv::StringRecord, idx: usize, row: usize, column: &str) -> Result<f64> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("'{raw}' is not a number"),
    })
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<ObservationalDataset> {
    read_csv(File::open(path)?, schema)
}

/// Reads a dataset from CSV text. Row indices in parse errors count data
/// rows from 1.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<ObservationalDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let t_idx = column_index(&headers, &schema.treatment)?;
    let y_idx = column_index(&headers, &schema.outcome)?;
    // A declared split column that is absent means "all train".
    let s_idx = schema.split.as_deref().and_then(|name| column_index(&headers, name).ok());
    let cov_names: Vec<String> = match &schema.covariates {
        Some(cols) => cols.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t_idx && *i != y_idx && Some(*i) != s_idx)
            .map(|(_, h)| h.trim().to_string())
            .filter(|h| !schema.exclude.contains(h))
            .collect(),
    };
    if cov_names.is_empty() {
        return Err(Error::Schema("no covariate columns".into()));
    }
    let cov_idx = cov_names
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let m = cov_idx.len();
    let mut treatments = Vec::new();
    let mut outcomes = Vec::new();
    let mut cov = Vec::new();
    let mut split = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        treatments.push(parse_cell(&rec, t_idx, row, &schema.treatment)?);
        outcomes.push(parse_cell(&rec, y_idx, row, &schema.outcome)?);
        for (&ci, name) in cov_idx.iter().zip(&cov_names) {
            cov.push(parse_cell(&rec, ci, row, name)?);
        }
        let label = match s_idx {
            Some(si) => match rec.get(si).map(str::trim).unwrap_or("") {
                "" => Split::Train,
                s => s.parse()?,
            },
            None => Split::Train,
        };
        split.push(label);
    }
    let n = treatments.len();
    let covariates = Array2::from_shape_vec((n, m), cov).map_err(|e| Error::Validation(e.to_string()))?;
    let names = ColumnNames {
        treatment: schema.treatment.clone(),
        outcome: schema.outcome.clone(),
        covariates: cov_names,
    };
    ObservationalDataset::with_names(schema.mode, treatments, covariates, outcomes, split, names)
}

pub fn write_csv(ds: &ObservationalDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv_to(ds, File::create(path)?)
}

/// Writes treatment, covariates, outcome and split columns. Numbers use
/// shortest round-trip formatting, so reading the file back is exact.
pub fn write_csv_to<W: Write>(ds: &ObservationalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let names = ds.names();
    let mut header = vec![names.treatment.clone()];
    header.extend(names.covariates.iter().cloned());
    header.push(names.outcome.clone());
    header.push("split".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.treatment(i).to_string()];
        rec.extend(ds.z(i).iter().map(|v| v.to_string()));
        rec.push(ds.outcome(i).to_string());
        rec.push(ds.split(i).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_csv(table: &PotentialOutcomeTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["y0", "y1"])?;
    for (a, b) in table.y0.iter().zip(&table.y1) {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a two-column ground-truth file with the given column names.
pub fn load_truth_csv(path: impl AsRef<Path>, y0_col: &str, y1_col: &str) -> Result<PotentialOutcomeTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let i0 = column_index(&headers, y0_col)?;
    let i1 = column_index(&headers, y1_col)?;
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        y0.push(parse_cell(&rec, i0, r + 1, y0_col)?);
        y1.push(parse_cell(&rec, i1, r + 1, y1_col)?);
    }
    PotentialOutcomeTable::new(y0, y1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> ObservationalDataset {
        ObservationalDataset::all_train(
            TreatmentMode::Binary,
            vec![0.0, 1.0, 0.0, 1.0],
            array![[0.1], [0.2], [0.3], [0.4]],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap()
    }

    #[test]
    fn parses_four_row_file() {
        let text = "x,z1,y\n0,0.5,1.0\n1,1.5,2.0\n0,-0.5,3\n1,2,4\n";
        let ds = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 1);
        assert!(ds.splits().iter().all(|&s| s == Split::Train));
        assert_eq!(ds.z(1), &[1.5]);
    }

    #[test]
    fn treatment_two_rejected_in_binary_mode() {
        let text = "x,z1,y\n0,0.5,1.0\n2,1.5,2.0\n1,1,1\n";
        let err = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn continuous_mode_accepts_real_treatments() {
        let text = "x,z1,y\n0.25,0.5,1.0\n2,1.5,2.0\n";
        let schema = CsvSchema { mode: TreatmentMode::Continuous, ..CsvSchema::default() };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.treatments(), &[0.25, 2.0]);
        assert_eq!(ds.arm(0), None);
    }

    #[test]
    fn twenty_five_covariates() {
        let mut header = vec!["treatment".to_string(), "y_factual".to_string()];
        header.extend((1..=25).map(|j| format!("x{j}")));
        let mut text = header.join(",") + "\n";
        for r in 0..6 {
            let mut row = vec![(r % 2).to_string(), (r as f64 * 0.5).to_string()];
            row.extend((1..=25).map(|j| (j * r).to_string()));
            text += &(row.join(",") + "\n");
        }
        let schema = CsvSchema {
            treatment: "treatment".into(),
            outcome: "y_factual".into(),
            ..CsvSchema::default()
        };
        let ds = read_csv(text.as_bytes(), &schema).unwrap();
        assert_eq!(ds.dim(), 25);
        assert_eq!(ds.len(), 6);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "x,z1,outcome\n0,1,1\n";
        let err = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let text = "x,z1,y\n0,1,1\n1,abc,2\n";
        match read_csv(text.as_bytes(), &CsvSchema::default()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "z1");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_arm_train_split_rejected() {
        let text = "x,z1,y,split\n0,1,1,train\n1,1,2,test\n0,2,2,train\n";
        let err = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn split_labels_and_defaults() {
        let text = "x,z1,y,split\n0,1,1,train\n1,1,2,\n0,2,2,val\n1,3,3,test\n";
        let ds = read_csv(text.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.splits(), &[Split::Train, Split::Train, Split::Val, Split::Test]);
        let bad = "x,z1,y,split\n0,1,1,train\n1,1,2,holdout\n";
        assert!(matches!(read_csv(bad.as_bytes(), &CsvSchema::default()), Err(Error::Validation(_))));
    }

    #[test]
    fn invariant_violations_rejected() {
        let ok_split = vec![Split::Train; 2];
        // length mismatch
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![0.0, 1.0], array![[1.0], [2.0]], vec![1.0], ok_split.clone()).is_err());
        // empty
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![], Array2::zeros((0, 1)), vec![], vec![]).is_err());
        // zero covariate dimension
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![0.0, 1.0], Array2::zeros((2, 0)), vec![1.0, 2.0], ok_split.clone()).is_err());
        // non-finite
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![0.0, 1.0], array![[1.0], [f64::NAN]], vec![1.0, 2.0], ok_split.clone()).is_err());
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![0.0, 1.0], array![[1.0], [2.0]], vec![1.0, f64::INFINITY], ok_split.clone()).is_err());
        // binary code outside {0,1}
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![0.0, 0.5], array![[1.0], [2.0]], vec![1.0, 2.0], ok_split.clone()).is_err());
        // one arm only in train
        assert!(ObservationalDataset::new(TreatmentMode::Binary, vec![1.0, 1.0], array![[1.0], [2.0]], vec![1.0, 2.0], ok_split).is_err());
    }

    #[test]
    fn consistency() {
        let ds = tiny();
        let table = PotentialOutcomeTable::new(vec![1.0, 0.0, 3.0, 9.0], vec![5.0, 2.0, 7.0, 4.0]).unwrap();
        assert!(consistency_check(&ds, &table).unwrap());
        let mut bad = table.clone();
        bad.y1[1] += 1.0;
        assert!(!consistency_check(&ds, &bad).unwrap());
        let short = table.select(&[0, 1]);
        assert!(matches!(consistency_check(&ds, &short), Err(Error::Alignment(_))));
    }

    #[test]
    fn evidence_checks() {
        let ds = tiny();
        let ev = Evidence::new(0.0, vec![0.2], 1.0, 1.0).unwrap();
        ev.check_against(&ds).unwrap();
        let same = Evidence::new(1.0, vec![0.2], 1.0, 1.0).unwrap();
        assert!(matches!(same.check_against(&ds), Err(Error::Precondition(_))));
        let wrong_dim = Evidence::new(0.0, vec![0.2, 0.3], 1.0, 1.0).unwrap();
        assert!(wrong_dim.check_against(&ds).is_err());
        assert!(Evidence::new(0.0, vec![f64::NAN], 1.0, 1.0).is_err());
    }

    #[test]
    fn split_assignment_counts() {
        let labels = SplitRatios::default().assign(10_000, 3).unwrap();
        let count = |s| labels.iter().filter(|&&l| l == s).count();
        assert_eq!(count(Split::Train), 6300);
        assert_eq!(count(Split::Val), 2700);
        assert_eq!(count(Split::Test), 1000);
        assert_eq!(labels, SplitRatios::default().assign(10_000, 3).unwrap());
    }

    #[test]
    fn standardizer_centers_train_rows() {
        let ds = tiny();
        let s = Standardizer::fit(&ds);
        let st = ds.standardized(&s).unwrap();
        let mean: f64 = (0..4).map(|i| st.z(i)[0]).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert_eq!(s.apply(&[0.25]), vec![0.0]);
    }
}
