//! Data ingestion and preprocessing.
//!
//! Observation matrices arrive as MatrixMarket coordinate files or dense CSV,
//! are held sparse (cells are rows), and pass through a logged preprocessing
//! pipeline so any processed matrix can be reproduced from its raw input.

pub mod checkpoint;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Compressed sparse row matrix of counts; rows are cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets. Zero values are dropped;
    /// duplicate coordinates are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Contract(format!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    r, c, n_rows, n_cols
                )));
            }
        }
        triplets.retain(|&(_, _, v)| v != 0.0);
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        for w in triplets.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::Contract(format!(
                    "duplicate entry at ({}, {})",
                    w[0].0, w[0].1
                )));
            }
        }
        let mut indptr = vec![0usize; n_rows + 1];
        for &(r, _, _) in &triplets {
            indptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices: triplets.iter().map(|&(_, c, _)| c).collect(),
            values: triplets.iter().map(|&(_, _, v)| v).collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn iter_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        self.indices[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Applies `f` to every stored value, keeping the sparsity pattern.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v = f(*v);
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|i| self.iter_row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_cols];
        for (c, v) in self.iter_row(i) {
            row[c] = v;
        }
        row
    }

    /// Densifies the selected rows into a [len, n_cols] tensor.
    pub fn dense_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let mut out = vec![0.0; rows.len() * self.n_cols];
        for (pos, &r) in rows.iter().enumerate() {
            if r >= self.n_rows {
                return Err(Error::Contract(format!(
                    "row {} out of range for {} rows",
                    r, self.n_rows
                )));
            }
            for (c, v) in self.iter_row(r) {
                out[pos * self.n_cols + c] = v;
            }
        }
        Tensor::new(vec![rows.len(), self.n_cols], out)
    }

    /// Keeps the given columns, renumbered in the order supplied.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            if old >= self.n_cols {
                return Err(Error::Contract(format!(
                    "column {} out of range for {} columns",
                    old, self.n_cols
                )));
            }
            remap[old] = new;
        }
        let mut triplets = Vec::new();
        for r in 0..self.n_rows {
            for (c, v) in self.iter_row(r) {
                if remap[c] != usize::MAX {
                    triplets.push((r, remap[c], v));
                }
            }
        }
        Self::from_triplets(self.n_rows, cols.len(), triplets)
    }
}

/// Which likelihood a modality's decoder emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Bernoulli,
    Zinb,
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Bernoulli => write!(f, "bernoulli"),
            Self::Zinb => write!(f, "zinb"),
        }
    }
}

/// One logged preprocessing step; replaying the log on raw data reproduces
/// the processed matrix exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PreprocessStep {
    Binarize,
    TopVariable { n: usize },
}

/// One modality's observations plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityData {
    pub name: String,
    pub matrix: SparseMatrix,
    pub feature_names: Vec<String>,
    pub cell_ids: Vec<String>,
    pub distribution_kind: DistributionKind,
    pub preprocessing_log: Vec<PreprocessStep>,
}

impl ModalityData {
    pub fn new(
        name: String,
        matrix: SparseMatrix,
        feature_names: Vec<String>,
        cell_ids: Vec<String>,
        distribution_kind: DistributionKind,
    ) -> Result<Self> {
        if feature_names.len() != matrix.n_cols() {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} feature names for {} columns",
                name,
                feature_names.len(),
                matrix.n_cols()
            )));
        }
        if cell_ids.len() != matrix.n_rows() {
            return Err(Error::DimensionMismatch(format!(
                "{}: {} cell ids for {} rows",
                name,
                cell_ids.len(),
                matrix.n_rows()
            )));
        }
        Ok(Self {
            name,
            matrix,
            feature_names,
            cell_ids,
            distribution_kind,
            preprocessing_log: Vec::new(),
        })
    }

    pub fn n_cells(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn n_features(&self) -> usize {
        self.matrix.n_cols()
    }

    /// Checks that stored values fit the declared likelihood.
    pub fn validate_domain(&self) -> Result<()> {
        match self.distribution_kind {
            DistributionKind::Bernoulli => {
                if self.matrix.values().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Domain(format!(
                        "{}: bernoulli modality contains values outside {{0,1}} (binarize it?)",
                        self.name
                    )));
                }
            }
            DistributionKind::Zinb => {
                if self.matrix.values().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(Error::Domain(format!(
                        "{}: zinb modality contains non-count values",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatrixFormat {
    MatrixMarket,
    DenseCsv,
}

/// Parses an observation matrix. MatrixMarket files carry no names, so
/// features and cells get positional names unless the caller overrides them;
/// CSV files name features in the header and cells in the first column.
pub fn load_matrix(
    path: &Path,
    format: MatrixFormat,
    name: &str,
    kind: DistributionKind,
) -> Result<ModalityData> {
    match format {
        MatrixFormat::MatrixMarket => load_matrix_market(path, name, kind),
        MatrixFormat::DenseCsv => load_dense_csv(path, name, kind),
    }
}

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

fn load_matrix_market(path: &Path, name: &str, kind: DistributionKind) -> Result<ModalityData> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header = header?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() < 5
        || !tokens[0].starts_with("%%MatrixMarket")
        || tokens[1] != "matrix"
        || tokens[2] != "coordinate"
        || tokens[3] != "integer"
        || tokens[4] != "general"
    {
        return Err(parse_err(
            path,
            1,
            "expected header '%%MatrixMarket matrix coordinate integer general'",
        ));
    }

    let mut dims: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut entry_lines: Vec<usize> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if dims.is_none() {
            if fields.len() != 3 {
                return Err(parse_err(path, lineno, "size line must be 'rows cols nnz'"));
            }
            let parsed: Vec<usize> = fields
                .iter()
                .map(|f| {
                    f.parse::<usize>()
                        .map_err(|_| parse_err(path, lineno, format!("bad size field '{}'", f)))
                })
                .collect::<Result<_>>()?;
            dims = Some((parsed[0], parsed[1], parsed[2]));
            continue;
        }
        let (n_rows, n_cols, nnz) = dims.expect("dims parsed");
        if entries.len() == nnz {
            return Err(parse_err(
                path,
                lineno,
                format!("more than the declared {} entries", nnz),
            ));
        }
        if fields.len() != 3 {
            return Err(parse_err(path, lineno, "entry must be 'row col value'"));
        }
        let r: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad row index '{}'", fields[0])))?;
        let c: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad column index '{}'", fields[1])))?;
        let v: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad integer value '{}'", fields[2])))?;
        if r == 0 || c == 0 || r > n_rows || c > n_cols {
            return Err(parse_err(
                path,
                lineno,
                format!("entry ({}, {}) outside 1..{} x 1..{}", r, c, n_rows, n_cols),
            ));
        }
        if v < 0 {
            return Err(parse_err(path, lineno, format!("negative count {}", v)));
        }
        entries.push((r - 1, c - 1, v as f64));
        entry_lines.push(lineno);
    }

    let (n_rows, n_cols, nnz) = dims.ok_or_else(|| parse_err(path, 1, "missing size line"))?;
    if entries.len() != nnz {
        return Err(parse_err(
            path,
            0,
            format!("header declares {} entries, body has {}", nnz, entries.len()),
        ));
    }
    {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.sort_unstable_by_key(|&i| (entries[i].0, entries[i].1));
        for w in order.windows(2) {
            let (a, b) = (entries[w[0]], entries[w[1]]);
            if a.0 == b.0 && a.1 == b.1 {
                return Err(parse_err(
                    path,
                    entry_lines[w[1]],
                    format!("duplicate entry at ({}, {})", a.0 + 1, a.1 + 1),
                ));
            }
        }
    }
    let matrix = SparseMatrix::from_triplets(n_rows, n_cols, entries)?;
    let feature_names = (0..n_cols).map(|j| format!("{}_f{}", name, j)).collect();
    let cell_ids = (0..n_rows).map(|i| format!("cell_{}", i)).collect();
    ModalityData::new(name.to_string(), matrix, feature_names, cell_ids, kind)
}

fn load_dense_csv(path: &Path, name: &str, kind: DistributionKind) -> Result<ModalityData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(parse_err(path, 1, "need an id column plus at least one feature"));
    }
    let feature_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let n_cols = feature_names.len();

    let mut cell_ids = Vec::new();
    let mut triplets = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, row_idx + 2, e.to_string()))?;
        let lineno = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row_idx + 2);
        if record.len() != n_cols + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", n_cols + 1, record.len()),
            ));
        }
        cell_ids.push(record[0].to_string());
        for j in 0..n_cols {
            let field = &record[j + 1];
            let v: i64 = field
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad integer value '{}'", field)))?;
            if v < 0 {
                return Err(parse_err(path, lineno, format!("negative count {}", v)));
            }
            if v != 0 {
                triplets.push((row_idx, j, v as f64));
            }
        }
    }
    if cell_ids.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let matrix = SparseMatrix::from_triplets(cell_ids.len(), n_cols, triplets)?;
    ModalityData::new(name.to_string(), matrix, feature_names, cell_ids, kind)
}

/// Thresholds every stored count to one.
pub fn binarize(d: &ModalityData) -> Result<ModalityData> {
    if d.matrix.values().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(format!("{}: cannot binarize negative values", d.name)));
    }
    let mut out = d.clone();
    out.matrix = d.matrix.map_values(|_| 1.0);
    out.preprocessing_log.push(PreprocessStep::Binarize);
    Ok(out)
}

/// Keeps the `n` features with the largest variance of depth-normalized,
/// log1p-transformed values. Depth normalization scales each cell to the
/// median total count; ties rank earlier features first. Selected features
/// keep their original relative order.
pub fn select_top_variable(d: &ModalityData, n: usize) -> Result<ModalityData> {
    let f = d.n_features();
    if n > f {
        return Err(Error::Config(format!(
            "{}: cannot keep {} of {} features",
            d.name, n, f
        )));
    }
    let variances = log1p_normalized_variances(&d.matrix);
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        variances[b]
            .partial_cmp(&variances[a])
            .expect("finite variances")
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order[..n].to_vec();
    keep.sort_unstable();

    let mut out = d.clone();
    out.matrix = d.matrix.select_columns(&keep)?;
    out.feature_names = keep.iter().map(|&j| d.feature_names[j].clone()).collect();
    out.preprocessing_log.push(PreprocessStep::TopVariable { n });
    Ok(out)
}

/// Population variance per feature of log1p(value * median_depth / cell_depth).
fn log1p_normalized_variances(m: &SparseMatrix) -> Vec<f64> {
    let depths = m.row_sums();
    let median = median_of(&depths);
    let n = m.n_rows() as f64;
    let mut sum = vec![0.0; m.n_cols()];
    let mut sumsq = vec![0.0; m.n_cols()];
    for i in 0..m.n_rows() {
        let scale = if depths[i] > 0.0 { median / depths[i] } else { 0.0 };
        for (c, v) in m.iter_row(i) {
            let t = (v * scale).ln_1p();
            sum[c] += t;
            sumsq[c] += t * t;
        }
    }
    (0..m.n_cols())
        .map(|c| {
            let mean = sum[c] / n;
            (sumsq[c] / n - mean * mean).max(0.0)
        })
        .collect()
}

fn median_of(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Reapplies a preprocessing log to raw data.
pub fn replay(raw: &ModalityData, log: &[PreprocessStep]) -> Result<ModalityData> {
    let mut current = raw.clone();
    for step in log {
        current = match step {
            PreprocessStep::Binarize => binarize(&current)?,
            PreprocessStep::TopVariable { n } => select_top_variable(&current, *n)?,
        };
    }
    Ok(current)
}

/// One-hot batch design matrix fed to every decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCovariate {
    pub categories: Vec<String>,
    pub one_hot: Tensor,
}

impl BatchCovariate {
    /// Zero-width covariate: decoders see the latent alone.
    pub fn none(n_cells: usize) -> Self {
        Self {
            categories: Vec::new(),
            one_hot: Tensor::zeros(vec![n_cells, 0]),
        }
    }

    pub fn width(&self) -> usize {
        self.categories.len()
    }

    pub fn n_cells(&self) -> usize {
        self.one_hot.shape()[0]
    }

    /// Rows for the given cells as a dense tensor.
    pub fn rows(&self, cells: &[usize]) -> Tensor {
        let w = self.width();
        let mut out = vec![0.0; cells.len() * w];
        for (pos, &c) in cells.iter().enumerate() {
            out[pos * w..(pos + 1) * w]
                .copy_from_slice(&self.one_hot.values()[c * w..(c + 1) * w]);
        }
        Tensor::new(vec![cells.len(), w], out).expect("shape by construction")
    }

    /// Mean of the one-hot rows over the given cells (a soft assignment).
    pub fn mean_row(&self, cells: &[usize]) -> Vec<f64> {
        let w = self.width();
        let mut out = vec![0.0; w];
        for &c in cells {
            for j in 0..w {
                out[j] += self.one_hot.values()[c * w + j];
            }
        }
        for v in &mut out {
            *v /= cells.len() as f64;
        }
        out
    }
}

/// One-hot encodes labels; categories ordered by first appearance.
pub fn encode_batch(labels: &[String]) -> BatchCovariate {
    let mut categories: Vec<String> = Vec::new();
    let mut codes = Vec::with_capacity(labels.len());
    for l in labels {
        let code = match categories.iter().position(|c| c == l) {
            Some(i) => i,
            None => {
                categories.push(l.clone());
                categories.len() - 1
            }
        };
        codes.push(code);
    }
    let w = categories.len();
    let mut one_hot = vec![0.0; labels.len() * w];
    for (i, &c) in codes.iter().enumerate() {
        one_hot[i * w + c] = 1.0;
    }
    BatchCovariate {
        categories,
        one_hot: Tensor::new(vec![labels.len(), w], one_hot).expect("shape by construction"),
    }
}

/// Deterministic train/validation split. Both sides are returned sorted and
/// are disjoint and exhaustive; the train side gets round(fraction * n)
/// cells, clamped so neither side is empty.
pub fn split(n_cells: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must be in (0, 1), got {}",
            fraction
        )));
    }
    if n_cells < 2 {
        return Err(Error::Config("cannot split fewer than 2 cells".into()));
    }
    let mut ids: Vec<usize> = (0..n_cells).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((fraction * n_cells as f64).round() as usize).clamp(1, n_cells - 1);
    let mut train = ids[..n_train].to_vec();
    let mut val = ids[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Cells must line up across modalities: same ids, same order.
pub fn validate_alignment(modalities: &[ModalityData]) -> Result<()> {
    let Some(first) = modalities.first() else {
        return Err(Error::Contract("dataset has no modalities".into()));
    };
    for m in &modalities[1..] {
        if m.cell_ids != first.cell_ids {
            return Err(Error::DimensionMismatch(format!(
                "cell ids of {} do not match {}",
                m.name, first.name
            )));
        }
    }
    Ok(())
}
