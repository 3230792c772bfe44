//! Declarative run configuration: one TOML file describes the dataset, the
//! modality graph, the model, and the training schedule. Resolution turns it
//! into validated engine types and a digest that ties checkpoints to the
//! configuration that produced them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    binarize, encode_batch, load_matrix, select_top_variable, validate_alignment, BatchCovariate,
    DistributionKind, MatrixFormat, ModalityData,
};
use crate::error::{Error, Result};
use crate::graph::ModalityGraph;
use crate::model::{IncorporateMode, ModalityModelConfig, ModelConfig};
use crate::train::TrainConfig;

/// Neighborhood size used by the enrichment command when none is given.
pub const DEFAULT_ENRICHMENT_K: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub matrix: PathBuf,
    pub format: MatrixFormat,
    pub likelihood: DistributionKind,
    #[serde(default)]
    pub binarize: bool,
    #[serde(default)]
    pub top_n_features: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphBlock {
    /// (parent, child) modality names.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

fn default_dim_z() -> usize {
    20
}

fn default_mc_samples() -> usize {
    1
}

fn default_incorporate() -> IncorporateMode {
    IncorporateMode::Ancestors
}

fn default_hidden_base() -> usize {
    128
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "default_dim_z")]
    pub dim_z: usize,
    /// Mixture components per modality; defaults to 2*dim_z + 1.
    #[serde(default)]
    pub k_components: Option<usize>,
    #[serde(default = "default_mc_samples")]
    pub n_mc_samples: usize,
    #[serde(default = "default_incorporate")]
    pub incorporate_mode: IncorporateMode,
    #[serde(default = "default_hidden_base")]
    pub hidden_base: usize,
    #[serde(default = "default_true")]
    pub train_prior: bool,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            dim_z: default_dim_z(),
            k_components: None,
            n_mc_samples: default_mc_samples(),
            incorporate_mode: default_incorporate(),
            hidden_base: default_hidden_base(),
            train_prior: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub learning_rate: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub validation_fraction: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs_per_stage: t.epochs_per_stage,
            batch_size: t.batch_size,
            warmup_epochs: t.warmup_epochs,
            early_stop_patience: t.early_stop_patience,
            early_stop_min_delta: t.early_stop_min_delta,
            validation_fraction: t.validation_fraction,
        }
    }
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchBlock {
    /// CSV with a `cell_id` column and the label column below.
    pub path: PathBuf,
    #[serde(default = "default_label_column")]
    pub column: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: Vec<DatasetEntry>,
    #[serde(default)]
    pub graph: Option<GraphBlock>,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub batch: Option<BatchBlock>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map(|s| line_of(&text, s.start)).unwrap_or(0),
            detail: e.message().to_string(),
        })
    }
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// A run configuration after every file has been read and every engine type
/// validated; all commands work from this.
pub struct ResolvedRun {
    pub graph: ModalityGraph,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub modalities: Vec<ModalityData>,
    pub batch: BatchCovariate,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub digest: String,
}

impl ResolvedRun {
    /// Modality indices grouped into training stages by graph depth.
    pub fn stages(&self) -> Vec<Vec<usize>> {
        self.graph.topo_stages().grouped()
    }
}

/// Fields that define compatibility between a checkpoint and a run. Hashed
/// in declaration order through canonical JSON.
#[derive(Serialize)]
struct DigestView<'a> {
    vertices: &'a [String],
    edges: &'a [(usize, usize)],
    dim_x: Vec<usize>,
    likelihoods: Vec<String>,
    preprocessing: Vec<String>,
    dim_z: usize,
    k_components: usize,
    n_mc_samples: usize,
    incorporate_mode: &'a IncorporateMode,
    hidden_base: usize,
    train_prior: bool,
    train: &'a TrainConfig,
    batch_width: usize,
    seed: u64,
}

pub fn resolve(config: &RunConfig, base_dir: &Path) -> Result<ResolvedRun> {
    if config.dataset.is_empty() {
        return Err(Error::Config("dataset block lists no modalities".into()));
    }
    let names: Vec<String> = config.dataset.iter().map(|d| d.name.clone()).collect();
    let edges = config.graph.as_ref().map(|g| g.edges.clone()).unwrap_or_default();
    let graph = ModalityGraph::new(names, &edges)?;

    let mut modalities = Vec::with_capacity(config.dataset.len());
    for entry in &config.dataset {
        let path = abs(base_dir, &entry.matrix);
        let mut data = load_matrix(&path, entry.format, &entry.name, entry.likelihood)?;
        if entry.binarize {
            data = binarize(&data)?;
        }
        if let Some(n) = entry.top_n_features {
            data = select_top_variable(&data, n)?;
        }
        data.validate_domain()?;
        modalities.push(data);
    }
    validate_alignment(&modalities)?;

    let dim_z = config.model.dim_z;
    let k_components = config.model.k_components.unwrap_or(2 * dim_z + 1);
    let model_config = ModelConfig {
        modalities: config
            .dataset
            .iter()
            .map(|d| ModalityModelConfig {
                dim_z,
                k_components,
                likelihood: d.likelihood,
            })
            .collect(),
        n_mc_samples: config.model.n_mc_samples,
        incorporate_mode: config.model.incorporate_mode,
        hidden_base: config.model.hidden_base,
        train_prior: config.model.train_prior,
    };
    model_config.validate(&graph)?;

    let train_config = TrainConfig {
        learning_rate: config.train.learning_rate,
        epochs_per_stage: config.train.epochs_per_stage,
        batch_size: config.train.batch_size,
        warmup_epochs: config.train.warmup_epochs,
        early_stop_patience: config.train.early_stop_patience,
        early_stop_min_delta: config.train.early_stop_min_delta,
        validation_fraction: config.train.validation_fraction,
        seed: config.seed,
    };
    train_config.validate()?;

    let batch = match &config.batch {
        None => BatchCovariate::none(modalities[0].n_cells()),
        Some(block) => {
            let path = abs(base_dir, &block.path);
            let labels = read_label_file(&path, &block.column)?;
            let ordered = labels_in_cell_order(&labels, &modalities[0].cell_ids, &path)?;
            encode_batch(&ordered)
        }
    };

    let view = DigestView {
        vertices: graph.vertex_names(),
        edges: graph.edges(),
        dim_x: modalities.iter().map(|m| m.n_features()).collect(),
        likelihoods: modalities.iter().map(|m| m.distribution_kind.to_string()).collect(),
        preprocessing: modalities
            .iter()
            .map(|m| format!("{:?}", m.preprocessing_log))
            .collect(),
        dim_z,
        k_components,
        n_mc_samples: model_config.n_mc_samples,
        incorporate_mode: &model_config.incorporate_mode,
        hidden_base: model_config.hidden_base,
        train_prior: model_config.train_prior,
        train: &train_config,
        batch_width: batch.width(),
        seed: config.seed,
    };
    let canonical = serde_json::to_string(&view)?;
    let digest = hex(&Sha256::digest(canonical.as_bytes()));

    Ok(ResolvedRun {
        graph,
        model_config,
        train_config,
        modalities,
        batch,
        seed: config.seed,
        output_dir: abs(base_dir, &config.output_dir),
        digest,
    })
}

fn abs(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Reads a CSV of per-cell labels: a `cell_id` column plus the named label
/// column, any row order.
pub fn read_label_file(path: &Path, column: &str) -> Result<BTreeMap<String, String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: e.to_string(),
        })?
        .clone();
    let id_idx = headers.iter().position(|h| h == "cell_id").ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        detail: "missing cell_id column".into(),
    })?;
    let label_idx = headers.iter().position(|h| h == column).ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        detail: format!("missing label column {:?}", column),
    })?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 2,
            detail: e.to_string(),
        })?;
        let id = record.get(id_idx).unwrap_or("").to_string();
        let label = record.get(label_idx).unwrap_or("").to_string();
        if id.is_empty() || label.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                detail: "empty cell_id or label".into(),
            });
        }
        if out.insert(id.clone(), label).is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 2,
                detail: format!("cell_id {:?} appears twice", id),
            });
        }
    }
    Ok(out)
}

/// Orders a label map along the dataset's cells, requiring full coverage.
pub fn labels_in_cell_order(
    labels: &BTreeMap<String, String>,
    cell_ids: &[String],
    path: &Path,
) -> Result<Vec<String>> {
    cell_ids
        .iter()
        .map(|id| {
            labels.get(id).cloned().ok_or_else(|| {
                Error::Config(format!(
                    "{} has no label for cell {:?}",
                    path.display(),
                    id
                ))
            })
        })
        .collect()
}
