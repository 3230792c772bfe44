//! Stage-wise training: Adam over the variational objective, one stage per
//! topological depth, with KL warm-up, early stopping on validation, and
//! checkpoints at stage boundaries.
//!
//! Freezing is structural: a stage's trainable set contains only the staged
//! modalities' parameter names, everything else binds to the tape as a
//! constant, so frozen tensors are bitwise untouched by construction.

use crate::autodiff::Tensor;
use crate::data::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState, RngStateRecord};
use crate::data::{split, validate_alignment, BatchCovariate, ModalityData};
use crate::error::{Error, Result};
use crate::model::forward::{forward, gather_inputs, ElboTerms, ForwardMode, ForwardOptions};
use crate::model::{Model, ParamStore};
use crate::rng;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs_per_stage: 750,
            batch_size: 128,
            warmup_epochs: 50,
            early_stop_patience: 20,
            early_stop_min_delta: 0.0,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed: it freezes the run in place,
        // which is useful for exercising the early-stopping path.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if self.epochs_per_stage == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs_per_stage and batch_size must be positive".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be positive".into()));
        }
        if self.early_stop_patience > self.epochs_per_stage {
            return Err(Error::Config(format!(
                "early_stop_patience {} exceeds epochs_per_stage {}",
                self.early_stop_patience, self.epochs_per_stage
            )));
        }
        if !(self.early_stop_min_delta >= 0.0 && self.early_stop_min_delta.is_finite()) {
            return Err(Error::Config("early_stop_min_delta must be finite and nonnegative".into()));
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adam accumulators. Moments exist only for parameters that have received
/// a gradient, so frozen parameters never acquire state.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    learning_rate: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Only parameters named in `grads` move.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name)?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!(
                        "{}: parameter {:?} vs gradient {:?}",
                        name,
                        param.shape(),
                        grad.shape()
                    ),
                });
            }
            let n = param.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let pv = param.values_mut();
            for i in 0..n {
                let g = grad.values()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pv[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                if !pv[i].is_finite() {
                    return Err(Error::Numerics { op: format!("adam_step on {}", name) });
                }
            }
        }
        Ok(())
    }
}

/// KL weight at a given epoch: linear ramp to 1 over `warmup_epochs`.
pub fn kl_warmup(epoch: usize, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        return 1.0;
    }
    (epoch as f64 / warmup_epochs as f64).min(1.0)
}

/// Stage s trains the modalities at topological depth s; every other
/// modality is frozen for that stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    stages: Vec<Vec<usize>>,
}

impl StagePlan {
    pub fn for_model(model: &Model) -> Self {
        Self {
            stages: model.graph.topo_stages().grouped(),
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn trained(&self, stage: usize) -> &[usize] {
        &self.stages[stage]
    }

    pub fn frozen(&self, stage: usize, n_modalities: usize) -> Vec<usize> {
        (0..n_modalities)
            .filter(|m| !self.stages[stage].contains(m))
            .collect()
    }
}

/// Names trained in one stage: the staged modalities' parameters, minus
/// their priors when prior training is disabled.
fn stage_trainable(model: &Model, plan: &StagePlan, stage: usize) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    for &m in plan.trained(stage) {
        for name in model.modality_param_names(m) {
            if !model.config.train_prior && name.contains(".prior.") {
                continue;
            }
            names.insert(name);
        }
    }
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub train_loss: f64,
    pub train_elbo: f64,
    pub val_elbo: f64,
    pub per_modality: Vec<ElboTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: usize,
    pub trained: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub best_epoch: usize,
    pub best_val_elbo: f64,
}

fn mean_val_elbo(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    cells: &[usize],
    batch_size: usize,
    n_samples: usize,
    noise_seed: u64,
) -> Result<f64> {
    let chunks: Vec<&[usize]> = cells.chunks(batch_size).collect();
    let empty = BTreeSet::new();
    let options = ForwardOptions::default();
    let sums: Vec<f64> = chunks
        .par_iter()
        .map(|chunk| -> Result<f64> {
            let inputs = gather_inputs(data, batch, chunk)?;
            let fp = forward(
                model,
                &inputs,
                ForwardMode::Stochastic { n_samples, noise_seed },
                &empty,
                &options,
            )?;
            Ok(fp.elbo().total() * chunk.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / cells.len() as f64)
}

/// Trains one stage. On a numerics failure the model is restored to the
/// last parameters that finished an epoch, and the error is returned.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    plan: &StagePlan,
    stage: usize,
    train_cells: &[usize],
    val_cells: &[usize],
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    let n_mods = model.graph.n_vertices();
    let trainable = stage_trainable(model, plan, stage);
    let staged: BTreeSet<usize> = plan.trained(stage).iter().copied().collect();
    let n_samples = model.config.n_mc_samples;
    let mut optimizer = OptimizerState::new(cfg.learning_rate);
    let mut shuffle_rng = rng::derive_rng(cfg.seed, rng::STREAM_SHUFFLE_BASE + stage as u64);
    // Validation noise is pinned per stage so epoch-to-epoch comparisons
    // share their random draws.
    let val_seed = rng::hashed_u64("val-noise", &[cfg.seed, stage as u64]);
    let options = ForwardOptions::default();

    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut last_finite = model.params.clone();
    let mut epochs_without_improvement = 0usize;
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs_per_stage {
        let beta = kl_warmup(epoch, cfg.warmup_epochs);
        let betas: Vec<f64> = (0..n_mods)
            .map(|m| if staged.contains(&m) { beta } else { 1.0 })
            .collect();

        let mut order = train_cells.to_vec();
        order.shuffle(&mut shuffle_rng);

        let epoch_result = (|| -> Result<(f64, f64, Vec<ElboTerms>)> {
            let mut loss_sum = 0.0;
            let mut elbo_sum = 0.0;
            let mut term_sums: Vec<ElboTerms> = (0..n_mods)
                .map(|m| ElboTerms {
                    name: model.graph.name(m).to_string(),
                    recon: 0.0,
                    kl_z: 0.0,
                    kl_c: 0.0,
                })
                .collect();
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let noise_seed = rng::hashed_u64(
                    "train-noise",
                    &[cfg.seed, stage as u64, epoch as u64, batch_idx as u64],
                );
                let inputs = gather_inputs(data, batch, chunk)?;
                let mut fp = forward(
                    model,
                    &inputs,
                    ForwardMode::Stochastic { n_samples, noise_seed },
                    &trainable,
                    &options,
                )?;
                let loss = fp.loss(&betas)?;
                let report = fp.elbo();
                let w = chunk.len() as f64;
                loss_sum += fp.scalar_value(loss) * w;
                elbo_sum += report.total() * w;
                for (acc, t) in term_sums.iter_mut().zip(&report.per_modality) {
                    acc.recon += t.recon * w;
                    acc.kl_z += t.kl_z * w;
                    acc.kl_c += t.kl_c * w;
                }
                let grads = fp.backward(loss)?;
                optimizer.step(&mut model.params, &grads)?;
            }
            let n = train_cells.len() as f64;
            for t in &mut term_sums {
                t.recon /= n;
                t.kl_z /= n;
                t.kl_c /= n;
            }
            Ok((loss_sum / n, elbo_sum / n, term_sums))
        })();

        let (train_loss, train_elbo, per_modality) = match epoch_result {
            Ok(v) => v,
            Err(e @ Error::Numerics { .. }) => {
                model.params = last_finite;
                return Err(e);
            }
            Err(e) => return Err(e),
        };

        let val_elbo = mean_val_elbo(
            model,
            data,
            batch,
            val_cells,
            cfg.batch_size,
            n_samples,
            val_seed,
        )?;
        last_finite = model.params.clone();
        records.push(EpochRecord {
            epoch,
            beta,
            train_loss,
            train_elbo,
            val_elbo,
            per_modality,
        });

        let improved = match &best {
            None => true,
            Some((b, _, _)) => val_elbo > b + cfg.early_stop_min_delta,
        };
        if improved {
            best = Some((val_elbo, model.params.clone(), epoch));
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_elbo, best_params, best_epoch) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(StageReport {
        stage,
        trained: plan
            .trained(stage)
            .iter()
            .map(|&m| model.graph.name(m).to_string())
            .collect(),
        epochs: records,
        stopped_early,
        best_epoch,
        best_val_elbo,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub reports: Vec<StageReport>,
    /// Stage index training resumed from (0 for a fresh run).
    pub resumed_from: usize,
}

fn checkpoint_dir(run_dir: &Path, completed: usize) -> PathBuf {
    run_dir.join(format!("checkpoint_stage{}", completed))
}

fn model_checkpoint(model: &Model, config_digest: &str, completed: usize, seed: u64) -> CheckpointState {
    CheckpointState {
        graph_vertices: model.graph.vertex_names().to_vec(),
        graph_edges: model.graph.edges().to_vec(),
        config_digest: config_digest.to_string(),
        completed_stage: completed,
        rng: RngStateRecord {
            seed,
            stream: rng::STREAM_SHUFFLE_BASE + completed as u64,
            word_pos: 0,
        },
        tensors: model.params.to_map(),
    }
}

/// Restores model parameters from the most advanced stage checkpoint under
/// `run_dir`. Returns the number of completed stages.
fn restore_latest(model: &mut Model, run_dir: &Path, config_digest: &str, n_stages: usize) -> Result<usize> {
    let mut latest: Option<(usize, PathBuf)> = None;
    for completed in 1..=n_stages {
        let dir = checkpoint_dir(run_dir, completed);
        if dir.join("manifest.json").exists() {
            latest = Some((completed, dir));
        }
    }
    let Some((completed, dir)) = latest else {
        return Ok(0);
    };
    let state = load_checkpoint(&dir)?;
    if state.graph_vertices != model.graph.vertex_names() {
        return Err(Error::Contract(format!(
            "checkpoint was trained on modalities {:?}, run declares {:?}",
            state.graph_vertices,
            model.graph.vertex_names()
        )));
    }
    if state.graph_edges != model.graph.edges() {
        return Err(Error::Contract("checkpoint graph edges differ from the run's graph".into()));
    }
    if state.config_digest != config_digest {
        return Err(Error::Contract(
            "checkpoint was produced under a different resolved configuration".into(),
        ));
    }
    if state.completed_stage != completed {
        return Err(Error::Corruption(format!(
            "checkpoint directory {} claims completed stage {}",
            dir.display(),
            state.completed_stage
        )));
    }
    let restored = Model::from_params(
        model.graph.clone(),
        model.config.clone(),
        &model.networks.iter().map(|n| n.dim_x).collect::<Vec<_>>(),
        model.batch_width,
        ParamStore::from_map(state.tensors),
    )?;
    model.params = restored.params;
    Ok(completed)
}

/// Writes one stage's loss curves as CSV.
pub fn write_stage_report_csv(path: &Path, report: &StageReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    let mut header = vec![
        "epoch".to_string(),
        "beta".to_string(),
        "train_loss".to_string(),
        "train_elbo".to_string(),
        "val_elbo".to_string(),
    ];
    if let Some(first) = report.epochs.first() {
        for t in &first.per_modality {
            header.push(format!("{}_recon", t.name));
            header.push(format!("{}_kl_z", t.name));
            header.push(format!("{}_kl_c", t.name));
        }
    }
    w.write_record(&header).map_err(csv_io)?;
    for r in &report.epochs {
        let mut row = vec![
            r.epoch.to_string(),
            format!("{}", r.beta),
            format!("{}", r.train_loss),
            format!("{}", r.train_elbo),
            format!("{}", r.val_elbo),
        ];
        for t in &r.per_modality {
            row.push(format!("{}", t.recon));
            row.push(format!("{}", t.kl_z));
            row.push(format!("{}", t.kl_c));
        }
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Contract(format!("csv write failed: {}", e))
}

/// Runs every remaining stage in topological order. With a run directory,
/// each completed stage is checkpointed (plus `checkpoint_final` at the
/// end) and per-stage loss curves are written; `resume` restarts from the
/// most advanced stage checkpoint found there. On a numerics failure the
/// last finite parameters are saved under `checkpoint_abort`.
pub fn train_sequential(
    model: &mut Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    config_digest: &str,
    resume: bool,
) -> Result<TrainOutput> {
    cfg.validate()?;
    validate_alignment(data)?;
    let n_cells = data[0].n_cells();
    if batch.width() > 0 && batch.n_cells() != n_cells {
        return Err(Error::DimensionMismatch(format!(
            "batch covariate covers {} cells, data has {}",
            batch.n_cells(),
            n_cells
        )));
    }
    for d in data {
        d.validate_domain()?;
    }

    let plan = StagePlan::for_model(model);
    let start_stage = match (resume, run_dir) {
        (true, Some(dir)) => restore_latest(model, dir, config_digest, plan.n_stages())?,
        (true, None) => {
            return Err(Error::Contract("resume requested without a run directory".into()))
        }
        _ => 0,
    };

    let (train_cells, val_cells) = split(n_cells, 1.0 - cfg.validation_fraction, cfg.seed)?;
    let mut reports = Vec::new();
    for stage in start_stage..plan.n_stages() {
        let report = match train_stage(
            model, data, batch, &plan, stage, &train_cells, &val_cells, cfg,
        ) {
            Ok(r) => r,
            Err(e @ Error::Numerics { .. }) => {
                if let Some(dir) = run_dir {
                    save_checkpoint(
                        &dir.join("checkpoint_abort"),
                        &model_checkpoint(model, config_digest, stage, cfg.seed),
                    )?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let Some(dir) = run_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(
                &checkpoint_dir(dir, stage + 1),
                &model_checkpoint(model, config_digest, stage + 1, cfg.seed),
            )?;
            write_stage_report_csv(&dir.join(format!("stage{}_report.csv", stage + 1)), &report)?;
        }
        reports.push(report);
    }
    if let Some(dir) = run_dir {
        save_checkpoint(
            &dir.join("checkpoint_final"),
            &model_checkpoint(model, config_digest, plan.n_stages(), cfg.seed),
        )?;
    }
    Ok(TrainOutput {
        reports,
        resumed_from: start_stage,
    })
}
