//! Command-line pipeline: every subcommand is a pure function of the run
//! configuration, an optional checkpoint, and explicit seeds, so reruns
//! reproduce output files bitwise.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    bayes_factor, contribution_score, enrichment_score, interpolate, CellGroup, SignalStatistic,
};
use crate::config::{
    self, labels_in_cell_order, read_label_file, ResolvedRun, RunConfig, DEFAULT_ENRICHMENT_K,
};
use crate::data::checkpoint::{load_checkpoint, CheckpointState};
use crate::error::{Error, Result};
use crate::model::generate::generate;
use crate::model::{
    forward, gather_inputs, ForwardMode, ForwardOptions, ForwardState, IncorporateMode, Model,
    ParamStore,
};
use crate::train::train_sequential;

pub const THREADS_ENV_VAR: &str = "DAGVAE_THREADS";

#[derive(Parser)]
#[command(
    name = "dagvae",
    about = "Train and interrogate DAG-conditioned hierarchical variational autoencoders",
    version
)]
pub struct Cli {
    /// Worker thread cap; falls back to DAGVAE_THREADS, then all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct GroupArgs {
    /// Label CSV (cell_id plus a label column) and the two label values to
    /// compare.
    #[arg(long, required = true, num_args = 3, value_names = ["FILE", "VALUE_I", "VALUE_J"])]
    pub groups: Vec<String>,
    /// Column of the label file holding the group labels.
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

#[derive(Copy, Clone, ValueEnum)]
pub enum StatisticArg {
    DecodedMean,
    LogLikelihood,
}

impl From<StatisticArg> for SignalStatistic {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::DecodedMean => SignalStatistic::DecodedMean,
            StatisticArg::LogLikelihood => SignalStatistic::LogLikelihood,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Check the configuration and data headers without training.
    Validate { config: PathBuf },
    /// Run the staged training schedule and write checkpoints.
    Train {
        config: PathBuf,
        /// Continue from the checkpoints in this run directory.
        #[arg(long, value_name = "RUN_DIR")]
        resume: Option<PathBuf>,
    },
    /// Sample cells from the generative model.
    Generate {
        config: PathBuf,
        #[arg(long)]
        cells: usize,
        /// Seed for the generative draw; defaults to the run seed.
        #[arg(long)]
        gen_seed: Option<u64>,
        /// Checkpoint to sample from; a fresh model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-modality posterior means and cluster assignments.
    Latents {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the per-modality mixture assignments.
    Cluster {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-feature Bayes factors between two cell groups.
    Diff {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        modality: String,
        #[command(flatten)]
        groups: GroupArgs,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, value_enum, default_value_t = StatisticArg::DecodedMean)]
        statistic: StatisticArg,
        /// Seed for pair sampling; defaults to the run seed.
        #[arg(long)]
        analysis_seed: Option<u64>,
    },
    /// Contribution of source modalities to a target modality's features.
    Contrib {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        target: String,
        /// Restrict to one source modality; all modalities when absent.
        #[arg(long)]
        source: Option<String>,
        #[command(flatten)]
        groups: GroupArgs,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, value_enum, default_value_t = StatisticArg::DecodedMean)]
        statistic: StatisticArg,
        #[arg(long)]
        analysis_seed: Option<u64>,
    },
    /// Decode along the line between two groups' latent centroids.
    Interpolate {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        groups: GroupArgs,
        #[arg(long, default_value_t = 11)]
        steps: usize,
        /// Comma-separated modalities to move; all when absent.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
    },
    /// Per-cell kNN label enrichment in a modality's latent space.
    Enrichment {
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Label CSV (cell_id plus a label column).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long, default_value_t = DEFAULT_ENRICHMENT_K)]
        k: usize,
        /// Latent space to score; required with several modalities.
        #[arg(long)]
        modality: Option<String>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var(THREADS_ENV_VAR)
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // A later global init (e.g. a second call in-process) keeps the
        // first pool; that is fine for the CLI's single dispatch.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Generate {
            config,
            cells,
            gen_seed,
            checkpoint,
        } => cmd_generate(&config, cells, gen_seed, checkpoint.as_deref()),
        Command::Latents { config, checkpoint } => cmd_latents(&config, checkpoint.as_deref()),
        Command::Cluster { config, checkpoint } => cmd_cluster(&config, checkpoint.as_deref()),
        Command::Diff {
            config,
            checkpoint,
            modality,
            groups,
            pairs,
            statistic,
            analysis_seed,
        } => cmd_diff(
            &config,
            checkpoint.as_deref(),
            &modality,
            &groups,
            pairs,
            statistic.into(),
            analysis_seed,
        ),
        Command::Contrib {
            config,
            checkpoint,
            target,
            source,
            groups,
            pairs,
            statistic,
            analysis_seed,
        } => cmd_contrib(
            &config,
            checkpoint.as_deref(),
            &target,
            source.as_deref(),
            &groups,
            pairs,
            statistic.into(),
            analysis_seed,
        ),
        Command::Interpolate {
            config,
            checkpoint,
            groups,
            steps,
            modalities,
        } => cmd_interpolate(&config, checkpoint.as_deref(), &groups, steps, modalities),
        Command::Enrichment {
            config,
            checkpoint,
            labels,
            label_column,
            k,
            modality,
        } => cmd_enrichment(
            &config,
            checkpoint.as_deref(),
            &labels,
            &label_column,
            k,
            modality.as_deref(),
        ),
    }
}

fn load_run(config_path: &Path) -> Result<ResolvedRun> {
    let cfg = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    config::resolve(&cfg, base).map_err(|e| match e {
        parse @ Error::Parse { .. } => parse,
        Error::Config(msg) => Error::Config(format!("{}: {}", config_path.display(), msg)),
        other => Error::Config(format!("{}: {}", config_path.display(), other)),
    })
}

fn dim_x(run: &ResolvedRun) -> Vec<usize> {
    run.modalities.iter().map(|m| m.n_features()).collect()
}

fn fresh_model(run: &ResolvedRun) -> Result<Model> {
    Model::new(
        run.graph.clone(),
        run.model_config.clone(),
        &dim_x(run),
        run.batch.width(),
        run.seed,
    )
}

/// Restores a model from a checkpoint directory, refusing checkpoints that
/// were produced under a different resolved configuration.
fn model_from_checkpoint(run: &ResolvedRun, dir: &Path) -> Result<(Model, CheckpointState)> {
    let state = load_checkpoint(dir)?;
    if state.graph_vertices != run.graph.vertex_names() {
        return Err(Error::Contract(format!(
            "checkpoint {} was trained on modalities {:?}, run declares {:?}",
            dir.display(),
            state.graph_vertices,
            run.graph.vertex_names()
        )));
    }
    if state.graph_edges != run.graph.edges() {
        return Err(Error::Contract(format!(
            "checkpoint {} graph edges differ from the run's graph",
            dir.display()
        )));
    }
    if state.config_digest != run.digest {
        return Err(Error::Contract(format!(
            "checkpoint {} was produced under a different resolved configuration",
            dir.display()
        )));
    }
    let model = Model::from_params(
        run.graph.clone(),
        run.model_config.clone(),
        &dim_x(run),
        run.batch.width(),
        ParamStore::from_map(state.tensors.clone()),
    )?;
    Ok((model, state))
}

fn default_checkpoint(run: &ResolvedRun, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.output_dir.join("checkpoint_final"))
}

fn incorporate_name(mode: IncorporateMode) -> &'static str {
    match mode {
        IncorporateMode::Ancestors => "ancestors",
        IncorporateMode::ParentsOnly => "parents-only",
    }
}

fn cmd_validate(config_path: &Path) -> Result<()> {
    let run = load_run(config_path)?;
    let mods: Vec<String> = run
        .modalities
        .iter()
        .map(|m| format!("{} ({}, {} features)", m.name, m.distribution_kind, m.n_features()))
        .collect();
    println!("modalities: {}", mods.join("; "));
    println!("cells: {}", run.modalities[0].n_cells());
    let stages: Vec<String> = run
        .stages()
        .iter()
        .enumerate()
        .map(|(i, group)| {
            let names: Vec<&str> = group.iter().map(|&m| run.graph.name(m)).collect();
            format!("stage {}: {}", i + 1, names.join(", "))
        })
        .collect();
    println!("{}", stages.join("; "));
    let mc = &run.model_config;
    println!("dim_z: {}", mc.modalities[0].dim_z);
    println!("k_components: {}", mc.modalities[0].k_components);
    println!("n_mc_samples: {}", mc.n_mc_samples);
    println!("incorporate_mode: {}", incorporate_name(mc.incorporate_mode));
    println!("hidden_base: {}", mc.hidden_base);
    println!("train_prior: {}", mc.train_prior);
    let t = &run.train_config;
    println!("learning_rate: {}", t.learning_rate);
    println!("epochs_per_stage: {}", t.epochs_per_stage);
    println!("batch_size: {}", t.batch_size);
    println!("warmup_epochs: {}", t.warmup_epochs);
    println!("early_stop_patience: {}", t.early_stop_patience);
    println!("early_stop_min_delta: {}", t.early_stop_min_delta);
    println!("validation_fraction: {}", t.validation_fraction);
    println!("enrichment_k: {}", DEFAULT_ENRICHMENT_K);
    println!("batch_width: {}", run.batch.width());
    println!("seed: {}", run.seed);
    println!("output_dir: {}", run.output_dir.display());
    println!("config_digest: {}", run.digest);
    println!("ok");
    Ok(())
}

fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let run = load_run(config_path)?;
    fs::create_dir_all(&run.output_dir)?;
    if let Some(src) = resume {
        if src != run.output_dir {
            copy_stage_checkpoints(src, &run.output_dir)?;
        }
    }
    let mut model = fresh_model(&run)?;
    let result = train_sequential(
        &mut model,
        &run.modalities,
        &run.batch,
        &run.train_config,
        Some(&run.output_dir),
        &run.digest,
        resume.is_some(),
    );
    match result {
        Ok(out) => {
            if out.resumed_from > 0 {
                println!("resumed after stage {}", out.resumed_from);
            }
            for r in &out.reports {
                println!(
                    "stage {} [{}]: {} epochs, best validation elbo {} at epoch {}",
                    r.stage + 1,
                    r.trained.join(", "),
                    r.epochs.len(),
                    r.best_val_elbo,
                    r.best_epoch + 1
                );
            }
            println!(
                "final checkpoint: {}",
                run.output_dir.join("checkpoint_final").display()
            );
            Ok(())
        }
        Err(e) => {
            if matches!(e, Error::Numerics { .. }) {
                eprintln!(
                    "training aborted; last finite parameters: {}",
                    run.output_dir.join("checkpoint_abort").display()
                );
            }
            Err(e)
        }
    }
}

fn copy_stage_checkpoints(src: &Path, dst: &Path) -> Result<()> {
    let mut copied = false;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("checkpoint_stage") && entry.path().join("manifest.json").exists() {
            copy_dir(&entry.path(), &dst.join(&name))?;
            copied = true;
        }
    }
    if !copied {
        return Err(Error::Config(format!(
            "{} contains no stage checkpoints to resume from",
            src.display()
        )));
    }
    Ok(())
}

fn copy_dir(src: &Path, dst: &Path) -> Result<()> {
    fs::create_dir_all(dst)?;
    for entry in fs::read_dir(src)? {
        let entry = entry?;
        let to = dst.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &to)?;
        } else {
            fs::copy(entry.path(), &to)?;
        }
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
}

fn write_record<W: std::io::Write>(w: &mut csv::Writer<W>, record: &[String]) -> Result<()> {
    w.write_record(record)
        .map_err(|e| Error::Config(format!("csv write failed: {}", e)))
}

fn cmd_generate(
    config_path: &Path,
    cells: usize,
    gen_seed: Option<u64>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let run = load_run(config_path)?;
    let model = match checkpoint {
        Some(dir) => model_from_checkpoint(&run, dir)?.0,
        None => fresh_model(&run)?,
    };
    let seed = gen_seed.unwrap_or(run.seed);
    let out = generate(&model, cells, seed, None)?;
    fs::create_dir_all(&run.output_dir)?;
    for data in &out.modalities {
        let path = run.output_dir.join(format!("generated_{}.csv", data.name));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["cell_id".to_string()];
        header.extend(data.feature_names.iter().cloned());
        write_record(&mut w, &header)?;
        for (i, id) in data.cell_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(data.matrix.dense_row(i).iter().map(|v| v.to_string()));
            write_record(&mut w, &row)?;
        }
        println!("wrote {}", path.display());
    }
    let path = run.output_dir.join("generated_components.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["cell_id".to_string()];
    header.extend(run.graph.vertex_names().iter().map(|n| format!("{}_component", n)));
    write_record(&mut w, &header)?;
    for i in 0..cells {
        let mut row = vec![out.modalities[0].cell_ids[i].clone()];
        row.extend(out.truth.components.iter().map(|c| c[i].to_string()));
        write_record(&mut w, &row)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// One deterministic full-data pass shared by latents and cluster.
fn mean_forward(run: &ResolvedRun, model: &Model) -> Result<ForwardState> {
    let all: Vec<usize> = (0..run.modalities[0].n_cells()).collect();
    let inputs = gather_inputs(&run.modalities, &run.batch, &all)?;
    Ok(forward(
        model,
        &inputs,
        ForwardMode::Mean,
        &BTreeSet::new(),
        &ForwardOptions::default(),
    )?
    .state())
}

fn cmd_latents(config_path: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let state = mean_forward(&run, &model)?;
    fs::create_dir_all(&run.output_dir)?;
    let cell_ids = &run.modalities[0].cell_ids;
    for (m, ms) in state.modalities.iter().enumerate() {
        let dz = model.networks[m].dim_z;
        let k = model.networks[m].k_components;
        let path = run.output_dir.join(format!("latents_{}.csv", ms.name));
        let mut w = csv_writer(&path)?;
        let mut header = vec!["cell_id".to_string()];
        header.extend((1..=dz).map(|j| format!("mu_{}", j)));
        header.push("argmax_cluster".into());
        header.push("q_max".into());
        write_record(&mut w, &header)?;
        for (i, id) in cell_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(
                ms.posterior_mean.values()[i * dz..(i + 1) * dz]
                    .iter()
                    .map(|v| v.to_string()),
            );
            let q = &ms.cluster_posterior.values()[i * k..(i + 1) * k];
            let (argmax, q_max) = q
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(c, &v)| (c, v))
                .expect("k_components >= 1");
            row.push(argmax.to_string());
            row.push(q_max.to_string());
            write_record(&mut w, &row)?;
        }
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_cluster(config_path: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let state = mean_forward(&run, &model)?;
    fs::create_dir_all(&run.output_dir)?;
    let path = run.output_dir.join("clusters.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["cell_id".to_string()];
    header.extend(run.graph.vertex_names().iter().cloned());
    write_record(&mut w, &header)?;
    let cell_ids = &run.modalities[0].cell_ids;
    for (i, id) in cell_ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        for (m, ms) in state.modalities.iter().enumerate() {
            let k = model.networks[m].k_components;
            let q = &ms.cluster_posterior.values()[i * k..(i + 1) * k];
            let argmax = q
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .expect("k_components >= 1");
            row.push(argmax.to_string());
        }
        write_record(&mut w, &row)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Builds the two cell groups named on the command line from a label file.
fn resolve_groups(
    run: &ResolvedRun,
    args: &GroupArgs,
) -> Result<(CellGroup, CellGroup)> {
    if args.groups.len() != 3 {
        return Err(Error::Config(
            "--groups takes a label file and two label values".into(),
        ));
    }
    let path = PathBuf::from(&args.groups[0]);
    let labels = read_label_file(&path, &args.label_column)?;
    let cell_ids = &run.modalities[0].cell_ids;
    for id in labels.keys() {
        if !cell_ids.contains(id) {
            return Err(Error::Config(format!(
                "{}: cell {:?} is not in the dataset",
                path.display(),
                id
            )));
        }
    }
    let n = cell_ids.len();
    let build = |value: &str| -> Result<CellGroup> {
        let members: Vec<usize> = cell_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| labels.get(*id).map(String::as_str) == Some(value))
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(Error::Config(format!(
                "label {:?} selects no cells in {}",
                value,
                path.display()
            )));
        }
        CellGroup::new(value, members, n)
    };
    Ok((build(&args.groups[1])?, build(&args.groups[2])?))
}

fn modality_index(run: &ResolvedRun, name: &str) -> Result<usize> {
    run.graph.vertex(name)
}

fn cmd_diff(
    config_path: &Path,
    checkpoint: Option<&Path>,
    modality: &str,
    groups: &GroupArgs,
    pairs: usize,
    statistic: SignalStatistic,
    analysis_seed: Option<u64>,
) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let m = modality_index(&run, modality)?;
    let (gi, gj) = resolve_groups(&run, groups)?;
    let seed = analysis_seed.unwrap_or(run.seed);
    let res = bayes_factor(
        &model,
        &run.modalities,
        &run.batch,
        m,
        &gi,
        &gj,
        pairs,
        seed,
        statistic,
    )?;
    fs::create_dir_all(&run.output_dir)?;

    let path = run.output_dir.join("diff.csv");
    let mut w = csv_writer(&path)?;
    write_record(
        &mut w,
        &[
            "feature".into(),
            "prob_h1".into(),
            "bayes_factor".into(),
            "mean_I".into(),
            "mean_J".into(),
            "lfc".into(),
        ],
    )?;
    for (f, name) in res.features.iter().enumerate() {
        write_record(
            &mut w,
            &[
                name.clone(),
                res.prob_h1[f].to_string(),
                res.bayes_factor[f].to_string(),
                res.mean_i[f].to_string(),
                res.mean_j[f].to_string(),
                res.log2_fold_change[f].to_string(),
            ],
        )?;
    }
    println!("wrote {}", path.display());

    // Rank file for downstream enrichment tooling: strongest K first.
    let mut order: Vec<usize> = (0..res.features.len()).collect();
    order.sort_by(|&a, &b| {
        res.bayes_factor[b]
            .partial_cmp(&res.bayes_factor[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let rank_path = run.output_dir.join("diff_rank.csv");
    let mut w = csv_writer(&rank_path)?;
    write_record(&mut w, &["feature".into(), "K".into(), "lfc".into()])?;
    for &f in &order {
        write_record(
            &mut w,
            &[
                res.features[f].clone(),
                res.bayes_factor[f].to_string(),
                res.log2_fold_change[f].to_string(),
            ],
        )?;
    }
    println!("wrote {}", rank_path.display());
    Ok(())
}

fn cmd_contrib(
    config_path: &Path,
    checkpoint: Option<&Path>,
    target: &str,
    source: Option<&str>,
    groups: &GroupArgs,
    pairs: usize,
    statistic: SignalStatistic,
    analysis_seed: Option<u64>,
) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let g = modality_index(&run, target)?;
    let sources: Vec<usize> = match source {
        Some(name) => vec![modality_index(&run, name)?],
        None => (0..run.graph.n_vertices()).collect(),
    };
    let (gi, gj) = resolve_groups(&run, groups)?;
    let seed = analysis_seed.unwrap_or(run.seed);

    let mut per_source = Vec::with_capacity(sources.len());
    for &s in &sources {
        per_source.push(contribution_score(
            &model,
            &run.modalities,
            &run.batch,
            s,
            g,
            None,
            &gi,
            &gj,
            pairs,
            seed,
            statistic,
        )?);
    }
    fs::create_dir_all(&run.output_dir)?;

    let stat_name = match statistic {
        SignalStatistic::DecodedMean => "decoded-mean",
        SignalStatistic::LogLikelihood => "log-likelihood",
    };
    let path = run.output_dir.join("contrib.csv");
    let mut w = csv_writer(&path)?;
    write_record(
        &mut w,
        &["feature".into(), "modality".into(), "statistic".into(), "C".into()],
    )?;
    for (si, res) in per_source.iter().enumerate() {
        let source_name = run.graph.name(sources[si]);
        for (f, feature) in res.features.iter().enumerate() {
            write_record(
                &mut w,
                &[
                    feature.clone(),
                    source_name.to_string(),
                    stat_name.to_string(),
                    res.contribution[f].to_string(),
                ],
            )?;
        }
    }
    println!("wrote {}", path.display());

    // Ternary-style export: each feature's contributions normalized to
    // shares of the total absolute contribution across source modalities.
    let share_path = run.output_dir.join("contrib_share.csv");
    let mut w = csv_writer(&share_path)?;
    write_record(
        &mut w,
        &["feature".into(), "modality".into(), "share_of_total_abs".into()],
    )?;
    let n_features = per_source[0].features.len();
    for f in 0..n_features {
        let total: f64 = per_source.iter().map(|r| r.contribution[f].abs()).sum();
        for (si, res) in per_source.iter().enumerate() {
            let share = if total > 0.0 {
                res.contribution[f].abs() / total
            } else {
                0.0
            };
            write_record(
                &mut w,
                &[
                    res.features[f].clone(),
                    run.graph.name(sources[si]).to_string(),
                    share.to_string(),
                ],
            )?;
        }
    }
    println!("wrote {}", share_path.display());
    Ok(())
}

fn cmd_interpolate(
    config_path: &Path,
    checkpoint: Option<&Path>,
    groups: &GroupArgs,
    steps: usize,
    modalities: Option<Vec<String>>,
) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let (gi, gj) = resolve_groups(&run, groups)?;
    let selected: Option<Vec<usize>> = match modalities {
        None => None,
        Some(names) => Some(
            names
                .iter()
                .map(|n| modality_index(&run, n))
                .collect::<Result<_>>()?,
        ),
    };
    let res = interpolate(
        &model,
        &run.modalities,
        &run.batch,
        &gi,
        &gj,
        selected.as_deref(),
        steps,
    )?;
    fs::create_dir_all(&run.output_dir)?;
    let path = run.output_dir.join("interpolation.csv");
    let mut w = csv_writer(&path)?;
    write_record(&mut w, &["t".into(), "feature".into(), "value".into()])?;
    for (ti, t) in res.ts.iter().enumerate() {
        for (m, data) in run.modalities.iter().enumerate() {
            let d = data.n_features();
            for (f, feature) in data.feature_names.iter().enumerate() {
                write_record(
                    &mut w,
                    &[
                        t.to_string(),
                        format!("{}:{}", data.name, feature),
                        res.means[m].values()[ti * d + f].to_string(),
                    ],
                )?;
            }
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_enrichment(
    config_path: &Path,
    checkpoint: Option<&Path>,
    labels_path: &Path,
    label_column: &str,
    k: usize,
    modality: Option<&str>,
) -> Result<()> {
    let run = load_run(config_path)?;
    let (model, _) = model_from_checkpoint(&run, &default_checkpoint(&run, checkpoint))?;
    let m = match modality {
        Some(name) => modality_index(&run, name)?,
        None if run.graph.n_vertices() == 1 => 0,
        None => {
            return Err(Error::Config(
                "--modality is required when the run has several modalities".into(),
            ))
        }
    };
    let label_map = read_label_file(labels_path, label_column)?;
    let labels = labels_in_cell_order(&label_map, &run.modalities[0].cell_ids, labels_path)?;
    let state = mean_forward(&run, &model)?;
    let scores = enrichment_score(&state.modalities[m].posterior_mean, &labels, k)?;
    fs::create_dir_all(&run.output_dir)?;
    let path = run.output_dir.join("enrichment.csv");
    let mut w = csv_writer(&path)?;
    write_record(&mut w, &["cell_id".into(), "label".into(), "score".into()])?;
    for (i, id) in run.modalities[0].cell_ids.iter().enumerate() {
        write_record(
            &mut w,
            &[id.clone(), labels[i].clone(), scores[i].to_string()],
        )?;
    }
    println!("wrote {}", path.display());
    Ok(())
}
