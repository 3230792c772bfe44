//! Post-training interrogation of a fitted model: Monte Carlo differential
//! signal between cell groups, per-modality contribution of latent blocks to
//! decoded features, chimeric profiles, latent interpolation, and neighborhood
//! enrichment of labels in latent space.
//!
//! Every routine is a pure function of (model, data, seed). Pair draws and
//! per-cell noise are derived from hashes keyed by the *content* of each cell
//! group rather than by argument position, so swapping the two groups reuses
//! the exact same latents. That makes the group-swap antisymmetry of the
//! log-odds score exact, not just statistical, and makes identical groups
//! produce exact ties.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::data::{BatchCovariate, ModalityData};
use crate::dist::{BernoulliDist, ZINBDist};
use crate::error::{Error, Result};
use crate::model::{
    decode_latents, forward, gather_inputs, DecodedDist, ForwardMode, ForwardOptions, Model,
};
use crate::rng::hashed_u64;

/// A named set of cells referenced by absolute index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGroup {
    pub name: String,
    pub cells: Vec<usize>,
}

impl CellGroup {
    pub fn new(name: impl Into<String>, cells: Vec<usize>, n_cells: usize) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Contract("cell group must be nonempty".into()));
        }
        if let Some(&bad) = cells.iter().find(|&&c| c >= n_cells) {
            return Err(Error::Contract(format!(
                "cell index {} out of range for {} cells",
                bad, n_cells
            )));
        }
        Ok(CellGroup {
            name: name.into(),
            cells,
        })
    }

    /// Hash of the member indices; groups with equal members share streams.
    fn content_key(&self) -> u64 {
        let parts: Vec<u64> = self.cells.iter().map(|&c| c as u64).collect();
        hashed_u64("cell-group-content", &parts)
    }
}

/// Which per-feature signal a comparison is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalStatistic {
    /// Expected value of the decoded observation distribution (default).
    DecodedMean,
    /// Log-likelihood of the baseline cell's own observation.
    LogLikelihood,
}

/// Stream tags for the two sides of a pairwise comparison. Tags follow the
/// canonical order of the member lists, so swapping the arguments leaves
/// each group's draws untouched, and identical groups share one stream.
fn side_tags(group_i: &CellGroup, group_j: &CellGroup) -> (u64, u64) {
    match group_i.cells.cmp(&group_j.cells) {
        Ordering::Less => (0, 1),
        Ordering::Greater => (1, 0),
        Ordering::Equal => (0, 0),
    }
}

fn pair_cell(group: &CellGroup, label: &'static str, seed: u64, pair: u64, tag: u64) -> usize {
    let r = hashed_u64(label, &[seed, pair, tag]);
    group.cells[(r % group.cells.len() as u64) as usize]
}

/// Per-feature signals of one cell under a single stochastic draw:
/// (comparison statistic, decoded mean).
fn cell_signal(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    modality: usize,
    cell: usize,
    noise_seed: u64,
    statistic: SignalStatistic,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let inputs = gather_inputs(data, batch, &[cell])?;
    let pass = forward(
        model,
        &inputs,
        ForwardMode::Stochastic {
            n_samples: 1,
            noise_seed,
        },
        &BTreeSet::new(),
        &ForwardOptions::default(),
    )?;
    let state = pass.state();
    let decoded = &state.modalities[modality].decoded;
    let mean = decoded.expected_value().values().to_vec();
    let stat = match statistic {
        SignalStatistic::DecodedMean => mean.clone(),
        SignalStatistic::LogLikelihood => {
            decoded_log_prob(decoded, inputs.x[modality].values())?
        }
    };
    Ok((stat, mean))
}

fn decoded_log_prob(decoded: &DecodedDist, x: &[f64]) -> Result<Vec<f64>> {
    match decoded {
        DecodedDist::Bernoulli { logits } => {
            BernoulliDist::new(logits.values().to_vec()).log_prob_per_feature(x)
        }
        DecodedDist::Zinb {
            mean,
            dispersion,
            zero_inflation_logits,
        } => ZINBDist::new(
            mean.values().to_vec(),
            dispersion.values().to_vec(),
            zero_inflation_logits.values().to_vec(),
        )?
        .log_prob_per_feature(x),
    }
}

/// Per-feature comparison of two cell groups.
#[derive(Debug, Clone)]
pub struct DifferentialResult {
    pub modality: String,
    pub features: Vec<String>,
    /// Raw exceedance probability per feature (share of pairs, ties at 0.5).
    pub prob_h1: Vec<f64>,
    /// Log-odds of the exceedance probability, clamped to [1e-6, 1 - 1e-6].
    pub bayes_factor: Vec<f64>,
    pub mean_i: Vec<f64>,
    pub mean_j: Vec<f64>,
    /// log2((mean_i + 1e-8) / (mean_j + 1e-8))
    pub log2_fold_change: Vec<f64>,
    pub n_pairs: usize,
    pub seed: u64,
    pub statistic: SignalStatistic,
}

/// Monte Carlo group comparison: samples `n_pairs` cell pairs from
/// `group_i` x `group_j` with replacement, runs one stochastic decode per
/// side, and scores each feature by how often side i exceeds side j.
///
/// Each cell keeps its own observed covariate row, so composition
/// differences between the groups enter only through the paired sampling.
#[allow(clippy::too_many_arguments)]
pub fn bayes_factor(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    modality: usize,
    group_i: &CellGroup,
    group_j: &CellGroup,
    n_pairs: usize,
    seed: u64,
    statistic: SignalStatistic,
) -> Result<DifferentialResult> {
    if modality >= model.graph.n_vertices() {
        return Err(Error::Lookup(format!("modality index {}", modality)));
    }
    if group_i.cells.is_empty() || group_j.cells.is_empty() {
        return Err(Error::Contract("cell group must be nonempty".into()));
    }
    if n_pairs == 0 {
        return Err(Error::Contract("n_pairs must be at least 1".into()));
    }
    let (tag_i, tag_j) = side_tags(group_i, group_j);
    let n_features = model.networks[modality].dim_x;

    let per_pair: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|p| {
            let cell_i = pair_cell(group_i, "diff-cell", seed, p, tag_i);
            let cell_j = pair_cell(group_j, "diff-cell", seed, p, tag_j);
            let noise_i = hashed_u64("diff-noise", &[seed, p, tag_i]);
            let noise_j = hashed_u64("diff-noise", &[seed, p, tag_j]);
            let (stat_i, mean_i) =
                cell_signal(model, data, batch, modality, cell_i, noise_i, statistic)?;
            let (stat_j, mean_j) =
                cell_signal(model, data, batch, modality, cell_j, noise_j, statistic)?;
            Ok((stat_i, mean_i, stat_j, mean_j))
        })
        .collect::<Result<_>>()?;

    // Exceedance counts in half units so ties contribute exactly 0.5.
    let mut wins2 = vec![0u64; n_features];
    let mut sum_i = vec![0.0; n_features];
    let mut sum_j = vec![0.0; n_features];
    for (stat_i, mean_i, stat_j, mean_j) in &per_pair {
        for g in 0..n_features {
            wins2[g] += match stat_i[g].partial_cmp(&stat_j[g]) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
            sum_i[g] += mean_i[g];
            sum_j[g] += mean_j[g];
        }
    }

    let n2 = (2 * n_pairs) as f64;
    let floor = n2 * 1e-6;
    let mut prob_h1 = Vec::with_capacity(n_features);
    let mut k = Vec::with_capacity(n_features);
    let mut mean_i = Vec::with_capacity(n_features);
    let mut mean_j = Vec::with_capacity(n_features);
    let mut lfc = Vec::with_capacity(n_features);
    for g in 0..n_features {
        let s2 = wins2[g] as f64;
        let c2 = (2 * n_pairs) as f64 - s2;
        prob_h1.push(s2 / n2);
        // Branches and operands mirror exactly under s2 <-> c2, which is
        // what makes the group-swap score an exact negation.
        let (pa, pb) = if s2 < floor {
            (1e-6, 1.0 - 1e-6)
        } else if c2 < floor {
            (1.0 - 1e-6, 1e-6)
        } else {
            (s2 / n2, c2 / n2)
        };
        k.push(pa.ln() - pb.ln());
        let mi = sum_i[g] / n_pairs as f64;
        let mj = sum_j[g] / n_pairs as f64;
        mean_i.push(mi);
        mean_j.push(mj);
        lfc.push(((mi + 1e-8) / (mj + 1e-8)).log2());
    }

    Ok(DifferentialResult {
        modality: model.graph.name(modality).to_string(),
        features: data[modality].feature_names.clone(),
        prob_h1,
        bayes_factor: k,
        mean_i,
        mean_j,
        log2_fold_change: lfc,
        n_pairs,
        seed,
        statistic,
    })
}

/// Per-feature effect of replacing one modality's latent block.
#[derive(Debug, Clone)]
pub struct ContributionResult {
    /// Modality whose latent was substituted.
    pub source_modality: String,
    /// Modality owning the scored features.
    pub target_modality: String,
    pub feature_indices: Vec<usize>,
    pub features: Vec<String>,
    /// Mean over pairs of statistic(chimeric) - statistic(baseline).
    pub contribution: Vec<f64>,
    pub statistic: SignalStatistic,
    pub n_pairs: usize,
    pub seed: u64,
}

/// Scores how much the `source` latent block drives `target` features:
/// for each sampled pair (i, j), cell i is decoded once as-is and once with
/// its `source` latent replaced by cell j's draw. All other latents keep
/// cell i's draws; merges and decoders downstream of the substitution
/// recompute. The score per feature is the mean change of the statistic.
#[allow(clippy::too_many_arguments)]
pub fn contribution_score(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    source: usize,
    target: usize,
    features: Option<&[usize]>,
    group_i: &CellGroup,
    group_j: &CellGroup,
    n_pairs: usize,
    seed: u64,
    statistic: SignalStatistic,
) -> Result<ContributionResult> {
    let n_mods = model.graph.n_vertices();
    if source >= n_mods {
        return Err(Error::Lookup(format!("modality index {}", source)));
    }
    if target >= n_mods {
        return Err(Error::Lookup(format!("modality index {}", target)));
    }
    let n_features = model.networks[target].dim_x;
    let feature_indices: Vec<usize> = match features {
        Some(f) => {
            if let Some(&bad) = f.iter().find(|&&g| g >= n_features) {
                return Err(Error::Lookup(format!(
                    "feature index {} out of range for modality {}",
                    bad,
                    model.graph.name(target)
                )));
            }
            f.to_vec()
        }
        None => (0..n_features).collect(),
    };
    if n_pairs == 0 {
        return Err(Error::Contract("n_pairs must be at least 1".into()));
    }
    let (tag_i, tag_j) = side_tags(group_i, group_j);

    let per_pair: Vec<Vec<f64>> = (0..n_pairs as u64)
        .into_par_iter()
        .map(|p| {
            let cell_i = pair_cell(group_i, "contrib-cell", seed, p, tag_i);
            let cell_j = pair_cell(group_j, "contrib-cell", seed, p, tag_j);
            let noise_i = hashed_u64("contrib-noise", &[seed, p, tag_i]);
            let noise_j = hashed_u64("contrib-noise", &[seed, p, tag_j]);

            let inputs_i = gather_inputs(data, batch, &[cell_i])?;
            let mode_i = ForwardMode::Stochastic {
                n_samples: 1,
                noise_seed: noise_i,
            };
            let baseline = forward(
                model,
                &inputs_i,
                mode_i,
                &BTreeSet::new(),
                &ForwardOptions::default(),
            )?
            .state();

            let inputs_j = gather_inputs(data, batch, &[cell_j])?;
            let donor = forward(
                model,
                &inputs_j,
                ForwardMode::Stochastic {
                    n_samples: 1,
                    noise_seed: noise_j,
                },
                &BTreeSet::new(),
                &ForwardOptions::default(),
            )?
            .state();

            // Pin every latent at the baseline draw except the substituted
            // block, so only merge-path consequences differ.
            let overrides: Vec<Option<Tensor>> = (0..n_mods)
                .map(|m| {
                    Some(if m == source {
                        donor.modalities[m].z.clone()
                    } else {
                        baseline.modalities[m].z.clone()
                    })
                })
                .collect();
            let chimeric = forward(
                model,
                &inputs_i,
                mode_i,
                &BTreeSet::new(),
                &ForwardOptions {
                    latent_overrides: Some(overrides),
                },
            )?
            .state();

            let x_i = inputs_i.x[target].values();
            let stat_of = |d: &DecodedDist| -> Result<Vec<f64>> {
                match statistic {
                    SignalStatistic::DecodedMean => Ok(d.expected_value().values().to_vec()),
                    SignalStatistic::LogLikelihood => decoded_log_prob(d, x_i),
                }
            };
            let base_stat = stat_of(&baseline.modalities[target].decoded)?;
            let chim_stat = stat_of(&chimeric.modalities[target].decoded)?;
            Ok(feature_indices
                .iter()
                .map(|&g| chim_stat[g] - base_stat[g])
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut contribution = vec![0.0; feature_indices.len()];
    for deltas in &per_pair {
        for (acc, d) in contribution.iter_mut().zip(deltas) {
            *acc += d;
        }
    }
    for c in contribution.iter_mut() {
        *c /= n_pairs as f64;
    }

    Ok(ContributionResult {
        source_modality: model.graph.name(source).to_string(),
        target_modality: model.graph.name(target).to_string(),
        features: feature_indices
            .iter()
            .map(|&g| data[target].feature_names[g].clone())
            .collect(),
        feature_indices,
        contribution,
        statistic,
        n_pairs,
        seed,
    })
}

/// Decoded profiles of synthetic cells assembled from per-modality donors.
#[derive(Debug, Clone)]
pub struct ChimericProfile {
    /// Donor cell per synthetic cell per modality, [n_out][n_modalities].
    pub donors: Vec<Vec<usize>>,
    /// Decoded expected value per modality, each [n_out, features].
    pub means: Vec<Tensor>,
    pub modalities: Vec<String>,
}

/// Builds `n_out` synthetic cells: each draws one donor cell per modality
/// from that modality's source group, takes the donor's latent (posterior
/// mean, or a stochastic draw when `mean_mode` is false), and decodes the
/// merged result. Each decoder sees its own donor's covariate row.
///
/// Donor choice is keyed by the source group's membership, so modalities
/// assigned the same group share donors and the profile reduces to plain
/// reconstruction of those cells.
pub fn chimeric_profile(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    sources: &[&CellGroup],
    n_out: usize,
    mean_mode: bool,
    seed: u64,
) -> Result<ChimericProfile> {
    let n_mods = model.graph.n_vertices();
    if sources.len() != n_mods {
        return Err(Error::Contract(format!(
            "{} source groups for {} modalities; every modality needs one",
            sources.len(),
            n_mods
        )));
    }
    if n_out == 0 {
        return Err(Error::Contract("need at least one synthetic cell".into()));
    }

    let keys: Vec<u64> = sources.iter().map(|g| g.content_key()).collect();
    let donors: Vec<Vec<usize>> = (0..n_out as u64)
        .map(|t| {
            (0..n_mods)
                .map(|m| {
                    let r = hashed_u64("chimera-donor", &[seed, t, keys[m]]);
                    sources[m].cells[(r % sources[m].cells.len() as u64) as usize]
                })
                .collect()
        })
        .collect();

    // One pass over the distinct donors supplies every latent; stochastic
    // draws are addressed per cell, so reuse across synthetic cells is exact.
    let mut unique: Vec<usize> = donors.iter().flatten().copied().collect();
    unique.sort_unstable();
    unique.dedup();
    let inputs = gather_inputs(data, batch, &unique)?;
    let mode = if mean_mode {
        ForwardMode::Mean
    } else {
        ForwardMode::Stochastic {
            n_samples: 1,
            noise_seed: hashed_u64("chimera-noise", &[seed]),
        }
    };
    let state = forward(model, &inputs, mode, &BTreeSet::new(), &ForwardOptions::default())?.state();
    let row_of = |cell: usize| unique.binary_search(&cell).expect("donor was gathered");

    let mut z_blocks = Vec::with_capacity(n_mods);
    let mut batch_blocks = Vec::with_capacity(n_mods);
    for m in 0..n_mods {
        let dz = model.networks[m].dim_z;
        let z_src = &state.modalities[m].z;
        let mut rows = Vec::with_capacity(n_out * dz);
        for d in &donors {
            let r = row_of(d[m]);
            rows.extend_from_slice(&z_src.values()[r * dz..(r + 1) * dz]);
        }
        z_blocks.push(Tensor::new(vec![n_out, dz], rows)?);
        batch_blocks.push(if model.batch_width > 0 {
            let cells: Vec<usize> = donors.iter().map(|d| d[m]).collect();
            Some(batch.rows(&cells))
        } else {
            None
        });
    }

    let decode = decode_latents(model, &z_blocks, &batch_blocks)?;
    Ok(ChimericProfile {
        donors,
        means: decode.decoded.iter().map(|d| d.expected_value()).collect(),
        modalities: (0..n_mods).map(|m| model.graph.name(m).to_string()).collect(),
    })
}

/// Decoded means along a straight latent path.
#[derive(Debug, Clone)]
pub struct InterpolationResult {
    pub ts: Vec<f64>,
    /// Per-modality decoded means, each [steps, features].
    pub means: Vec<Tensor>,
    pub modalities: Vec<String>,
}

/// Decodes the path z(t) = (1-t) from + t to for the selected modalities
/// (None selects all); unselected modalities stay at `from`. `batch_row`
/// is replicated for every step and decoder.
pub fn interpolate_latents(
    model: &Model,
    from: &[Vec<f64>],
    to: &[Vec<f64>],
    selected: Option<&[usize]>,
    steps: usize,
    batch_row: Option<&[f64]>,
) -> Result<InterpolationResult> {
    let n_mods = model.graph.n_vertices();
    if steps < 2 {
        return Err(Error::Contract("interpolation needs at least 2 steps".into()));
    }
    if from.len() != n_mods || to.len() != n_mods {
        return Err(Error::Contract(format!(
            "{} and {} centroid blocks for {} modalities",
            from.len(),
            to.len(),
            n_mods
        )));
    }
    let selected: BTreeSet<usize> = match selected {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&m| m >= n_mods) {
                return Err(Error::Lookup(format!("modality index {}", bad)));
            }
            s.iter().copied().collect()
        }
        None => (0..n_mods).collect(),
    };

    let ts: Vec<f64> = (0..steps).map(|k| k as f64 / (steps - 1) as f64).collect();
    let mut z_blocks = Vec::with_capacity(n_mods);
    for m in 0..n_mods {
        let dz = model.networks[m].dim_z;
        if from[m].len() != dz || to[m].len() != dz {
            return Err(Error::Contract(format!(
                "centroid for {} must have {} coordinates",
                model.graph.name(m),
                dz
            )));
        }
        let mut rows = Vec::with_capacity(steps * dz);
        for &t in &ts {
            for d in 0..dz {
                if selected.contains(&m) {
                    rows.push((1.0 - t) * from[m][d] + t * to[m][d]);
                } else {
                    rows.push(from[m][d]);
                }
            }
        }
        z_blocks.push(Tensor::new(vec![steps, dz], rows)?);
    }

    let batch_block = match batch_row {
        Some(row) => {
            if row.len() != model.batch_width {
                return Err(Error::Contract(format!(
                    "batch row has {} entries, model expects {}",
                    row.len(),
                    model.batch_width
                )));
            }
            if model.batch_width == 0 {
                None
            } else {
                let mut values = Vec::with_capacity(steps * row.len());
                for _ in 0..steps {
                    values.extend_from_slice(row);
                }
                Some(Tensor::new(vec![steps, row.len()], values)?)
            }
        }
        None => {
            if model.batch_width > 0 {
                return Err(Error::Contract(
                    "model expects a batch covariate but none was supplied".into(),
                ));
            }
            None
        }
    };
    let batch_blocks: Vec<Option<Tensor>> = (0..n_mods).map(|_| batch_block.clone()).collect();

    let decode = decode_latents(model, &z_blocks, &batch_blocks)?;
    Ok(InterpolationResult {
        ts,
        means: decode.decoded.iter().map(|d| d.expected_value()).collect(),
        modalities: (0..n_mods).map(|m| model.graph.name(m).to_string()).collect(),
    })
}

/// Posterior-mean centroid per modality over a group of cells.
pub fn group_centroids(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    group: &CellGroup,
) -> Result<Vec<Vec<f64>>> {
    let inputs = gather_inputs(data, batch, &group.cells)?;
    let state = forward(
        model,
        &inputs,
        ForwardMode::Mean,
        &BTreeSet::new(),
        &ForwardOptions::default(),
    )?
    .state();
    Ok(state
        .modalities
        .iter()
        .map(|ms| {
            let t = &ms.posterior_mean;
            let (n, d) = (t.shape()[0], t.shape()[1]);
            (0..d)
                .map(|c| (0..n).map(|r| t.values()[r * d + c]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect())
}

/// Interpolates between the posterior-mean centroids of two cell groups.
/// The decoders see the dataset-wide mean covariate row at every step.
pub fn interpolate(
    model: &Model,
    data: &[ModalityData],
    batch: &BatchCovariate,
    group_i: &CellGroup,
    group_j: &CellGroup,
    selected: Option<&[usize]>,
    steps: usize,
) -> Result<InterpolationResult> {
    let from = group_centroids(model, data, batch, group_i)?;
    let to = group_centroids(model, data, batch, group_j)?;
    let batch_row = if model.batch_width > 0 {
        let all: Vec<usize> = (0..batch.n_cells()).collect();
        Some(batch.mean_row(&all))
    } else {
        None
    };
    interpolate_latents(model, &from, &to, selected, steps, batch_row.as_deref())
}

/// Neighborhood label enrichment: the share of each cell's k nearest
/// neighbors (Euclidean, self excluded, distance ties broken by index)
/// carrying the cell's own label, normalized by that label's global share.
pub fn enrichment_score(latents: &Tensor, labels: &[String], k: usize) -> Result<Vec<f64>> {
    let n = latents.n_rows();
    let d = latents.shape()[1];
    if labels.len() != n {
        return Err(Error::Contract(format!(
            "{} labels for {} cells",
            labels.len(),
            n
        )));
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "k must satisfy 0 < k < n_cells; got k={} for {} cells",
            k, n
        )));
    }

    // Intern labels and count class sizes.
    let mut classes: Vec<&String> = Vec::new();
    let mut class_of = Vec::with_capacity(n);
    for l in labels {
        match classes.iter().position(|c| *c == l) {
            Some(i) => class_of.push(i),
            None => {
                classes.push(l);
                class_of.push(classes.len() - 1);
            }
        }
    }
    let mut class_size = vec![0usize; classes.len()];
    for &c in &class_of {
        class_size[c] += 1;
    }

    let values = latents.values();
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &values[i * d..(i + 1) * d];
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = &values[j * d..(j + 1) * d];
                    let sq = xi
                        .iter()
                        .zip(xj)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
                    (sq, j)
                })
                .collect();
            dist.sort_unstable_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .expect("finite distances")
                    .then(a.1.cmp(&b.1))
            });
            let same = dist[..k]
                .iter()
                .filter(|(_, j)| class_of[*j] == class_of[i])
                .count();
            let share = same as f64 / k as f64;
            let base = class_size[class_of[i]] as f64 / n as f64;
            share / base
        })
        .collect();
    Ok(scores)
}
