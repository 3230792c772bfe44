//! Forward evaluation: encode every modality, sample latents, merge parent
//! latents along the graph, decode, and assemble the per-cell objective
//! terms.
//!
//! The pass builds one tape per call. Parameters bind as gradient leaves
//! when their name is in the trainable set and as constants otherwise, so
//! freezing a modality is exact: its tensors never appear in a gradient map
//! and no optimizer step can touch them.
//!
//! Rows are cell-major: with S Monte Carlo samples, row `i * S + s` belongs
//! to cell `i`. Per-cell noise is derived from (seed, modality, absolute
//! cell id), which makes every result independent of minibatch composition.

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{BatchCovariate, DistributionKind, ModalityData};
use crate::dist;
use crate::error::{Error, Result};
use crate::model::{IncorporateMode, Model};
use crate::rng;
use rand_distr::StandardNormal;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Latents pinned at their posterior means; no randomness.
    Mean,
    /// Reparameterized sampling with `n_samples` draws per cell.
    Stochastic { n_samples: usize, noise_seed: u64 },
}

impl ForwardMode {
    fn n_samples(&self) -> usize {
        match self {
            ForwardMode::Mean => 1,
            ForwardMode::Stochastic { n_samples, .. } => *n_samples,
        }
    }
}

/// Dense minibatch view handed to the forward pass.
pub struct ForwardInputs {
    /// Raw observed rows per modality, graph order, each [B, F_m].
    pub x: Vec<Tensor>,
    /// One-hot batch rows, [B, width]; None when no batch covariate.
    pub batch: Option<Tensor>,
    /// Absolute cell indices, length B. These address per-cell noise.
    pub cells: Vec<usize>,
}

/// Densifies one minibatch from aligned modality stores.
pub fn gather_inputs(
    data: &[ModalityData],
    batch: &BatchCovariate,
    cells: &[usize],
) -> Result<ForwardInputs> {
    if cells.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let x = data
        .iter()
        .map(|d| d.matrix.dense_rows(cells))
        .collect::<Result<Vec<_>>>()?;
    let batch_rows = if batch.width() > 0 {
        Some(batch.rows(cells))
    } else {
        None
    };
    Ok(ForwardInputs {
        x,
        batch: batch_rows,
        cells: cells.to_vec(),
    })
}

#[derive(Default)]
pub struct ForwardOptions {
    /// Per-modality replacement for the sampled latent, each [B*S, dim_z].
    /// Used by counterfactual analyses; everything downstream of the
    /// replaced latent recomputes from it.
    pub latent_overrides: Option<Vec<Option<Tensor>>>,
}

/// Tape nodes for one modality.
pub struct ModalityNodes {
    pub mu: Var,
    pub var: Var,
    pub z: Var,
    pub z_tilde: Var,
    pub z_hat: Var,
    pub decoded: DecodedNodes,
    /// Log cluster posterior, [B, K].
    pub cluster_log_posterior: Var,
    pub recon: Var,
    pub kl_z: Var,
    pub kl_c: Var,
}

pub enum DecodedNodes {
    Bernoulli { logits: Var },
    Zinb { mean: Var, dispersion: Var, zero_inflation: Var },
}

pub struct ForwardPass {
    pub tape: Tape,
    pub nodes: Vec<ModalityNodes>,
    pub n_cells: usize,
    pub n_samples: usize,
    cells: Vec<usize>,
    names: Vec<String>,
    bound_leaves: BTreeMap<String, Var>,
}

pub(super) struct Binder<'a> {
    model: &'a Model,
    trainable: &'a BTreeSet<String>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub(super) fn new(model: &'a Model, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            model,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub(super) fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self.model.params.get(name)?;
        let v = if self.trainable.contains(name) {
            tape.leaf(tensor)?
        } else {
            tape.constant(tensor)?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }
}

/// One dense layer followed by swish and layer normalization.
pub(super) fn swish_ln_layer(
    tape: &mut Tape,
    binder: &mut Binder,
    input: Var,
    w: &str,
    b: &str,
    ln: &str,
) -> Result<Var> {
    let wv = binder.var(tape, w)?;
    let bv = binder.var(tape, b)?;
    let lin = tape.matmul(input, wv)?;
    let lin = tape.add(lin, bv)?;
    let act = tape.swish(lin)?;
    let gain = binder.var(tape, &format!("{}.gain", ln))?;
    let bias = binder.var(tape, &format!("{}.bias", ln))?;
    tape.layer_norm(act, gain, bias)
}

/// Gaussian noise for one cell block, drawn from a seed addressed by
/// (seed, modality, absolute cell id). Rows are the cell's S samples.
fn cell_noise(noise_seed: u64, modality: usize, cell: usize, s: usize, dz: usize) -> Vec<f64> {
    let mut rng = rng::hashed_rng("forward-noise", &[noise_seed, modality as u64, cell as u64]);
    (0..s * dz)
        .map(|_| rand_distr::Distribution::sample(&StandardNormal, &mut rng))
        .collect()
}

/// Decoder stack from a merged latent (plus optional batch rows) to
/// likelihood parameters.
pub(super) fn decode_params(
    tape: &mut Tape,
    binder: &mut Binder,
    net: &crate::model::ComponentNetwork,
    z_hat: Var,
    batch: Option<Var>,
) -> Result<DecodedNodes> {
    let p = |suffix: &str| format!("{}.{}", net.name, suffix);
    let dec_in = match batch {
        Some(b) => tape.concat_cols(&[z_hat, b])?,
        None => z_hat,
    };
    let d0 = swish_ln_layer(tape, binder, dec_in, &p("dec.w0"), &p("dec.b0"), &p("dec.ln0"))?;
    let d1 = swish_ln_layer(tape, binder, d0, &p("dec.w1"), &p("dec.b1"), &p("dec.ln1"))?;
    let d2 = swish_ln_layer(tape, binder, d1, &p("dec.w2"), &p("dec.b2"), &p("dec.ln2"))?;
    let dh_w = binder.var(tape, &p("dec.head.w"))?;
    let dh_b = binder.var(tape, &p("dec.head.b"))?;
    let head = tape.matmul(d2, dh_w)?;
    let head = tape.add(head, dh_b)?;
    match net.likelihood {
        DistributionKind::Bernoulli => Ok(DecodedNodes::Bernoulli { logits: head }),
        DistributionKind::Zinb => {
            let f = net.dim_x;
            let mean_raw = tape.slice_cols(head, 0, f)?;
            let disp_raw = tape.slice_cols(head, f, f)?;
            let zero_inflation = tape.slice_cols(head, 2 * f, f)?;
            Ok(DecodedNodes::Zinb {
                mean: tape.positive(mean_raw, 1e-6)?,
                dispersion: tape.positive(disp_raw, 1e-6)?,
                zero_inflation,
            })
        }
    }
}

/// Per-row log-likelihood of the constant target under decoded parameters.
pub(super) fn likelihood_rows(tape: &mut Tape, decoded: &DecodedNodes, x_target: Var) -> Result<Var> {
    match decoded {
        DecodedNodes::Bernoulli { logits } => dist::bernoulli_log_prob_rows(tape, *logits, x_target),
        DecodedNodes::Zinb { mean, dispersion, zero_inflation } => {
            dist::zinb_log_prob_rows(tape, *mean, *dispersion, *zero_inflation, x_target)
        }
    }
}

pub fn forward(
    model: &Model,
    inputs: &ForwardInputs,
    mode: ForwardMode,
    trainable: &BTreeSet<String>,
    options: &ForwardOptions,
) -> Result<ForwardPass> {
    let n_mods = model.graph.n_vertices();
    if inputs.x.len() != n_mods {
        return Err(Error::Contract(format!(
            "{} input blocks for {} modalities",
            inputs.x.len(),
            n_mods
        )));
    }
    let b_cells = inputs.cells.len();
    if b_cells == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let s = mode.n_samples();
    if s == 0 {
        return Err(Error::Contract("n_samples must be at least 1".into()));
    }
    if let Some(ov) = &options.latent_overrides {
        if ov.len() != n_mods {
            return Err(Error::Contract(format!(
                "{} latent overrides for {} modalities",
                ov.len(),
                n_mods
            )));
        }
    }

    let mut tape = Tape::new();
    let mut binder = Binder {
        model,
        trainable,
        bound: BTreeMap::new(),
    };

    // Row index of each expanded row's cell, and the sample-average map.
    let expand: Vec<usize> = (0..b_cells * s).map(|r| r / s).collect();
    let avg = if s > 1 {
        let mut values = vec![0.0; b_cells * b_cells * s];
        for i in 0..b_cells {
            for k in 0..s {
                values[i * (b_cells * s) + i * s + k] = 1.0 / s as f64;
            }
        }
        let t = Tensor::new(vec![b_cells, b_cells * s], values)?;
        Some(tape.constant_owned(t)?)
    } else {
        None
    };
    let reduce = |tape: &mut Tape, v: Var| -> Result<Var> {
        match avg {
            Some(a) => tape.matmul(a, v),
            None => Ok(v),
        }
    };
    let expand_tensor = |t: &Tensor| -> Tensor {
        if s == 1 {
            return t.clone();
        }
        let cols = t.shape()[1];
        let mut values = Vec::with_capacity(expand.len() * cols);
        for &r in &expand {
            values.extend_from_slice(&t.values()[r * cols..(r + 1) * cols]);
        }
        Tensor::new(vec![expand.len(), cols], values).expect("shape by construction")
    };

    let batch_expanded = match &inputs.batch {
        Some(b) => {
            if b.shape() != [b_cells, model.batch_width] {
                return Err(Error::Contract(format!(
                    "batch rows have shape {:?}, expected [{}, {}]",
                    b.shape(),
                    b_cells,
                    model.batch_width
                )));
            }
            if model.batch_width == 0 {
                None
            } else {
                Some(tape.constant_owned(expand_tensor(b))?)
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

    let order: Vec<usize> = model
        .graph
        .topo_stages()
        .grouped()
        .into_iter()
        .flatten()
        .collect();
    let mut slots: Vec<Option<ModalityNodes>> = (0..n_mods).map(|_| None).collect();

    for &m in &order {
        let net = &model.networks[m];
        let x_raw = &inputs.x[m];
        if x_raw.shape() != [b_cells, net.dim_x] {
            return Err(Error::Contract(format!(
                "modality {} input has shape {:?}, expected [{}, {}]",
                net.name,
                x_raw.shape(),
                b_cells,
                net.dim_x
            )));
        }

        // Encoder input: binary data passes through raw, counts are
        // log1p-compressed. The likelihood below always sees raw values.
        let enc_input = match net.likelihood {
            DistributionKind::Bernoulli => x_raw.clone(),
            DistributionKind::Zinb => Tensor::new(
                x_raw.shape().to_vec(),
                x_raw.values().iter().map(|&v| v.ln_1p()).collect(),
            )?,
        };
        let x_enc = tape.constant_owned(enc_input)?;

        let p = |suffix: &str| format!("{}.{}", net.name, suffix);
        let w0 = binder.var(&mut tape, &p("enc.w0"))?;
        let b0 = binder.var(&mut tape, &p("enc.b0"))?;
        let h0 = tape.matmul(x_enc, w0)?;
        let h0 = tape.add(h0, b0)?;
        let h1 = swish_ln_layer(&mut tape, &mut binder, h0, &p("enc.w1"), &p("enc.b1"), &p("enc.ln1"))?;
        let h2 = swish_ln_layer(&mut tape, &mut binder, h1, &p("enc.w2"), &p("enc.b2"), &p("enc.ln2"))?;
        let h3 = swish_ln_layer(&mut tape, &mut binder, h2, &p("enc.w3"), &p("enc.b3"), &p("enc.ln3"))?;
        let head_w = binder.var(&mut tape, &p("enc.head.w"))?;
        let head_b = binder.var(&mut tape, &p("enc.head.b"))?;
        let head = tape.matmul(h3, head_w)?;
        let head = tape.add(head, head_b)?;
        let mu = tape.slice_cols(head, 0, net.dim_z)?;
        let var = tape.slice_cols(head, net.dim_z, net.dim_z)?;
        let var = tape.positive(var, 1e-6)?;

        // Expanded posterior parameters aligned with sample rows.
        let (mu_e, var_e) = if s > 1 {
            (tape.gather_rows(mu, &expand)?, tape.gather_rows(var, &expand)?)
        } else {
            (mu, var)
        };

        let z_sampled = match mode {
            ForwardMode::Mean => mu_e,
            ForwardMode::Stochastic { noise_seed, .. } => {
                let mut eps = Vec::with_capacity(b_cells * s * net.dim_z);
                for &cell in &inputs.cells {
                    eps.extend(cell_noise(noise_seed, m, cell, s, net.dim_z));
                }
                let eps = tape.constant_owned(Tensor::new(vec![b_cells * s, net.dim_z], eps)?)?;
                let logv = tape.log(var_e)?;
                let half_logv = tape.scalar_affine(logv, 0.5, 0.0)?;
                let sd = tape.exp(half_logv)?;
                let noise = tape.mul(sd, eps)?;
                tape.add(mu_e, noise)?
            }
        };
        let z = match options
            .latent_overrides
            .as_ref()
            .and_then(|ov| ov[m].as_ref())
        {
            Some(t) => {
                if t.shape() != [b_cells * s, net.dim_z] {
                    return Err(Error::Contract(format!(
                        "latent override for {} has shape {:?}, expected [{}, {}]",
                        net.name,
                        t.shape(),
                        b_cells * s,
                        net.dim_z
                    )));
                }
                tape.constant(t)?
            }
            None => z_sampled,
        };

        let latent_w = binder.var(&mut tape, &p("latent.w"))?;
        let z_tilde = tape.matmul(z, latent_w)?;

        let parents = model.graph.parents(m)?;
        let merge_in = if parents.is_empty() {
            z_tilde
        } else {
            let mut blocks: Vec<Var> = Vec::with_capacity(parents.len() + 1);
            for &pm in parents {
                let pn = slots[pm].as_ref().expect("parents precede children");
                blocks.push(match model.config.incorporate_mode {
                    IncorporateMode::Ancestors => pn.z_hat,
                    IncorporateMode::ParentsOnly => pn.z,
                });
            }
            blocks.push(z_tilde);
            tape.concat_cols(&blocks)?
        };
        let merge_w = binder.var(&mut tape, &p("merge.w"))?;
        let z_hat = tape.matmul(merge_in, merge_w)?;

        let decoded = decode_params(&mut tape, &mut binder, net, z_hat, batch_expanded)?;
        let x_target = tape.constant_owned(expand_tensor(x_raw))?;
        let recon_rows = likelihood_rows(&mut tape, &decoded, x_target)?;
        let recon = reduce(&mut tape, recon_rows)?;

        let prior_logits = binder.var(&mut tape, &p("prior.logits"))?;
        let prior_means = binder.var(&mut tape, &p("prior.means"))?;
        let prior_vars_raw = binder.var(&mut tape, &p("prior.vars_raw"))?;
        let prior_vars = tape.positive(prior_vars_raw, 1e-6)?;
        let scores = dist::mixture_component_scores(&mut tape, z, prior_logits, prior_means, prior_vars)?;
        let log_mix = dist::mixture_log_prob_rows(&mut tape, scores)?;
        let log_q = dist::normal_log_prob_rows(&mut tape, z, mu_e, var_e)?;
        let kl_rows = tape.sub(log_q, log_mix)?;
        let kl_z = reduce(&mut tape, kl_rows)?;

        // Cluster posterior from sample-averaged scores; per-sample row
        // normalizers cancel inside the softmax.
        let mean_scores = reduce(&mut tape, scores)?;
        let cluster_log_posterior = tape.log_softmax(mean_scores)?;
        let q_c = tape.exp(cluster_log_posterior)?;
        let log_p_c = tape.log_softmax(scores)?;
        let mean_log_p_c = reduce(&mut tape, log_p_c)?;
        let gap = tape.sub(cluster_log_posterior, mean_log_p_c)?;
        let weighted = tape.mul(q_c, gap)?;
        let kl_c = tape.sum_cols(weighted)?;

        slots[m] = Some(ModalityNodes {
            mu,
            var,
            z,
            z_tilde,
            z_hat,
            decoded,
            cluster_log_posterior,
            recon,
            kl_z,
            kl_c,
        });
    }

    let nodes = slots
        .into_iter()
        .map(|s| s.expect("all modalities visited"))
        .collect();
    Ok(ForwardPass {
        tape,
        nodes,
        n_cells: b_cells,
        n_samples: s,
        cells: inputs.cells.clone(),
        names: (0..n_mods).map(|m| model.graph.name(m).to_string()).collect(),
        bound_leaves: binder
            .bound
            .into_iter()
            .filter(|(name, _)| trainable.contains(name))
            .collect(),
    })
}

/// Result of pushing explicit latents through the merge maps and decoders.
pub struct LatentDecode {
    /// Per-modality likelihood parameters, graph order, each [n, features].
    pub decoded: Vec<DecodedDist>,
    /// Merged latents actually fed to each decoder, each [n, dim_z].
    pub z_hat: Vec<Tensor>,
}

/// Decodes explicit latent assignments without an encoder pass.
///
/// `z[m]` supplies modality m's raw latent rows; merges and decoders
/// recompute from them exactly as the full pass would, so rows here are
/// bitwise comparable with `forward` outputs for matching latents.
/// `batch[m]` is the covariate block handed to modality m's decoder,
/// allowing synthetic cells whose covariate differs per modality.
pub fn decode_latents(
    model: &Model,
    z: &[Tensor],
    batch: &[Option<Tensor>],
) -> Result<LatentDecode> {
    let n_mods = model.graph.n_vertices();
    if z.len() != n_mods || batch.len() != n_mods {
        return Err(Error::Contract(format!(
            "{} latent blocks and {} batch blocks for {} modalities",
            z.len(),
            batch.len(),
            n_mods
        )));
    }
    let n = z.first().map(|t| t.n_rows()).unwrap_or(0);
    if n == 0 {
        return Err(Error::Contract("no rows to decode".into()));
    }
    for (m, t) in z.iter().enumerate() {
        if t.shape() != [n, model.networks[m].dim_z] {
            return Err(Error::Contract(format!(
                "latent block for {} has shape {:?}, expected [{}, {}]",
                model.graph.name(m),
                t.shape(),
                n,
                model.networks[m].dim_z
            )));
        }
    }

    let no_leaves = BTreeSet::new();
    let mut tape = Tape::new();
    let mut binder = Binder::new(model, &no_leaves);
    let order: Vec<usize> = model
        .graph
        .topo_stages()
        .grouped()
        .into_iter()
        .flatten()
        .collect();

    let mut z_vars = vec![None; n_mods];
    let mut z_hat_vars = vec![None; n_mods];
    let mut decoded_nodes: Vec<Option<DecodedNodes>> = (0..n_mods).map(|_| None).collect();
    for &m in &order {
        let net = &model.networks[m];
        let batch_var = match &batch[m] {
            Some(b) => {
                if b.shape() != [n, model.batch_width] {
                    return Err(Error::Contract(format!(
                        "batch block for {} has shape {:?}, expected [{}, {}]",
                        net.name,
                        b.shape(),
                        n,
                        model.batch_width
                    )));
                }
                if model.batch_width == 0 {
                    None
                } else {
                    Some(tape.constant(b)?)
                }
            }
            None => {
                if model.batch_width > 0 {
                    return Err(Error::Contract(format!(
                        "model expects a batch covariate but modality {} got none",
                        net.name
                    )));
                }
                None
            }
        };
        let zv = tape.constant(&z[m])?;
        z_vars[m] = Some(zv);
        let latent_w = binder.var(&mut tape, &format!("{}.latent.w", net.name))?;
        let z_tilde = tape.matmul(zv, latent_w)?;
        let parents = model.graph.parents(m)?;
        let merge_in = if parents.is_empty() {
            z_tilde
        } else {
            let mut blocks = Vec::with_capacity(parents.len() + 1);
            for &pm in parents {
                blocks.push(match model.config.incorporate_mode {
                    IncorporateMode::Ancestors => z_hat_vars[pm].expect("parents precede children"),
                    IncorporateMode::ParentsOnly => z_vars[pm].expect("parents precede children"),
                });
            }
            blocks.push(z_tilde);
            tape.concat_cols(&blocks)?
        };
        let merge_w = binder.var(&mut tape, &format!("{}.merge.w", net.name))?;
        let z_hat = tape.matmul(merge_in, merge_w)?;
        z_hat_vars[m] = Some(z_hat);
        decoded_nodes[m] = Some(decode_params(&mut tape, &mut binder, net, z_hat, batch_var)?);
    }

    let decoded = decoded_nodes
        .into_iter()
        .map(|d| match d.expect("all modalities visited") {
            DecodedNodes::Bernoulli { logits } => DecodedDist::Bernoulli {
                logits: tape.value(logits).clone(),
            },
            DecodedNodes::Zinb { mean, dispersion, zero_inflation } => DecodedDist::Zinb {
                mean: tape.value(mean).clone(),
                dispersion: tape.value(dispersion).clone(),
                zero_inflation_logits: tape.value(zero_inflation).clone(),
            },
        })
        .collect();
    let z_hat = z_hat_vars
        .iter()
        .map(|v| tape.value(v.expect("merged")).clone())
        .collect();
    Ok(LatentDecode { decoded, z_hat })
}

/// Batch-mean objective terms for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboTerms {
    pub name: String,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_c: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.recon - self.kl_z - self.kl_c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub per_modality: Vec<ElboTerms>,
}

impl ElboReport {
    pub fn total(&self) -> f64 {
        self.per_modality.iter().map(|t| t.elbo()).sum()
    }
}

/// Value-level snapshot of a finished pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub cells: Vec<usize>,
    pub n_samples: usize,
    pub modalities: Vec<ModalityState>,
}

#[derive(Debug, Clone)]
pub struct ModalityState {
    pub name: String,
    /// [B, dim_z]
    pub posterior_mean: Tensor,
    /// [B, dim_z]
    pub posterior_variance: Tensor,
    /// [B*S, dim_z]
    pub z: Tensor,
    pub z_tilde: Tensor,
    pub z_hat: Tensor,
    pub decoded: DecodedDist,
    /// [B, K]
    pub cluster_posterior: Tensor,
    /// [B, 1]
    pub recon: Tensor,
    pub kl_z: Tensor,
    pub kl_c: Tensor,
}

/// Decoded likelihood parameters, [B*S, features] each.
#[derive(Debug, Clone, PartialEq)]
pub enum DecodedDist {
    Bernoulli { logits: Tensor },
    Zinb { mean: Tensor, dispersion: Tensor, zero_inflation_logits: Tensor },
}

impl DecodedDist {
    /// Expected observation per feature.
    pub fn expected_value(&self) -> Tensor {
        match self {
            DecodedDist::Bernoulli { logits } => Tensor::new(
                logits.shape().to_vec(),
                logits.values().iter().map(|&l| crate::autodiff::sigmoid(l)).collect(),
            )
            .expect("shape preserved"),
            DecodedDist::Zinb { mean, zero_inflation_logits, .. } => Tensor::new(
                mean.shape().to_vec(),
                mean.values()
                    .iter()
                    .zip(zero_inflation_logits.values())
                    .map(|(&m, &zi)| crate::autodiff::sigmoid(-zi) * m)
                    .collect(),
            )
            .expect("shape preserved"),
        }
    }
}

impl ForwardPass {
    /// Training objective: batch mean over cells of
    /// -sum_m (recon_m - beta_m (kl_z_m + kl_c_m)).
    pub fn loss(&mut self, betas: &[f64]) -> Result<Var> {
        if betas.len() != self.nodes.len() {
            return Err(Error::Contract(format!(
                "{} beta weights for {} modalities",
                betas.len(),
                self.nodes.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (m, beta) in betas.iter().enumerate() {
            let kl = self.tape.add(self.nodes[m].kl_z, self.nodes[m].kl_c)?;
            let scaled = self.tape.scalar_affine(kl, -beta, 0.0)?;
            let term = self.tape.add(self.nodes[m].recon, scaled)?;
            acc = Some(match acc {
                Some(a) => self.tape.add(a, term)?,
                None => term,
            });
        }
        let total = acc.expect("at least one modality");
        let neg = self.tape.scalar_affine(total, -1.0, 0.0)?;
        self.tape.mean_all(neg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.tape.value(v).values()[0]
    }

    /// Batch-mean objective terms per modality (unweighted).
    pub fn elbo(&self) -> ElboReport {
        let mean = |v: Var| -> f64 {
            let t = self.tape.value(v);
            t.values().iter().sum::<f64>() / t.n_rows() as f64
        };
        ElboReport {
            per_modality: self
                .nodes
                .iter()
                .zip(&self.names)
                .map(|(n, name)| ElboTerms {
                    name: name.clone(),
                    recon: mean(n.recon),
                    kl_z: mean(n.kl_z),
                    kl_c: mean(n.kl_c),
                })
                .collect(),
        }
    }

    /// Gradients of `root` with respect to every trainable parameter bound
    /// in this pass.
    pub fn backward(&mut self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, &var) in &self.bound_leaves {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        Ok(out)
    }

    /// Clones all value-level results out of the tape.
    pub fn state(&self) -> ForwardState {
        let modalities = self
            .nodes
            .iter()
            .zip(&self.names)
            .map(|(n, name)| ModalityState {
                name: name.clone(),
                posterior_mean: self.tape.value(n.mu).clone(),
                posterior_variance: self.tape.value(n.var).clone(),
                z: self.tape.value(n.z).clone(),
                z_tilde: self.tape.value(n.z_tilde).clone(),
                z_hat: self.tape.value(n.z_hat).clone(),
                decoded: match &n.decoded {
                    DecodedNodes::Bernoulli { logits } => DecodedDist::Bernoulli {
                        logits: self.tape.value(*logits).clone(),
                    },
                    DecodedNodes::Zinb { mean, dispersion, zero_inflation } => DecodedDist::Zinb {
                        mean: self.tape.value(*mean).clone(),
                        dispersion: self.tape.value(*dispersion).clone(),
                        zero_inflation_logits: self.tape.value(*zero_inflation).clone(),
                    },
                },
                cluster_posterior: {
                    let lp = self.tape.value(n.cluster_log_posterior);
                    Tensor::new(
                        lp.shape().to_vec(),
                        lp.values().iter().map(|&v| v.exp()).collect(),
                    )
                    .expect("shape preserved")
                },
                recon: self.tape.value(n.recon).clone(),
                kl_z: self.tape.value(n.kl_z).clone(),
                kl_c: self.tape.value(n.kl_c).clone(),
            })
            .collect();
        ForwardState {
            cells: self.cells.clone(),
            n_samples: self.n_samples,
            modalities,
        }
    }
}
