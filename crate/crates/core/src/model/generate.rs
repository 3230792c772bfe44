//! Generative sampling: component, latent, graph propagation, observation.

use crate::autodiff::{softplus, Tensor};
use crate::data::{ModalityData, SparseMatrix};
use crate::dist::{BernoulliDist, CategoricalDist, IndependentNormal, ZINBDist};
use crate::error::{Error, Result};
use crate::model::forward::{decode_latents, DecodedDist};
use crate::model::Model;
use crate::rng;

/// Latents and assignments behind a generated dataset.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Component index per modality per cell.
    pub components: Vec<Vec<usize>>,
    /// Raw latents per modality, [n, dim_z].
    pub z: Vec<Tensor>,
    /// Merged latents per modality, [n, dim_z].
    pub z_hat: Vec<Tensor>,
    /// Batch category per cell when the model carries a batch covariate.
    pub batch_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    /// Graph order, ready to store or train on.
    pub modalities: Vec<ModalityData>,
    pub truth: GroundTruth,
}

/// Samples `n_cells` cells from the generative model. `fixed_components`
/// pins the mixture component per modality (None entries sample from the
/// mixture weights).
pub fn generate(
    model: &Model,
    n_cells: usize,
    seed: u64,
    fixed_components: Option<&[Option<usize>]>,
) -> Result<GenerateOutput> {
    let n_mods = model.graph.n_vertices();
    if n_cells == 0 {
        return Err(Error::Contract("cannot generate zero cells".into()));
    }
    if let Some(f) = fixed_components {
        if f.len() != n_mods {
            return Err(Error::Contract(format!(
                "{} fixed components for {} modalities",
                f.len(),
                n_mods
            )));
        }
        for (m, c) in f.iter().enumerate() {
            if let Some(k) = c {
                if *k >= model.networks[m].k_components {
                    return Err(Error::Contract(format!(
                        "fixed component {} out of range for modality {}",
                        k,
                        model.graph.name(m)
                    )));
                }
            }
        }
    }

    let mut rng = rng::derive_rng(seed, rng::STREAM_GENERATE);
    let order: Vec<usize> = model
        .graph
        .topo_stages()
        .grouped()
        .into_iter()
        .flatten()
        .collect();

    // Component assignments and raw latents, in topo order so the draw
    // sequence is stable.
    let mut components: Vec<Vec<usize>> = vec![Vec::new(); n_mods];
    let mut z: Vec<Option<Tensor>> = vec![None; n_mods];
    for &m in &order {
        let net = &model.networks[m];
        let logits = model.params.get(&format!("{}.prior.logits", net.name))?;
        let means = model.params.get(&format!("{}.prior.means", net.name))?;
        let vars_raw = model.params.get(&format!("{}.prior.vars_raw", net.name))?;
        let cat = CategoricalDist::new(logits.values().to_vec())?;
        let comps: Vec<IndependentNormal> = (0..net.k_components)
            .map(|k| {
                let mean = means.values()[k * net.dim_z..(k + 1) * net.dim_z].to_vec();
                let var = vars_raw.values()[k * net.dim_z..(k + 1) * net.dim_z]
                    .iter()
                    .map(|&v| softplus(v) + 1e-6)
                    .collect();
                IndependentNormal::new(mean, var)
            })
            .collect::<Result<_>>()?;
        let pinned = fixed_components.and_then(|f| f[m]);
        let mut assignments = Vec::with_capacity(n_cells);
        let mut rows = Vec::with_capacity(n_cells * net.dim_z);
        for _ in 0..n_cells {
            let c = match pinned {
                Some(k) => k,
                None => cat.sample(&mut rng),
            };
            assignments.push(c);
            rows.extend(comps[c].rsample(&mut rng));
        }
        components[m] = assignments;
        z[m] = Some(Tensor::new(vec![n_cells, net.dim_z], rows)?);
    }
    let z: Vec<Tensor> = z.into_iter().map(|t| t.expect("all drawn")).collect();

    let batch_labels = if model.batch_width > 0 {
        Some(
            (0..n_cells)
                .map(|_| rand::Rng::gen_range(&mut rng, 0..model.batch_width))
                .collect::<Vec<usize>>(),
        )
    } else {
        None
    };
    let batch_rows = batch_labels.as_ref().map(|labels| {
        let w = model.batch_width;
        let mut values = vec![0.0; n_cells * w];
        for (i, &l) in labels.iter().enumerate() {
            values[i * w + l] = 1.0;
        }
        Tensor::new(vec![n_cells, w], values).expect("shape by construction")
    });

    // Propagate through the graph and decode; every decoder sees the same
    // covariate rows.
    let per_modality_batch: Vec<Option<Tensor>> =
        (0..n_mods).map(|_| batch_rows.clone()).collect();
    let decode = decode_latents(model, &z, &per_modality_batch)?;

    // Sample observations, modality by modality in topo order.
    let mut modalities: Vec<Option<ModalityData>> = (0..n_mods).map(|_| None).collect();
    for &m in &order {
        let net = &model.networks[m];
        let f = net.dim_x;
        let mut triplets = Vec::new();
        match &decode.decoded[m] {
            DecodedDist::Bernoulli { logits } => {
                for i in 0..n_cells {
                    let d = BernoulliDist::new(logits.values()[i * f..(i + 1) * f].to_vec());
                    for (j, v) in d.sample(&mut rng).into_iter().enumerate() {
                        if v != 0.0 {
                            triplets.push((i, j, v));
                        }
                    }
                }
            }
            DecodedDist::Zinb { mean, dispersion, zero_inflation_logits } => {
                for i in 0..n_cells {
                    let d = ZINBDist::new(
                        mean.values()[i * f..(i + 1) * f].to_vec(),
                        dispersion.values()[i * f..(i + 1) * f].to_vec(),
                        zero_inflation_logits.values()[i * f..(i + 1) * f].to_vec(),
                    )?;
                    for (j, v) in d.sample(&mut rng).into_iter().enumerate() {
                        if v != 0.0 {
                            triplets.push((i, j, v));
                        }
                    }
                }
            }
        }
        let matrix = SparseMatrix::from_triplets(n_cells, f, triplets)?;
        let feature_names = (0..f).map(|j| format!("{}_f{}", net.name, j)).collect();
        let cell_ids = (0..n_cells).map(|i| format!("cell_{}", i)).collect();
        modalities[m] = Some(ModalityData::new(
            net.name.clone(),
            matrix,
            feature_names,
            cell_ids,
            net.likelihood,
        )?);
    }

    Ok(GenerateOutput {
        modalities: modalities.into_iter().map(|m| m.expect("all sampled")).collect(),
        truth: GroundTruth {
            components,
            z,
            z_hat: decode.z_hat,
            batch_labels,
        },
    })
}
