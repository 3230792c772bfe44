//! Model hyperparameters.

use crate::data::DistributionKind;
use crate::error::{Error, Result};
use crate::graph::ModalityGraph;
use serde::{Deserialize, Serialize};

/// How a modality's generative latent incorporates the rest of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncorporateMode {
    /// Parents contribute their merged latents, so ancestry accumulates
    /// along paths.
    Ancestors,
    /// Parents contribute their raw latent samples only; grandparents do
    /// not reach a modality except through what its parents' samples carry.
    ParentsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityModelConfig {
    pub dim_z: usize,
    pub k_components: usize,
    pub likelihood: DistributionKind,
}

impl ModalityModelConfig {
    pub fn with_defaults(likelihood: DistributionKind) -> Self {
        let dim_z = 20;
        Self {
            dim_z,
            k_components: 2 * dim_z + 1,
            likelihood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Aligned with graph vertex order.
    pub modalities: Vec<ModalityModelConfig>,
    pub n_mc_samples: usize,
    pub incorporate_mode: IncorporateMode,
    /// Smallest hidden width; the ladder is 8:4:2:1 multiples of this.
    pub hidden_base: usize,
    /// When false, mixture prior parameters are excluded from training.
    pub train_prior: bool,
}

impl ModelConfig {
    pub fn with_defaults(likelihoods: Vec<DistributionKind>) -> Self {
        Self {
            modalities: likelihoods
                .into_iter()
                .map(ModalityModelConfig::with_defaults)
                .collect(),
            n_mc_samples: 1,
            incorporate_mode: IncorporateMode::Ancestors,
            hidden_base: 128,
            train_prior: true,
        }
    }

    pub fn validate(&self, graph: &ModalityGraph) -> Result<()> {
        if self.modalities.len() != graph.n_vertices() {
            return Err(Error::Config(format!(
                "{} modality configs for {} graph vertices",
                self.modalities.len(),
                graph.n_vertices()
            )));
        }
        if self.n_mc_samples == 0 {
            return Err(Error::Config("n_mc_samples must be at least 1".into()));
        }
        if self.hidden_base == 0 {
            return Err(Error::Config("hidden_base must be at least 1".into()));
        }
        for (m, mc) in self.modalities.iter().enumerate() {
            if mc.dim_z == 0 {
                return Err(Error::Config(format!(
                    "modality {} has dim_z 0",
                    graph.name(m)
                )));
            }
            if mc.k_components == 0 {
                return Err(Error::Config(format!(
                    "modality {} has k_components 0",
                    graph.name(m)
                )));
            }
        }
        for m in 0..graph.n_vertices() {
            let name = graph.name(m);
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "modality name {:?} must be nonempty and use only [A-Za-z0-9_-]",
                    name
                )));
            }
        }
        Ok(())
    }
}
