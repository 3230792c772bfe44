//! Model assembly: per-modality networks, their parameter store, and
//! deterministic initialization.
//!
//! Each modality owns an encoder, a latent transform, a parent-merge map, a
//! decoder, and a Gaussian-mixture prior. Parameters live in a flat name ->
//! tensor map so training, freezing, and checkpointing can address them
//! uniformly.

pub mod config;
pub mod forward;
pub mod generate;

pub use config::{IncorporateMode, ModalityModelConfig, ModelConfig};
pub use forward::{
    decode_latents, forward, gather_inputs, DecodedDist, ForwardMode, ForwardOptions,
    ForwardPass, ForwardState, LatentDecode,
};

use crate::autodiff::Tensor;
use crate::data::DistributionKind;
use crate::error::{Error, Result};
use crate::graph::ModalityGraph;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

/// Flat, name-ordered parameter map. Iteration order is the name order, so
/// every consumer sees parameters in the same sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {}", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter {}", name)))
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.clone()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }
}

/// Shape descriptor for one modality's networks. Hidden widths follow an
/// 8:4:2:1 ladder over `hidden_base` (encoder descends, decoder ascends).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentNetwork {
    pub name: String,
    pub dim_x: usize,
    pub dim_z: usize,
    pub k_components: usize,
    pub hidden: [usize; 4],
    pub likelihood: DistributionKind,
    /// Total latent width of the direct parents, declaration order.
    pub parent_dim: usize,
    pub batch_width: usize,
}

impl ComponentNetwork {
    pub fn n_decoder_params(&self) -> usize {
        match self.likelihood {
            DistributionKind::Bernoulli => 1,
            DistributionKind::Zinb => 3,
        }
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{}", self.name, suffix)
    }

    /// Every parameter name and shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [h8, h4, h2, h1] = self.hidden;
        let dz = self.dim_z;
        let mut out = vec![
            (self.p("enc.w0"), vec![self.dim_x, h8]),
            (self.p("enc.b0"), vec![h8]),
            (self.p("enc.w1"), vec![h8, h4]),
            (self.p("enc.b1"), vec![h4]),
            (self.p("enc.ln1.gain"), vec![h4]),
            (self.p("enc.ln1.bias"), vec![h4]),
            (self.p("enc.w2"), vec![h4, h2]),
            (self.p("enc.b2"), vec![h2]),
            (self.p("enc.ln2.gain"), vec![h2]),
            (self.p("enc.ln2.bias"), vec![h2]),
            (self.p("enc.w3"), vec![h2, h1]),
            (self.p("enc.b3"), vec![h1]),
            (self.p("enc.ln3.gain"), vec![h1]),
            (self.p("enc.ln3.bias"), vec![h1]),
            (self.p("enc.head.w"), vec![h1, 2 * dz]),
            (self.p("enc.head.b"), vec![2 * dz]),
            (self.p("latent.w"), vec![dz, dz]),
            (self.p("merge.w"), vec![self.parent_dim + dz, dz]),
            (self.p("dec.w0"), vec![dz + self.batch_width, h1]),
            (self.p("dec.b0"), vec![h1]),
            (self.p("dec.ln0.gain"), vec![h1]),
            (self.p("dec.ln0.bias"), vec![h1]),
            (self.p("dec.w1"), vec![h1, h2]),
            (self.p("dec.b1"), vec![h2]),
            (self.p("dec.ln1.gain"), vec![h2]),
            (self.p("dec.ln1.bias"), vec![h2]),
            (self.p("dec.w2"), vec![h2, h4]),
            (self.p("dec.b2"), vec![h4]),
            (self.p("dec.ln2.gain"), vec![h4]),
            (self.p("dec.ln2.bias"), vec![h4]),
            (self.p("dec.head.w"), vec![h4, self.dim_x * self.n_decoder_params()]),
            (self.p("dec.head.b"), vec![self.dim_x * self.n_decoder_params()]),
        ];
        out.push((self.p("prior.logits"), vec![self.k_components]));
        out.push((self.p("prior.means"), vec![self.k_components, dz]));
        out.push((self.p("prior.vars_raw"), vec![self.k_components, dz]));
        out
    }

    /// Initializes this network's parameters. Dense weights draw
    /// Xavier-uniform; biases and layer-norm offsets start at zero, gains at
    /// one. The latent transform starts as identity and the parent merge as
    /// [zero-block | identity], so at initialization the merged latent equals
    /// the modality's own transformed sample. Prior means draw standard
    /// normals; prior variances start at one.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        for (name, shape) in self.param_shapes() {
            let last = name.rsplit('.').next().unwrap_or("");
            let is_bias = last.starts_with('b') && shape.len() == 1;
            let tensor = if last == "gain" {
                Tensor::full(shape, 1.0)
            } else if is_bias || name == self.p("prior.logits") {
                Tensor::zeros(shape)
            } else if name == self.p("latent.w") {
                identity_matrix(self.dim_z)
            } else if name == self.p("merge.w") {
                padded_identity(self.parent_dim, self.dim_z)
            } else if name == self.p("prior.means") {
                let values = (0..shape.iter().product::<usize>())
                    .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng))
                    .collect();
                Tensor::new(shape, values).expect("shape by construction")
            } else if name == self.p("prior.vars_raw") {
                // softplus(raw) + 1e-6 == 1 exactly at this raw value.
                Tensor::full(shape, (1.0f64 - 1e-6).exp_m1().ln())
            } else {
                xavier_uniform(&shape, rng)
            };
            store.insert(name, tensor);
        }
    }
}

fn identity_matrix(n: usize) -> Tensor {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], values).expect("square shape")
}

/// [parent_dim + dz, dz] matrix whose parent rows are zero and whose own
/// rows are the identity.
fn padded_identity(parent_dim: usize, dz: usize) -> Tensor {
    let rows = parent_dim + dz;
    let mut values = vec![0.0; rows * dz];
    for i in 0..dz {
        values[(parent_dim + i) * dz + i] = 1.0;
    }
    Tensor::new(vec![rows, dz], values).expect("shape by construction")
}

fn xavier_uniform(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        _ => (shape[0], shape[0]),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor::new(shape.to_vec(), values).expect("shape by construction")
}

/// A wired model: graph, per-modality networks, and their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub graph: ModalityGraph,
    pub config: ModelConfig,
    pub networks: Vec<ComponentNetwork>,
    pub params: ParamStore,
    pub batch_width: usize,
}

impl Model {
    fn build_networks(
        graph: &ModalityGraph,
        config: &ModelConfig,
        dim_x: &[usize],
        batch_width: usize,
    ) -> Result<Vec<ComponentNetwork>> {
        config.validate(graph)?;
        if dim_x.len() != graph.n_vertices() {
            return Err(Error::Contract(format!(
                "{} feature counts for {} modalities",
                dim_x.len(),
                graph.n_vertices()
            )));
        }
        let b = config.hidden_base;
        let mut networks = Vec::with_capacity(graph.n_vertices());
        for m in 0..graph.n_vertices() {
            let mc = &config.modalities[m];
            let parent_dim = graph
                .parents(m)?
                .iter()
                .map(|&p| config.modalities[p].dim_z)
                .sum();
            networks.push(ComponentNetwork {
                name: graph.name(m).to_string(),
                dim_x: dim_x[m],
                dim_z: mc.dim_z,
                k_components: mc.k_components,
                hidden: [8 * b, 4 * b, 2 * b, b],
                likelihood: mc.likelihood,
                parent_dim,
                batch_width,
            });
        }
        Ok(networks)
    }

    /// Builds a model with freshly initialized parameters.
    pub fn new(
        graph: ModalityGraph,
        config: ModelConfig,
        dim_x: &[usize],
        batch_width: usize,
        seed: u64,
    ) -> Result<Self> {
        let networks = Self::build_networks(&graph, &config, dim_x, batch_width)?;
        let mut params = ParamStore::new();
        let mut rng = crate::rng::derive_rng(seed, crate::rng::STREAM_INIT);
        for net in &networks {
            net.init(&mut params, &mut rng);
        }
        Ok(Self {
            graph,
            config,
            networks,
            params,
            batch_width,
        })
    }

    /// Rebuilds a model around restored parameters, verifying that exactly
    /// the expected names and shapes are present.
    pub fn from_params(
        graph: ModalityGraph,
        config: ModelConfig,
        dim_x: &[usize],
        batch_width: usize,
        params: ParamStore,
    ) -> Result<Self> {
        let networks = Self::build_networks(&graph, &config, dim_x, batch_width)?;
        let mut expected = BTreeMap::new();
        for net in &networks {
            for (name, shape) in net.param_shapes() {
                expected.insert(name, shape);
            }
        }
        for (name, shape) in &expected {
            let got = params.get(name)?;
            if got.shape() != shape.as_slice() {
                return Err(Error::Corruption(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    got.shape(),
                    shape
                )));
            }
        }
        for name in params.names() {
            if !expected.contains_key(name) {
                return Err(Error::Corruption(format!("unexpected parameter {}", name)));
            }
        }
        Ok(Self {
            graph,
            config,
            networks,
            params,
            batch_width,
        })
    }

    /// Names of every parameter belonging to one modality, including its
    /// prior.
    pub fn modality_param_names(&self, m: usize) -> Vec<String> {
        self.networks[m]
            .param_shapes()
            .into_iter()
            .map(|(name, _)| name)
            .collect()
    }

    pub fn all_param_names(&self) -> Vec<String> {
        self.params.names().cloned().collect()
    }

    pub fn modality_index(&self, name: &str) -> Result<usize> {
        self.graph.vertex(name)
    }
}
