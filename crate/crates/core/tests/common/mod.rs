#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use dagvae::analysis::CellGroup;
use dagvae::autodiff::Tensor;
use dagvae::data::{BatchCovariate, DistributionKind, ModalityData};
use dagvae::graph::ModalityGraph;
use dagvae::model::generate::generate;
use dagvae::model::{
    decode_latents, forward, gather_inputs, ForwardMode, ForwardOptions, IncorporateMode, Model,
    ModalityModelConfig, ModelConfig,
};

pub fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

/// Dense Bernoulli CSV with two planted halves: cells in the first half fire
/// each feature with `p_first`, the rest with `p_second`.
pub fn bernoulli_csv(
    n_cells: usize,
    prefix: &str,
    n_features: usize,
    p_first: f64,
    p_second: f64,
    seed: u64,
) -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut s = String::from("cell_id");
    for f in 0..n_features {
        s.push_str(&format!(",{}{}", prefix, f));
    }
    s.push('\n');
    for c in 0..n_cells {
        let p = if c < n_cells / 2 { p_first } else { p_second };
        s.push_str(&format!("c{}", c));
        for _ in 0..n_features {
            s.push_str(if rng.gen::<f64>() < p { ",1" } else { ",0" });
        }
        s.push('\n');
    }
    s
}

/// Label file marking the first half `g1` and the rest `g2`.
pub fn halves_labels_csv(n_cells: usize) -> String {
    let mut s = String::from("cell_id,label\n");
    for c in 0..n_cells {
        s.push_str(&format!(
            "c{},{}\n",
            c,
            if c < n_cells / 2 { "g1" } else { "g2" }
        ));
    }
    s
}

/// Share of cells whose predicted cluster matches the truth under the best
/// one-to-one relabeling. Brute-forces label permutations; fine for small K.
pub fn best_match_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let k_pred = predicted.iter().max().map_or(0, |&m| m + 1);
    let k_true = truth.iter().max().map_or(0, |&m| m + 1);
    let k = k_pred.max(k_true);
    assert!(k <= 8, "permutation search only meant for small K, got {}", k);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits = predicted
            .iter()
            .zip(truth)
            .filter(|&(&pr, &tr)| p[pr] == tr)
            .count();
        best = best.max(hits);
    });
    best as f64 / predicted.len() as f64
}

fn permute(items: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == items.len() {
        visit(items);
        return;
    }
    for i in at..items.len() {
        items.swap(at, i);
        permute(items, at + 1, visit);
        items.swap(at, i);
    }
}

/// Builds a fully wired model over the named modality graph.
#[allow(clippy::too_many_arguments)]
pub fn build_model(
    names: &[&str],
    edges: &[(&str, &str)],
    kinds: &[DistributionKind],
    dim_x: &[usize],
    dim_z: usize,
    k_components: usize,
    hidden_base: usize,
    batch_width: usize,
    seed: u64,
) -> Model {
    let graph = ModalityGraph::new(
        names.iter().map(|n| n.to_string()).collect(),
        &edges
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let config = ModelConfig {
        modalities: kinds
            .iter()
            .map(|&likelihood| ModalityModelConfig {
                dim_z,
                k_components,
                likelihood,
            })
            .collect(),
        n_mc_samples: 1,
        incorporate_mode: IncorporateMode::Ancestors,
        hidden_base,
        train_prior: true,
    };
    Model::new(graph, config, dim_x, batch_width, seed).unwrap()
}

/// Overwrites a parameter tensor through a closure over its flat index and
/// current value.
pub fn set_param(model: &mut Model, name: &str, mut f: impl FnMut(usize, f64) -> f64) {
    let t = model.params.get(name).unwrap();
    let shape = t.shape().to_vec();
    let values: Vec<f64> = t.values().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    model.params.insert(name.to_string(), Tensor::new(shape, values).unwrap());
}

/// Raw value whose positive transform (softplus plus 1e-6) equals `var`.
pub fn raw_var(var: f64) -> f64 {
    (var - 1e-6).exp_m1().ln()
}

/// Spreads every modality's mixture components apart: component k's mean is
/// the k-th row of `means`, all variances become `var`.
pub fn plant_separated_priors(model: &mut Model, means: &[Vec<f64>], var: f64) {
    for name in model.all_param_names() {
        if name.ends_with(".prior.means") {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            assert_eq!(shape[0], means.len());
            assert_eq!(shape[1], means[0].len());
            let values: Vec<f64> = means.iter().flatten().copied().collect();
            model.params.insert(name, Tensor::new(shape, values).unwrap());
        } else if name.ends_with(".prior.vars_raw") {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            let len = shape.iter().product();
            model
                .params
                .insert(name, Tensor::new(shape, vec![raw_var(var); len]).unwrap());
        } else if name.ends_with(".prior.logits") {
            let shape = model.params.get(&name).unwrap().shape().to_vec();
            let len = shape.iter().product();
            model.params.insert(name, Tensor::new(shape, vec![0.0; len]).unwrap());
        }
    }
}

/// A single-modality model whose priors generate two tight, well separated
/// groups, with the last decoder column cut so that feature cannot respond
/// to the latent. The same model generates and scores the data.
///
/// Decoder planting: the head is first set to an identity readout of the
/// decoder's last hidden layer, the two component centers are pushed through
/// the public latent-path decoder to recover that layer's activations, and
/// every live column is then laid along the gap between the centers so both
/// prototypes saturate at logit magnitude 12; sampling flips are negligible.
/// Encoder planting: the trunk is read at each group's majority prototype
/// through identity readouts, and the head solves two affine constraints per
/// latent coordinate so the prototypes map exactly onto the prior centers.
pub fn planted_two_group_model(
    seed: u64,
) -> (Model, Vec<ModalityData>, BatchCovariate, CellGroup, CellGroup) {
    let n = 160;
    let probe = build_model(
        &["a"],
        &[],
        &[DistributionKind::Bernoulli],
        &[8],
        2,
        2,
        8,
        0,
        seed,
    );
    let h4 = probe.params.get("a.dec.head.w").unwrap().shape()[0];
    let dx = h4 + 8;
    let mut model = build_model(
        &["a"],
        &[],
        &[DistributionKind::Bernoulli],
        &[dx],
        2,
        2,
        8,
        0,
        seed,
    );
    plant_separated_priors(&mut model, &[vec![-3.0, -3.0], vec![3.0, 3.0]], 1e-4);

    set_param(&mut model, "a.dec.head.w", |i, _| {
        if i / dx == i % dx {
            1.0
        } else {
            0.0
        }
    });
    set_param(&mut model, "a.dec.head.b", |_, _| 0.0);
    let means = model.params.get("a.prior.means").unwrap().clone();
    let centers = Tensor::new(vec![2, means.shape()[1]], means.values().to_vec()).unwrap();
    let dec = decode_latents(&model, &[centers], &[None]).unwrap();
    let probs = dec.decoded[0].expected_value();
    let hidden = |row: usize, j: usize| -> f64 {
        let v = probs.values()[row * dx + j];
        (v / (1.0 - v)).ln()
    };
    let delta: Vec<f64> = (0..h4).map(|j| hidden(0, j) - hidden(1, j)).collect();
    let mid: Vec<f64> = (0..h4).map(|j| (hidden(0, j) + hidden(1, j)) / 2.0).collect();
    let norm2: f64 = delta.iter().map(|d| d * d).sum();
    assert!(norm2 > 1e-9, "component centers decode identically");
    let scale = 24.0 / norm2;
    let dot_mid: f64 = delta.iter().zip(&mid).map(|(d, m)| d * m).sum();
    let sign = |f: usize| if f % 2 == 0 { 1.0 } else { -1.0 };
    set_param(&mut model, "a.dec.head.w", |i, _| {
        let (r, f) = (i / dx, i % dx);
        if f == dx - 1 {
            0.0
        } else {
            sign(f) * scale * delta[r]
        }
    });
    set_param(&mut model, "a.dec.head.b", |f, _| {
        if f == dx - 1 {
            -12.0
        } else {
            -sign(f) * scale * dot_mid
        }
    });

    let out = generate(&model, n, seed + 1, None).unwrap();
    let comp = &out.truth.components[0];
    let group_a = CellGroup::new("comp0", (0..n).filter(|&i| comp[i] == 0).collect(), n).unwrap();
    let group_b = CellGroup::new("comp1", (0..n).filter(|&i| comp[i] == 1).collect(), n).unwrap();
    let batch = BatchCovariate::none(n);

    let rep = |g: &CellGroup| -> usize {
        let x = out.modalities[0].matrix.dense_rows(&g.cells).unwrap();
        let ng = g.cells.len();
        let majority: Vec<f64> = (0..dx)
            .map(|f| {
                let ones: f64 = (0..ng).map(|r| x.values()[r * dx + f]).sum();
                if ones * 2.0 > ng as f64 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (0..ng)
            .find(|&r| (0..dx).all(|f| x.values()[r * dx + f] == majority[f]))
            .map(|r| g.cells[r])
            .expect("some cell matches the group majority pattern")
    };
    let reps = [rep(&group_a), rep(&group_b)];
    let h1 = model.params.get("a.enc.head.w").unwrap().shape()[0];
    let dz = model.networks[0].dim_z;
    let mut trunk = vec![vec![0.0; h1]; 2];
    let inputs = gather_inputs(&out.modalities, &batch, &reps).unwrap();
    for block in 0..h1.div_ceil(dz) {
        set_param(&mut model, "a.enc.head.w", |i, _| {
            let (r, c) = (i / (2 * dz), i % (2 * dz));
            if c < dz && r == block * dz + c {
                1.0
            } else {
                0.0
            }
        });
        set_param(&mut model, "a.enc.head.b", |_, _| 0.0);
        let st = forward(
            &model,
            &inputs,
            ForwardMode::Mean,
            &BTreeSet::new(),
            &ForwardOptions::default(),
        )
        .unwrap()
        .state();
        let mu = &st.modalities[0].posterior_mean;
        for row in 0..2 {
            for c in 0..dz {
                let unit = block * dz + c;
                if unit < h1 {
                    trunk[row][unit] = mu.values()[row * dz + c];
                }
            }
        }
    }
    let diff: Vec<f64> = (0..h1).map(|j| trunk[0][j] - trunk[1][j]).collect();
    let dnorm2: f64 = diff.iter().map(|d| d * d).sum();
    assert!(dnorm2 > 1e-12, "prototypes collapse in the encoder trunk");
    let targets = model.params.get("a.prior.means").unwrap().clone();
    let alpha: Vec<f64> = (0..dz)
        .map(|j| (targets.values()[j] - targets.values()[dz + j]) / dnorm2)
        .collect();
    let head_w: Vec<f64> = (0..h1 * 2 * dz)
        .map(|i| {
            let (r, c) = (i / (2 * dz), i % (2 * dz));
            if c < dz {
                alpha[c] * diff[r]
            } else {
                0.0
            }
        })
        .collect();
    let head_b: Vec<f64> = (0..2 * dz)
        .map(|c| {
            if c < dz {
                let wu: f64 = (0..h1).map(|r| trunk[0][r] * head_w[r * 2 * dz + c]).sum();
                targets.values()[c] - wu
            } else {
                -30.0
            }
        })
        .collect();
    model
        .params
        .insert("a.enc.head.w".to_string(), Tensor::new(vec![h1, 2 * dz], head_w).unwrap());
    model
        .params
        .insert("a.enc.head.b".to_string(), Tensor::new(vec![2 * dz], head_b).unwrap());

    (model, out.modalities, batch, group_a, group_b)
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut reader = csv::Reader::from_path(path).unwrap();
    out.push(reader.headers().unwrap().iter().map(String::from).collect());
    for record in reader.records() {
        out.push(record.unwrap().iter().map(String::from).collect());
    }
    out
}

#[test]
fn best_match_accuracy_relabels() {
    // Predicted labels are a pure permutation of the truth: perfect score.
    let truth = [0, 0, 1, 1, 2, 2];
    let predicted = [2, 2, 0, 0, 1, 1];
    assert_eq!(best_match_accuracy(&predicted, &truth), 1.0);
    // One mislabeled cell out of six.
    let predicted = [2, 2, 0, 0, 1, 0];
    let acc = best_match_accuracy(&predicted, &truth);
    assert!((acc - 5.0 / 6.0).abs() < 1e-12);
}
