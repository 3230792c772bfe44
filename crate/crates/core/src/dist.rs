//! Probability distributions used as priors, posteriors, and data
//! likelihoods.
//!
//! Each distribution exists twice: as a plain value-level struct with
//! log-density and sampling (used by generation, analysis, and tests), and as
//! a tape builder producing differentiable per-row log-probabilities (used by
//! the training objective). The two are tested against each other.

use crate::autodiff::{logaddexp, sigmoid, softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::function::gamma::ln_gamma;

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian over a fixed-length vector.
#[derive(Debug, Clone, PartialEq)]
pub struct IndependentNormal {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl IndependentNormal {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch(format!(
                "normal mean has {} dims, variance {}",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain("normal variance must be strictly positive".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            variance: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "normal log_prob input has {} dims, expected {}",
                x.len(),
                self.dim()
            )));
        }
        let mut lp = 0.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            lp += -0.5 * (LN_2PI + self.variance[i].ln()) - d * d / (2.0 * self.variance[i]);
        }
        Ok(lp)
    }

    /// Reparameterized draw mean + sqrt(variance) * eps with eps standard normal.
    pub fn rsample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.variance)
            .map(|(&m, &v)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * eps
            })
            .collect()
    }

    /// Closed-form KL(self || other) between diagonal Gaussians.
    pub fn kl_to(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch("normal KL dims differ".into()));
        }
        let mut kl = 0.0;
        for i in 0..self.dim() {
            let (vq, vp) = (self.variance[i], other.variance[i]);
            let dm = self.mean[i] - other.mean[i];
            kl += 0.5 * ((vp / vq).ln() + (vq + dm * dm) / vp - 1.0);
        }
        Ok(kl)
    }
}

/// Finite distribution over K categories, stored as unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub logits: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Domain("categorical needs at least one category".into()));
        }
        Ok(Self { logits })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        let lse = logsumexp_slice(&self.logits);
        self.logits.iter().map(|&l| (l - lse).exp()).collect()
    }

    pub fn log_prob(&self, k: usize) -> Result<f64> {
        if k >= self.k() {
            return Err(Error::Domain(format!(
                "category {} out of range for K={}",
                k,
                self.k()
            )));
        }
        Ok(self.logits[k] - logsumexp_slice(&self.logits))
    }

    /// Inverse-CDF draw from the softmax probabilities.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let probs = self.probs();
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        for (k, p) in probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return k;
            }
        }
        self.k() - 1
    }
}

/// Mixture of diagonal Gaussians with one weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    pub mixture_logits: Vec<f64>,
    pub components: Vec<IndependentNormal>,
}

impl GaussianMixturePrior {
    pub fn new(mixture_logits: Vec<f64>, components: Vec<IndependentNormal>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Domain("mixture needs at least one component".into()));
        }
        if mixture_logits.len() != components.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} mixture logits for {} components",
                mixture_logits.len(),
                components.len()
            )));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::DimensionMismatch("mixture components differ in dim".into()));
        }
        Ok(Self {
            mixture_logits,
            components,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_weights(&self) -> Vec<f64> {
        let lse = logsumexp_slice(&self.mixture_logits);
        self.mixture_logits.iter().map(|&l| l - lse).collect()
    }

    /// log p(z) = log sum_k pi_k N(z; mu_k, var_k), max-shifted.
    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        Ok(logsumexp_slice(&self.component_scores(z)?))
    }

    /// log pi_k + log N(z; mu_k, var_k) for each component.
    pub fn component_scores(&self, z: &[f64]) -> Result<Vec<f64>> {
        let lw = self.log_weights();
        self.components
            .iter()
            .zip(lw)
            .map(|(c, w)| Ok(w + c.log_prob(z)?))
            .collect()
    }

    /// Posterior over components given z: softmax of the component scores.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let scores = self.component_scores(z)?;
        let lse = logsumexp_slice(&scores);
        Ok(scores.iter().map(|&s| (s - lse).exp()).collect())
    }

    /// Draws a component index, then a reparameterized sample from it.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, Vec<f64>) {
        let k = CategoricalDist {
            logits: self.mixture_logits.clone(),
        }
        .sample(rng);
        let z = self.components[k].rsample(rng);
        (k, z)
    }
}

/// Independent Bernoulli per feature, stored as logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliDist {
    pub logits: Vec<f64>,
}

impl BernoulliDist {
    pub fn new(logits: Vec<f64>) -> Self {
        Self { logits }
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn log_prob_per_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "bernoulli input has {} features, expected {}",
                x.len(),
                self.dim()
            )));
        }
        x.iter()
            .zip(&self.logits)
            .map(|(&xi, &l)| {
                if xi != 0.0 && xi != 1.0 {
                    return Err(Error::Domain(format!("bernoulli observation {} not in {{0,1}}", xi)));
                }
                Ok(-softplus((1.0 - 2.0 * xi) * l))
            })
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_per_feature(x)?.iter().sum())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean()
            .iter()
            .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Zero-inflated negative binomial per feature. The negative binomial is
/// parameterized by its mean m and dispersion r, with success probability
/// p = m / (m + r); a gate with probability pi0 = sigmoid(zero_inflation_logit)
/// replaces the count by zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ZINBDist {
    pub mean: Vec<f64>,
    pub dispersion: Vec<f64>,
    pub zero_inflation_logits: Vec<f64>,
}

impl ZINBDist {
    pub fn new(mean: Vec<f64>, dispersion: Vec<f64>, zero_inflation_logits: Vec<f64>) -> Result<Self> {
        if mean.len() != dispersion.len() || mean.len() != zero_inflation_logits.len() {
            return Err(Error::DimensionMismatch("zinb parameter vectors differ in length".into()));
        }
        if mean.iter().any(|&m| m <= 0.0 || !m.is_finite())
            || dispersion.iter().any(|&r| r <= 0.0 || !r.is_finite())
        {
            return Err(Error::Domain("zinb mean and dispersion must be strictly positive".into()));
        }
        Ok(Self {
            mean,
            dispersion,
            zero_inflation_logits,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob_per_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "zinb input has {} features, expected {}",
                x.len(),
                self.dim()
            )));
        }
        x.iter()
            .enumerate()
            .map(|(i, &xi)| {
                if xi < 0.0 || xi.fract() != 0.0 || !xi.is_finite() {
                    return Err(Error::Domain(format!(
                        "zinb observation {} is not a nonnegative integer",
                        xi
                    )));
                }
                Ok(zinb_log_pmf(
                    xi,
                    self.mean[i],
                    self.dispersion[i],
                    self.zero_inflation_logits[i],
                ))
            })
            .collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_per_feature(x)?.iter().sum())
    }

    /// Expected count per feature: (1 - pi0) * mean.
    pub fn mean(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.zero_inflation_logits)
            .map(|(&m, &zi)| sigmoid(-zi) * m)
            .collect()
    }

    /// Gamma-Poisson draw with a zero-inflation gate.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let pi0 = sigmoid(self.zero_inflation_logits[i]);
                if rng.gen::<f64>() < pi0 {
                    return 0.0;
                }
                let (m, r) = (self.mean[i], self.dispersion[i]);
                let gamma = Gamma::new(r, m / r).expect("positive shape and scale");
                let lambda: f64 = gamma.sample(rng);
                if lambda <= 0.0 {
                    return 0.0;
                }
                let pois = Poisson::new(lambda).expect("positive rate");
                pois.sample(rng)
            })
            .collect()
    }
}

/// Negative binomial log pmf with mean m and dispersion r.
pub fn nb_log_pmf(x: f64, m: f64, r: f64) -> f64 {
    ln_gamma(x + r) - ln_gamma(r) - ln_gamma(x + 1.0) + r * (r.ln() - (r + m).ln())
        + x * (m.ln() - (r + m).ln())
}

/// Zero-inflated negative binomial log pmf for one feature.
pub fn zinb_log_pmf(x: f64, m: f64, r: f64, zi_logit: f64) -> f64 {
    let log_gate_open = -softplus(zi_logit); // log(1 - pi0)
    if x == 0.0 {
        let log_gate_closed = -softplus(-zi_logit); // log pi0
        let nb_zero = r * (r.ln() - (r + m).ln());
        logaddexp(log_gate_closed, log_gate_open + nb_zero)
    } else {
        log_gate_open + nb_log_pmf(x, m, r)
    }
}

fn logsumexp_slice(v: &[f64]) -> f64 {
    let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|&a| (a - mx).exp()).sum::<f64>().ln()
}

// --- Tape builders -------------------------------------------------------
//
// All builders take tensors already on the tape and return per-row
// log-probabilities as an [n, 1] column, so batches stay batched until the
// final reduction of the objective.

/// Per-row log N(x; mean, var). `mean` and `var` are either the same shape
/// as `x` or single rows broadcast over it.
pub fn normal_log_prob_rows(t: &mut Tape, x: Var, mean: Var, var: Var) -> Result<Var> {
    let d = t.value(x).last_dim() as f64;
    let diff = t.sub(x, mean)?;
    let logv = t.log(var)?;
    let neg_logv = t.scalar_affine(logv, -1.0, 0.0)?;
    let inv = t.exp(neg_logv)?;
    let sq = t.mul(diff, diff)?;
    let maha = t.mul(sq, inv)?;
    let inner = t.add(maha, logv)?;
    let rowsum = t.sum_cols(inner)?;
    t.scalar_affine(rowsum, -0.5, -0.5 * d * LN_2PI)
}

/// [n, K] matrix of log pi_k + log N(z; mu_k, var_k). `logits` is rank-1
/// length K; `means` and `vars` are [K, d].
pub fn mixture_component_scores(
    t: &mut Tape,
    z: Var,
    logits: Var,
    means: Var,
    vars: Var,
) -> Result<Var> {
    let k = t.value(logits).numel();
    if t.value(means).n_rows() != k || t.value(vars).n_rows() != k {
        return Err(Error::DimensionMismatch(format!(
            "mixture has {} logits but {} mean rows",
            k,
            t.value(means).n_rows()
        )));
    }
    let log_pi = t.log_softmax(logits)?;
    let mut cols = Vec::with_capacity(k);
    for j in 0..k {
        let mean_j = t.gather_rows(means, &[j])?;
        let var_j = t.gather_rows(vars, &[j])?;
        let lp = normal_log_prob_rows(t, z, mean_j, var_j)?;
        let w_j = t.slice_cols(log_pi, j, 1)?;
        cols.push(t.add(lp, w_j)?);
    }
    t.concat_cols(&cols)
}

/// Per-row log of the mixture marginal, logsumexp over component scores.
pub fn mixture_log_prob_rows(t: &mut Tape, scores: Var) -> Result<Var> {
    t.logsumexp_cols(scores)
}

/// Per-row Bernoulli log-likelihood: sum_j -softplus((1 - 2 x_j) logits_j).
/// `x` must be a constant 0/1 tensor of the same shape as `logits`.
pub fn bernoulli_log_prob_rows(t: &mut Tape, logits: Var, x: Var) -> Result<Var> {
    let sign = t.scalar_affine(x, -2.0, 1.0)?;
    let signed = t.mul(logits, sign)?;
    let nlp = t.softplus(signed)?;
    let neg = t.scalar_affine(nlp, -1.0, 0.0)?;
    t.sum_cols(neg)
}

/// log(exp(a) + exp(b)) elementwise on the tape.
pub fn logaddexp_rows(t: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = t.sub(b, a)?;
    let sp = t.softplus(diff)?;
    t.add(a, sp)
}

/// Per-row zero-inflated negative binomial log-likelihood. `mean` and
/// `dispersion` must already be strictly positive tensors; `x` is a constant
/// tensor of nonnegative integer counts with the same shape.
pub fn zinb_log_prob_rows(t: &mut Tape, mean: Var, dispersion: Var, zi_logits: Var, x: Var) -> Result<Var> {
    let xt = t.value(x).clone();
    if xt.values().iter().any(|&v| v < 0.0 || v.fract() != 0.0) {
        return Err(Error::Domain("zinb observations must be nonnegative integers".into()));
    }
    let shape = xt.shape().to_vec();
    let mask0 = Tensor::new(
        shape.clone(),
        xt.values().iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect(),
    )?;
    let lgamma_x1 = Tensor::new(
        shape.clone(),
        xt.values().iter().map(|&v| ln_gamma(v + 1.0)).collect(),
    )?;
    let mask0 = t.constant_owned(mask0)?;
    let mask_pos = t.scalar_affine(mask0, -1.0, 1.0)?;
    let lgamma_x1 = t.constant_owned(lgamma_x1)?;

    let x_plus_r = t.add(dispersion, x)?;
    let lg_xr = t.ln_gamma(x_plus_r)?;
    let lg_r = t.ln_gamma(dispersion)?;
    let log_r = t.log(dispersion)?;
    let r_plus_m = t.add(dispersion, mean)?;
    let log_rm = t.log(r_plus_m)?;
    let log_m = t.log(mean)?;

    // NB terms: lgamma(x+r) - lgamma(r) - lgamma(x+1) + r(log r - log(r+m)) + x(log m - log(r+m))
    let lg_diff = t.sub(lg_xr, lg_r)?;
    let lg_full = t.sub(lg_diff, lgamma_x1)?;
    let ratio_r = t.sub(log_r, log_rm)?;
    let r_term = t.mul(dispersion, ratio_r)?;
    let ratio_m = t.sub(log_m, log_rm)?;
    let x_term = t.mul(x, ratio_m)?;
    let nb_partial = t.add(lg_full, r_term)?;
    let nb = t.add(nb_partial, x_term)?;

    let sp_zi = t.softplus(zi_logits)?;
    let log_gate_open = t.scalar_affine(sp_zi, -1.0, 0.0)?;
    let neg_zi = t.scalar_affine(zi_logits, -1.0, 0.0)?;
    let sp_neg = t.softplus(neg_zi)?;
    let log_gate_closed = t.scalar_affine(sp_neg, -1.0, 0.0)?;

    let pos_case = t.add(log_gate_open, nb)?;
    // NB log pmf at x = 0 is just the r-term.
    let zero_nb = t.add(log_gate_open, r_term)?;
    let zero_case = logaddexp_rows(t, log_gate_closed, zero_nb)?;

    let zero_part = t.mul(mask0, zero_case)?;
    let pos_part = t.mul(mask_pos, pos_case)?;
    let lp = t.add(zero_part, pos_part)?;
    t.sum_cols(lp)
}

/// Expected Bernoulli signal on the tape: sigmoid(logits).
pub fn bernoulli_mean_rows(t: &mut Tape, logits: Var) -> Result<Var> {
    t.sigmoid(logits)
}

/// Expected count on the tape: (1 - pi0) * mean = sigmoid(-zi) * mean.
pub fn zinb_mean_rows(t: &mut Tape, mean: Var, zi_logits: Var) -> Result<Var> {
    let neg = t.scalar_affine(zi_logits, -1.0, 0.0)?;
    let open = t.sigmoid(neg)?;
    t.mul(mean, open)
}
