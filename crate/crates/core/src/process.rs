//! The diffusion process and toy data distributions.
//!
//! The process family is fixed: zero drift and diffusion coefficient `√(2t)`,
//! so the marginal at noise level `t` of a data distribution is the data
//! convolved with `N(0, t²I)`, and the probability-flow ODE reads
//! `dx/dt = ε(x,t)` with `ε = −t·∇log p_t`. For Gaussian-mixture data all of
//! this is closed form, which is what makes the distillation experiments
//! verifiable end to end.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Noise-level bounds for the probability-flow ODE. Drift is identically zero
/// and the diffusion coefficient is `√(2t)` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionSpec {
    t_min: f64,
    t_max: f64,
}

impl DiffusionSpec {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min && t_min.is_finite() && t_max.is_finite()) {
            return Err(Error::invalid(format!(
                "diffusion spec requires 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}"
            )));
        }
        Ok(DiffusionSpec { t_min, t_max })
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }
}

impl Default for DiffusionSpec {
    /// The bounds used throughout: `[0.006, 80]`.
    fn default() -> Self {
        DiffusionSpec {
            t_min: 0.006,
            t_max: 80.0,
        }
    }
}

/// One mixture component with its Cholesky factor cached at construction.
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Component {
    fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("covariance shape does not match mean"));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::invalid("component weights must be positive"));
        }
        let sym_err: f64 = (&cov - cov.transpose()).abs().max();
        if sym_err > 1e-12 {
            return Err(Error::invalid("covariance must be symmetric"));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::invalid("covariance must be positive-definite"))?;
        Ok(Component {
            weight,
            mean,
            cov,
            chol,
        })
    }

    /// Whether the covariance is `σ²I`; returns `σ²` when it is.
    fn isotropic_variance(&self) -> Option<f64> {
        let d = self.mean.len();
        let v = self.cov[(0, 0)];
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { v } else { 0.0 };
                if (self.cov[(i, j)] - want).abs() > 1e-12 * v.max(1.0) {
                    return None;
                }
            }
        }
        Some(v)
    }
}

/// Gaussian-mixture data distribution with closed-form score and noise
/// oracles for every marginal `p_t`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

/// JSON document schema for mixtures.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureDoc {
    dim: usize,
    components: Vec<ComponentDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentDoc {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn new(dim: usize, components: Vec<(f64, Vec<f64>, Vec<Vec<f64>>)>) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::invalid("mixture dim must be 1, 2 or 3"));
        }
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut parts = Vec::with_capacity(components.len());
        let mut total = 0.0;
        for (w, mean, cov) in components {
            if mean.len() != dim {
                return Err(Error::invalid("component mean has wrong dimension"));
            }
            let mut m = DMatrix::zeros(dim, dim);
            if cov.len() != dim {
                return Err(Error::invalid("component covariance has wrong shape"));
            }
            for (i, row) in cov.iter().enumerate() {
                if row.len() != dim {
                    return Err(Error::invalid("component covariance has wrong shape"));
                }
                for (j, v) in row.iter().enumerate() {
                    m[(i, j)] = *v;
                }
            }
            total += w;
            parts.push(Component::new(w, DVector::from_vec(mean), m)?);
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "component weights must sum to 1 (got {total})"
            )));
        }
        Ok(GaussianMixture {
            dim,
            components: parts,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MixtureDoc =
            serde_json::from_str(text).map_err(|e| Error::schema(format!("mixture json: {e}")))?;
        GaussianMixture::new(
            doc.dim,
            doc.components
                .into_iter()
                .map(|c| (c.weight, c.mean, c.cov))
                .collect(),
        )
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        let eye = vec![(1.0, vec![0.0; dim], identity(dim))];
        GaussianMixture::new(dim, eye).expect("standard normal is valid")
    }

    /// A single Gaussian `N(mean, σ²I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        let cov = scaled_identity(d, sigma * sigma);
        GaussianMixture::new(d, vec![(1.0, mean, cov)])
    }

    /// `count` equally weighted isotropic Gaussians on a circle of the given
    /// radius — the classic 2-D multimodal benchmark.
    pub fn ring(count: usize, radius: f64, sigma: f64) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("ring needs at least one component"));
        }
        let w = 1.0 / count as f64;
        let comps = (0..count)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                (
                    w,
                    vec![radius * a.cos(), radius * a.sin()],
                    scaled_identity(2, sigma * sigma),
                )
            })
            .collect();
        GaussianMixture::new(2, comps)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// Draw one data sample.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = k;
                break;
            }
        }
        let c = &self.components[idx];
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| standard_normal(rng)));
        let x = &c.mean + c.chol.l() * z;
        x.iter().copied().collect()
    }

    /// Draw `n` samples into a flat row-major buffer.
    pub fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            out.extend_from_slice(&self.sample(rng));
        }
        out
    }

    /// Log-density of the noisy marginal `p_t = Σ_k π_k N(μ_k, Σ_k + t²I)`.
    pub fn log_density_pt(&self, x: &[f64], t: f64) -> Result<f64> {
        let (log_terms, _) = self.component_terms(x, t)?;
        Ok(log_sum_exp(&log_terms))
    }

    /// Closed-form score `∇_x log p_t(x)`: the posterior-weighted sum of
    /// per-component Gaussian scores.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (log_terms, solves) = self.component_terms(x, t)?;
        let lse = log_sum_exp(&log_terms);
        let mut out = vec![0.0; self.dim];
        for (lt, y) in log_terms.iter().zip(&solves) {
            let post = (lt - lse).exp();
            for (o, yi) in out.iter_mut().zip(y.iter()) {
                *o -= post * yi;
            }
        }
        Ok(out)
    }

    /// The ideal noise prediction `ε = −t·∇_x log p_t(x)`.
    pub fn eps(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if t <= 0.0 {
            return Err(Error::invalid("oracle eps is undefined at t <= 0"));
        }
        let mut s = self.score(x, t)?;
        for v in &mut s {
            *v *= -t;
        }
        Ok(s)
    }

    /// Per-component log densities of `p_t` and solves `(Σ_k + t²I)⁻¹ (x − μ_k)`.
    fn component_terms(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        if x.len() != self.dim {
            return Err(Error::invalid("point has wrong dimension"));
        }
        if !(t >= 0.0) {
            return Err(Error::invalid("noise level must be non-negative"));
        }
        let xv = DVector::from_column_slice(x);
        let mut log_terms = Vec::with_capacity(self.components.len());
        let mut solves = Vec::with_capacity(self.components.len());
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for c in &self.components {
            let mut a = c.cov.clone();
            for i in 0..self.dim {
                a[(i, i)] += t * t;
            }
            let chol = Cholesky::new(a).ok_or_else(|| {
                Error::numerical("covariance plus noise variance is not positive-definite")
            })?;
            let diff = &xv - &c.mean;
            let y = chol.solve(&diff);
            let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let quad = diff.dot(&y);
            log_terms
                .push(c.weight.ln() - half_ln_2pi * self.dim as f64 - 0.5 * log_det - 0.5 * quad);
            solves.push(y);
        }
        Ok((log_terms, solves))
    }
}

/// Class-conditional toy distribution: one mixture per class plus a prior.
#[derive(Debug, Clone)]
pub struct ConditionalMixture {
    classes: Vec<(u32, GaussianMixture)>,
    prior: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionalDoc {
    prior: Vec<f64>,
    classes: Vec<ClassDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassDoc {
    label: u32,
    mixture: MixtureDoc,
}

impl ConditionalMixture {
    pub fn new(classes: Vec<(u32, GaussianMixture)>, prior: Vec<f64>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("conditional mixture needs classes"));
        }
        if prior.len() != classes.len() {
            return Err(Error::invalid("prior length must match class count"));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-12 || prior.iter().any(|p| *p <= 0.0) {
            return Err(Error::invalid("class prior must be positive and sum to 1"));
        }
        let dim = classes[0].1.dim();
        if classes.iter().any(|(_, m)| m.dim() != dim) {
            return Err(Error::invalid("all class mixtures must share a dimension"));
        }
        let mut labels: Vec<u32> = classes.iter().map(|(l, _)| *l).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != classes.len() {
            return Err(Error::invalid("class labels must be unique"));
        }
        Ok(ConditionalMixture { classes, prior })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConditionalDoc = serde_json::from_str(text)
            .map_err(|e| Error::schema(format!("conditional mixture json: {e}")))?;
        let classes = doc
            .classes
            .into_iter()
            .map(|c| {
                let comps = c
                    .mixture
                    .components
                    .into_iter()
                    .map(|k| (k.weight, k.mean, k.cov))
                    .collect();
                Ok((c.label, GaussianMixture::new(c.mixture.dim, comps)?))
            })
            .collect::<Result<Vec<_>>>()?;
        ConditionalMixture::new(classes, doc.prior)
    }

    pub fn dim(&self) -> usize {
        self.classes[0].1.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn class(&self, index: usize) -> &GaussianMixture {
        &self.classes[index].1
    }

    pub fn label(&self, index: usize) -> u32 {
        self.classes[index].0
    }

    /// Draw a class index from the prior.
    pub fn sample_class(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in self.prior.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.prior.len() - 1
    }

    /// The prior-weighted marginal over all classes.
    pub fn marginal(&self) -> GaussianMixture {
        let dim = self.dim();
        let comps = self
            .classes
            .iter()
            .zip(&self.prior)
            .flat_map(|((_, m), p)| {
                m.components().iter().map(move |c| {
                    (
                        p * c.weight,
                        c.mean.iter().copied().collect(),
                        (0..dim)
                            .map(|i| (0..dim).map(|j| c.cov[(i, j)]).collect())
                            .collect(),
                    )
                })
            })
            .collect();
        GaussianMixture::new(dim, comps).expect("marginal of a valid conditional mixture is valid")
    }
}

/// Forward perturbation `x₀ + t·ε`, `ε ~ N(0, I)`.
pub fn perturb(x0: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::invalid("perturbation noise level must be >= 0"));
    }
    Ok(x0.iter().map(|v| v + t * standard_normal(rng)).collect())
}

/// Batched perturbation over a flat row-major buffer.
pub fn perturb_batch(x0: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::invalid("perturbation noise level must be >= 0"));
    }
    Ok(x0.iter().map(|v| v + t * standard_normal(rng)).collect())
}

/// Exact solution of the probability-flow ODE for a single isotropic Gaussian
/// `N(μ, σ²I)`: `x(t) = μ + (x_s − μ)·√((σ²+t²)/(σ²+s²))`.
pub fn exact_flow(gaussian: &GaussianMixture, x_s: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
    if gaussian.components().len() != 1 {
        return Err(Error::invalid(
            "exact flow requires a single-component mixture",
        ));
    }
    let c = &gaussian.components()[0];
    let var = c
        .isotropic_variance()
        .ok_or_else(|| Error::invalid("exact flow requires an isotropic covariance"))?;
    if x_s.len() != gaussian.dim() {
        return Err(Error::invalid("point has wrong dimension"));
    }
    let scale = ((var + t * t) / (var + s * s)).sqrt();
    Ok(x_s
        .iter()
        .zip(c.mean.iter())
        .map(|(x, m)| m + (x - m) * scale)
        .collect())
}

/// Draw `x_N ~ N(0, t_max² I)`.
pub fn prior_sample(spec: &DiffusionSpec, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| spec.t_max() * standard_normal(rng)).collect()
}

/// Batched prior draw: `n` chains, flat row-major.
pub fn prior_sample_batch(
    spec: &DiffusionSpec,
    dim: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    (0..n * dim)
        .map(|_| spec.t_max() * standard_normal(rng))
        .collect()
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    scaled_identity(d, 1.0)
}

fn scaled_identity(d: usize, v: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { v } else { 0.0 }).collect())
        .collect()
}
