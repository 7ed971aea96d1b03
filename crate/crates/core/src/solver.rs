//! Solvers for the plug-in ODE `dx/dt = ε(x, t)`.
//!
//! All steppers work on flat row-major batches of chains that share the same
//! timestamps, since that is how trajectories are generated everywhere in this
//! crate. Sampling runs from `t_max` down to `t_min`.
//!
//! The exponential-integrator updates operate in `λ = −ln t`, where the ODE
//! becomes `dx/dλ + x = x̂0(λ)` with data prediction `x̂0 = x − t·ε(x, t)`.
//! Integrating exactly against a Taylor expansion of `x̂0` in `λ` gives
//!
//! `x' = (t'/t)·[x + d₀·I₀ + d₁·I₁ + d₂·I₂/2]`,
//!
//! with `h = λ' − λ`, `I₀ = eʰ−1`, `I₁ = eʰ(h−1)+1`, `I₂ = eʰ(h²−2h+2)−2`,
//! and `d₁`, `d₂` estimated from prior data predictions by Newton backward
//! differences. With an empty history the update degenerates to the
//! constant-`x̂0` formula `(t'/t)x + (1−t'/t)x̂0`, which is also the Euler/DDIM
//! step expressed through the data prediction.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::process::{ConditionalMixture, GaussianMixture};
use crate::schedule::TimeSchedule;

/// Conditioning passed to a noise-prediction model. `classes`, when present,
/// holds one class index per chain in the batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cond<'a> {
    pub classes: Option<&'a [usize]>,
    pub step: Option<u32>,
}

impl Cond<'_> {
    pub const NONE: Cond<'static> = Cond {
        classes: None,
        step: None,
    };
}

/// An evaluable noise-prediction mapping `(x, t, cond) → ε`.
pub trait EpsModel {
    fn dim(&self) -> usize;

    /// Number of real classes for class-conditional models; the index equal
    /// to this count addresses the null (unconditional) class.
    fn num_classes(&self) -> Option<usize> {
        None
    }

    /// Evaluate ε for a batch of chains at a shared noise level.
    fn eval(&self, xs: &[f64], t: f64, cond: &Cond) -> Result<Vec<f64>>;

    /// Network forward passes consumed by one `eval` call.
    fn nfe_cost(&self) -> u64 {
        1
    }
}

/// The analytic noise prediction of a Gaussian mixture — the ideal teacher.
pub struct OracleEps<'a> {
    mixture: &'a GaussianMixture,
}

impl<'a> OracleEps<'a> {
    pub fn new(mixture: &'a GaussianMixture) -> Self {
        OracleEps { mixture }
    }
}

impl EpsModel for OracleEps<'_> {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn eval(&self, xs: &[f64], t: f64, _cond: &Cond) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks_exact(d) {
            out.extend_from_slice(&self.mixture.eps(chunk, t)?);
        }
        Ok(out)
    }
}

/// Class-conditional analytic noise prediction. The class index equal to
/// `num_classes` selects the prior-weighted marginal (the null class).
pub struct ConditionalOracleEps<'a> {
    data: &'a ConditionalMixture,
    marginal: GaussianMixture,
}

impl<'a> ConditionalOracleEps<'a> {
    pub fn new(data: &'a ConditionalMixture) -> Self {
        ConditionalOracleEps {
            data,
            marginal: data.marginal(),
        }
    }
}

impl EpsModel for ConditionalOracleEps<'_> {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        Some(self.data.num_classes())
    }

    fn eval(&self, xs: &[f64], t: f64, cond: &Cond) -> Result<Vec<f64>> {
        let d = self.dim();
        let n = xs.len() / d;
        let classes = cond
            .classes
            .ok_or_else(|| Error::invalid("conditional oracle requires class indices"))?;
        if classes.len() != n {
            return Err(Error::invalid("one class index per chain required"));
        }
        let mut out = Vec::with_capacity(xs.len());
        for (chunk, &c) in xs.chunks_exact(d).zip(classes) {
            let mix = if c == self.data.num_classes() {
                &self.marginal
            } else if c < self.data.num_classes() {
                self.data.class(c)
            } else {
                return Err(Error::invalid("class index out of range"));
            };
            out.extend_from_slice(&mix.eps(chunk, t)?);
        }
        Ok(out)
    }
}

/// Counts every underlying forward pass; used to audit NFE accounting.
pub struct CountingEps<'a, M: EpsModel + ?Sized> {
    inner: &'a M,
    count: std::cell::Cell<u64>,
}

impl<'a, M: EpsModel + ?Sized> CountingEps<'a, M> {
    pub fn new(inner: &'a M) -> Self {
        CountingEps {
            inner,
            count: std::cell::Cell::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        self.count.get()
    }
}

impl<M: EpsModel + ?Sized> EpsModel for CountingEps<'_, M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes()
    }

    fn eval(&self, xs: &[f64], t: f64, cond: &Cond) -> Result<Vec<f64>> {
        self.count.set(self.count.get() + self.inner.nfe_cost());
        self.inner.eval(xs, t, cond)
    }

    fn nfe_cost(&self) -> u64 {
        self.inner.nfe_cost()
    }
}

/// Solver families. Per-step model cost: one evaluation for `Euler` and the
/// multistep kinds, two for `Heun` and `Dpm2s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Euler,
    Heun,
    Dpm2s,
    DpmPp2m,
    DpmPp3m,
}

impl SolverKind {
    pub fn step_cost(self) -> u64 {
        match self {
            SolverKind::Euler | SolverKind::DpmPp2m | SolverKind::DpmPp3m => 1,
            SolverKind::Heun | SolverKind::Dpm2s => 2,
        }
    }

    pub fn is_multistep(self) -> bool {
        matches!(self, SolverKind::DpmPp2m | SolverKind::DpmPp3m)
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(SolverKind::Euler),
            "heun" => Ok(SolverKind::Heun),
            "dpm_2s" => Ok(SolverKind::Dpm2s),
            "dpm_pp_2m" => Ok(SolverKind::DpmPp2m),
            "dpm_pp_3m" => Ok(SolverKind::DpmPp3m),
            other => Err(Error::invalid(format!("unknown solver kind `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Heun => "heun",
            SolverKind::Dpm2s => "dpm_2s",
            SolverKind::DpmPp2m => "dpm_pp_2m",
            SolverKind::DpmPp3m => "dpm_pp_3m",
        }
    }
}

/// Prior data predictions `(λ, x̂0)` carried by the multistep kinds. At most
/// the two most recent entries are kept.
#[derive(Debug, Clone, Default)]
pub struct MultistepHistory {
    entries: Vec<(f64, Vec<f64>)>,
}

impl MultistepHistory {
    pub fn new() -> Self {
        MultistepHistory::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Seed the history with a known `(λ, x̂0)` pair, oldest first.
    pub fn push(&mut self, lambda: f64, data_prediction: Vec<f64>) {
        self.entries.push((lambda, data_prediction));
        if self.entries.len() > 2 {
            self.entries.remove(0);
        }
    }
}

/// A sampling trajectory: anchor points `(t, batch)` with times strictly
/// decreasing, plus the number of model forward passes spent producing it.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub points: Vec<(f64, Vec<f64>)>,
    pub nfe: u64,
    pub n_chains: usize,
    pub dim: usize,
}

impl SolveTrace {
    /// Final state of every chain, flat row-major.
    pub fn endpoint(&self) -> &[f64] {
        &self.points.last().expect("trace has points").1
    }
}

/// The analytical first step estimate `ε ≈ x/√(1+t²)`; costs zero NFE.
pub fn afs_eps(xs: &[f64], t: f64) -> Vec<f64> {
    let denom = (1.0 + t * t).sqrt();
    xs.iter().map(|x| x / denom).collect()
}

fn check_step_times(t: f64, t_next: f64, needs_positive_target: bool) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::invalid("step source noise level must be positive"));
    }
    if !(t_next < t) {
        return Err(Error::invalid("steps must reduce the noise level"));
    }
    if needs_positive_target {
        if !(t_next > 0.0) {
            return Err(Error::invalid(
                "this solver evaluates at the target noise level, which must be positive",
            ));
        }
    } else if !(t_next >= 0.0) {
        return Err(Error::invalid("target noise level must be non-negative"));
    }
    Ok(())
}

/// One Euler (DDIM) step `x' = x + (t'−t)·ε(x, t)`.
pub fn step_euler(
    model: &dyn EpsModel,
    xs: &[f64],
    t: f64,
    t_next: f64,
    cond: &Cond,
) -> Result<Vec<f64>> {
    check_step_times(t, t_next, false)?;
    let eps = model.eval(xs, t, cond)?;
    Ok(axpy(xs, &eps, t_next - t))
}

/// Heun's second-order step: Euler predictor then trapezoidal correction.
pub fn step_heun(
    model: &dyn EpsModel,
    xs: &[f64],
    t: f64,
    t_next: f64,
    cond: &Cond,
) -> Result<Vec<f64>> {
    check_step_times(t, t_next, true)?;
    let eps = model.eval(xs, t, cond)?;
    let pred = axpy(xs, &eps, t_next - t);
    let eps_next = model.eval(&pred, t_next, cond)?;
    let half = 0.5 * (t_next - t);
    Ok(xs
        .iter()
        .zip(eps.iter().zip(&eps_next))
        .map(|(x, (a, b))| x + half * (a + b))
        .collect())
}

/// Single-step second-order exponential integrator with the midpoint placed
/// at `t_m = √(t·t')` (the λ-space midpoint).
pub fn step_dpm_2s(
    model: &dyn EpsModel,
    xs: &[f64],
    t: f64,
    t_next: f64,
    cond: &Cond,
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t_next > 0.0 && t_next <= t) {
        return Err(Error::invalid(
            "dpm_2s requires 0 < t' <= t (t' = t is the identity)",
        ));
    }
    let t_mid = (t * t_next).sqrt();
    let eps = model.eval(xs, t, cond)?;
    let x0 = data_prediction(xs, &eps, t);
    let mid = convex_toward(xs, &x0, t_mid / t);
    let eps_mid = model.eval(&mid, t_mid, cond)?;
    let x0_mid = data_prediction(&mid, &eps_mid, t_mid);
    Ok(convex_toward(xs, &x0_mid, t_next / t))
}

/// One multistep exponential-integrator step of the requested order. Orders
/// downgrade while the history is shorter than `order − 1`. The current data
/// prediction is appended to the history afterwards.
pub fn step_dpm_pp_multistep(
    model: &dyn EpsModel,
    xs: &[f64],
    t: f64,
    t_next: f64,
    history: &mut MultistepHistory,
    order: usize,
    cond: &Cond,
) -> Result<Vec<f64>> {
    check_step_times(t, t_next, true)?;
    if !(order == 2 || order == 3) {
        return Err(Error::invalid("multistep order must be 2 or 3"));
    }
    let lambda = -t.ln();
    let lambda_next = -t_next.ln();
    let h = lambda_next - lambda;

    let eps = model.eval(xs, t, cond)?;
    let x0 = data_prediction(xs, &eps, t);

    let i0 = h.exp() - 1.0;
    let i1 = h.exp() * (h - 1.0) + 1.0;
    let i2 = h.exp() * (h * h - 2.0 * h + 2.0) - 2.0;

    let effective = order.min(1 + history.len());
    let n = xs.len();
    let mut acc = vec![0.0; n];
    for i in 0..n {
        acc[i] = xs[i] + x0[i] * i0;
    }
    match effective {
        1 => {}
        2 => {
            let (l1, prev1) = history.entries.last().expect("history entry");
            let h0 = lambda - l1;
            for i in 0..n {
                let d1 = (x0[i] - prev1[i]) / h0;
                acc[i] += d1 * i1;
            }
        }
        3 => {
            let (l2, prev2) = &history.entries[history.entries.len() - 2];
            let (l1, prev1) = &history.entries[history.entries.len() - 1];
            let h0 = lambda - l1;
            let h1 = l1 - l2;
            for i in 0..n {
                let d_q0 = (x0[i] - prev1[i]) / h0;
                let d_q1 = (prev1[i] - prev2[i]) / h1;
                let d1 = d_q0 + h0 * (d_q0 - d_q1) / (h0 + h1);
                let d2 = 2.0 * (d_q0 - d_q1) / (h0 + h1);
                acc[i] += d1 * i1 + 0.5 * d2 * i2;
            }
        }
        _ => unreachable!(),
    }
    let scale = t_next / t;
    for v in &mut acc {
        *v *= scale;
    }
    history.push(lambda, x0);
    Ok(acc)
}

/// Run `sub_times.len() − 1` steps of the given kind over a descending
/// sub-time list. Multistep kinds consume and extend `history`, so calls over
/// consecutive segments chain exactly like one call over the concatenation.
pub fn solve_segment(
    model: &dyn EpsModel,
    xs: &[f64],
    sub_times: &[f64],
    kind: SolverKind,
    history: &mut MultistepHistory,
    cond: &Cond,
) -> Result<SegmentRun> {
    if sub_times.len() < 2 {
        return Err(Error::invalid("segment needs at least two timestamps"));
    }
    if sub_times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("segment times must strictly decrease"));
    }
    let mut run = SegmentRun {
        x: xs.to_vec(),
        points: vec![(sub_times[0], xs.to_vec())],
        nfe: 0,
    };
    for w in sub_times.windows(2) {
        let (x, nfe) = step_once(model, &run.x, w[0], w[1], kind, history, cond, None)?;
        run.x = x;
        run.nfe += nfe;
        run.points.push((w[1], run.x.clone()));
    }
    Ok(run)
}

/// Result of [`solve_segment`]: the endpoint, all visited points, and the
/// model cost.
#[derive(Debug, Clone)]
pub struct SegmentRun {
    pub x: Vec<f64>,
    pub points: Vec<(f64, Vec<f64>)>,
    pub nfe: u64,
}

/// One step of any kind; `first_eval_override` substitutes the first model
/// call of the step (used by the analytical first step) at zero cost.
#[allow(clippy::too_many_arguments)]
fn step_once(
    model: &dyn EpsModel,
    xs: &[f64],
    t: f64,
    t_next: f64,
    kind: SolverKind,
    history: &mut MultistepHistory,
    cond: &Cond,
    first_eval_override: Option<&[f64]>,
) -> Result<(Vec<f64>, u64)> {
    let mut nfe = 0;
    let mut eval_first = |x: &[f64], tt: f64| -> Result<Vec<f64>> {
        match first_eval_override {
            Some(eps) => Ok(eps.to_vec()),
            None => {
                nfe += model.nfe_cost();
                model.eval(x, tt, cond)
            }
        }
    };
    match kind {
        SolverKind::Euler => {
            check_step_times(t, t_next, false)?;
            let eps = eval_first(xs, t)?;
            Ok((axpy(xs, &eps, t_next - t), nfe))
        }
        SolverKind::Heun => {
            check_step_times(t, t_next, true)?;
            let eps = eval_first(xs, t)?;
            let pred = axpy(xs, &eps, t_next - t);
            nfe += model.nfe_cost();
            let eps_next = model.eval(&pred, t_next, cond)?;
            let half = 0.5 * (t_next - t);
            let x = xs
                .iter()
                .zip(eps.iter().zip(&eps_next))
                .map(|(x, (a, b))| x + half * (a + b))
                .collect();
            Ok((x, nfe))
        }
        SolverKind::Dpm2s => {
            if !(t > 0.0 && t_next > 0.0 && t_next <= t) {
                return Err(Error::invalid("dpm_2s requires 0 < t' <= t"));
            }
            let t_mid = (t * t_next).sqrt();
            let eps = eval_first(xs, t)?;
            let x0 = data_prediction(xs, &eps, t);
            let mid = convex_toward(xs, &x0, t_mid / t);
            nfe += model.nfe_cost();
            let eps_mid = model.eval(&mid, t_mid, cond)?;
            let x0_mid = data_prediction(&mid, &eps_mid, t_mid);
            Ok((convex_toward(xs, &x0_mid, t_next / t), nfe))
        }
        SolverKind::DpmPp2m | SolverKind::DpmPp3m => {
            let order = if kind == SolverKind::DpmPp2m { 2 } else { 3 };
            match first_eval_override {
                None => {
                    nfe += model.nfe_cost();
                    let x = step_dpm_pp_multistep(model, xs, t, t_next, history, order, cond)?;
                    Ok((x, nfe))
                }
                Some(eps) => {
                    // Reproduce the multistep update with the substituted ε:
                    // first-order fallback plus a history record, exactly as a
                    // model call would have produced.
                    check_step_times(t, t_next, true)?;
                    let lambda = -t.ln();
                    let x0 = data_prediction(xs, eps, t);
                    let x = convex_toward(xs, &x0, t_next / t);
                    history.push(lambda, x0);
                    Ok((x, nfe))
                }
            }
        }
    }
}

/// Options for full-trajectory sampling.
#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub kind: SolverKind,
    /// Replace the first model call with [`afs_eps`], saving one evaluation.
    pub afs: bool,
    /// Classifier-free guidance `(class, ω)`; ω = 1 is plain conditional
    /// sampling with the single conditional branch evaluated.
    pub guidance: Option<(usize, f64)>,
    /// Step-count condition fed to every model call.
    pub step_condition: Option<u32>,
    pub n_chains: usize,
}

impl SampleOptions {
    pub fn new(kind: SolverKind, n_chains: usize) -> Self {
        SampleOptions {
            kind,
            afs: false,
            guidance: None,
            step_condition: None,
            n_chains,
        }
    }

    pub fn with_afs(mut self, afs: bool) -> Self {
        self.afs = afs;
        self
    }

    pub fn with_step_condition(mut self, n: u32) -> Self {
        self.step_condition = Some(n);
        self
    }

    pub fn with_guidance(mut self, class: usize, omega: f64) -> Self {
        self.guidance = Some((class, omega));
        self
    }
}

/// Draw `x_N ~ N(0, t_max²I)` and integrate the schedule down to `t_min`.
/// Returns the endpoint batch and the full trace.
pub fn sample(
    model: &dyn EpsModel,
    schedule: &TimeSchedule,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, SolveTrace)> {
    let noise: Vec<f64> = (0..opts.n_chains * model.dim())
        .map(|_| schedule.t_max() * crate::process::standard_normal(rng))
        .collect();
    sample_with_noise(model, schedule, opts, &noise)
}

/// [`sample`] with the initial noise supplied by the caller; chains can then
/// be generated in parallel chunks without perturbing the draw order.
pub fn sample_with_noise(
    model: &dyn EpsModel,
    schedule: &TimeSchedule,
    opts: &SampleOptions,
    noise: &[f64],
) -> Result<(Vec<f64>, SolveTrace)> {
    let d = model.dim();
    if noise.len() != opts.n_chains * d {
        return Err(Error::invalid("noise buffer does not match chains × dim"));
    }
    if opts.afs && schedule.segments() < 2 {
        return Err(Error::invalid(
            "the analytical first step needs a schedule with at least two segments",
        ));
    }
    let guided_storage;
    let (model, class_vec): (&dyn EpsModel, Option<Vec<usize>>) = match opts.guidance {
        None => (model, None),
        Some((class, omega)) => {
            let n_classes = model
                .num_classes()
                .ok_or_else(|| Error::invalid("guidance requires a class-conditional model"))?;
            if class >= n_classes {
                return Err(Error::invalid("guidance class out of range"));
            }
            guided_storage = GuidedSampler {
                inner: model,
                omega,
            };
            (&guided_storage, Some(vec![class; opts.n_chains]))
        }
    };
    let cond = Cond {
        classes: class_vec.as_deref(),
        step: opts.step_condition,
    };

    let values = schedule.values();
    let mut x = noise.to_vec();
    let mut trace = SolveTrace {
        points: vec![(schedule.t_max(), x.clone())],
        nfe: 0,
        n_chains: opts.n_chains,
        dim: d,
    };
    let mut history = MultistepHistory::new();
    for seg in (0..schedule.segments()).rev() {
        let (t_hi, t_lo) = (values[seg + 1], values[seg]);
        let afs_now = opts.afs && seg + 1 == schedule.segments();
        let override_eps = afs_now.then(|| afs_eps(&x, t_hi));
        let (next, nfe) = step_once(
            model,
            &x,
            t_hi,
            t_lo,
            opts.kind,
            &mut history,
            &cond,
            override_eps.as_deref(),
        )?;
        x = next;
        trace.nfe += nfe;
        trace.points.push((t_lo, x.clone()));
    }
    Ok((x, trace))
}

/// Guidance wrapper used inside [`sample`]: blends the conditional and null
/// branches, skipping the null branch entirely at ω = 1.
struct GuidedSampler<'a> {
    inner: &'a dyn EpsModel,
    omega: f64,
}

impl EpsModel for GuidedSampler<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn num_classes(&self) -> Option<usize> {
        self.inner.num_classes()
    }

    fn eval(&self, xs: &[f64], t: f64, cond: &Cond) -> Result<Vec<f64>> {
        let cond_eps = self.inner.eval(xs, t, cond)?;
        if self.omega == 1.0 {
            return Ok(cond_eps);
        }
        let n_classes = self.inner.num_classes().expect("checked conditional");
        let null = vec![n_classes; xs.len() / self.dim()];
        let null_cond = Cond {
            classes: Some(&null),
            step: cond.step,
        };
        let null_eps = self.inner.eval(xs, t, &null_cond)?;
        Ok(cond_eps
            .iter()
            .zip(&null_eps)
            .map(|(c, u)| self.omega * c + (1.0 - self.omega) * u)
            .collect())
    }

    fn nfe_cost(&self) -> u64 {
        if self.omega == 1.0 {
            self.inner.nfe_cost()
        } else {
            2 * self.inner.nfe_cost()
        }
    }
}

fn axpy(xs: &[f64], eps: &[f64], scale: f64) -> Vec<f64> {
    xs.iter().zip(eps).map(|(x, e)| x + scale * e).collect()
}

fn data_prediction(xs: &[f64], eps: &[f64], t: f64) -> Vec<f64> {
    xs.iter().zip(eps).map(|(x, e)| x - t * e).collect()
}

/// `(r)·x + (1−r)·x̂0` elementwise.
fn convex_toward(xs: &[f64], x0: &[f64], r: f64) -> Vec<f64> {
    xs.iter()
        .zip(x0)
        .map(|(x, k)| r * x + (1.0 - r) * k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;
    use proptest::prelude::*;

    /// ε ≡ constant.
    struct ConstEps {
        dim: usize,
        value: f64,
    }

    impl EpsModel for ConstEps {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, xs: &[f64], _t: f64, _cond: &Cond) -> Result<Vec<f64>> {
            Ok(vec![self.value; xs.len()])
        }
    }

    /// ε(x, t) = a + b·t, independent of x.
    struct LinearInT {
        a: f64,
        b: f64,
    }

    impl EpsModel for LinearInT {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, xs: &[f64], t: f64, _cond: &Cond) -> Result<Vec<f64>> {
            Ok(vec![self.a + self.b * t; xs.len()])
        }
    }

    /// Constant data prediction x̂0 ≡ k, i.e. ε(x, t) = (x − k)/t.
    struct ConstData {
        dim: usize,
        k: f64,
    }

    impl EpsModel for ConstData {
        fn dim(&self) -> usize {
            self.dim
        }
        fn eval(&self, xs: &[f64], t: f64, _cond: &Cond) -> Result<Vec<f64>> {
            Ok(xs.iter().map(|x| (x - self.k) / t).collect())
        }
    }

    #[test]
    fn euler_update_rule() {
        let m = ConstEps { dim: 1, value: 1.0 };
        let x = step_euler(&m, &[2.0], 1.0, 0.5, &Cond::NONE).unwrap();
        assert_eq!(x, vec![1.5]);

        let z = ConstEps { dim: 1, value: 0.0 };
        let x = step_euler(&z, &[2.0], 1.0, 0.5, &Cond::NONE).unwrap();
        assert_eq!(x, vec![2.0]);
    }

    #[test]
    fn heun_equals_euler_for_constant_field() {
        let m = ConstEps {
            dim: 2,
            value: 0.7,
        };
        let e = step_euler(&m, &[1.0, -1.0], 2.0, 1.0, &Cond::NONE).unwrap();
        let h = step_heun(&m, &[1.0, -1.0], 2.0, 1.0, &Cond::NONE).unwrap();
        assert_eq!(e, h);
    }

    #[test]
    fn heun_exact_for_linear_in_t_field() {
        let m = LinearInT { a: 0.3, b: -0.2 };
        let (t, t_next, x) = (3.0, 1.0, 0.5);
        let got = step_heun(&m, &[x], t, t_next, &Cond::NONE).unwrap()[0];
        let exact = x + m.a * (t_next - t) + 0.5 * m.b * (t_next * t_next - t * t);
        assert!((got - exact).abs() < 1e-15);
    }

    #[test]
    fn heun_rejects_zero_target() {
        let m = ConstEps { dim: 1, value: 0.0 };
        assert!(step_heun(&m, &[1.0], 1.0, 0.0, &Cond::NONE).is_err());
    }

    #[test]
    fn dpm_2s_identity_and_exactness() {
        let m = ConstData { dim: 1, k: 0.4 };
        let same = step_dpm_2s(&m, &[2.0], 1.5, 1.5, &Cond::NONE).unwrap();
        assert_eq!(same, vec![2.0]);

        let (t, t_next) = (4.0, 0.5);
        let got = step_dpm_2s(&m, &[2.0], t, t_next, &Cond::NONE).unwrap()[0];
        let exact = (t_next / t) * 2.0 + (1.0 - t_next / t) * m.k;
        assert!((got - exact).abs() < 1e-14);
    }

    #[test]
    fn multistep_first_order_fallback_is_exact_for_constant_data() {
        let m = ConstData { dim: 1, k: -1.2 };
        let mut hist = MultistepHistory::new();
        let (t, t_next) = (10.0, 2.0);
        let got =
            step_dpm_pp_multistep(&m, &[3.0], t, t_next, &mut hist, 3, &Cond::NONE).unwrap()[0];
        let exact = (t_next / t) * 3.0 + (1.0 - t_next / t) * m.k;
        assert!((got - exact).abs() < 1e-14);
        assert_eq!(hist.len(), 1);
    }

    #[test]
    fn every_kind_reproduces_constant_data_flow_to_1e12() {
        // Constant x̂0 makes the exact flow x(t') = (t'/t)x + (1−t'/t)k; every
        // solver kind must reproduce it to floating-point accuracy.
        let m = ConstData { dim: 2, k: 0.9 };
        let times = [20.0, 7.0, 2.5, 0.9, 0.31];
        let x0 = [5.0, -3.0];
        for kind in [
            SolverKind::Euler,
            SolverKind::Heun,
            SolverKind::Dpm2s,
            SolverKind::DpmPp2m,
            SolverKind::DpmPp3m,
        ] {
            let mut hist = MultistepHistory::new();
            let run = solve_segment(&m, &x0, &times, kind, &mut hist, &Cond::NONE).unwrap();
            let r = times[times.len() - 1] / times[0];
            for (x, want) in run.x.iter().zip(x0.iter().map(|x| r * x + (1.0 - r) * m.k)) {
                assert!((x - want).abs() <= 1e-12, "kind {kind:?}: {x} vs {want}");
            }
        }
    }

    #[test]
    fn multistep_history_chaining_is_bit_identical() {
        let mix = GaussianMixture::standard(1);
        let m = OracleEps::new(&mix);
        let times: Vec<f64> = (0..9).map(|i| 40.0 * 0.58f64.powi(i)).collect();

        for kind in [SolverKind::DpmPp2m, SolverKind::DpmPp3m] {
            let mut hist = MultistepHistory::new();
            let whole =
                solve_segment(&m, &[12.0], &times, kind, &mut hist, &Cond::NONE).unwrap();

            let mut hist2 = MultistepHistory::new();
            let first =
                solve_segment(&m, &[12.0], &times[..5], kind, &mut hist2, &Cond::NONE).unwrap();
            let second =
                solve_segment(&m, &first.x, &times[4..], kind, &mut hist2, &Cond::NONE).unwrap();
            assert_eq!(whole.x, second.x, "kind {kind:?}");
        }
    }

    #[test]
    fn solve_segment_trace_and_nfe() {
        let m = ConstEps { dim: 1, value: 0.1 };
        let mut hist = MultistepHistory::new();
        let run = solve_segment(
            &m,
            &[1.0],
            &[4.0, 3.0, 2.0, 1.0],
            SolverKind::Heun,
            &mut hist,
            &Cond::NONE,
        )
        .unwrap();
        assert_eq!(run.points.len(), 4);
        assert_eq!(run.nfe, 6);
    }

    #[test]
    fn solve_segment_k1_euler_equals_step_euler() {
        let mix = GaussianMixture::standard(1);
        let m = OracleEps::new(&mix);
        let mut hist = MultistepHistory::new();
        let run = solve_segment(
            &m,
            &[2.0],
            &[3.0, 1.0],
            SolverKind::Euler,
            &mut hist,
            &Cond::NONE,
        )
        .unwrap();
        let direct = step_euler(&m, &[2.0], 3.0, 1.0, &Cond::NONE).unwrap();
        assert_eq!(run.x, direct);
    }

    #[test]
    fn afs_formula_values() {
        let e = afs_eps(&[3.0, 4.0], 80.0);
        assert!((e[0] - 0.037497).abs() < 1e-5);
        assert!((e[1] - 0.049996).abs() < 1e-5);

        let id = afs_eps(&[3.0, 4.0], 0.0);
        assert_eq!(id, vec![3.0, 4.0]);
    }

    #[test]
    fn afs_relative_error_against_oracle_at_t80() {
        // For N(0,1) data both fields are proportional to x, so the relative
        // error is √(1 + 1/t²) − 1 ≈ 7.81e-5 at t = 80.
        let mix = GaussianMixture::standard(1);
        let x = [2.4];
        let oracle = mix.eps(&x, 80.0).unwrap()[0];
        let afs = afs_eps(&x, 80.0)[0];
        let rel = (afs - oracle).abs() / oracle.abs();
        assert!((rel - 7.812194848e-5).abs() < 1e-9, "rel {rel}");
    }

    #[test]
    fn sample_afs_counts_two_evals_on_three_steps() {
        let mix = GaussianMixture::standard(2);
        let oracle = OracleEps::new(&mix);
        let counting = CountingEps::new(&oracle);
        let schedule = TimeSchedule::polynomial(3, 0.006, 80.0, 7.0).unwrap();
        let opts = SampleOptions::new(SolverKind::Euler, 4).with_afs(true);
        let (_, trace) =
            sample(&counting, &schedule, &opts, &mut Streams::new(1).eval()).unwrap();
        assert_eq!(trace.nfe, 2);
        assert_eq!(counting.count(), 2);
    }

    #[test]
    fn sample_afs_needs_two_segments() {
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let schedule = TimeSchedule::polynomial(1, 0.006, 80.0, 7.0).unwrap();
        let opts = SampleOptions::new(SolverKind::Euler, 1).with_afs(true);
        assert!(sample(&oracle, &schedule, &opts, &mut Streams::new(1).eval()).is_err());
    }

    #[test]
    fn guidance_at_unit_scale_is_plain_conditional() {
        let data = ConditionalMixture::new(
            vec![
                (0, GaussianMixture::isotropic(vec![-2.0], 0.3).unwrap()),
                (1, GaussianMixture::isotropic(vec![2.0], 0.3).unwrap()),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let oracle = ConditionalOracleEps::new(&data);
        let schedule = TimeSchedule::polynomial(4, 0.006, 80.0, 7.0).unwrap();

        let opts = SampleOptions::new(SolverKind::Euler, 8).with_guidance(1, 1.0);
        let (g, trace) = sample(&oracle, &schedule, &opts, &mut Streams::new(5).eval()).unwrap();

        // Plain conditional sampling: evaluate the class-1 oracle directly.
        let class1 = data.class(1).clone();
        let plain_oracle = OracleEps::new(&class1);
        let (p, _) = sample(
            &plain_oracle,
            &schedule,
            &SampleOptions::new(SolverKind::Euler, 8),
            &mut Streams::new(5).eval(),
        )
        .unwrap();
        assert_eq!(g, p);
        assert_eq!(trace.nfe, 4);
    }

    #[test]
    fn trace_times_strictly_decrease() {
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let schedule = TimeSchedule::polynomial(5, 0.006, 80.0, 7.0).unwrap();
        let (_, trace) = sample(
            &oracle,
            &schedule,
            &SampleOptions::new(SolverKind::DpmPp3m, 2),
            &mut Streams::new(3).eval(),
        )
        .unwrap();
        for w in trace.points.windows(2) {
            assert!(w[1].0 < w[0].0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn nfe_accounting_matches_cost_formula(
            steps in 1usize..7,
            kind_idx in 0usize..5,
            afs in proptest::bool::ANY,
            seed in 0u64..1000,
        ) {
            let kind = [
                SolverKind::Euler,
                SolverKind::Heun,
                SolverKind::Dpm2s,
                SolverKind::DpmPp2m,
                SolverKind::DpmPp3m,
            ][kind_idx];
            let steps = if afs { steps.max(2) } else { steps };
            let mix = GaussianMixture::standard(1);
            let oracle = OracleEps::new(&mix);
            let counting = CountingEps::new(&oracle);
            let schedule = TimeSchedule::polynomial(steps, 0.01, 50.0, 7.0).unwrap();
            let opts = SampleOptions::new(kind, 2).with_afs(afs);
            let (_, trace) =
                sample(&counting, &schedule, &opts, &mut Streams::new(seed).eval()).unwrap();
            let want = kind.step_cost() * steps as u64 - u64::from(afs);
            prop_assert_eq!(trace.nfe, want);
            prop_assert_eq!(counting.count(), want);
        }
    }
}
