//! Evaluation and diagnostics.
//!
//! Distribution distances are measured with sliced Wasserstein: the mean over
//! random unit directions of the exact 1-D 2-Wasserstein distance between the
//! projected empirical distributions. Trajectory quality is measured against
//! reference teacher trajectories via per-segment single-Euler deviations,
//! and trajectories are visualized through PCA projection.

use nalgebra::{DMatrix, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{EpsNet, NetEps, TimeSpec};
use crate::process::{standard_normal, GaussianMixture};
use crate::rng::Streams;
use crate::schedule::TimeSchedule;
use crate::solver::{
    sample, solve_segment, Cond, EpsModel, MultistepHistory, SampleOptions, SolveTrace, SolverKind,
};
use crate::trainer::{
    adam_step, loss_distance, AdamState, LossMetric, TrainLog,
};

/// Mean L2 deviation from reference trajectories, one row per probe model and
/// one column per segment (column `n` is the step `t_{n+1} → t_n`). The
/// baseline row is the untouched teacher.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationMatrix {
    pub times: Vec<f64>,
    pub chains: usize,
    pub baseline: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl DeviationMatrix {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("deviation matrix serializes")
    }

    /// Fraction of off-diagonal entries that improve on the baseline.
    pub fn off_target_improvement_fraction(&self) -> f64 {
        let mut improved = 0usize;
        let mut total = 0usize;
        for (k, row) in self.rows.iter().enumerate() {
            for (n, v) in row.iter().enumerate() {
                if n == k {
                    continue;
                }
                total += 1;
                if *v < self.baseline[n] {
                    improved += 1;
                }
            }
        }
        improved as f64 / total.max(1) as f64
    }
}

/// Reference trajectories: teacher anchors on a schedule, generated with a
/// subdivided solve per segment (history carried across segments).
pub fn reference_trajectories(
    teacher: &dyn EpsModel,
    schedule: &TimeSchedule,
    substeps: usize,
    kind: SolverKind,
    n_chains: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SolveTrace> {
    let d = teacher.dim();
    let fine = schedule.subdivide(substeps)?;
    let mut x: Vec<f64> = (0..n_chains * d)
        .map(|_| schedule.t_max() * standard_normal(rng))
        .collect();
    let mut trace = SolveTrace {
        points: vec![(schedule.t_max(), x.clone())],
        nfe: 0,
        n_chains,
        dim: d,
    };
    let mut hist = MultistepHistory::new();
    for seg in (0..schedule.segments()).rev() {
        let sub: Vec<f64> = fine.values()[seg * substeps..=(seg + 1) * substeps]
            .iter()
            .rev()
            .copied()
            .collect();
        let run = solve_segment(teacher, &x, &sub, kind, &mut hist, &Cond::NONE)?;
        x = run.x;
        trace.nfe += run.nfe;
        trace.points.push((schedule.values()[seg], x.clone()));
    }
    Ok(trace)
}

/// One deviation row: for each segment `n`, the mean over chains of
/// `‖x_n − Euler(x_{n+1}, t_{n+1}, t_n; probe)‖₂` where both anchors come
/// from the reference trajectories.
pub fn trajectory_deviation(
    reference: &SolveTrace,
    probe: &dyn EpsModel,
    schedule: &TimeSchedule,
) -> Result<Vec<f64>> {
    let n_steps = schedule.segments();
    if reference.points.len() != n_steps + 1 {
        return Err(Error::invalid("reference anchors do not match the schedule"));
    }
    for (point, value) in reference.points.iter().zip(schedule.values().iter().rev()) {
        if point.0 != *value {
            return Err(Error::invalid("reference anchors do not match the schedule"));
        }
    }
    let d = reference.dim;
    let mut row = vec![0.0; n_steps];
    for seg in (0..n_steps).rev() {
        let (t_hi, t_lo) = (schedule.values()[seg + 1], schedule.values()[seg]);
        // points[i] holds t = values[N − i]
        let x_hi = &reference.points[n_steps - 1 - seg].1;
        let x_lo = &reference.points[n_steps - seg].1;
        let eps = probe.eval(x_hi, t_hi, &Cond::NONE)?;
        let mut acc = 0.0;
        for chain in 0..reference.n_chains {
            let mut sq = 0.0;
            for j in 0..d {
                let idx = chain * d + j;
                let pred = x_hi[idx] + (t_lo - t_hi) * eps[idx];
                let r = x_lo[idx] - pred;
                sq += r * r;
            }
            acc += sq.sqrt();
        }
        row[seg] = acc / reference.n_chains as f64;
    }
    Ok(row)
}

/// Configuration of the smooth-modification experiment.
#[derive(Debug, Clone)]
pub struct SmoothModConfig {
    pub steps: usize,
    pub substeps: usize,
    pub teacher_kind: SolverKind,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    /// Fine-tuning iterations per single-segment student.
    pub budget: usize,
    pub batch: usize,
    pub lr: f64,
    pub chains: usize,
}

impl Default for SmoothModConfig {
    fn default() -> Self {
        SmoothModConfig {
            steps: 4,
            substeps: 3,
            teacher_kind: SolverKind::Dpm2s,
            t_min: 0.002,
            t_max: 80.0,
            rho: 7.0,
            budget: 100,
            batch: 128,
            lr: 5e-4,
            chains: 1000,
        }
    }
}

/// Fine-tune one student per segment, each only on its own timestamp, then
/// score every student on every segment against the teacher trajectory.
/// Returns the full matrix plus the baseline row.
pub fn smooth_modification_experiment(
    teacher: &EpsNet,
    data: &GaussianMixture,
    cfg: &SmoothModConfig,
    streams: &Streams,
) -> Result<DeviationMatrix> {
    let schedule = TimeSchedule::polynomial(cfg.steps, cfg.t_min, cfg.t_max, cfg.rho)?;
    let teacher_model = NetEps::new(teacher);
    let mut eval_rng = streams.eval();
    let reference = reference_trajectories(
        &teacher_model,
        &schedule,
        cfg.substeps,
        cfg.teacher_kind,
        cfg.chains,
        &mut eval_rng,
    )?;
    let baseline = trajectory_deviation(&reference, &teacher_model, &schedule)?;

    let fine = schedule.subdivide(cfg.substeps)?;
    let d = teacher.arch().dim;
    let mut rows = Vec::with_capacity(cfg.steps);
    for seg in 0..cfg.steps {
        let mut student = teacher.clone();
        let mut adam = AdamState::new(student.param_count());
        let mut data_rng = streams.chain(seg as u64);
        let (t_hi, t_lo) = (schedule.values()[seg + 1], schedule.values()[seg]);
        let sub: Vec<f64> = fine.values()[seg * cfg.substeps..=(seg + 1) * cfg.substeps]
            .iter()
            .rev()
            .copied()
            .collect();
        for iter in 0..cfg.budget {
            let x0 = data.sample_batch(cfg.batch, &mut data_rng);
            let mut x_hi = vec![0.0; cfg.batch * d];
            for (v, x) in x_hi.iter_mut().zip(&x0) {
                *v = x + t_hi * standard_normal(&mut data_rng);
            }
            let mut hist = MultistepHistory::new();
            let reference_run = solve_segment(
                &teacher_model,
                &x_hi,
                &sub,
                cfg.teacher_kind,
                &mut hist,
                &Cond::NONE,
            )?;
            let (eps, tape) = student.forward_tape(&x_hi, TimeSpec::Shared(t_hi), None, None)?;
            let x_psi: Vec<f64> = x_hi
                .iter()
                .zip(&eps)
                .map(|(x, e)| x + (t_lo - t_hi) * e)
                .collect();
            let (loss, dx) = loss_distance(LossMetric::L2Sq, &x_psi, &reference_run.x, d)?;
            if !loss.is_finite() {
                return Err(Error::numerical("single-segment fine-tune diverged"));
            }
            let deps: Vec<f64> = dx.iter().map(|v| v * (t_lo - t_hi)).collect();
            let grads = student.backward(&tape, &deps)?;
            adam_step(
                &mut adam,
                student.params_mut(),
                &grads,
                crate::trainer::lr_schedule(cfg.lr, iter, cfg.budget),
            )?;
        }
        let probe = NetEps::new(&student);
        rows.push(trajectory_deviation(&reference, &probe, &schedule)?);
    }
    Ok(DeviationMatrix {
        times: schedule.values().to_vec(),
        chains: cfg.chains,
        baseline,
        rows,
    })
}

/// Sliced Wasserstein distance: mean over `projections` random unit
/// directions of the exact 1-D W₂ between the projected samples.
pub fn sliced_wasserstein(
    a: &[f64],
    b: &[f64],
    dim: usize,
    projections: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::invalid("sample sets must be batches of dim-vectors"));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("sample sets must be non-empty"));
    }
    if projections == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let na = a.len() / dim;
    let nb = b.len() / dim;
    let mut total = 0.0;
    let mut va = vec![0.0; na];
    let mut vb = vec![0.0; nb];
    for _ in 0..projections {
        let dir = random_unit(dim, rng);
        for (i, chunk) in a.chunks_exact(dim).enumerate() {
            va[i] = dot(chunk, &dir);
        }
        for (i, chunk) in b.chunks_exact(dim).enumerate() {
            vb[i] = dot(chunk, &dir);
        }
        va.sort_by(f64::total_cmp);
        vb.sort_by(f64::total_cmp);
        total += w2_sorted(&va, &vb).sqrt();
    }
    Ok(total / projections as f64)
}

/// Exact squared 1-D W₂ between two sorted empirical distributions, by
/// integrating the quantile difference over the merged breakpoints. For
/// equal sizes this is the mean of squared sorted differences.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    let na = a.len();
    let nb = b.len();
    if na == nb {
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / na as f64;
    }
    let mut acc = 0.0;
    let mut i = 0usize;
    let mut j = 0usize;
    let mut u = 0.0;
    while i < na && j < nb {
        let ua = (i + 1) as f64 / na as f64;
        let ub = (j + 1) as f64 / nb as f64;
        let next = ua.min(ub);
        let d = a[i] - b[j];
        acc += d * d * (next - u);
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distribution metric of a sampling configuration: sliced Wasserstein
/// between generated samples and fresh data draws, plus the spent NFE.
/// Fully determined by the master seed, the model and the options.
pub fn sampling_metric(
    model: &dyn EpsModel,
    schedule: &TimeSchedule,
    opts: &SampleOptions,
    data: &GaussianMixture,
    projections: usize,
    streams: &Streams,
) -> Result<(f64, u64)> {
    let mut rng = streams.eval();
    let (samples, trace) = sample(model, schedule, opts, &mut rng)?;
    let refs = data.sample_batch(opts.n_chains, &mut rng);
    let sw = sliced_wasserstein(&samples, &refs, model.dim(), projections, &mut rng)?;
    Ok((sw, trace.nfe))
}

/// One row of an extrapolation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub steps: usize,
    pub nfe: u64,
    pub sliced_w: f64,
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kind: SolverKind,
    pub afs: bool,
    /// Feed each sampled step count to the network as its step condition.
    pub use_step_condition: bool,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
    pub n_chains: usize,
    pub projections: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kind: SolverKind::Euler,
            afs: false,
            use_step_condition: false,
            t_min: 0.006,
            t_max: 80.0,
            rho: 7.0,
            n_chains: 4096,
            projections: 128,
        }
    }
}

/// Sample at each step count (rebuilding the schedule every time) and report
/// the distribution metric.
pub fn extrapolation_sweep(
    model: &dyn EpsModel,
    data: &GaussianMixture,
    step_values: &[usize],
    cfg: &SweepConfig,
    streams: &Streams,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(step_values.len());
    for &steps in step_values {
        let schedule = TimeSchedule::polynomial(steps, cfg.t_min, cfg.t_max, cfg.rho)?;
        let mut opts = SampleOptions::new(cfg.kind, cfg.n_chains).with_afs(cfg.afs);
        if cfg.use_step_condition {
            opts = opts.with_step_condition(steps as u32);
        }
        let (sliced_w, nfe) =
            sampling_metric(model, &schedule, &opts, data, cfg.projections, streams)?;
        if !sliced_w.is_finite() || sliced_w < 0.0 {
            return Err(Error::numerical("sweep metric out of range"));
        }
        out.push(SweepPoint {
            steps,
            nfe,
            sliced_w,
        });
    }
    Ok(out)
}

/// PCA projection of trajectories onto the top components.
#[derive(Debug, Clone)]
pub struct ProjectedTraces {
    /// Per chain, per anchor: projected coordinates (length `components`).
    pub chains: Vec<Vec<Vec<f64>>>,
    pub times: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub components: usize,
}

/// Fit PCA on all trajectory points pooled over chains and steps, project
/// every chain, and report explained-variance ratios.
pub fn project_trajectories(trace: &SolveTrace, target_dims: usize) -> Result<ProjectedTraces> {
    if !(target_dims == 2 || target_dims == 3) {
        return Err(Error::invalid("projection target must be 2 or 3 dimensions"));
    }
    if trace.n_chains < 2 {
        return Err(Error::invalid("projection needs at least two trajectories"));
    }
    let d = trace.dim;
    let k = target_dims.min(d);
    let n_points = trace.points.len() * trace.n_chains;

    let mut mean = vec![0.0; d];
    for (_, batch) in &trace.points {
        for chunk in batch.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(chunk) {
                *m += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n_points as f64;
    }

    let mut cov = DMatrix::zeros(d, d);
    for (_, batch) in &trace.points {
        for chunk in batch.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += (chunk[i] - mean[i]) * (chunk[j] - mean[j]);
                }
            }
        }
    }
    cov /= (n_points - 1) as f64;

    let total_var = cov.diagonal().sum();
    if total_var <= 1e-24 {
        return Err(Error::numerical("all trajectory points are identical"));
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let explained: Vec<f64> = order
        .iter()
        .take(k)
        .map(|&i| (eig.eigenvalues[i] / total_var).max(0.0))
        .collect();

    let mut chains = vec![Vec::with_capacity(trace.points.len()); trace.n_chains];
    for (_, batch) in &trace.points {
        for (chain, chunk) in batch.chunks_exact(d).enumerate() {
            let mut proj = Vec::with_capacity(k);
            for &c in order.iter().take(k) {
                let col = eig.eigenvectors.column(c);
                let mut acc = 0.0;
                for i in 0..d {
                    acc += (chunk[i] - mean[i]) * col[i];
                }
                proj.push(acc);
            }
            chains[chain].push(proj);
        }
    }
    Ok(ProjectedTraces {
        chains,
        times: trace.points.iter().map(|(t, _)| *t).collect(),
        explained_variance: explained,
        components: k,
    })
}

/// Convenience: the training-log CSV format shared by all trainers.
pub fn train_log_csv(log: &TrainLog) -> String {
    log.to_csv()
}
