//! Pretraining and distillation.
//!
//! Pretraining fits the noise-prediction network by regressing drawn noise at
//! log-uniform noise levels. Distillation fine-tunes a copy of a teacher so
//! that single Euler steps on a coarse schedule land where a multi-step
//! teacher solve lands:
//!
//! - [`distill_vanilla`] — local: each iteration trains one randomly chosen
//!   segment from exact-marginal inputs,
//! - [`distill_sfd`] — global: each iteration generates the whole teacher
//!   trajectory and walks the student down its *own* trajectory step by step,
//!   so accumulated errors are part of the training signal; the first step
//!   can be the zero-cost analytical estimate,
//! - [`distill_sfd_v`] — the variable-step variant: the step count is drawn
//!   from a list each iteration and fed to the network as a condition,
//! - [`distill_second_stage`] — boils a distilled model down to one model
//!   evaluation against its own two-evaluation Euler reference.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EpsNet, GradientVector, TimeSpec};
use crate::process::{standard_normal, ConditionalMixture, GaussianMixture};
use crate::rng::Streams;
use crate::schedule::TimeSchedule;
use crate::solver::{afs_eps, solve_segment, Cond, EpsModel, MultistepHistory, SolverKind};

/// Distance metric for distillation losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum LossMetric {
    L2Sq,
    L1,
    PseudoHuber { c: f64 },
}

impl LossMetric {
    pub fn parse(name: &str, dim: usize) -> Result<Self> {
        match name {
            "l2sq" => Ok(LossMetric::L2Sq),
            "l1" => Ok(LossMetric::L1),
            // dimension-scaled constant; the metric is cited but never
            // parameterized upstream, so this stays tunable
            "pseudo_huber" => Ok(LossMetric::PseudoHuber {
                c: 0.03 * (dim as f64).sqrt(),
            }),
            other => Err(Error::invalid(format!("unknown loss metric `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossMetric::L2Sq => "l2sq",
            LossMetric::L1 => "l1",
            LossMetric::PseudoHuber { .. } => "pseudo_huber",
        }
    }
}

/// Batch loss and its exact (sub)gradient with respect to `a`.
///
/// All metrics are means over the `n = len/dim` rows: squared L2 norm, L1
/// norm, or `√(‖a−b‖² + c²) − c`. Ties in the L1 subgradient map to zero.
pub fn loss_distance(
    metric: LossMetric,
    a: &[f64],
    b: &[f64],
    dim: usize,
) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() || dim == 0 || a.len() % dim != 0 {
        return Err(Error::invalid("loss operands must share a batch×dim shape"));
    }
    let n = a.len() / dim;
    let inv_n = 1.0 / n as f64;
    let mut adjoint = vec![0.0; a.len()];
    let mut total = 0.0;
    match metric {
        LossMetric::L2Sq => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                let r = x - y;
                total += r * r;
                adjoint[i] = 2.0 * r * inv_n;
            }
            total *= inv_n;
        }
        LossMetric::L1 => {
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                let r = x - y;
                total += r.abs();
                adjoint[i] = if r == 0.0 { 0.0 } else { r.signum() * inv_n };
            }
            total *= inv_n;
        }
        LossMetric::PseudoHuber { c } => {
            for row in 0..n {
                let span = row * dim..(row + 1) * dim;
                let sq: f64 = a[span.clone()]
                    .iter()
                    .zip(&b[span.clone()])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let root = (sq + c * c).sqrt();
                total += root - c;
                for i in span {
                    adjoint[i] = (a[i] - b[i]) / root * inv_n;
                }
            }
            total *= inv_n;
        }
    }
    Ok((total, adjoint))
}

/// Adam moment state; β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update. Parameters are untouched when the gradient
/// contains non-finite entries.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &GradientVector,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("adam shapes must match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::numerical("non-finite gradient in adam step"));
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, g) in grads.as_slice().iter().enumerate() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Constant learning rate for the first half of training, a tenth afterwards.
pub fn lr_schedule(base_lr: f64, iteration: usize, total: usize) -> f64 {
    if 2 * iteration >= total {
        base_lr / 10.0
    } else {
        base_lr
    }
}

/// One row of the training CSV log.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,wall_time\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.iteration, r.loss, r.lr, r.wall_time
            ));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

/// Data distribution handed to training: plain, or class-conditional with a
/// 10% label-dropout rate mapping labels to the null class.
#[derive(Clone, Copy)]
pub enum TrainData<'a> {
    Unconditional(&'a GaussianMixture),
    Conditional(&'a ConditionalMixture),
}

impl TrainData<'_> {
    pub fn dim(&self) -> usize {
        match self {
            TrainData::Unconditional(m) => m.dim(),
            TrainData::Conditional(c) => c.dim(),
        }
    }
}

const LABEL_DROPOUT: f64 = 0.1;

/// Denoiser pretraining config. Noise levels are drawn log-uniformly from
/// `[t_min, t_max]` with constant loss weighting.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 4000,
            batch: 128,
            lr: 1e-3,
            t_min: 0.006,
            t_max: 80.0,
        }
    }
}

/// Train a teacher by noise regression: perturb data, predict the noise,
/// squared-L2 loss. Returns the trained network and the log; a non-finite
/// loss aborts with the last finite-loss parameters attached to the error.
pub fn pretrain(
    mut net: EpsNet,
    data: TrainData,
    cfg: &PretrainConfig,
    streams: &Streams,
) -> Result<(EpsNet, TrainLog)> {
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("pretrain needs batch >= 1 and lr > 0"));
    }
    if !(cfg.t_min > 0.0 && cfg.t_max > cfg.t_min) {
        return Err(Error::invalid("pretrain needs 0 < t_min < t_max"));
    }
    let d = data.dim();
    if d != net.arch().dim {
        return Err(Error::invalid("network dim does not match data"));
    }
    let mut data_rng = streams.data();
    let mut train_rng = streams.train();
    let mut adam = AdamState::new(net.param_count());
    let mut log = TrainLog::default();
    let start = Instant::now();
    let ln_lo = cfg.t_min.ln();
    let ln_hi = cfg.t_max.ln();

    for iter in 0..cfg.iterations {
        let lr = lr_schedule(cfg.lr, iter, cfg.iterations);
        let (x0, classes) = draw_data_batch(&data, cfg.batch, &mut data_rng, &mut train_rng);
        let ts: Vec<f64> = (0..cfg.batch)
            .map(|_| (ln_lo + train_rng.random::<f64>() * (ln_hi - ln_lo)).exp())
            .collect();
        let mut noise = vec![0.0; cfg.batch * d];
        let mut xt = vec![0.0; cfg.batch * d];
        for i in 0..cfg.batch {
            for j in 0..d {
                let e = standard_normal(&mut data_rng);
                noise[i * d + j] = e;
                xt[i * d + j] = x0[i * d + j] + ts[i] * e;
            }
        }
        let (pred, tape) =
            net.forward_tape(&xt, TimeSpec::PerSample(&ts), classes.as_deref(), None)?;
        let (loss, adjoint) = loss_distance(LossMetric::L2Sq, &pred, &noise, d)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                last_good: Box::new(net),
            });
        }
        let grads = net.backward(&tape, &adjoint)?;
        adam_step(&mut adam, net.params_mut(), &grads, lr)?;
        log.rows.push(LogRow {
            iteration: iter,
            loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    net.meta.seed = streams.seed();
    net.meta.iteration = cfg.iterations as u64;
    Ok((net, log))
}

fn draw_data_batch(
    data: &TrainData,
    batch: usize,
    data_rng: &mut ChaCha8Rng,
    train_rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Option<Vec<usize>>) {
    match data {
        TrainData::Unconditional(mix) => (mix.sample_batch(batch, data_rng), None),
        TrainData::Conditional(cm) => {
            let mut x0 = Vec::with_capacity(batch * cm.dim());
            let mut classes = Vec::with_capacity(batch);
            for _ in 0..batch {
                let k = cm.sample_class(data_rng);
                x0.extend_from_slice(&cm.class(k).sample(data_rng));
                let dropped = train_rng.random::<f64>() < LABEL_DROPOUT;
                classes.push(if dropped { cm.num_classes() } else { k });
            }
            (x0, Some(classes))
        }
    }
}

/// Distillation hyperparameters. Defaults: three student steps with the
/// analytical first step, a four-substep order-3 multistep teacher, L1 loss,
/// learning rate 5e-5 halved-by-ten midway, batch 128, and a budget of
/// 200 000 teacher trajectories.
#[derive(Debug, Clone)]
pub struct DistillConfig {
    /// Student steps `N`.
    pub steps: usize,
    /// Teacher sub-steps per student segment `K`.
    pub substeps: usize,
    pub teacher_kind: SolverKind,
    pub afs: bool,
    pub loss: LossMetric,
    pub lr: f64,
    /// Total teacher trajectories; iterations = budget / batch.
    pub budget: usize,
    pub batch: usize,
    /// Step-count list for the variable-step variant.
    pub step_list: Vec<u32>,
    pub t_min: f64,
    pub t_max: f64,
    pub rho: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 3,
            substeps: 4,
            teacher_kind: SolverKind::DpmPp3m,
            afs: true,
            loss: LossMetric::L1,
            lr: 5e-5,
            budget: 200_000,
            batch: 128,
            step_list: vec![2, 3, 4, 5],
            t_min: 0.006,
            t_max: 80.0,
            rho: 7.0,
        }
    }
}

impl DistillConfig {
    pub fn iterations(&self) -> usize {
        self.budget / self.batch
    }

    pub fn schedule(&self, steps: usize) -> Result<TimeSchedule> {
        TimeSchedule::polynomial(steps, self.t_min, self.t_max, self.rho)
    }

    fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.substeps < 1 || self.batch < 1 {
            return Err(Error::invalid("distill config needs steps, K, batch >= 1"));
        }
        if self.afs && self.steps < 2 {
            return Err(Error::invalid(
                "the analytical first step needs at least two student steps",
            ));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        Ok(())
    }
}

/// Class handling during distillation. With a prior, per-chain labels are
/// drawn each iteration and both teacher and student run conditionally at
/// guidance scale 1, so the null branch never receives gradient.
#[derive(Clone, Copy, Default)]
pub enum Conditioning<'a> {
    #[default]
    None,
    ClassPrior(&'a [f64]),
}

fn draw_classes(
    conditioning: &Conditioning,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    match conditioning {
        Conditioning::None => None,
        Conditioning::ClassPrior(prior) => Some(
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    for (k, p) in prior.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            return k;
                        }
                    }
                    prior.len() - 1
                })
                .collect(),
        ),
    }
}

/// Local trajectory distillation: one uniformly drawn segment per iteration,
/// inputs drawn from the exact perturbed marginal of the dataset.
pub fn distill_vanilla(
    teacher: &dyn EpsModel,
    student_init: &EpsNet,
    data: TrainData,
    cfg: &DistillConfig,
    streams: &Streams,
) -> Result<(EpsNet, TrainLog)> {
    cfg.validate()?;
    let schedule = cfg.schedule(cfg.steps)?;
    let fine = schedule.subdivide(cfg.substeps)?;
    let d = student_init.arch().dim;
    let mut net = student_init.clone();
    let mut adam = AdamState::new(net.param_count());
    let mut data_rng = streams.data();
    let mut train_rng = streams.train();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let iterations = cfg.iterations();

    for iter in 0..iterations {
        let lr = lr_schedule(cfg.lr, iter, iterations);
        let seg = (train_rng.random::<f64>() * cfg.steps as f64) as usize;
        let seg = seg.min(cfg.steps - 1);
        let (t_hi, t_lo) = (schedule.values()[seg + 1], schedule.values()[seg]);

        let (x0, classes) = draw_data_batch(&data, cfg.batch, &mut data_rng, &mut train_rng);
        let mut x_hi = vec![0.0; cfg.batch * d];
        for (v, x) in x_hi.iter_mut().zip(&x0) {
            *v = x + t_hi * standard_normal(&mut data_rng);
        }

        let cond = Cond {
            classes: classes.as_deref(),
            step: None,
        };
        let sub: Vec<f64> = fine.values()[seg * cfg.substeps..=(seg + 1) * cfg.substeps]
            .iter()
            .rev()
            .copied()
            .collect();
        let mut hist = MultistepHistory::new();
        let reference = solve_segment(teacher, &x_hi, &sub, cfg.teacher_kind, &mut hist, &cond)?;

        let (eps, tape) =
            net.forward_tape(&x_hi, TimeSpec::Shared(t_hi), classes.as_deref(), None)?;
        let x_psi: Vec<f64> = x_hi
            .iter()
            .zip(&eps)
            .map(|(x, e)| x + (t_lo - t_hi) * e)
            .collect();
        let (loss, dx) = loss_distance(cfg.loss, &x_psi, &reference.x, d)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                last_good: Box::new(net),
            });
        }
        let deps: Vec<f64> = dx.iter().map(|v| v * (t_lo - t_hi)).collect();
        let grads = net.backward(&tape, &deps)?;
        adam_step(&mut adam, net.params_mut(), &grads, lr)?;
        log.rows.push(LogRow {
            iteration: iter,
            loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    net.meta.seed = streams.seed();
    net.meta.iteration = iterations as u64;
    Ok((net, log))
}

/// Global trajectory distillation. Each iteration draws a shared prior batch,
/// generates the teacher trajectory segment by segment (multistep history
/// carried across segments), and updates the student once per segment while
/// it walks its own trajectory. The carried student point is always the one
/// computed before that segment's parameter update. With `afs` the first
/// student step uses the analytical estimate and receives no update.
pub fn distill_sfd(
    teacher: &dyn EpsModel,
    student_init: &EpsNet,
    cfg: &DistillConfig,
    conditioning: Conditioning,
    streams: &Streams,
) -> Result<(EpsNet, TrainLog)> {
    cfg.validate()?;
    let mut net = student_init.clone();
    let mut adam = AdamState::new(net.param_count());
    let mut data_rng = streams.data();
    let mut train_rng = streams.train();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let iterations = cfg.iterations();
    let schedule = cfg.schedule(cfg.steps)?;
    let fine = schedule.subdivide(cfg.substeps)?;

    for iter in 0..iterations {
        let lr = lr_schedule(cfg.lr, iter, iterations);
        let loss = sfd_iteration(
            teacher,
            &mut net,
            &mut adam,
            &schedule,
            &fine,
            cfg,
            &conditioning,
            None,
            lr,
            &mut data_rng,
            &mut train_rng,
        )
        .map_err(|e| attach_last_good(e, &net, iter))?;
        log.rows.push(LogRow {
            iteration: iter,
            loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    net.meta.seed = streams.seed();
    net.meta.iteration = iterations as u64;
    Ok((net, log))
}

/// Variable-step distillation: the student grows a step-condition head
/// (zero-initialized, so it starts exactly at the teacher), and each
/// iteration draws the step count uniformly from `cfg.step_list`, rebuilds
/// the schedule, and runs one global iteration with that count fed to every
/// student evaluation.
pub fn distill_sfd_v(
    teacher: &dyn EpsModel,
    student_init: &EpsNet,
    cfg: &DistillConfig,
    conditioning: Conditioning,
    streams: &Streams,
) -> Result<(EpsNet, TrainLog)> {
    cfg.validate()?;
    if cfg.step_list.is_empty() {
        return Err(Error::invalid("variable-step distillation needs a step list"));
    }
    if cfg.afs && cfg.step_list.iter().any(|n| *n < 2) {
        return Err(Error::invalid(
            "the analytical first step needs every step count >= 2",
        ));
    }
    let mut init_rng = streams.init();
    let mut net = EpsNet::init_student_from_teacher(student_init, true, &mut init_rng)?;
    let mut adam = AdamState::new(net.param_count());
    let mut data_rng = streams.data();
    let mut train_rng = streams.train();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let iterations = cfg.iterations();

    for iter in 0..iterations {
        let lr = lr_schedule(cfg.lr, iter, iterations);
        let pick = (train_rng.random::<f64>() * cfg.step_list.len() as f64) as usize;
        let n_steps = cfg.step_list[pick.min(cfg.step_list.len() - 1)];
        let schedule = cfg.schedule(n_steps as usize)?;
        let fine = schedule.subdivide(cfg.substeps)?;
        let mut cfg_n = cfg.clone();
        cfg_n.steps = n_steps as usize;
        let loss = sfd_iteration(
            teacher,
            &mut net,
            &mut adam,
            &schedule,
            &fine,
            &cfg_n,
            &conditioning,
            Some(n_steps),
            lr,
            &mut data_rng,
            &mut train_rng,
        )
        .map_err(|e| attach_last_good(e, &net, iter))?;
        log.rows.push(LogRow {
            iteration: iter,
            loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    net.meta.seed = streams.seed();
    net.meta.iteration = iterations as u64;
    Ok((net, log))
}

/// One global-distillation iteration over a fresh prior batch; returns the
/// mean per-segment loss.
#[allow(clippy::too_many_arguments)]
fn sfd_iteration(
    teacher: &dyn EpsModel,
    net: &mut EpsNet,
    adam: &mut AdamState,
    schedule: &TimeSchedule,
    fine: &TimeSchedule,
    cfg: &DistillConfig,
    conditioning: &Conditioning,
    step_condition: Option<u32>,
    lr: f64,
    data_rng: &mut ChaCha8Rng,
    train_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = net.arch().dim;
    let n_steps = schedule.segments();
    let values = schedule.values();
    let classes = draw_classes(conditioning, cfg.batch, train_rng);
    let cond = Cond {
        classes: classes.as_deref(),
        step: None,
    };

    let mut student_x: Vec<f64> = (0..cfg.batch * d)
        .map(|_| schedule.t_max() * standard_normal(data_rng))
        .collect();
    let mut teacher_x = student_x.clone();
    let mut hist = MultistepHistory::new();
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;

    for seg in (0..n_steps).rev() {
        let (t_hi, t_lo) = (values[seg + 1], values[seg]);
        let sub: Vec<f64> = fine.values()[seg * cfg.substeps..=(seg + 1) * cfg.substeps]
            .iter()
            .rev()
            .copied()
            .collect();
        let teacher_run =
            solve_segment(teacher, &teacher_x, &sub, cfg.teacher_kind, &mut hist, &cond)?;
        teacher_x = teacher_run.x;

        if cfg.afs && seg + 1 == n_steps {
            let eps_hat = afs_eps(&student_x, t_hi);
            for (x, e) in student_x.iter_mut().zip(&eps_hat) {
                *x += (t_lo - t_hi) * e;
            }
            continue;
        }

        let (eps, tape) = net.forward_tape(
            &student_x,
            TimeSpec::Shared(t_hi),
            classes.as_deref(),
            step_condition,
        )?;
        let x_psi: Vec<f64> = student_x
            .iter()
            .zip(&eps)
            .map(|(x, e)| x + (t_lo - t_hi) * e)
            .collect();
        let (loss, dx) = loss_distance(cfg.loss, &x_psi, &teacher_x, d)?;
        if !loss.is_finite() {
            return Err(Error::numerical("non-finite distillation loss"));
        }
        let deps: Vec<f64> = dx.iter().map(|v| v * (t_lo - t_hi)).collect();
        let grads = net.backward(&tape, &deps)?;
        adam_step(adam, net.params_mut(), &grads, lr)?;
        // carry the pre-update student point
        student_x = x_psi;
        loss_acc += loss;
        loss_count += 1;
    }
    Ok(loss_acc / loss_count.max(1) as f64)
}

fn attach_last_good(err: Error, net: &EpsNet, iteration: usize) -> Error {
    match err {
        Error::Numerical(_) => Error::Diverged {
            iteration,
            last_good: Box::new(net.clone()),
        },
        other => other,
    }
}

/// Second-stage one-evaluation distillation. The teacher is the first-stage
/// model run with Euler and `K` sub-steps (default 2) over the final segment;
/// with `afs` the shared analytical step brings both teacher and student from
/// the prior at `t_max` down to the segment start, so the teacher spends
/// exactly `K` evaluations and the student one per trajectory. The learning
/// rate is ten times the configured (first-stage) rate.
pub fn distill_second_stage(
    first_stage: &EpsNet,
    cfg: &DistillConfig,
    streams: &Streams,
) -> Result<(EpsNet, TrainLog)> {
    cfg.validate()?;
    let teacher_net = first_stage.clone();
    let teacher = crate::model::NetEps::new(&teacher_net);
    let mut net = first_stage.clone();
    let mut adam = AdamState::new(net.param_count());
    let mut data_rng = streams.data();
    let mut log = TrainLog::default();
    let start = Instant::now();
    let iterations = cfg.iterations();
    let d = net.arch().dim;
    let lr_scale = 10.0;

    // With AFS the trained segment is [t_1 → t_0] of the two-segment
    // schedule; without it, the single segment [t_max → t_min].
    let schedule = cfg.schedule(if cfg.afs { 2 } else { 1 })?;
    let values = schedule.values();
    let (t_hi, t_lo) = (values[1], values[0]);
    let sub = schedule.segment_subtimes(t_hi, t_lo, cfg.substeps)?;
    let step_cond = net.arch().step_condition.then(|| schedule.segments() as u32);

    for iter in 0..iterations {
        let lr = lr_scale * lr_schedule(cfg.lr, iter, iterations);
        let mut x: Vec<f64> = (0..cfg.batch * d)
            .map(|_| schedule.t_max() * standard_normal(&mut data_rng))
            .collect();
        if cfg.afs {
            let t_top = values[2];
            let eps_hat = afs_eps(&x, t_top);
            for (v, e) in x.iter_mut().zip(&eps_hat) {
                *v += (t_hi - t_top) * e;
            }
        }
        let cond = Cond {
            classes: None,
            step: step_cond,
        };
        let mut hist = MultistepHistory::new();
        let reference = solve_segment(&teacher, &x, &sub, SolverKind::Euler, &mut hist, &cond)?;

        let (eps, tape) = net.forward_tape(&x, TimeSpec::Shared(t_hi), None, step_cond)?;
        let x_psi: Vec<f64> = x
            .iter()
            .zip(&eps)
            .map(|(x, e)| x + (t_lo - t_hi) * e)
            .collect();
        let (loss, dx) = loss_distance(cfg.loss, &x_psi, &reference.x, d)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                last_good: Box::new(net),
            });
        }
        let deps: Vec<f64> = dx.iter().map(|v| v * (t_lo - t_hi)).collect();
        let grads = net.backward(&tape, &deps)?;
        adam_step(&mut adam, net.params_mut(), &grads, lr)?;
        log.rows.push(LogRow {
            iteration: iter,
            loss,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    net.meta.seed = streams.seed();
    net.meta.iteration = iterations as u64;
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchConfig, NetEps};
    use crate::solver::OracleEps;

    fn tiny_arch(dim: usize) -> ArchConfig {
        ArchConfig::new(dim).with_hidden(vec![32, 32]).with_embed(16, 24)
    }

    #[test]
    fn loss_values_and_identities() {
        for metric in [
            LossMetric::L2Sq,
            LossMetric::L1,
            LossMetric::PseudoHuber { c: 0.1 },
        ] {
            let (l, adj) = loss_distance(metric, &[1.0, -2.0], &[1.0, -2.0], 1).unwrap();
            assert_eq!(l, 0.0);
            assert!(adj.iter().all(|a| *a == 0.0));
        }
        let (l2, _) = loss_distance(LossMetric::L2Sq, &[3.0], &[1.0], 1).unwrap();
        assert_eq!(l2, 4.0);
        let (l1, _) = loss_distance(LossMetric::L1, &[3.0], &[1.0], 1).unwrap();
        assert_eq!(l1, 2.0);

        assert!(loss_distance(LossMetric::L1, &[1.0], &[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn pseudo_huber_taylor_limit() {
        // √(r² + c²) − c → ‖r‖²/(2c) for large c; check at c = 100 within 1%.
        let a = [2.0];
        let b = [0.0];
        let (ph, _) = loss_distance(LossMetric::PseudoHuber { c: 100.0 }, &a, &b, 1).unwrap();
        let (l2, _) = loss_distance(LossMetric::L2Sq, &a, &b, 1).unwrap();
        let approx = 0.5 * l2 / 100.0;
        assert!((ph - approx).abs() / approx < 0.01);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let a = [0.4, -0.3, 1.1, 0.9];
        let b = [0.1, 0.2, -0.4, 1.4];
        for metric in [
            LossMetric::L2Sq,
            LossMetric::L1,
            LossMetric::PseudoHuber { c: 0.05 },
        ] {
            let (_, adj) = loss_distance(metric, &a, &b, 2).unwrap();
            for i in 0..a.len() {
                let h = 1e-7;
                let mut up = a;
                up[i] += h;
                let mut down = a;
                down[i] -= h;
                let (lu, _) = loss_distance(metric, &up, &b, 2).unwrap();
                let (ld, _) = loss_distance(metric, &down, &b, 2).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                assert!(
                    (fd - adj[i]).abs() < 1e-6,
                    "{metric:?} coord {i}: fd {fd} adj {}",
                    adj[i]
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut state = AdamState::new(3);
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = GradientVector::zeros(3);
        adam_step(&mut state, &mut params, &grads, 0.1).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut state = AdamState::new(2);
        let mut params = vec![0.0, 0.0];
        let g = GradientVector::from_vec(vec![3.0, -0.004]);
        adam_step(&mut state, &mut params, &g, 0.01).unwrap();
        assert!((params[0] - (-0.01)).abs() < 1e-5);
        assert!((params[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nonfinite() {
        let mut s1 = AdamState::new(2);
        let mut s2 = AdamState::new(2);
        let mut p1 = vec![0.3, 0.4];
        let mut p2 = vec![0.3, 0.4];
        let g = GradientVector::from_vec(vec![0.1, -0.7]);
        adam_step(&mut s1, &mut p1, &g, 0.05).unwrap();
        adam_step(&mut s2, &mut p2, &g, 0.05).unwrap();
        assert_eq!(p1, p2);

        let bad = GradientVector::from_vec(vec![f64::NAN, 0.0]);
        let before = p1.clone();
        assert!(adam_step(&mut s1, &mut p1, &bad, 0.05).is_err());
        assert_eq!(p1, before);
    }

    #[test]
    fn lr_schedule_halving() {
        assert_eq!(lr_schedule(5e-5, 0, 1000), 5e-5);
        assert_eq!(lr_schedule(5e-5, 499, 1000), 5e-5);
        assert_eq!(lr_schedule(5e-5, 500, 1000), 5e-6);
        assert_eq!(lr_schedule(3e-4, 999, 1000), 3e-4 / 10.0);
    }

    #[test]
    fn pretrain_zero_iterations_is_identity() {
        let streams = Streams::new(40);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let mix = GaussianMixture::standard(1);
        let cfg = PretrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let before = net.params().to_vec();
        let (after, log) = pretrain(net, TrainData::Unconditional(&mix), &cfg, &streams).unwrap();
        assert_eq!(after.params(), &before[..]);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let mix = GaussianMixture::standard(1);
        let cfg = PretrainConfig {
            iterations: 30,
            batch: 16,
            ..Default::default()
        };
        let run = |seed: u64| {
            let streams = Streams::new(seed);
            let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
            pretrain(net, TrainData::Unconditional(&mix), &cfg, &streams)
                .unwrap()
                .0
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn pretrain_fits_standard_normal_eps() {
        let streams = Streams::new(41);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let mix = GaussianMixture::standard(1);
        let cfg = PretrainConfig {
            iterations: 5000,
            batch: 64,
            lr: 2e-3,
            ..Default::default()
        };
        let (teacher, log) = pretrain(net, TrainData::Unconditional(&mix), &cfg, &streams).unwrap();
        let early: f64 = log.rows[..50].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        let late: f64 =
            log.rows[log.rows.len() - 50..].iter().map(|r| r.loss).sum::<f64>() / 50.0;
        assert!(late < early, "loss should decrease: {early} -> {late}");

        // probe grid: mean |ε_θ − oracle| < 0.05
        let mut err_acc = 0.0;
        let mut count = 0;
        for i in 0..9 {
            let x = -2.0 + 0.5 * i as f64;
            for t in [0.01, 0.1, 0.5, 1.0, 3.0, 10.0, 40.0, 79.0] {
                let pred = teacher.forward_one(&[x], t, None, None).unwrap()[0];
                let oracle = mix.eps(&[x], t).unwrap()[0];
                err_acc += (pred - oracle).abs();
                count += 1;
            }
        }
        let mean_err = err_acc / count as f64;
        assert!(mean_err < 0.05, "mean eps error {mean_err}");
    }

    #[test]
    fn vanilla_self_distillation_is_a_fixed_point() {
        // Teacher = the student's own network with a single Euler substep:
        // the target is exactly the student's step, so the loss is zero and
        // parameters never move.
        let streams = Streams::new(50);
        let mut init_rng = streams.init();
        let mut net = EpsNet::init(tiny_arch(1), &mut init_rng).unwrap();
        // non-zero output layer so the fixed point is non-trivial
        for i in 0..net.param_count() {
            if net.params()[i] == 0.0 {
                net.params_mut()[i] = 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let teacher_net = net.clone();
        let teacher = NetEps::new(&teacher_net);
        let mix = GaussianMixture::standard(1);
        let cfg = DistillConfig {
            steps: 3,
            substeps: 1,
            teacher_kind: SolverKind::Euler,
            afs: false,
            loss: LossMetric::L1,
            budget: 20 * 8,
            batch: 8,
            ..Default::default()
        };
        let (student, log) = distill_vanilla(
            &teacher,
            &net,
            TrainData::Unconditional(&mix),
            &cfg,
            &streams,
        )
        .unwrap();
        assert_eq!(log.rows.len(), 20);
        assert!(log.rows.iter().all(|r| r.loss == 0.0));
        assert_eq!(student.params(), net.params());
    }

    #[test]
    fn sfd_zero_lr_leaves_student_at_teacher() {
        let streams = Streams::new(51);
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let cfg = DistillConfig {
            steps: 3,
            substeps: 2,
            lr: 0.0,
            budget: 5 * 4,
            batch: 4,
            ..Default::default()
        };
        let (student, _) = distill_sfd(&oracle, &net, &cfg, Conditioning::None, &streams).unwrap();
        assert_eq!(student.params(), net.params());
    }

    #[test]
    fn sfd_teacher_params_never_change() {
        let streams = Streams::new(52);
        let mix = GaussianMixture::standard(1);
        let cfg_pre = PretrainConfig {
            iterations: 200,
            batch: 32,
            lr: 2e-3,
            ..Default::default()
        };
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let (teacher, _) =
            pretrain(net, TrainData::Unconditional(&mix), &cfg_pre, &streams).unwrap();
        let checksum: f64 = teacher.params().iter().sum();
        let t_model = NetEps::new(&teacher);
        let cfg = DistillConfig {
            steps: 2,
            substeps: 2,
            afs: false,
            budget: 10 * 8,
            batch: 8,
            lr: 1e-4,
            ..Default::default()
        };
        let (student, _) =
            distill_sfd(&t_model, &teacher, &cfg, Conditioning::None, &streams).unwrap();
        assert_eq!(checksum, teacher.params().iter().sum::<f64>());
        assert_ne!(student.params(), teacher.params());
    }

    #[test]
    fn sfd_nfe_audit_per_iteration() {
        use crate::solver::CountingEps;
        let streams = Streams::new(53);
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let counting = CountingEps::new(&oracle);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let cfg = DistillConfig {
            steps: 3,
            substeps: 4,
            teacher_kind: SolverKind::DpmPp3m,
            afs: true,
            budget: 4,
            batch: 4,
            ..Default::default()
        };
        let (_, log) = distill_sfd(&counting, &net, &cfg, Conditioning::None, &streams).unwrap();
        assert_eq!(log.rows.len(), 1);
        // teacher: N·K evaluations per trajectory batch
        assert_eq!(counting.count(), 3 * 4);
    }

    #[test]
    fn sfd_v_singleton_list_matches_sfd_behavior() {
        // With L = {3}, the variable-step run should behave like plain global
        // distillation at N = 3 up to the presence of the step head: the
        // trained student must agree with its own teacher-free forward when
        // the head is zero at init.
        let streams = Streams::new(54);
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let cfg = DistillConfig {
            steps: 3,
            substeps: 2,
            afs: true,
            budget: 3 * 8,
            batch: 8,
            step_list: vec![3],
            lr: 0.0,
            ..Default::default()
        };
        let (student, _) =
            distill_sfd_v(&oracle, &net, &cfg, Conditioning::None, &streams).unwrap();
        // lr = 0: parameters equal teacher plus a zeroed step head
        let probe = [0.5];
        let a = net.forward_one(&probe, 2.0, None, None).unwrap();
        let b = student.forward_one(&probe, 2.0, None, Some(3)).unwrap();
        assert_eq!(a, b);
        assert!(student.arch().step_condition);
    }

    #[test]
    fn sfd_v_rejects_empty_step_list() {
        let streams = Streams::new(55);
        let mix = GaussianMixture::standard(1);
        let oracle = OracleEps::new(&mix);
        let net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        let cfg = DistillConfig {
            step_list: vec![],
            ..Default::default()
        };
        assert!(distill_sfd_v(&oracle, &net, &cfg, Conditioning::None, &streams).is_err());
    }

    #[test]
    fn second_stage_zero_lr_is_identity_and_audits_nfe() {
        use crate::solver::CountingEps;
        let streams = Streams::new(56);
        let mut net = EpsNet::init(tiny_arch(1), &mut streams.init()).unwrap();
        for i in 0..net.param_count() {
            if net.params()[i] == 0.0 {
                net.params_mut()[i] = 0.005 * ((i % 5) as f64 - 2.0);
            }
        }
        let cfg = DistillConfig {
            substeps: 2,
            afs: true,
            lr: 0.0,
            budget: 3 * 4,
            batch: 4,
            ..Default::default()
        };
        let (student, log) = distill_second_stage(&net, &cfg, &streams).unwrap();
        assert_eq!(student.params(), net.params());
        assert_eq!(log.rows.len(), 3);

        // audit one iteration's teacher cost by replaying the reference solve
        let teacher = NetEps::new(&net);
        let counting = CountingEps::new(&teacher);
        let schedule = cfg.schedule(2).unwrap();
        let sub = schedule
            .segment_subtimes(schedule.values()[1], schedule.values()[0], 2)
            .unwrap();
        let mut hist = MultistepHistory::new();
        let run = solve_segment(
            &counting,
            &[1.0, 2.0],
            &sub,
            SolverKind::Euler,
            &mut hist,
            &Cond::NONE,
        )
        .unwrap();
        assert_eq!(run.nfe, 2);
        assert_eq!(counting.count(), 2);
    }

    #[test]
    fn conditional_distillation_leaves_null_branch_untouched() {
        let streams = Streams::new(57);
        let data = ConditionalMixture::new(
            vec![
                (0, GaussianMixture::isotropic(vec![-1.5], 0.3).unwrap()),
                (1, GaussianMixture::isotropic(vec![1.5], 0.3).unwrap()),
            ],
            vec![0.5, 0.5],
        )
        .unwrap();
        let oracle = crate::solver::ConditionalOracleEps::new(&data);
        let net = EpsNet::init(tiny_arch(1).with_classes(2), &mut streams.init()).unwrap();
        let cfg = DistillConfig {
            steps: 2,
            substeps: 2,
            afs: false,
            budget: 12 * 8,
            batch: 8,
            lr: 1e-3,
            ..Default::default()
        };
        let (student, _) = distill_sfd(
            &oracle,
            &net,
            &cfg,
            Conditioning::ClassPrior(data.prior()),
            &streams,
        )
        .unwrap();
        // the null class row (last) received zero gradient from ω = 1 batches
        let f = net.arch().time_features;
        let before = class_table(&net);
        let after = class_table(&student);
        let c = 2;
        assert_eq!(&before[c * f..(c + 1) * f], &after[c * f..(c + 1) * f]);
        assert_ne!(&before[..f], &after[..f]);
    }

    /// The class table sits directly after the four time segments.
    fn class_table(net: &EpsNet) -> Vec<f64> {
        let arch = net.arch();
        let e = arch.embed;
        let f = arch.time_features;
        let start = e * f + e + e * e + e;
        let len = (arch.num_classes.unwrap() + 1) * f;
        net.params()[start..start + len].to_vec()
    }
}
