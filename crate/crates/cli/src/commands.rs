//! Command implementations.

use std::path::Path;

use serde_json::json;

use sfd_core::error::{Error, Result};
use sfd_core::eval::{
    extrapolation_sweep, project_trajectories, sampling_metric, smooth_modification_experiment,
    SmoothModConfig, SweepConfig, SweepPoint,
};
use sfd_core::model::{ArchConfig, EpsNet, NetEps};
use sfd_core::process::{prior_sample_batch, ConditionalMixture, DiffusionSpec, GaussianMixture};
use sfd_core::rng::Streams;
use sfd_core::schedule::TimeSchedule;
use sfd_core::solver::{sample_with_noise, EpsModel, OracleEps, SampleOptions, SolveTrace, SolverKind};
use sfd_core::trainer::{
    distill_second_stage, distill_sfd, distill_sfd_v, distill_vanilla, pretrain, Conditioning,
    DistillConfig, LossMetric, PretrainConfig, TrainData, TrainLog,
};

use crate::config::{
    Cli, Command, DistillMode, ResolvedDistill, ResolvedEval, ResolvedPretrain, ResolvedReproduce,
    ResolvedSample,
};
use crate::output::{
    config_hash, metrics_csv, projection_csv, samples_csv, trace_csv, write_file, Manifest,
};

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => cmd_pretrain(args.resolve()?),
        Command::Distill(args) => cmd_distill(args.resolve()?),
        Command::Sample(args) => cmd_sample(args.resolve()?),
        Command::Eval(args) => cmd_eval(args.resolve()?),
        Command::Reproduce(args) => cmd_reproduce(args.resolve()?),
    }
}

pub enum LoadedData {
    Plain(GaussianMixture),
    Conditional(ConditionalMixture),
}

pub fn load_data(path: &Path) -> Result<LoadedData> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::schema(format!("data {path:?}: {e}")))?;
    if value.get("classes").is_some() {
        Ok(LoadedData::Conditional(ConditionalMixture::from_json(&text)?))
    } else {
        Ok(LoadedData::Plain(GaussianMixture::from_json(&text)?))
    }
}

fn load_checkpoint(path: &Path) -> Result<EpsNet> {
    let text = std::fs::read_to_string(path)?;
    EpsNet::from_json(&text)
}

/// Chain-parallel sampling: the noise is drawn up-front, so the output is
/// identical for every thread count; chunks write disjoint chain ranges.
pub fn sample_chunked<M: EpsModel + Sync>(
    model: &M,
    schedule: &TimeSchedule,
    opts: &SampleOptions,
    noise: &[f64],
    threads: usize,
) -> Result<(Vec<f64>, SolveTrace)> {
    let d = model.dim();
    if threads <= 1 || opts.n_chains < 2 * threads {
        return sample_with_noise(model, schedule, opts, noise);
    }
    let chunk_chains = opts.n_chains.div_ceil(threads);
    let chunks: Vec<&[f64]> = noise.chunks(chunk_chains * d).collect();
    let results: Vec<Result<(Vec<f64>, SolveTrace)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|chunk| {
                scope.spawn(move || {
                    let mut o = opts.clone();
                    o.n_chains = chunk.len() / d;
                    sample_with_noise(model, schedule, &o, chunk)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let mut endpoints = Vec::with_capacity(noise.len());
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        let (x, trace) = r?;
        endpoints.extend_from_slice(&x);
        parts.push(trace);
    }
    let nfe = parts[0].nfe;
    debug_assert!(parts.iter().all(|p| p.nfe == nfe));
    let points = (0..parts[0].points.len())
        .map(|i| {
            let t = parts[0].points[i].0;
            let mut batch = Vec::with_capacity(noise.len());
            for p in &parts {
                batch.extend_from_slice(&p.points[i].1);
            }
            (t, batch)
        })
        .collect();
    Ok((
        endpoints,
        SolveTrace {
            points,
            nfe,
            n_chains: opts.n_chains,
            dim: d,
        },
    ))
}

/// Write the last finite-loss checkpoint before surfacing a divergence.
fn rescue_divergence(err: Error, dir: &Path, name: &str) -> Error {
    if let Error::Diverged { iteration, last_good } = err {
        let _ = write_file(dir, name, &last_good.to_json());
        Error::Diverged { iteration, last_good }
    } else {
        err
    }
}

fn cmd_pretrain(r: ResolvedPretrain) -> Result<()> {
    let streams = Streams::new(r.seed);
    let data = load_data(&r.data)?;
    let (dim, classes) = match &data {
        LoadedData::Plain(m) => (m.dim(), None),
        LoadedData::Conditional(c) => (c.dim(), Some(c.num_classes())),
    };
    let mut arch = ArchConfig::new(dim)
        .with_hidden(r.hidden.clone())
        .with_embed(r.embed_features, r.embed);
    if let Some(c) = classes {
        arch = arch.with_classes(c);
    }
    let net = EpsNet::init(arch, &mut streams.init())?;
    let cfg = PretrainConfig {
        iterations: r.iterations,
        batch: r.batch,
        lr: r.lr,
        t_min: r.tmin,
        t_max: r.tmax,
    };
    let train_data = match &data {
        LoadedData::Plain(m) => TrainData::Unconditional(m),
        LoadedData::Conditional(c) => TrainData::Conditional(c),
    };
    let (teacher, log) = pretrain(net, train_data, &cfg, &streams)
        .map_err(|e| rescue_divergence(e, &r.out, &r.checkpoint_out))?;

    let mut manifest = Manifest::new("pretrain", r.seed, &r);
    let ckpt = write_file(&r.out, &r.checkpoint_out, &teacher.to_json())?;
    manifest.record(&ckpt);
    let log_path = write_file(&r.out, "train_log.csv", &log.to_csv())?;
    manifest.record(&log_path);
    manifest.with_extra(json!({
        "final_loss": log.final_loss(),
        "parameters": teacher.param_count(),
    }));
    manifest.write(&r.out)?;
    Ok(())
}

fn cmd_distill(r: ResolvedDistill) -> Result<()> {
    let streams = Streams::new(r.seed);
    let teacher_net = load_checkpoint(&r.teacher)?;
    let dim = teacher_net.arch().dim;
    let loss = LossMetric::parse(&r.loss, dim)?;
    let data = r.data.as_ref().map(|p| load_data(p)).transpose()?;

    let conditioning = match (&teacher_net.arch().num_classes, &data) {
        (None, _) => Conditioning::None,
        (Some(_), Some(LoadedData::Conditional(c))) => Conditioning::ClassPrior(c.prior()),
        (Some(_), _) => {
            return Err(Error::invalid(
                "distilling a class-conditional teacher requires conditional --data for the class prior",
            ))
        }
    };

    let cfg = DistillConfig {
        steps: r.steps,
        substeps: r.k,
        teacher_kind: r.teacher_solver,
        afs: r.afs,
        loss,
        lr: r.lr,
        budget: r.budget,
        batch: r.batch,
        step_list: r.step_list.iter().map(|v| *v as u32).collect(),
        t_min: r.tmin,
        t_max: r.tmax,
        rho: r.rho,
    };
    let teacher_model = NetEps::new(&teacher_net);
    let rescue = |e| rescue_divergence(e, &r.out, &r.checkpoint_out);
    let (student, log): (EpsNet, TrainLog) = match r.mode {
        DistillMode::Vanilla => {
            let d = data.as_ref().expect("validated in resolve");
            let train_data = match d {
                LoadedData::Plain(m) => TrainData::Unconditional(m),
                LoadedData::Conditional(c) => TrainData::Conditional(c),
            };
            distill_vanilla(&teacher_model, &teacher_net, train_data, &cfg, &streams)
                .map_err(rescue)?
        }
        DistillMode::Sfd => {
            distill_sfd(&teacher_model, &teacher_net, &cfg, conditioning, &streams)
                .map_err(rescue)?
        }
        DistillMode::SfdV => {
            distill_sfd_v(&teacher_model, &teacher_net, &cfg, conditioning, &streams)
                .map_err(rescue)?
        }
        DistillMode::SecondStage => {
            distill_second_stage(&teacher_net, &cfg, &streams).map_err(rescue)?
        }
    };

    let mut manifest = Manifest::new("distill", r.seed, &r);
    let ckpt = write_file(&r.out, &r.checkpoint_out, &student.to_json())?;
    manifest.record(&ckpt);
    let log_path = write_file(&r.out, "train_log.csv", &log.to_csv())?;
    manifest.record(&log_path);

    // Recorded post-training evaluation, reproducible bit-exactly by `eval`
    // with the same seed and options.
    let mut extra = json!({
        "final_loss": log.final_loss(),
        "iterations": cfg.iterations(),
    });
    if let Some(LoadedData::Plain(mix)) = &data {
        let metric_steps: Vec<usize> = match r.mode {
            DistillMode::SfdV => r.step_list.clone(),
            DistillMode::SecondStage => vec![if r.afs { 2 } else { 1 }],
            _ => vec![r.steps],
        };
        let sweep_cfg = SweepConfig {
            kind: SolverKind::Euler,
            afs: r.afs,
            use_step_condition: student.arch().step_condition,
            t_min: r.tmin,
            t_max: r.tmax,
            rho: r.rho,
            n_chains: r.eval_chains,
            projections: 128,
        };
        let student_model = NetEps::new(&student);
        let points = extrapolation_sweep(&student_model, mix, &metric_steps, &sweep_cfg, &streams)?;
        let hash = config_hash(&r);
        let metrics_path = write_file(&r.out, &format!("metrics_{hash}.csv"), &metrics_csv(&points))?;
        manifest.record(&metrics_path);
        extra["final_metrics"] = serde_json::to_value(&points).expect("points serialize");
    }
    manifest.with_extra(extra);
    manifest.write(&r.out)?;
    Ok(())
}

fn cmd_sample(r: ResolvedSample) -> Result<()> {
    let streams = Streams::new(r.seed);
    let net = load_checkpoint(&r.checkpoint)?;
    if net.arch().num_classes.is_some() && r.class.is_none() {
        return Err(Error::invalid(
            "class-conditional checkpoint requires --class",
        ));
    }
    let schedule = TimeSchedule::polynomial(r.steps, r.tmin, r.tmax, r.rho)?;
    let model = NetEps::new(&net);
    let mut opts = SampleOptions::new(r.solver, r.chains).with_afs(r.afs);
    if net.arch().step_condition {
        opts = opts.with_step_condition(r.steps as u32);
    }
    if let Some(class) = r.class {
        opts = opts.with_guidance(class, r.guidance_scale);
    }
    let mut rng = streams.eval();
    let spec = DiffusionSpec::new(r.tmin, r.tmax)?;
    let noise = prior_sample_batch(&spec, net.arch().dim, r.chains, &mut rng);
    let (samples, trace) = sample_chunked(&model, &schedule, &opts, &noise, r.threads)?;

    let mut manifest = Manifest::new("sample", r.seed, &r);
    let s_path = write_file(&r.out, "samples.csv", &samples_csv(&samples, net.arch().dim))?;
    manifest.record(&s_path);
    let t_path = write_file(&r.out, "trace.csv", &trace_csv(&trace))?;
    manifest.record(&t_path);
    manifest.with_extra(json!({ "nfe": trace.nfe }));
    manifest.write(&r.out)?;
    Ok(())
}

fn cmd_eval(r: ResolvedEval) -> Result<()> {
    let streams = Streams::new(r.seed);
    let net = load_checkpoint(&r.checkpoint)?;
    if net.arch().num_classes.is_some() && r.class.is_none() {
        return Err(Error::invalid(
            "class-conditional checkpoint requires --class",
        ));
    }
    let data = load_data(&r.data)?;
    // reference distribution: the class mixture under conditional sampling,
    // the marginal/plain mixture otherwise
    let reference = match (&data, r.class) {
        (LoadedData::Plain(m), _) => m.clone(),
        (LoadedData::Conditional(c), Some(class)) if class < c.num_classes() => {
            c.class(class).clone()
        }
        (LoadedData::Conditional(c), _) => c.marginal(),
    };
    let model = NetEps::new(&net);

    let mut points = Vec::with_capacity(r.steps.len());
    for &steps in &r.steps {
        let schedule = TimeSchedule::polynomial(steps, r.tmin, r.tmax, r.rho)?;
        let mut opts = SampleOptions::new(r.solver, r.chains).with_afs(r.afs);
        if net.arch().step_condition {
            opts = opts.with_step_condition(steps as u32);
        }
        if let Some(class) = r.class {
            opts = opts.with_guidance(class, r.guidance_scale);
        }
        let (sliced_w, nfe) =
            sampling_metric(&model, &schedule, &opts, &reference, r.projections, &streams)?;
        points.push(SweepPoint {
            steps,
            nfe,
            sliced_w,
        });
    }

    let hash = config_hash(&r);
    let mut manifest = Manifest::new("eval", r.seed, &r);
    let m_path = write_file(&r.out, &format!("metrics_{hash}.csv"), &metrics_csv(&points))?;
    manifest.record(&m_path);

    let mut extra = json!({ "metrics": serde_json::to_value(&points).expect("serialize") });
    if r.project {
        let steps = r.steps[0];
        let schedule = TimeSchedule::polynomial(steps, r.tmin, r.tmax, r.rho)?;
        let mut opts = SampleOptions::new(r.solver, r.chains.min(64)).with_afs(r.afs);
        if net.arch().step_condition {
            opts = opts.with_step_condition(steps as u32);
        }
        if let Some(class) = r.class {
            opts = opts.with_guidance(class, r.guidance_scale);
        }
        let mut rng = streams.chain(0);
        let spec = DiffusionSpec::new(r.tmin, r.tmax)?;
        let noise = prior_sample_batch(&spec, net.arch().dim, opts.n_chains, &mut rng);
        let (_, trace) = sample_with_noise(&model, &schedule, &opts, &noise)?;
        let proj = project_trajectories(&trace, if net.arch().dim >= 3 { 3 } else { 2 })?;
        let p_path = write_file(&r.out, &format!("projection_{hash}.csv"), &projection_csv(&proj))?;
        manifest.record(&p_path);
        extra["explained_variance"] =
            serde_json::to_value(&proj.explained_variance).expect("serialize");
    }
    manifest.with_extra(extra);
    manifest.write(&r.out)?;
    Ok(())
}

fn cmd_reproduce(r: ResolvedReproduce) -> Result<()> {
    match r.target.as_str() {
        "schedule-table" => reproduce_schedule_table(&r),
        "fig2" => reproduce_fig2(&r),
        "fig3" => reproduce_fig3(&r),
        "fig4" => reproduce_fig4(&r),
        _ => unreachable!("validated in resolve"),
    }
}

fn reproduce_schedule_table(r: &ResolvedReproduce) -> Result<()> {
    let mut csv = String::from("rho,t_3,t_2,t_1,t_0\n");
    for rho in 5..=10 {
        let s = TimeSchedule::polynomial(3, 0.006, 80.0, rho as f64)?;
        let v = s.values();
        csv.push_str(&format!(
            "{rho},{:.2},{:.2},{:.2},{}\n",
            v[3], v[2], v[1], v[0]
        ));
    }
    let hash = config_hash(r);
    let mut manifest = Manifest::new("reproduce", r.seed, r);
    let path = write_file(&r.out, &format!("schedule_table_{hash}.csv"), &csv)?;
    manifest.record(&path);
    manifest.write(&r.out)?;
    Ok(())
}

/// The 2-D benchmark distribution used by the built-in experiments.
pub fn ring8() -> GaussianMixture {
    GaussianMixture::ring(8, 1.5, 0.25).expect("ring is valid")
}

/// Pretrain a small teacher for the built-in experiments.
pub fn toy_teacher(data: &GaussianMixture, iterations: usize, streams: &Streams) -> Result<EpsNet> {
    let arch = ArchConfig::new(data.dim())
        .with_hidden(vec![64, 64])
        .with_embed(32, 32);
    let net = EpsNet::init(arch, &mut streams.init())?;
    let cfg = PretrainConfig {
        iterations,
        batch: 128,
        lr: 2e-3,
        t_min: 0.006,
        t_max: 80.0,
    };
    Ok(pretrain(net, TrainData::Unconditional(data), &cfg, streams)?.0)
}

fn reproduce_fig2(r: &ResolvedReproduce) -> Result<()> {
    let streams = Streams::new(r.seed);
    let ring = ring8();
    let teacher = toy_teacher(&ring, r.pretrain_iterations, &streams)?;
    let cfg = SmoothModConfig::default();
    let matrix = smooth_modification_experiment(&teacher, &ring, &cfg, &streams)?;

    let hash = config_hash(r);
    let mut manifest = Manifest::new("reproduce", r.seed, r);
    let j_path = write_file(&r.out, &format!("deviation_{hash}.json"), &matrix.to_json())?;
    manifest.record(&j_path);

    let mut csv = String::from("model");
    for n in 0..matrix.baseline.len() {
        csv.push_str(&format!(",dev_{n}"));
    }
    csv.push('\n');
    csv.push_str("baseline");
    for v in &matrix.baseline {
        csv.push_str(&format!(",{v}"));
    }
    csv.push('\n');
    for (k, row) in matrix.rows.iter().enumerate() {
        csv.push_str(&format!("student_{k}"));
        for v in row {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    let c_path = write_file(&r.out, &format!("deviation_{hash}.csv"), &csv)?;
    manifest.record(&c_path);
    manifest.with_extra(json!({
        "off_target_improvement_fraction": matrix.off_target_improvement_fraction(),
    }));
    manifest.write(&r.out)?;
    Ok(())
}

fn reproduce_fig3(r: &ResolvedReproduce) -> Result<()> {
    let streams = Streams::new(r.seed);
    let ring = ring8();
    let teacher = toy_teacher(&ring, r.pretrain_iterations, &streams)?;
    let teacher_model = NetEps::new(&teacher);

    let base = DistillConfig {
        substeps: 4,
        lr: 5e-4,
        budget: r.budget,
        batch: 128,
        ..Default::default()
    };
    let mut csv = String::from("mode,teacher_solver,afs,loss,steps,nfe,sliced_w\n");
    let run = |mode: &str,
                   kind: SolverKind,
                   afs: bool,
                   loss: LossMetric,
                   csv: &mut String|
     -> Result<()> {
        let steps = if afs { 3 } else { 2 };
        let cfg = DistillConfig {
            steps,
            teacher_kind: kind,
            afs,
            loss,
            ..base.clone()
        };
        let (student, _) = match mode {
            "vanilla" => distill_vanilla(
                &teacher_model,
                &teacher,
                TrainData::Unconditional(&ring),
                &cfg,
                &streams,
            )?,
            _ => distill_sfd(&teacher_model, &teacher, &cfg, Conditioning::None, &streams)?,
        };
        let sweep_cfg = SweepConfig {
            afs,
            n_chains: r.chains,
            ..Default::default()
        };
        let model = NetEps::new(&student);
        let p = &extrapolation_sweep(&model, &ring, &[steps], &sweep_cfg, &streams)?[0];
        csv.push_str(&format!(
            "{mode},{},{afs},{},{},{},{}\n",
            kind.name(),
            loss.name(),
            p.steps,
            p.nfe,
            p.sliced_w
        ));
        Ok(())
    };

    // teacher-solver comparison, then the analytical-first-step and loss
    // ablations on the strongest teacher
    run("vanilla", SolverKind::Heun, false, LossMetric::L2Sq, &mut csv)?;
    run("vanilla", SolverKind::Dpm2s, false, LossMetric::L2Sq, &mut csv)?;
    run("sfd", SolverKind::Heun, false, LossMetric::L2Sq, &mut csv)?;
    run("sfd", SolverKind::Dpm2s, false, LossMetric::L2Sq, &mut csv)?;
    run("sfd", SolverKind::DpmPp3m, false, LossMetric::L2Sq, &mut csv)?;
    run("sfd", SolverKind::DpmPp3m, true, LossMetric::L2Sq, &mut csv)?;
    run("sfd", SolverKind::DpmPp3m, true, LossMetric::L1, &mut csv)?;
    run(
        "sfd",
        SolverKind::DpmPp3m,
        true,
        LossMetric::parse("pseudo_huber", 2)?,
        &mut csv,
    )?;

    // solver-free baseline: the teacher sampled with plain Euler at 2 NFE
    let sweep_cfg = SweepConfig {
        n_chains: r.chains,
        ..Default::default()
    };
    let p = &extrapolation_sweep(&teacher_model, &ring, &[2], &sweep_cfg, &streams)?[0];
    csv.push_str(&format!(
        "teacher-euler,euler,false,none,{},{},{}\n",
        p.steps, p.nfe, p.sliced_w
    ));

    let hash = config_hash(r);
    let mut manifest = Manifest::new("reproduce", r.seed, r);
    let path = write_file(&r.out, &format!("ablation_{hash}.csv"), &csv)?;
    manifest.record(&path);
    manifest.write(&r.out)?;
    Ok(())
}

fn reproduce_fig4(r: &ResolvedReproduce) -> Result<()> {
    let streams = Streams::new(r.seed);
    let ring = ring8();
    let teacher = toy_teacher(&ring, r.pretrain_iterations, &streams)?;
    let teacher_model = NetEps::new(&teacher);

    let cfg = DistillConfig {
        steps: 4,
        lr: 5e-4,
        budget: r.budget,
        batch: 128,
        ..Default::default()
    };
    let (student, _) = distill_sfd(&teacher_model, &teacher, &cfg, Conditioning::None, &streams)?;
    let student_model = NetEps::new(&student);

    let steps = [2usize, 3, 4, 5, 6];
    let student_sweep = extrapolation_sweep(
        &student_model,
        &ring,
        &steps,
        &SweepConfig {
            afs: true,
            n_chains: r.chains,
            ..Default::default()
        },
        &streams,
    )?;
    let teacher_sweep = extrapolation_sweep(
        &teacher_model,
        &ring,
        &steps,
        &SweepConfig {
            n_chains: r.chains,
            ..Default::default()
        },
        &streams,
    )?;

    let mut csv = String::from("steps,student_nfe,student_sliced_w,teacher_nfe,teacher_euler_sliced_w\n");
    for (s, t) in student_sweep.iter().zip(&teacher_sweep) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.steps, s.nfe, s.sliced_w, t.nfe, t.sliced_w
        ));
    }
    let hash = config_hash(r);
    let mut manifest = Manifest::new("reproduce", r.seed, r);
    let path = write_file(&r.out, &format!("extrapolation_{hash}.csv"), &csv)?;
    manifest.record(&path);
    manifest.write(&r.out)?;
    Ok(())
}

/// The analytic-teacher twin of [`toy_teacher`], used by tests that need an
/// exact reference field on the same data.
pub fn ring_oracle(data: &GaussianMixture) -> OracleEps<'_> {
    OracleEps::new(data)
}
