//! Scratch scan over acceptance-trend configurations (not part of the suite).

use sfd_core::eval::sampling_metric;
use sfd_core::model::{ArchConfig, EpsNet, NetEps};
use sfd_core::process::GaussianMixture;
use sfd_core::rng::Streams;
use sfd_core::schedule::TimeSchedule;
use sfd_core::solver::{SampleOptions, SolverKind};
use sfd_core::trainer::{
    distill_sfd, distill_vanilla, pretrain, Conditioning, DistillConfig, LossMetric,
    PretrainConfig, TrainData,
};

fn sw(net: &EpsNet, data: &GaussianMixture, steps: usize, afs: bool) -> f64 {
    let model = NetEps::new(net);
    let schedule = TimeSchedule::polynomial(steps, 0.006, 80.0, 7.0).unwrap();
    let opts = SampleOptions::new(SolverKind::Euler, 4096).with_afs(afs);
    sampling_metric(&model, &schedule, &opts, data, 128, &Streams::new(7100)).unwrap().0
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.25);
    let pre_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4000);

    let ring = GaussianMixture::ring(8, 1.5, sigma).unwrap();
    let streams = Streams::new(9001);
    let arch = ArchConfig::new(2).with_hidden(vec![64, 64]).with_embed(32, 32);
    let net = EpsNet::init(arch, &mut streams.init()).unwrap();
    let cfg_pre = PretrainConfig {
        iterations: pre_iters,
        batch: 128,
        lr: 2e-3,
        ..Default::default()
    };
    let (teacher, _) = pretrain(net, TrainData::Unconditional(&ring), &cfg_pre, &streams).unwrap();
    let mut err = 0.0;
    let mut cnt = 0;
    for i in -2..=2 {
        for j in -2..=2 {
            let x = [i as f64, j as f64];
            for t in [0.05, 0.3, 1.0, 4.0, 20.0] {
                let p = teacher.forward_one(&x, t, None, None).unwrap();
                let o = ring.eps(&x, t).unwrap();
                err += ((p[0] - o[0]).powi(2) + (p[1] - o[1]).powi(2)).sqrt();
                cnt += 1;
            }
        }
    }
    println!("sigma={sigma} teacher eps-err {:.4}", err / cnt as f64);
    let tm = NetEps::new(&teacher);
    println!("teacher euler sw: N2 {:.4} N3 {:.4} N6 {:.4}",
        sw(&teacher, &ring, 2, false), sw(&teacher, &ring, 3, false), sw(&teacher, &ring, 6, false));

    // --- C5 pair: vanilla vs sfd, same budget/config (try N=3, dpm_2s)
    for (steps, budget, lr) in [(3usize, 64_000usize, 5e-4f64), (3, 128_000, 5e-4)] {
        let cfg = DistillConfig {
            steps,
            substeps: 4,
            teacher_kind: SolverKind::Dpm2s,
            afs: false,
            loss: LossMetric::L1,
            lr,
            budget,
            batch: 128,
            ..Default::default()
        };
        let (v, _) = distill_vanilla(&tm, &teacher, TrainData::Unconditional(&ring), &cfg,
            &Streams::new(9012)).unwrap();
        let (g, _) = distill_sfd(&tm, &teacher, &cfg, Conditioning::None, &Streams::new(9013)).unwrap();
        println!("C5 N={steps} budget={budget}: vanilla {:.4} sfd {:.4} (ratio {:.3})",
            sw(&v, &ring, steps, false), sw(&g, &ring, steps, false),
            sw(&g, &ring, steps, false) / sw(&v, &ring, steps, false));
    }

    // --- C6 pair: afs n3 vs no-afs n2, defaults lr 5e-5 budget 200k
    let cfg_afs = DistillConfig::default();
    let (with_afs, _) = distill_sfd(&tm, &teacher, &cfg_afs, Conditioning::None, &Streams::new(9002)).unwrap();
    let cfg_no = DistillConfig { steps: 2, afs: false, ..Default::default() };
    let (no_afs, _) = distill_sfd(&tm, &teacher, &cfg_no, Conditioning::None, &Streams::new(9022)).unwrap();
    let a = sw(&with_afs, &ring, 3, true);
    let b = sw(&no_afs, &ring, 2, false);
    println!("C6: with-afs {a:.4} no-afs {b:.4} (ratio {:.3})", a / b);

    // C4 margins at this sigma
    let e2 = sw(&teacher, &ring, 2, false);
    println!("C4: student {:.4} teacher-euler2 {:.4} (ratio {:.3})", a, e2, a / e2);
}
