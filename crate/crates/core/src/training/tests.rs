use std::sync::atomic::AtomicBool;

use super::*;
use crate::encoders::{ParamRole, ParamSet};
use crate::objectives::LossGates;
use crate::tensor::Tensor;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::micro();
    cfg.train_size = 16;
    cfg.eval_size = 8;
    cfg.batch_size = 4;
    cfg.queue_size = 8;
    cfg.epochs = 2;
    cfg.warmup_steps = 2;
    cfg
}

fn cosine_oracle(step: usize, init: f64, peak: f64, floor: f64, warm: usize, total: usize) -> f64 {
    if step < warm {
        init + (peak - init) * step as f64 / warm as f64
    } else {
        let frac = (step - warm) as f64 / (total - 1 - warm) as f64;
        floor + 0.5 * (peak - floor) * (1.0 + (frac * std::f64::consts::PI).cos())
    }
}

#[test]
fn schedule_endpoints_at_large_warmup() {
    let s = LrSchedule { lr_init: 1e-5, lr_peak: 1e-4, lr_floor: 1e-5, warmup_steps: 2000, total_steps: 30_000 };
    assert!((s.at(0) - 1e-5).abs() <= 1e-12);
    assert!((s.at(2000) - 1e-4).abs() <= 1e-12);
    assert!((s.at(29_999) - 1e-5).abs() <= 1e-12);
    for step in [1, 999, 1999, 2001, 15_000, 29_998] {
        let o = cosine_oracle(step, 1e-5, 1e-4, 1e-5, 2000, 30_000);
        assert!((s.at(step) - o).abs() < 1e-15, "step {step}");
    }
}

#[test]
fn schedule_is_continuous_and_decays() {
    let s = LrSchedule { lr_init: 0.0, lr_peak: 1.0, lr_floor: 0.1, warmup_steps: 10, total_steps: 100 };
    assert!((s.at(10) - s.at(9)).abs() <= 0.1 + 1e-12);
    for t in 10..99 {
        assert!(s.at(t + 1) <= s.at(t));
    }
    assert_eq!(s.at(500), 0.1);
    let short = LrSchedule { total_steps: 5, ..s };
    assert_eq!(short.at(20), 1.0);
}

#[test]
fn config_round_trips_through_text() {
    let mut cfg = TrainConfig::micro();
    cfg.apply_override("loss.lmi=false").unwrap();
    cfg.apply_override("tau=0.05").unwrap();
    cfg.apply_override("lmi_layer=intermediate").unwrap();
    let back = TrainConfig::parse_str(&cfg.to_kv_string()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.entries().len(), CONFIG_KEYS.len());
}

#[test]
fn config_errors() {
    let err = TrainConfig::default().set("learning_rate", "1").unwrap_err().to_string();
    assert!(err.contains("learning_rate") && err.contains("lr_peak"), "{err}");
    assert!(TrainConfig::parse_str("tau = abc").is_err());
    assert!(TrainConfig::parse_str("no equals sign").is_err());
    let err = TrainConfig::load(std::path::Path::new("/nonexistent/missing.cfg")).unwrap_err().to_string();
    assert!(err.contains("config not found"), "{err}");
    let mut cfg = tiny();
    cfg.queue_size = 2;
    assert!(cfg.validate().is_err());
}

#[test]
fn one_epoch_of_a_full_batch_is_one_step() {
    let mut cfg = tiny();
    cfg.train_size = 32;
    cfg.batch_size = 32;
    cfg.queue_size = 64;
    cfg.epochs = 1;
    assert_eq!(cfg.total_steps(), 1);
    let mut cfg2 = cfg.clone();
    cfg2.train_size = 33;
    assert_eq!(cfg2.steps_per_epoch(), 2);
}

#[test]
fn adamw_first_step_matches_hand_computation() {
    let mut p = ParamSet::new(ParamRole::Online);
    p.push("w", Tensor::from_vec(1, 2, vec![1.0, -2.0]));
    let mut mo = Moments::zeros_like(&p);
    let g = vec![Tensor::from_vec(1, 2, vec![0.5, -3.0])];
    let cfg = AdamWConfig::default();
    let lr = 0.1;
    adamw_step(&mut p, &g, &mut mo, lr, 1, &cfg).unwrap();
    // bias-corrected moments are g and g^2 after one step
    let expect = |w: f64, g: f64| w * (1.0 - lr * cfg.weight_decay) - lr * g / (g.abs() + cfg.eps);
    assert!((p.get(0).data()[0] - expect(1.0, 0.5)).abs() < 1e-15);
    assert!((p.get(0).data()[1] - expect(-2.0, -3.0)).abs() < 1e-15);
}

#[test]
fn adamw_refuses_shadow() {
    let mut p = ParamSet::new(ParamRole::Shadow);
    p.push("w", Tensor::zeros(1, 1));
    let mut mo = Moments::zeros_like(&p);
    assert!(adamw_step(&mut p, &[Tensor::zeros(1, 1)], &mut mo, 0.1, 1, &AdamWConfig::default()).is_err());
}

#[test]
fn all_gates_off_only_decays() {
    let mut cfg = tiny();
    cfg.gates = LossGates::NONE;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let before = t.state.online_params();
    let rec = t.step().unwrap();
    assert_eq!(rec.total, 0.0);
    let decay = 1.0 - rec.lr * cfg.weight_decay;
    let after = t.state.online_params();
    for (b, a) in [(&before.vision, &after.vision), (&before.text, &after.text), (&before.fusion, &after.fusion)] {
        for (x, y) in b.values().iter().zip(a.values()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u * decay - v).abs() <= 1e-15 * u.abs().max(1.0));
            }
        }
    }
}

#[test]
fn zero_momentum_copies_online() {
    let mut cfg = tiny();
    cfg.momentum = 0.0;
    let mut t = Trainer::new(cfg).unwrap();
    t.step().unwrap();
    assert_eq!(t.state.vision.shadow.values(), t.state.vision.online.values());
    assert_eq!(t.state.text.shadow.values(), t.state.text.online.values());
}

#[test]
fn step_enqueues_one_batch_per_queue() {
    let cfg = tiny();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let (tp, ip) = (t.state.text_queue.pushed(), t.state.image_queue.pushed());
    t.step().unwrap();
    let b = cfg.batch_size as u64;
    assert_eq!(t.state.text_queue.pushed() + t.state.image_queue.pushed() - tp - ip, 2 * b);
    assert_eq!(t.state.image_queue.pushed() - ip, b);
    assert_eq!(t.state.step, 1);
    assert_eq!(t.state.opt.t, 1);
}

#[test]
fn identical_seeds_give_identical_streams() {
    let run = |seed| {
        let mut cfg = tiny();
        cfg.seed = seed;
        let mut t = Trainer::new(cfg).unwrap();
        (0..3).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
    assert!(a.iter().all(|r| r.total.is_finite() && r.total > 0.0));
}

#[test]
fn checkpoint_bytes_are_stable() {
    let mut t = Trainer::new(tiny()).unwrap();
    t.step().unwrap();
    let mut first = Vec::new();
    t.checkpoint().write(&mut first).unwrap();
    let back = Checkpoint::read(first.as_slice()).unwrap();
    let mut second = Vec::new();
    back.write(&mut second).unwrap();
    assert_eq!(first, second);
    assert_eq!(&first[..4], CHECKPOINT_MAGIC);
    let (cfg, _, state) = back.restore().unwrap();
    assert_eq!(cfg, t.cfg);
    assert_eq!(state, t.state);
}

#[test]
fn checkpoint_rejects_corruption() {
    let t = Trainer::new(tiny()).unwrap();
    let mut bytes = Vec::new();
    t.checkpoint().write(&mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read(bad.as_slice()).is_err());
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(Checkpoint::read(bad.as_slice()).is_err());
    assert!(Checkpoint::read(&bytes[..bytes.len() - 8]).is_err());
}

#[test]
fn resume_reproduces_the_trace() {
    let mut straight = Trainer::new(tiny()).unwrap();
    let full: Vec<_> = (0..6).map(|_| straight.step().unwrap()).collect();

    let mut first = Trainer::new(tiny()).unwrap();
    let mut resumed: Vec<_> = (0..3).map(|_| first.step().unwrap()).collect();
    let mut bytes = Vec::new();
    first.checkpoint().write(&mut bytes).unwrap();
    drop(first);
    let mut second = Trainer::from_checkpoint(&Checkpoint::read(bytes.as_slice()).unwrap()).unwrap();
    resumed.extend((0..3).map(|_| second.step().unwrap()));
    assert_eq!(resumed, full);
    assert_eq!(second.state, straight.state);
}

#[test]
fn run_writes_artifacts_and_honours_interrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.checkpoint_every = 3;
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let out = t.run(&RunOptions { out_dir: Some(dir.path()), evaluate: true, ..RunOptions::default() }).unwrap();
    assert_eq!(out.records.len(), cfg.total_steps());
    assert_eq!(read_metrics(&dir.path().join("metrics.jsonl")).unwrap(), out.records);
    assert_eq!(TrainConfig::load(&dir.path().join("config.cfg")).unwrap(), cfg);
    assert!(dir.path().join("checkpoint-000003.tclk").exists());
    assert!(dir.path().join("checkpoint.tclk").exists());
    assert!(dir.path().join("results.json").exists());
    assert_eq!(out.retrieval.unwrap().n_queries, cfg.eval_size);

    let flag = AtomicBool::new(true);
    let dir2 = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let out = t.run(&RunOptions { out_dir: Some(dir2.path()), interrupt: Some(&flag), ..RunOptions::default() }).unwrap();
    assert!(out.interrupted);
    assert!(out.records.is_empty());
    assert!(out.final_checkpoint.unwrap().exists());
}

#[test]
fn stop_at_keeps_full_schedule() {
    let cfg = tiny();
    let mut a = Trainer::new(cfg.clone()).unwrap();
    let part = a.run(&RunOptions { stop_at: Some(2), ..RunOptions::default() }).unwrap();
    assert_eq!(part.records.len(), 2);
    let mut b = Trainer::new(cfg).unwrap();
    let full = b.run(&RunOptions::default()).unwrap();
    assert_eq!(&full.records[..2], part.records.as_slice());
    let rest = a.run(&RunOptions::default()).unwrap();
    assert_eq!(&full.records[2..], rest.records.as_slice());
}

#[test]
fn epoch_order_is_a_permutation() {
    let cfg = tiny();
    let mut o = epoch_order(&cfg, 1);
    assert_ne!(o, epoch_order(&cfg, 2));
    o.sort();
    assert_eq!(o, (0..cfg.train_size).collect::<Vec<_>>());
}

#[test]
fn sweeps_have_expected_rows() {
    let names: Vec<String> = ablation::gate_sweep().into_iter().map(|v| v.name).collect();
    assert_eq!(names, ["CMA+ITM+MLM", "+IMC (w/o aug)", "+IMC", "+IMC+LMI"]);
    let base = TrainConfig::default();
    let cfgs: Vec<TrainConfig> = ablation::local_sweep().iter().map(|v| v.apply(&base, 0).unwrap()).collect();
    assert_eq!(cfgs.len(), 4);
    assert!(cfgs.iter().any(|c| c.lmi_pool == 0 && c.lmi_layer == LocalLayer::Intermediate));
    let cma = ablation::gate_sweep()[0].apply(&base, 3).unwrap();
    assert!(cma.gates.cma && cma.gates.itm && cma.gates.mlm && !cma.gates.imc && !cma.gates.lmi);
    assert_eq!(cma.seed, 3);
}

#[test]
fn sweep_results_ignore_thread_count() {
    let mut base = tiny();
    base.epochs = 1;
    let variants = &ablation::gate_sweep()[..2];
    let dir = tempfile::tempdir().unwrap();
    let one = ablation::run_sweep(&base, variants, &[0, 1], &ablation::SweepOptions { threads: 1, ..Default::default() }).unwrap();
    let opts = ablation::SweepOptions { threads: 2, out_dir: Some(dir.path()), ..Default::default() };
    let two = ablation::run_sweep(&base, variants, &[0, 1], &opts).unwrap();
    assert!(dir.path().join("imc-w-o-aug").join("seed-1").join("metrics.jsonl").exists());
    assert_eq!(one, two);
    assert_eq!(one.len(), 2);
    let table = ablation::format_table("gates", &one);
    assert_eq!(table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| variant")).count(), 2);
}
