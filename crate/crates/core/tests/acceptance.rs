//! End-to-end acceptance criteria. Runs sequentially so wall-clock budgets
//! are measured without interference, and prints one line per criterion.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::Rng;

use tcl_core::evaluation::{self, CriticConfig, GradcheckConfig, BOUND_SLACK};
use tcl_core::momentum::{ema_update, NegativeQueue, QueueKind};
use tcl_core::encoders::{ParamRole, ParamSet};
use tcl_core::objectives::{infonce, itm_loss, mlm_loss, ContrastiveBatch};
use tcl_core::seed;
use tcl_core::synthdata::{generate_dataset, mlm_mask, vocab, DataSpec, MaskSplit, MASK};
use tcl_core::training::ablation::{self, AblationRow, SweepOptions};
use tcl_core::training::{read_metrics, Checkpoint, RunOptions, TrainConfig, Trainer};
use tcl_core::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, budget_s: u64) -> (bool, String) {
    (elapsed <= Duration::from_secs(budget_s), format!("{:.1}s of {budget_s}s", elapsed.as_secs_f64()))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut sum_mismatch = 0.0f64;
    let mut all = true;
    for seed in 0..5 {
        let r = evaluation::gradcheck(&GradcheckConfig { seed, ..GradcheckConfig::default() }).expect("gradcheck runs");
        all &= r.passed();
        sum_mismatch = sum_mismatch.max(r.sum_mismatch);
        for t in &r.terms {
            if t.max_rel_error > worst.0 {
                worst = (t.max_rel_error, format!("{} seed {seed} at {}", t.term, t.worst_param));
            }
        }
    }
    let (fast, time) = within(start.elapsed(), 120);
    outcome(all && fast, format!("max rel error {:.2e} ({}), total vs sum {:.1e}, {time}", worst.0, worst.1, sum_mismatch))
}

fn infonce_bound() -> Outcome {
    let start = Instant::now();
    let rows = evaluation::run_regression_suite(&CriticConfig::default()).expect("suite runs");
    let violations: Vec<&str> = rows.iter().filter(|r| !r.within_slack).map(|r| r.name.as_str()).collect();
    let corr = rows.iter().find(|r| r.name == "correlated-8").expect("suite has correlated-8");
    let tight = corr.report.bound >= 0.8 * corr.report.exact;
    let (fast, time) = within(start.elapsed(), 300);
    let worst = rows.iter().map(|r| r.report.bound - r.report.exact).fold(f64::NEG_INFINITY, f64::max);
    outcome(
        violations.is_empty() && tight && fast,
        format!(
            "max bound - exact {worst:+.4} (slack {BOUND_SLACK}), violations {violations:?}, correlated-8 bound {:.4} vs 0.8 x {:.4}, {time}",
            corr.report.bound, corr.report.exact
        ),
    )
}

fn closed_forms() -> Outcome {
    let k = 1024;
    let d = 8;
    let mut rng = seed::rng(3);
    let anchors = Tensor::randn(4, d, 1.0, &mut rng).l2_normalize_rows(0.0);
    let positives = Tensor::randn(4, d, 1.0, &mut rng).l2_normalize_rows(0.0);
    // every negative equals the first positive, and every positive is
    // replaced by it too, so all logits in a row coincide
    let shared = Tensor::from_vec(1, d, positives.row(0).to_vec());
    let same: Vec<&Tensor> = (0..4).map(|_| &shared).collect();
    let negs: Vec<&Tensor> = (0..k).map(|_| &shared).collect();
    let batch = ContrastiveBatch {
        anchors: anchors.clone(),
        positives: Tensor::concat_rows(&same),
        queue_negatives: Tensor::concat_rows(&negs),
        tau: 0.07,
    };
    let nce = infonce(&batch).expect("infonce");
    let itm = itm_loss(&Tensor::zeros(6, 2), &[1, 1, 0, 0, 0, 0]).expect("itm");
    let v = vocab::VOCAB_SIZE;
    let mlm = mlm_loss(&Tensor::zeros(5, v), &[5, 6, 7, 8, 9]).expect("mlm");
    let errs = [(nce - ((k + 1) as f64).ln()).abs(), (itm - 2f64.ln()).abs(), (mlm - (v as f64).ln()).abs()];
    outcome(
        errs.iter().all(|e| *e <= 1e-6),
        format!("|InfoNCE - ln(K+1)| {:.1e}, |ITM - ln 2| {:.1e}, |MLM - ln V| {:.1e}", errs[0], errs[1], errs[2]),
    )
}

fn mechanism_statistics() -> Outcome {
    // masking fractions over 1e5 eligible positions
    let pairs = generate_dataset(2000, 17, &DataSpec::default()).expect("dataset");
    let (mut eligible, mut selected, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut round = 0u64;
    'outer: loop {
        for (i, p) in pairs.iter().enumerate() {
            let m = mlm_mask(&p.caption, seed::derive2(99, round, i as u64), 0.15, MaskSplit::default()).expect("mask");
            let words = p.caption.iter().filter(|&&t| !vocab::is_special(t)).count();
            eligible += words;
            selected += m.mask_positions.len();
            for &pos in &m.mask_positions {
                match m.input_ids[pos] {
                    t if t == MASK => masked += 1,
                    t if t == p.caption[pos] => kept += 1,
                    _ => random += 1,
                }
            }
            if eligible >= 100_000 {
                break 'outer;
            }
        }
        round += 1;
    }
    let rate = selected as f64 / eligible as f64;
    let s = selected as f64;
    let (fm, fr, fk) = (masked as f64 / s, random as f64 / s, kept as f64 / s);
    let masking_ok = (rate - 0.15).abs() <= 0.01 && (fm - 0.8).abs() <= 0.02 && (fr - 0.1).abs() <= 0.02 && (fk - 0.1).abs() <= 0.02;

    // queue against a list oracle
    let (cap, dim) = (37, 3);
    let mut q = NegativeQueue::new(QueueKind::Text, cap, dim).expect("queue");
    let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
    let mut rng = seed::rng(5);
    let mut queue_ok = true;
    for _ in 0..10_000 {
        if rng.random::<f64>() < 0.6 {
            let n = rng.random_range(1..=cap);
            let batch = Tensor::randn(n, dim, 1.0, &mut rng).l2_normalize_rows(0.0);
            q.enqueue(&batch).expect("enqueue");
            for r in 0..n {
                oracle.push_back(batch.row(r).to_vec());
                if oracle.len() > cap {
                    oracle.pop_front();
                }
            }
        } else {
            let got = q.negatives();
            let want: Vec<f64> = oracle.iter().flatten().copied().collect();
            queue_ok &= got.rows() == oracle.len() && got.data() == want.as_slice();
        }
    }

    // EMA geometric contraction
    let mut ema_err = 0.0f64;
    for m in [0.5, 0.9, 0.995] {
        let mut online = ParamSet::new(ParamRole::Online);
        online.push("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        let mut shadow = ParamSet::new(ParamRole::Shadow);
        shadow.push("w", Tensor::from_vec(1, 3, vec![4.0, 3.0, -1.5]));
        let gap0: Vec<f64> = shadow.get(0).data().iter().zip(online.get(0).data()).map(|(s, o)| s - o).collect();
        for n in 1..=50 {
            ema_update(&online, &mut shadow, m).expect("ema");
            for (i, (s, o)) in shadow.get(0).data().iter().zip(online.get(0).data()).enumerate() {
                let want = m.powi(n) * gap0[i];
                ema_err = ema_err.max(((s - o) - want).abs() / want.abs());
            }
        }
    }
    let ema_ok = ema_err <= 1e-6;
    outcome(
        masking_ok && queue_ok && ema_ok,
        format!(
            "masking {rate:.4} of {eligible} positions, split {fm:.3}/{fr:.3}/{fk:.3}; queue FIFO {}; EMA max rel error {ema_err:.1e}",
            if queue_ok { "matches oracle" } else { "MISMATCH" }
        ),
    )
}

fn desk_learning(full: &AblationRow, elapsed: Duration) -> Outcome {
    let threshold = 20.0 / 128.0;
    let ok_seeds = full.runs.iter().filter(|r| r.tr_recall.r1 >= threshold && r.ir_recall.r1 >= threshold).count();
    let per_seed: Vec<String> =
        full.runs.iter().map(|r| format!("{:.1}/{:.1}", 100.0 * r.tr_recall.r1, 100.0 * r.ir_recall.r1)).collect();
    let (fast, time) = within(elapsed, 900);
    outcome(
        ok_seeds == full.runs.len() && full.runs.len() == 3 && fast,
        format!("TR/IR R@1 % per seed {per_seed:?}, need {:.2}% on 3 of 3 ({ok_seeds} ok), {time}", 100.0 * threshold),
    )
}

fn smoothed_loss(runs: &std::path::Path, seeds: &[u64]) -> Outcome {
    let w = 50;
    let mut pass = true;
    let mut parts = Vec::new();
    for s in seeds {
        let metrics = runs.join(format!("seed-{s}/metrics.jsonl"));
        let totals: Vec<f64> = read_metrics(&metrics).expect("metrics").iter().take(500).map(|r| r.total).collect();
        let avg: Vec<f64> = totals.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect();
        let rises: Vec<usize> = avg.windows(2).enumerate().filter(|(_, p)| p[1] > p[0]).map(|(i, _)| i + w).collect();
        pass &= rises.is_empty() && !avg.is_empty();
        parts.push(format!(
            "seed {s} {:.2} -> {:.2} over {} steps, rises at {rises:?}",
            avg.first().copied().unwrap_or(f64::NAN),
            avg.last().copied().unwrap_or(f64::NAN),
            totals.len()
        ));
    }
    outcome(pass, format!("{w}-step mean of total loss: {}", parts.join("; ")))
}

fn ablation_direction(full: &AblationRow, base: &AblationRow, imc: &AblationRow) -> Outcome {
    outcome(
        full.mean_recall >= base.mean_recall && imc.mean_recall >= base.mean_recall,
        format!(
            "3-seed mean recall: CMA+ITM+MLM {:.2}, +IMC {:.2}, +IMC+LMI {:.2}",
            100.0 * base.mean_recall,
            100.0 * imc.mean_recall,
            100.0 * full.mean_recall
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = TrainConfig { checkpoint_every: 10, ..TrainConfig::default() };
    let stop = Some(20);
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().expect("tempdir")).collect();
    for d in &dirs[..2] {
        let mut t = Trainer::new(cfg.clone()).expect("trainer");
        t.run(&RunOptions { out_dir: Some(d.path()), stop_at: stop, ..RunOptions::default() }).expect("run");
    }
    let a = std::fs::read(dirs[0].path().join("metrics.jsonl")).expect("metrics");
    let b = std::fs::read(dirs[1].path().join("metrics.jsonl")).expect("metrics");
    let same = a == b;

    let ckpt = Checkpoint::load(&dirs[0].path().join("checkpoint-000010.tclk")).expect("checkpoint");
    let mut resumed = Trainer::from_checkpoint(&ckpt).expect("resume");
    let tail = resumed.run(&RunOptions { out_dir: Some(dirs[2].path()), stop_at: stop, ..RunOptions::default() }).expect("run");
    let full = read_metrics(&dirs[0].path().join("metrics.jsonl")).expect("metrics");
    let resume_ok = tail.records.as_slice() == &full[10..];
    outcome(
        same && resume_ok,
        format!(
            "two seeded runs {} over {} steps; resume at step 10 {}",
            if same { "identical" } else { "DIFFER" },
            full.len(),
            if resume_ok { "reproduces steps 10..20" } else { "DIVERGES" }
        ),
    )
}

fn lr_schedule() -> Outcome {
    // 5M pairs, 30 epochs, batch 512, warmup 2000
    let cfg = TrainConfig { train_size: 5_000_000, batch_size: 512, epochs: 30, warmup_steps: 2000, ..TrainConfig::default() };
    let s = cfg.schedule();
    let last = cfg.total_steps() - 1;
    let errs = [(s.at(0) - 1e-5).abs(), (s.at(2000) - 1e-4).abs(), (s.at(last) - cfg.lr_floor).abs()];
    outcome(
        errs.iter().all(|e| *e <= 1e-12),
        format!("errors at 0 / 2000 / {last}: {:.1e} / {:.1e} / {:.1e}", errs[0], errs[1], errs[2]),
    )
}

fn main() {
    let wall = Instant::now();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        let label = if n == 0 { "extra".to_string() } else { format!("criterion {n}") };
        println!("{label} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "InfoNCE bound", infonce_bound());
    report(3, "closed-form losses", closed_forms());
    report(4, "mechanism statistics", mechanism_statistics());

    let base_cfg = TrainConfig::default();
    let seeds = [0, 1, 2];
    let runs_dir = tempfile::tempdir().expect("tempdir");
    let opts = SweepOptions { threads: 1, out_dir: Some(runs_dir.path()), ..SweepOptions::default() };
    let gates = ablation::gate_sweep();
    let pick = |name: &str| gates.iter().find(|v| v.name == name).cloned().expect("known variant");
    let start = Instant::now();
    let full = ablation::run_sweep(&base_cfg, &[pick("+IMC+LMI")], &seeds, &opts).expect("full runs").remove(0);
    let full_time = start.elapsed();
    report(5, "desk-scale learning", desk_learning(&full, full_time));
    report(0, "loss smoke", smoothed_loss(&runs_dir.path().join("imc-lmi"), &seeds));
    let rest = ablation::run_sweep(&base_cfg, &[pick("CMA+ITM+MLM"), pick("+IMC")], &seeds, &opts).expect("ablation runs");
    report(6, "ablation directionality", ablation_direction(&full, &rest[0], &rest[1]));

    report(7, "determinism", determinism());
    report(8, "LR schedule endpoints", lr_schedule());

    let failed: Vec<&str> = results.iter().filter(|(_, _, o)| !o.pass).map(|(_, name, _)| *name).collect();
    println!("acceptance: {} of {} checks passed in {:.1}s", results.len() - failed.len(), results.len(), wall.elapsed().as_secs_f64());
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
