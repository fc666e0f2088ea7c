//! Objective and local-MI ablation sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TclError};
use crate::evaluation::RetrievalResult;

use super::config::TrainConfig;
use super::{RunOptions, Trainer};

/// A named set of config overrides applied on top of a base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Variant { name: name.into(), overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// CMA+ITM+MLM, then adding IMC without and with image augmentation, then LMI.
pub fn gate_sweep() -> Vec<Variant> {
    vec![
        Variant::new("CMA+ITM+MLM", &[("loss.imc", "false"), ("loss.lmi", "false")]),
        Variant::new("+IMC (w/o aug)", &[("loss.lmi", "false"), ("shared_view", "true")]),
        Variant::new("+IMC", &[("loss.lmi", "false")]),
        Variant::new("+IMC+LMI", &[]),
    ]
}

/// Patch pooling on/off crossed with last/intermediate locals.
pub fn local_sweep() -> Vec<Variant> {
    let mut out = Vec::new();
    for (pool_name, pool) in [("pool", None), ("no pool", Some("0"))] {
        for layer in ["last", "intermediate"] {
            let mut o = vec![("lmi_layer", layer)];
            if let Some(p) = pool {
                o.push(("lmi_pool", p));
            }
            out.push(Variant::new(&format!("{pool_name}, {layer} layer"), &o));
        }
    }
    out
}

pub fn momentum_sweep() -> Vec<Variant> {
    ["0.5", "0.9", "0.995"].iter().map(|m| Variant::new(&format!("m = {m}"), &[("momentum", m)])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RetrievalResult>,
    pub tr_r1: f64,
    pub ir_r1: f64,
    /// Mean over seeds of each run's mean recall.
    pub mean_recall: f64,
}

impl AblationRow {
    fn from_runs(name: &str, seeds: &[u64], runs: Vec<RetrievalResult>) -> Self {
        let n = runs.len().max(1) as f64;
        AblationRow {
            name: name.into(),
            seeds: seeds.to_vec(),
            tr_r1: runs.iter().map(|r| r.tr_recall.r1).sum::<f64>() / n,
            ir_r1: runs.iter().map(|r| r.ir_recall.r1).sum::<f64>() / n,
            mean_recall: runs.iter().map(|r| r.mean_recall).sum::<f64>() / n,
            runs,
        }
    }
}

/// Trains `cfg` to completion and evaluates on its held-out split.
pub fn train_and_evaluate(cfg: TrainConfig, out_dir: Option<&Path>, interrupt: Option<&AtomicBool>) -> Result<RetrievalResult> {
    let mut t = Trainer::new(cfg)?;
    let out = t.run(&RunOptions { out_dir, interrupt, evaluate: true, ..RunOptions::default() })?;
    if out.interrupted {
        return Err(TclError::Interrupted(format!("stopped at step {}", t.state.step)));
    }
    out.retrieval.ok_or_else(|| TclError::Numerical("run ended without an evaluation".into()))
}

#[derive(Clone, Copy, Default)]
pub struct SweepOptions<'a> {
    /// Worker threads; 0 is treated as 1.
    pub threads: usize,
    /// Each run writes to `out_dir/<variant>/seed-<n>`.
    pub out_dir: Option<&'a Path>,
    pub interrupt: Option<&'a AtomicBool>,
}

fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-")
}

/// Runs every (variant, seed) pair on up to `opts.threads` worker threads.
/// Results do not depend on the thread count.
pub fn run_sweep(base: &TrainConfig, variants: &[Variant], seeds: &[u64], opts: &SweepOptions<'_>) -> Result<Vec<AblationRow>> {
    let jobs: Vec<(usize, usize)> = (0..variants.len()).flat_map(|v| (0..seeds.len()).map(move |s| (v, s))).collect();
    let cfgs: Vec<TrainConfig> = jobs.iter().map(|&(v, s)| variants[v].apply(base, seeds[s])).collect::<Result<_>>()?;
    let results: Mutex<Vec<Option<Result<RetrievalResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..opts.threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                if j >= jobs.len() {
                    break;
                }
                let (v, s) = jobs[j];
                log::info!("ablation {} seed {}", variants[v].name, seeds[s]);
                let dir = opts.out_dir.map(|d| d.join(slug(&variants[v].name)).join(format!("seed-{}", seeds[s])));
                let r = train_and_evaluate(cfgs[j].clone(), dir.as_deref(), opts.interrupt);
                results.lock().expect("results lock")[j] = Some(r);
            });
        }
    });
    let mut flat = results.into_inner().expect("results lock").into_iter();
    variants
        .iter()
        .map(|v| {
            let runs = (0..seeds.len()).map(|_| flat.next().flatten().expect("every job ran")).collect::<Result<Vec<_>>>()?;
            Ok(AblationRow::from_runs(&v.name, seeds, runs))
        })
        .collect()
}

/// Markdown comparison table, one row per variant.
pub fn format_table(title: &str, rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "### {title}\n");
    let _ = writeln!(s, "| variant | seeds | TR R@1 | IR R@1 | mean recall |");
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {:.2} | {:.2} | {:.2} |", r.name, r.seeds.len(), 100.0 * r.tr_r1, 100.0 * r.ir_r1, 100.0 * r.mean_recall);
    }
    s
}
