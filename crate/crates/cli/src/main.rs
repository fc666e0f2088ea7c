use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tcl_core::evaluation::{self, CriticConfig, GradcheckConfig, BOUND_SLACK};
use tcl_core::synthdata::{generate_dataset, write_dataset};
use tcl_core::training::ablation::{self, SweepOptions, Variant};
use tcl_core::training::{Checkpoint, RunOptions, TrainConfig, Trainer};
use tcl_core::TclError;

#[derive(Parser, Debug)]
#[command(name = "tcl", version, about = "Triple contrastive vision-language pre-training at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Key-value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate on the held-out split.
    Train {
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many steps in total.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Zero-shot retrieval of a checkpoint on its held-out split.
    Eval {
        /// Defaults to `<out>/checkpoint.tclk`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the similarity matrix to `<out>/similarity.bin`.
        #[arg(long)]
        dump_similarity: bool,
    },
    /// Finite-difference check of every loss gradient on micro models.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// InfoNCE lower bound against exact MI on the regression suite.
    #[command(name = "miCheck")]
    MiCheck {
        #[arg(long, default_value_t = 63)]
        k: usize,
        #[arg(long, default_value_t = 1500)]
        steps: usize,
    },
    /// Objective, local-MI and momentum sweeps with a comparison table.
    Ablate {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = Sweep::All)]
        sweep: Sweep,
    },
    /// Write a synthetic dataset file.
    #[command(name = "gen-data")]
    GenData {
        /// Number of pairs; defaults to train_size + eval_size.
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Sweep {
    Gates,
    Locals,
    Momentum,
    All,
}

/// Exit 1: bad input or a failed check. Exit 2: runtime failure.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<TclError> for Failure {
    fn from(e: TclError) -> Self {
        match e {
            TclError::Config(_) | TclError::Contract(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

static INTERRUPT: AtomicBool = AtomicBool::new(false);

fn interrupt_flag() -> &'static AtomicBool {
    static INSTALLED: OnceLock<()> = OnceLock::new();
    INSTALLED.get_or_init(|| {
        if let Err(e) = ctrlc::set_handler(|| INTERRUPT.store(true, Ordering::SeqCst)) {
            log::warn!("could not install interrupt handler: {e}");
        }
    });
    &INTERRUPT
}

fn threads() -> Result<usize, Failure> {
    match std::env::var("TCL_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Validation(format!("TCL_THREADS must be a positive integer (got {v:?})"))),
        },
    }
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, verb: &str) -> Result<PathBuf, Failure> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(verb));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CmdResult {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(|e| Failure::Runtime(e.to_string()))
}

fn train(common: &Common, resume: Option<&Path>, steps: Option<u64>) -> CmdResult {
    let mut trainer = match resume {
        Some(p) => {
            if common.config.is_some() || !common.overrides.is_empty() {
                log::warn!("resuming uses the checkpoint's config; --config and --set are ignored");
            }
            Trainer::from_checkpoint(&Checkpoint::load(p)?)?
        }
        None => Trainer::new(common.resolve()?)?,
    };
    let out = common.out_dir("train")?;
    let flag = interrupt_flag();
    let outcome = trainer.run(&RunOptions { out_dir: Some(&out), stop_at: steps, interrupt: Some(flag), evaluate: steps.is_none() })?;
    let ckpt = outcome.final_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    if outcome.interrupted {
        return Err(Failure::Runtime(format!("interrupted at step {}; checkpoint written to {ckpt}", trainer.state.step)));
    }
    if let Some(last) = outcome.records.last() {
        println!("step {} total loss {:.4}", last.step, last.total);
    }
    if let Some(r) = outcome.retrieval {
        print_retrieval(&r);
    }
    println!("checkpoint {ckpt}");
    Ok(())
}

fn print_retrieval(r: &evaluation::RetrievalResult) {
    println!("queries {}", r.n_queries);
    println!("TR R@1 {:.2} R@5 {:.2} R@10 {:.2}", 100.0 * r.tr_recall.r1, 100.0 * r.tr_recall.r5, 100.0 * r.tr_recall.r10);
    println!("IR R@1 {:.2} R@5 {:.2} R@10 {:.2}", 100.0 * r.ir_recall.r1, 100.0 * r.ir_recall.r5, 100.0 * r.ir_recall.r10);
    println!("mean recall {:.2}", 100.0 * r.mean_recall);
}

fn eval(common: &Common, checkpoint: Option<&Path>, dump: bool) -> CmdResult {
    let out = common.out_dir("eval")?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("checkpoint.tclk"));
    if !path.exists() {
        return Err(Failure::Validation(format!("checkpoint not found: {}", path.display())));
    }
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(&path)?)?;
    let params = trainer.state.online_params();
    let (img, txt) = evaluation::embed_pairs(&trainer.model, &params, &trainer.held_out)?;
    let matches: Vec<usize> = (0..trainer.held_out.len()).collect();
    let r = evaluation::retrieval_eval(&img, &txt, &matches)?;
    if dump {
        evaluation::save_similarity(&out.join("similarity.bin"), &img.matmul_t(&txt))?;
    }
    let mut doc = evaluation::results_document("eval", &trainer.cfg, &r);
    doc["checkpoint"] = json!(path.display().to_string());
    doc["step"] = json!(trainer.state.step);
    write_json(&out.join("results.json"), &doc)?;
    print_retrieval(&r);
    Ok(())
}

fn gradcheck(common: &Common, seeds: u64) -> CmdResult {
    let out = common.out_dir("gradcheck")?;
    let first = common.seed.unwrap_or(0);
    let mut reports = Vec::new();
    let mut ok = true;
    for seed in first..first + seeds {
        let r = evaluation::gradcheck(&GradcheckConfig { seed, ..GradcheckConfig::default() })?;
        println!("seed {seed}: {}", if r.passed() { "pass" } else { "FAIL" });
        for t in &r.terms {
            println!("  {:<6} max rel {:.3e} at {}", t.term, t.max_rel_error, t.worst_param);
        }
        println!("  sum of terms vs total: {:.3e}", r.sum_mismatch);
        ok &= r.passed();
        reports.push(r);
    }
    write_json(&out.join("gradcheck.json"), &json!({ "build": evaluation::BUILD_ID, "reports": reports }))?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation("gradient check failed".into()))
    }
}

fn mi_check(common: &Common, k: usize, steps: usize) -> CmdResult {
    let out = common.out_dir("miCheck")?;
    let cfg = CriticConfig { k, steps, seed: common.seed.unwrap_or(0), ..CriticConfig::default() };
    let rows = evaluation::run_regression_suite(&cfg)?;
    println!("{:<24} {:>8} {:>8} {:>8}  status", "joint", "exact", "bound", "margin");
    let mut ok = true;
    for r in &rows {
        let b = &r.report;
        let status = match (r.within_slack, b.inconclusive) {
            (false, _) => "VIOLATION",
            (true, true) => "inconclusive",
            (true, false) => "ok",
        };
        ok &= r.within_slack;
        println!("{:<24} {:>8.4} {:>8.4} {:>8.4}  {status}", r.name, b.exact, b.bound, b.margin);
    }
    println!("bound must not exceed exact MI by more than {BOUND_SLACK} nats");
    write_json(&out.join("mi_check.json"), &json!({ "build": evaluation::BUILD_ID, "critic": cfg, "rows": rows }))?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Validation("InfoNCE bound exceeded exact MI".into()))
    }
}

fn ablate(common: &Common, seeds: u64, sweep: Sweep) -> CmdResult {
    let base = common.resolve()?;
    let out = common.out_dir("ablate")?;
    fs::write(out.join("config.cfg"), base.to_kv_string())?;
    let seed_list: Vec<u64> = (base.seed..base.seed + seeds).collect();
    let mut sweeps: Vec<(&str, Vec<Variant>)> = Vec::new();
    if matches!(sweep, Sweep::Gates | Sweep::All) {
        sweeps.push(("objectives", ablation::gate_sweep()));
    }
    if matches!(sweep, Sweep::Locals | Sweep::All) {
        sweeps.push(("local MI", ablation::local_sweep()));
    }
    if matches!(sweep, Sweep::Momentum | Sweep::All) {
        sweeps.push(("momentum", ablation::momentum_sweep()));
    }
    let opts = SweepOptions { threads: threads()?, out_dir: Some(&out), interrupt: Some(interrupt_flag()) };
    let mut report = String::new();
    let mut all = serde_json::Map::new();
    for (title, variants) in sweeps {
        let rows = ablation::run_sweep(&base, &variants, &seed_list, &opts)?;
        let table = ablation::format_table(title, &rows);
        print!("{table}\n");
        report.push_str(&table);
        report.push('\n');
        all.insert(title.to_string(), json!(rows));
    }
    fs::write(out.join("ablation.md"), report)?;
    write_json(&out.join("ablation.json"), &json!({ "build": evaluation::BUILD_ID, "seeds": seed_list, "sweeps": all }))
}

fn gen_data(common: &Common, count: Option<usize>) -> CmdResult {
    let cfg = common.resolve()?;
    let out = common.out_dir("gen-data")?;
    let n = count.unwrap_or(cfg.train_size + cfg.eval_size);
    let pairs = generate_dataset(n, cfg.seed, &cfg.data)?;
    let path = out.join("dataset.tcld");
    let mut w = BufWriter::new(File::create(&path)?);
    write_dataset(&mut w, &pairs)?;
    w.flush()?;
    fs::write(out.join("config.cfg"), cfg.to_kv_string())?;
    println!("wrote {n} pairs to {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = threads().and_then(|_| match &cli.command {
        Command::Train { resume, steps } => train(c, resume.as_deref(), *steps),
        Command::Eval { checkpoint, dump_similarity } => eval(c, checkpoint.as_deref(), *dump_similarity),
        Command::Gradcheck { seeds } => gradcheck(c, *seeds),
        Command::MiCheck { k, steps } => mi_check(c, *k, *steps),
        Command::Ablate { seeds, sweep } => ablate(c, *seeds, *sweep),
        Command::GenData { count } => gen_data(c, *count),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
