use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cra_kit::attention::{AttentionConfig, Variant};
use cra_kit::checkpoint;
use cra_kit::config::RunConfig;
use cra_kit::cost::{self, CostReport};
use cra_kit::experiment::{self, Experiment, Sweep, CHECKPOINT_DIR, CONFIG_FILE};
use cra_kit::kernels::set_threads;
use cra_kit::model::{ModelConfig, Placement};
use cra_kit::suite::{self, Scope};

const THREADS_ENV: &str = "CRA_KIT_THREADS";

#[derive(Parser)]
#[command(name = "cra-kit", version, about = "Channel recurrent attention and set aggregation on synthetic re-ID clips")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (CRA_KIT_THREADS takes precedence).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Module,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Order,
    Variant,
    Pooling,
    D,
    R,
    T,
    Placement,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on synthetic clips, writing checkpoints and a CSV log under --out.
    Train {
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Use the full-length preset instead of the desk-scale defaults.
        #[arg(long)]
        full_preset: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Checkpoint directory (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, value_enum, default_value = "op")]
        scope: ScopeArg,
    },
    /// Train and evaluate each setting of one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        sweep: SweepArg,
        /// Overrides the number of training epochs per setting.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Parameter and FLOP counts for the configured model.
    Bench,
    /// Write P2 feature maps before/after attention as PGM files.
    DumpAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset clip index.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn load_config(cli: &Cli, full_preset: bool) -> Result<RunConfig, cra_kit::Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if full_preset => RunConfig::full_preset(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Configuration for commands that read a trained run: an explicit --config
/// wins, otherwise the config saved next to the checkpoint.
fn run_config(cli: &Cli, ckpt: &Path) -> Result<RunConfig, cra_kit::Error> {
    if cli.config.is_none() {
        let saved = ckpt.parent().map(|d| d.join(CONFIG_FILE));
        if let Some(saved) = saved.filter(|p| p.exists()) {
            let mut cfg = RunConfig::load(&saved)?;
            if let Some(o) = &cli.out {
                cfg.out = o.clone();
            }
            return Ok(cfg);
        }
    }
    load_config(cli, false)
}

fn checkpoint_dir(cfg: &RunConfig, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR))
}

fn train(cli: &Cli, resume: bool, full_preset: bool) -> CliResult {
    let cfg = load_config(cli, full_preset)?;
    let exp = Experiment::new(&cfg)?;
    println!("{}", experiment::CSV_HEADER);
    let (model, _) = exp.run(Some(&cfg.out), resume, |row| println!("{}", row.to_csv()))?;
    let result = exp.evaluate(&model)?;
    fs::write(cfg.out.join("report.txt"), result.to_kv())?;
    eprintln!("{}", result.to_text());
    Ok(true)
}

fn eval(cli: &Cli, ckpt: &Option<PathBuf>) -> CliResult {
    let base = load_config(cli, false)?;
    let dir = checkpoint_dir(&base, ckpt);
    let cfg = run_config(cli, &dir)?;
    let exp = Experiment::new(&cfg)?;
    let model = exp.build_model()?;
    checkpoint::load_model(&dir, &model, None)?;
    let result = exp.evaluate(&model)?;
    print!("{}", result.to_kv());
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("report.txt"), result.to_kv())?;
    eprintln!("{}", result.to_text());
    Ok(true)
}

fn gradcheck(scope: ScopeArg) -> CliResult {
    let scope = match scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Module => Scope::Module,
        ScopeArg::Model => Scope::Model,
    };
    let reports = suite::gradient_suite(scope)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(10).max(34);
    println!("{:<width$}  {:>12}  {:>6}  result", "check", "max rel err", "coords");
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{:<width$}  {:>12.3e}  {:>6}  {verdict}", r.name, r.max_rel_error, r.coords_checked);
    }
    let neg = suite::negative_control()?;
    let caught = !neg.passed();
    ok &= caught;
    let verdict = if caught { "PASS (detected)" } else { "FAIL (not detected)" };
    println!("{:<width$}  {:>12.3e}  {:>6}  {verdict}", neg.name, neg.max_rel_error, neg.coords_checked);
    Ok(ok)
}

fn ablate(cli: &Cli, sweep: SweepArg, epochs: Option<usize>) -> CliResult {
    let mut cfg = load_config(cli, false)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let sweep = match sweep {
        SweepArg::Order => Sweep::Order,
        SweepArg::Variant => Sweep::Variant,
        SweepArg::Pooling => Sweep::Pooling,
        SweepArg::D => Sweep::D,
        SweepArg::R => Sweep::R,
        SweepArg::T => Sweep::T,
        SweepArg::Placement => Sweep::Placement,
    };
    let rows = experiment::ablate(&cfg, sweep, |r| eprintln!("{:<24} R-1 {:.4}  mAP {:.4}", r.setting, r.r1, r.map))?;
    let table = experiment::ablation_table(&rows);
    print!("{table}");
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(format!("ablate_{sweep:?}.txt").to_lowercase()), table)?;
    Ok(true)
}

fn print_costs(title: &str, parts: &[CostReport]) {
    println!("{title}");
    for p in parts {
        println!("  {p}");
    }
}

fn bench(cli: &Cli) -> CliResult {
    let cfg = load_config(cli, false)?;
    let model = &cfg.model;
    let baseline = ModelConfig { attention: AttentionConfig { variant: Variant::None, ..model.attention.clone() }, ..model.clone() };
    let base_parts = cost::model_cost(&baseline)?;
    let base_total = base_parts.last().expect("total row").params;
    print_costs("baseline model (per clip)", &base_parts);
    print_costs("configured model (per clip)", &cost::model_cost(model)?);
    println!("attention modules, LSTM vs Bi-LSTM (per frame)");
    let mut ok = true;
    for p in Placement::ALL {
        let (a, b, pr, fr) = cost::cell_ratio(model, p)?;
        println!("  {a}");
        println!("  {b}");
        println!("  {p:?}: params ratio {pr:.4}  FLOPs ratio {fr:.4}");
        println!("  {p:?}: baseline params {base_total} > LSTM module params {}: {}", a.params, base_total > a.params);
        if p == Placement::P1 {
            let in_band = (1.9..=2.1).contains(&pr) && (1.9..=2.1).contains(&fr);
            println!("  P1 ratio within [1.9, 2.1]: {in_band}");
            ok &= in_band;
        }
    }
    Ok(ok)
}

fn dump_attention(cli: &Cli, ckpt: &Option<PathBuf>, clip: usize) -> CliResult {
    let base = load_config(cli, false)?;
    let dir = checkpoint_dir(&base, ckpt);
    let cfg = run_config(cli, &dir)?;
    let exp = Experiment::new(&cfg)?;
    let model = exp.build_model()?;
    checkpoint::load_model(&dir, &model, None)?;
    let files = experiment::attention_maps(&exp, &model, clip)?;
    let out = cfg.out.join("attention").join(format!("clip{clip}"));
    fs::create_dir_all(&out)?;
    for (name, bytes) in &files {
        fs::write(out.join(name), bytes)?;
        println!("{}", out.join(name).display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).or(cli.workers);
    if let Some(n) = threads {
        set_threads(n);
    }
    let result = match &cli.cmd {
        Cmd::Train { resume, full_preset } => train(&cli, *resume, *full_preset),
        Cmd::Eval { checkpoint } => eval(&cli, checkpoint),
        Cmd::Gradcheck { scope } => gradcheck(*scope),
        Cmd::Ablate { sweep, epochs } => ablate(&cli, *sweep, *epochs),
        Cmd::Bench => bench(&cli),
        Cmd::DumpAttention { checkpoint, clip } => dump_attention(&cli, checkpoint, *clip),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
