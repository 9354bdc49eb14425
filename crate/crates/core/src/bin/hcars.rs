use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hcars::config::{AttackMethod, ExperimentConfig};
use hcars::harness::{ExperimentRunner, ReportLine};

#[derive(Parser)]
#[command(
    name = "hcars",
    version,
    about = "Counterfactual-explanation driven poisoning harness for implicit-feedback recommenders"
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Restrict the run to a single seed (default: all configured seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for independent experiment cells.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, binarize, and persist the interaction matrix.
    PrepareData,
    /// Train the clean victim model for each seed.
    TrainTarget,
    /// Harvest counterfactual explanations from the victim's rankings.
    Explain,
    /// Train the extraction surrogate (and its no-CF ablation when configured).
    TrainSurrogate,
    /// Craft fake user profiles for each configured budget.
    Attack {
        /// Attack method (default: every configured method).
        #[arg(long)]
        method: Option<AttackMethod>,
    },
    /// Inject profiles, retrain the victim, and measure hit ratios.
    Evaluate {
        #[arg(long)]
        method: Option<AttackMethod>,
    },
    /// Assemble report.jsonl and report.csv from completed cells.
    Report,
    /// Run the full pipeline for every configured cell.
    RunAll,
    /// Generate a synthetic dataset file.
    SynthData {
        /// "block" (pair-csv toy data) or "movielens-shaped" (u.data format).
        #[arg(long)]
        kind: String,
        #[arg(long)]
        path: PathBuf,
        #[arg(long, default_value_t = hcars::synth::ML_STAND_IN_SEED)]
        gen_seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> hcars::Result<()> {
    if let Command::SynthData { kind, path, gen_seed } = &cli.command {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        match kind.as_str() {
            "block" => hcars::synth::write_block_csv(path, 20, 40, 8, *gen_seed)?,
            "movielens-shaped" => hcars::synth::write_movielens_shaped(path, *gen_seed)?,
            other => {
                return Err(hcars::Error::Config(format!(
                    "unknown synthetic dataset kind {other:?}"
                )))
            }
        }
        println!("wrote {}", path.display());
        return Ok(());
    }
    let config_path = cli.config.ok_or_else(|| {
        hcars::Error::Config("--config <path> is required; see configs/ for examples".into())
    })?;
    let mut cfg = ExperimentConfig::from_toml_file(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seeds = vec![seed];
    }
    let seeds = cfg.experiment.seeds.clone();
    let budgets = cfg.experiment.budgets_pct.clone();
    let methods = cfg.experiment.methods.clone();
    let runner = ExperimentRunner::new(cfg, &cli.out_dir)?;

    let pick_methods = |arg: Option<AttackMethod>| -> Vec<AttackMethod> {
        match arg {
            Some(m) => vec![m],
            None => methods.clone(),
        }
    };

    match cli.command {
        Command::PrepareData => {
            let matrix = runner.ensure_dataset()?;
            println!(
                "prepared {} users x {} items, {} interactions",
                matrix.num_users(),
                matrix.num_items(),
                matrix.num_interactions()
            );
        }
        Command::TrainTarget => {
            for &seed in &seeds {
                let model = runner.ensure_target_model(seed)?;
                let last = model.loss_curve().last().copied().unwrap_or(f64::NAN);
                println!("seed {seed}: target trained, final loss {last:.4}");
            }
        }
        Command::Explain => {
            for &seed in &seeds {
                let cfs = runner.ensure_cfs(seed)?;
                println!("seed {seed}: {} counterfactuals harvested", cfs.len());
            }
        }
        Command::TrainSurrogate => {
            for &seed in &seeds {
                let model = runner.ensure_surrogate(seed, true)?;
                let last = model.loss_curve().last().map_or(f64::NAN, |r| r.total);
                println!("seed {seed}: surrogate trained, final loss {last:.4}");
                if runner.config().experiment.ablate_cf {
                    runner.ensure_surrogate(seed, false)?;
                    println!("seed {seed}: no-CF ablation surrogate trained");
                }
            }
        }
        Command::Attack { method } => {
            for &seed in &seeds {
                for &budget in &budgets {
                    for &m in &pick_methods(method) {
                        let fakes = runner.ensure_fakes(seed, m, budget)?;
                        println!(
                            "seed {seed}: {m} at {budget}% -> {} fake profiles",
                            fakes.len()
                        );
                    }
                }
            }
        }
        Command::Evaluate { method } => {
            for &seed in &seeds {
                let fid = runner.ensure_fidelity_cell(seed)?;
                println!(
                    "seed {seed}: hr_pre {:.4}, p@k {:?}",
                    fid.hr_pre, fid.p_at_k
                );
                for &budget in &budgets {
                    for &m in &pick_methods(method) {
                        let cell = runner.ensure_attack_cell(seed, m, budget)?;
                        println!(
                            "seed {seed}: {m} at {budget}% -> hr {:.4} -> {:.4}",
                            cell.hr_pre, cell.hr_post
                        );
                    }
                }
            }
        }
        Command::Report => {
            let report = runner.assemble_report()?;
            println!(
                "report assembled: {} lines -> {}",
                report.lines.len(),
                runner.out_dir().join("report.csv").display()
            );
        }
        Command::SynthData { .. } => unreachable!("handled before config load"),
        Command::RunAll => {
            let report = runner.run_all(cli.threads)?;
            for line in &report.lines {
                match line {
                    ReportLine::Fidelity(c) => println!(
                        "seed {}: hr_pre {:.4}, p@k {:?}, p@k(no-cf) {:?}",
                        c.seed, c.hr_pre, c.p_at_k, c.p_at_k_nocf
                    ),
                    ReportLine::Attack(c) => println!(
                        "seed {}: {} at {}% -> hr {:.4} -> {:.4}",
                        c.seed, c.method, c.budget_pct, c.hr_pre, c.hr_post
                    ),
                }
            }
            println!("report: {}", runner.out_dir().join("report.csv").display());
        }
    }
    Ok(())
}
