use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tall_core::corpus::Subgroup;
use tall_core::synthetic::{planted_clusters, render_tsv, PlantedConfig};
use tall_core::{pipeline, BiasReport, Error, Preset, Result, RunConfig};

#[derive(Parser)]
#[command(
    name = "tall",
    version,
    about = "Mixture-of-experts recommender with adaptive per-user loss weights"
)]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (flat TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `preset`.
    #[arg(long)]
    preset: Option<Preset>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.preset {
            cfg.preset = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset and score mainstreamness into `<out>/manifest`.
    Prepare(RunArgs),
    /// Train the preset; writes `<out>/<preset>/{checkpoint,history.csv,weights.csv}`.
    Train(RunArgs),
    /// Score the trained preset on the test fold; writes `<out>/<preset>/report.csv`.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Ranking cutoff; overrides `k`.
        #[arg(long)]
        k: Option<usize>,
        /// Preset whose report supplies the Δ% baseline.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Merge report files into one table.
    Report {
        /// Report files to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        /// Model row used as the Δ% baseline.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Write the planted-cluster synthetic dataset as TSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_report(r: &BiasReport) {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    print!("{:<14} NDCG@{:<3} overall {}", r.name, r.k, cell(r.overall));
    for g in Subgroup::ALL {
        print!("  {} {}", g.short(), cell(r.group(g)));
    }
    println!();
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let dir = pipeline::prepare(&cfg)?;
            println!("manifest written to {}", dir.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = pipeline::train(&cfg)?;
            let v = |x: Option<f64>| x.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
            println!(
                "{}: best epoch {} val NDCG@{} {}; final val NDCG@{} {}",
                cfg.preset,
                s.best_epoch,
                cfg.k,
                v(s.best_val_ndcg),
                cfg.k,
                v(s.final_val_ndcg)
            );
            println!("artifacts in {}", s.run_dir.display());
        }
        Command::Evaluate { run, k, baseline } => {
            let mut cfg = run.load()?;
            if let Some(k) = k {
                cfg.k = k;
            }
            cfg.validate()?;
            let (report, path) = pipeline::evaluate(&cfg, baseline.as_deref())?;
            print_report(&report);
            println!("report written to {}", path.display());
        }
        Command::Report {
            inputs,
            out,
            baseline,
            k,
        } => {
            for r in pipeline::report(&inputs, baseline.as_deref(), &out, k)? {
                print_report(&r);
            }
            println!("report written to {}", out.display());
        }
        Command::Synth { out, seed } => {
            let data = planted_clusters(&PlantedConfig::default(), seed)?;
            std::fs::write(&out, render_tsv(&data.interactions)).map_err(|e| Error::io(&out, e))?;
            println!(
                "{} interactions over {} users x {} items written to {}",
                data.interactions.len(),
                data.interactions.n_users(),
                data.interactions.n_items(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
