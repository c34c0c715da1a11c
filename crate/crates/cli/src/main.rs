use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adpo_core::config::{default_learning_rate, parse_config, Backend, Method, TrainConfig};
use adpo_core::datagen::{self, LabelMode};
use adpo_core::experiment::{self, DataSpec, EvalRow, SweepSpec};
use adpo_core::Result;

#[derive(Parser)]
#[command(
    name = "adpo",
    version,
    about = "Adaptive preference optimization experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a training set and a held-out set.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint, run log and metric dumps.
    Train(TrainArgs),
    /// Held-out accuracy and flip-detection AUC of trained runs.
    Eval(EvalArgs),
    /// Train every flip rate x method (x seed) cell and write a summary table.
    Sweep(SweepArgs),
    /// Flipped-ratio report over equal-width minority-score bins.
    Bins(BinsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML config; absent keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    backend: Option<Backend>,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(b) = self.backend {
            // A learning rate left at the old backend's default follows the backend.
            if cfg.learning_rate == default_learning_rate(cfg.backend) {
                cfg.learning_rate = default_learning_rate(b);
            }
            cfg.backend = b;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scorer")]
    backend: Backend,
    /// Training pairs.
    #[arg(long, default_value_t = datagen::DEFAULT_TRAIN_SIZE)]
    n: usize,
    #[arg(long, default_value_t = datagen::DEFAULT_HELDOUT_SIZE)]
    n_heldout: usize,
    /// Bradley-Terry label temperature; deterministic labels when absent.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding train.jsonl and heldout.jsonl.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    flip_rate: f64,
    #[arg(long)]
    method: Option<Method>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding the held-out set.
    #[arg(long)]
    dataset: PathBuf,
    /// Run directories written by `train` or `sweep`.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    /// Fixed dataset for every cell; otherwise data is generated per seed.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    flip_rate: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "dpo,adaptive-dpo")]
    method: Vec<Method>,
    /// Seeds to sweep; defaults to the single run seed.
    #[arg(long, value_delimiter = ',', conflicts_with = "dataset")]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct BinsArgs {
    /// Run directory, or a metric dump file.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn writer_for(out: Option<&Path>, name: &str) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Box::new(BufWriter::new(File::create(dir.join(name))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = DataSpec {
        backend: a.backend,
        n_train: a.n,
        n_heldout: a.n_heldout,
        label_mode: a
            .tau
            .map_or(LabelMode::Deterministic, |tau| LabelMode::Bt { tau }),
        seed: a.seed,
        ..DataSpec::default()
    };
    experiment::write_data_dir(&a.out, &spec)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(m) = a.method {
        cfg.set_method(m);
    }
    let (tr, heldout) = experiment::load_data_dir(&a.dataset)?;
    let s = experiment::run_training(&cfg, &tr, &heldout, a.flip_rate, &a.out)?;
    println!(
        "{} flip_rate={} seed={} steps={} acc={}",
        s.method, s.flip_rate, s.seed, s.steps, s.acc
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (_, heldout) = experiment::load_data_dir(&a.dataset)?;
    let rows = a
        .runs
        .iter()
        .map(|r| experiment::evaluate_run(r, &heldout))
        .collect::<Result<Vec<EvalRow>>>()?;
    experiment::write_eval_tsv(writer_for(a.out.as_deref(), "eval.tsv")?, &heldout, &rows)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let spec = SweepSpec {
        flip_rates: a.flip_rate,
        methods: a.method,
        seeds: a.seeds.unwrap_or_else(|| vec![cfg.seed]),
        data: DataSpec::default(),
    };
    let rows = match &a.dataset {
        Some(dir) => {
            let data = experiment::load_data_dir(dir)?;
            experiment::sweep_on(&cfg, &spec, &data, Some(&a.out))?
        }
        None => experiment::sweep(&cfg, &spec, Some(&a.out))?,
    };
    for r in rows {
        println!("{}\t{}\t{}\t{}", r.method, r.flip_rate, r.seed, r.acc);
    }
    Ok(())
}

fn bins(a: BinsArgs) -> Result<()> {
    let path = if a.run.is_dir() {
        a.run.join(experiment::FINAL_METRICS_FILE)
    } else {
        a.run.clone()
    };
    let (header, report) = experiment::bins_from_metrics(&path, a.bins)?;
    let mut w = writer_for(a.out.as_deref(), "bins.tsv")?;
    writeln!(w, "# {header}")?;
    report.write_tsv(w)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Bins(a) => bins(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
