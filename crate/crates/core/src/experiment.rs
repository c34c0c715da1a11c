//! End-to-end experiment drivers: data generation, a training run with all
//! its artifacts, flip-rate x method sweeps, evaluation and bin reports.
//!
//! Every artifact starts with a header carrying the resolved config and
//! seed: a JSON header line for `.jsonl` files, a `# ` comment line for
//! `.tsv` tables, and the checkpoint header's `meta` field.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Backend, Method, TrainConfig};
use crate::datagen::{self, Dataset, LabelMode, RewardOracle};
use crate::diffusion::{sample_ring_dataset, DiffusionModel};
use crate::error::{Error, Result};
use crate::eval::{flip_detection_auc, metric_bin_report, pairwise_accuracy, BinReport};
use crate::metric::PairMetricRecord;
use crate::mlp::{read_checkpoint, write_checkpoint, Mlp};
use crate::policy::{PairModel, ScorerModel};
use crate::rng::{self, derive_seed};
use crate::trainer::{final_metrics, train_run};
use crate::types::RunRecord;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REFERENCE_FILE: &str = "reference.bin";
pub const RUN_LOG_FILE: &str = "run_log.jsonl";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_METRICS_FILE: &str = "final_metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub backend: Backend,
    pub n_train: usize,
    pub n_heldout: usize,
    pub context_dim: usize,
    pub item_dim: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            backend: Backend::Scorer,
            n_train: datagen::DEFAULT_TRAIN_SIZE,
            n_heldout: datagen::DEFAULT_HELDOUT_SIZE,
            context_dim: datagen::DEFAULT_CONTEXT_DIM,
            item_dim: datagen::DEFAULT_ITEM_DIM,
            label_mode: LabelMode::Deterministic,
            seed: 0,
        }
    }
}

/// Training corpus (labels per `label_mode`, unflipped) and a held-out set
/// with deterministic labels.
pub fn generate_data(spec: &DataSpec) -> Result<(Dataset, Dataset)> {
    let train_seed = derive_seed(spec.seed, &[rng::TRAIN_DATA]);
    let heldout_seed = derive_seed(spec.seed, &[rng::HELDOUT_DATA]);
    match spec.backend {
        Backend::Scorer => {
            let dims = (spec.context_dim, spec.item_dim);
            let oracle = RewardOracle::new(spec.seed, dims.0, dims.1)?;
            let train =
                datagen::sample_dataset(&oracle, spec.n_train, dims, spec.label_mode, train_seed)?;
            let heldout = datagen::sample_dataset(
                &oracle,
                spec.n_heldout,
                dims,
                LabelMode::Deterministic,
                heldout_seed,
            )?;
            Ok((train, heldout))
        }
        Backend::Diffusion => Ok((
            sample_ring_dataset(spec.n_train, train_seed)?,
            sample_ring_dataset(spec.n_heldout, heldout_seed)?,
        )),
    }
}

pub fn write_data_dir(dir: &Path, spec: &DataSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (train, heldout) = generate_data(spec)?;
    let header = json!({ "data_spec": spec });
    datagen::save_dataset(dir.join(TRAIN_FILE), &train, header.clone())?;
    datagen::save_dataset(dir.join(HELDOUT_FILE), &heldout, header)?;
    Ok(())
}

pub fn load_data_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((
        datagen::load_dataset(dir.join(TRAIN_FILE))?,
        datagen::load_dataset(dir.join(HELDOUT_FILE))?,
    ))
}

/// Flip seed used by training runs. It depends on the run seed only, so the
/// flipped sets of different rates are nested.
pub fn flip_seed(seed: u64) -> u64 {
    derive_seed(seed, &[rng::FLIP])
}

/// One row of a run or sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub flip_rate: f64,
    pub seed: u64,
    pub steps: u64,
    /// Held-out pairwise accuracy.
    pub acc: f64,
    /// Flip-detection AUC of the final minority score; absent without flips.
    pub auc: Option<f64>,
    pub mean_u_flipped: Option<f64>,
    pub mean_u_clean: Option<f64>,
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub summary: RunSummary,
    pub theta: Mlp,
    pub reference: Mlp,
    pub records: Vec<RunRecord>,
    pub metric_dump: Vec<PairMetricRecord>,
    pub final_metrics: Vec<PairMetricRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn run_with<B: PairModel>(
    model: &B,
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<TrainArtifacts> {
    let run = train_run(model, cfg, train, heldout)?;
    let finals = final_metrics(model, &run.state, train, cfg)?;
    let acc = pairwise_accuracy(
        model,
        run.state.theta(),
        &run.state.reference,
        heldout,
        cfg.seed,
    )?;
    let scores: Vec<(f64, bool)> = finals
        .iter()
        .map(|r| (r.u, r.flipped == Some(true)))
        .collect();
    let summary = RunSummary {
        method: cfg.method().to_string(),
        flip_rate: train.meta.flip_rate,
        seed: cfg.seed,
        steps: run.state.step,
        acc,
        auc: flip_detection_auc(&scores).ok(),
        mean_u_flipped: mean(scores.iter().filter(|s| s.1).map(|s| s.0)),
        mean_u_clean: mean(scores.iter().filter(|s| !s.1).map(|s| s.0)),
    };
    Ok(TrainArtifacts {
        summary,
        theta: run.state.theta().clone(),
        reference: run.state.reference.clone(),
        records: run.records,
        metric_dump: run.metric_dump,
        final_metrics: finals,
    })
}

/// Trains on `train` after flipping a fraction `flip_rate` of its labels.
pub fn train_in_memory(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    flip_rate: f64,
) -> Result<TrainArtifacts> {
    let train = if flip_rate > 0.0 {
        datagen::flip_labels(train, flip_rate, flip_seed(cfg.seed))?
    } else {
        train.clone()
    };
    match cfg.backend {
        Backend::Scorer => run_with(&ScorerModel, cfg, &train, heldout),
        Backend::Diffusion => run_with(&DiffusionModel::default(), cfg, &train, heldout),
    }
}

fn run_header(cfg: &TrainConfig, flip_rate: f64) -> serde_json::Value {
    json!({ "config": cfg, "seed": cfg.seed, "method": cfg.method().to_string(), "flip_rate": flip_rate })
}

fn write_jsonl<T: Serialize>(path: &Path, header: &serde_json::Value, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &json!({ "header": header }))?;
    writeln!(w)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl_header(path: &Path) -> Result<serde_json::Value> {
    let mut line = String::new();
    BufReader::new(File::open(path)?).read_line(&mut line)?;
    let v: serde_json::Value = serde_json::from_str(&line)?;
    v.get("header")
        .cloned()
        .ok_or_else(|| Error::Format(format!("{} has no header line", path.display())))
}

/// Reads a `.jsonl` artifact, skipping its header line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Trains and writes checkpoint, reference, run log, per-step metric dump
/// and final per-pair metrics into `out`.
pub fn run_training(
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
    flip_rate: f64,
    out: &Path,
) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let a = train_in_memory(cfg, train, heldout, flip_rate)?;
    let header = run_header(cfg, flip_rate);
    let kind = match cfg.backend {
        Backend::Scorer => ScorerModel.kind(),
        Backend::Diffusion => DiffusionModel::default().kind(),
    };
    write_checkpoint(
        BufWriter::new(File::create(out.join(CHECKPOINT_FILE))?),
        kind,
        &a.theta,
        header.clone(),
    )?;
    write_checkpoint(
        BufWriter::new(File::create(out.join(REFERENCE_FILE))?),
        kind,
        &a.reference,
        header.clone(),
    )?;
    write_jsonl(&out.join(RUN_LOG_FILE), &header, &a.records)?;
    write_jsonl(&out.join(METRICS_FILE), &header, &a.metric_dump)?;
    write_jsonl(&out.join(FINAL_METRICS_FILE), &header, &a.final_metrics)?;
    Ok(a.summary)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

pub fn write_summary_tsv<W: Write>(
    mut w: W,
    header: &serde_json::Value,
    rows: &[RunSummary],
) -> Result<()> {
    writeln!(w, "# {}", serde_json::to_string(header)?)?;
    writeln!(
        w,
        "method\tflip_rate\tseed\tsteps\tacc\tauc\tmean_u_flipped\tmean_u_clean"
    )?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.method,
            r.flip_rate,
            r.seed,
            r.steps,
            r.acc,
            fmt_opt(r.auc),
            fmt_opt(r.mean_u_flipped),
            fmt_opt(r.mean_u_clean)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub flip_rates: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub data: DataSpec,
}

fn cell_dir(out: &Path, method: Method, q: f64, seed: u64) -> PathBuf {
    out.join(format!("{method}_q{q}_s{seed}"))
}

/// Runs every (seed, flip rate, method) cell on freshly generated data per
/// seed, independent cells in parallel. Rows come back in seed-major, then
/// flip-rate, then method order. When `out` is given, each cell writes its
/// artifacts to its own directory and a combined `summary.tsv` is written.
pub fn sweep(base: &TrainConfig, spec: &SweepSpec, out: Option<&Path>) -> Result<Vec<RunSummary>> {
    let data: Vec<(Dataset, Dataset)> = spec
        .seeds
        .iter()
        .map(|&s| {
            generate_data(&DataSpec {
                seed: s,
                backend: base.backend,
                ..spec.data.clone()
            })
        })
        .collect::<Result<_>>()?;
    sweep_cells(base, spec, &|i| &data[i], out)
}

/// Like [`sweep`], with one fixed dataset shared by every cell.
pub fn sweep_on(
    base: &TrainConfig,
    spec: &SweepSpec,
    data: &(Dataset, Dataset),
    out: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    sweep_cells(base, spec, &|_| data, out)
}

fn sweep_cells<'d>(
    base: &TrainConfig,
    spec: &SweepSpec,
    data_for: &(dyn Fn(usize) -> &'d (Dataset, Dataset) + Sync),
    out: Option<&Path>,
) -> Result<Vec<RunSummary>> {
    for &q in &spec.flip_rates {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidRate(q));
        }
    }
    let mut cells = Vec::new();
    for (i, &seed) in spec.seeds.iter().enumerate() {
        for &q in &spec.flip_rates {
            for &m in &spec.methods {
                cells.push((i, seed, q, m));
            }
        }
    }
    let run_cell = |&(i, seed, q, method): &(usize, u64, f64, Method)| -> Result<RunSummary> {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.set_method(method);
        let (train, heldout) = data_for(i);
        match out {
            Some(dir) => run_training(&cfg, train, heldout, q, &cell_dir(dir, method, q, seed)),
            None => Ok(train_in_memory(&cfg, train, heldout, q)?.summary),
        }
    };

    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut rows = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(workers) {
        let results: Vec<Result<RunSummary>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(|| run_cell(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep cell panicked"))
                .collect()
        });
        for r in results {
            rows.push(r?);
        }
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let header = json!({ "config": base, "sweep": spec });
        write_summary_tsv(
            BufWriter::new(File::create(dir.join(SUMMARY_FILE))?),
            &header,
            &rows,
        )?;
    }
    Ok(rows)
}

/// Accuracy of a saved run on a held-out set, and the AUC of its final
/// minority scores when the training data had flips.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub run: String,
    /// Header of the run's checkpoint: resolved config, seed, flip rate.
    pub header: serde_json::Value,
    pub acc: f64,
    pub auc: Option<f64>,
}

pub fn evaluate_run(run_dir: &Path, heldout: &Dataset) -> Result<EvalRow> {
    let load = |name: &str| -> Result<(crate::mlp::CheckpointHeader, Mlp)> {
        read_checkpoint(BufReader::new(File::open(run_dir.join(name))?))
    };
    let (header, theta) = load(CHECKPOINT_FILE)?;
    let (_, reference) = load(REFERENCE_FILE)?;
    let cfg: TrainConfig = serde_json::from_value(header.meta["config"].clone())?;
    let acc = match header.kind.as_str() {
        "scorer" => pairwise_accuracy(&ScorerModel, &theta, &reference, heldout, cfg.seed)?,
        "denoiser" => pairwise_accuracy(
            &DiffusionModel::default(),
            &theta,
            &reference,
            heldout,
            cfg.seed,
        )?,
        other => return Err(Error::Format(format!("unknown checkpoint kind `{other}`"))),
    };
    let finals_path = run_dir.join(FINAL_METRICS_FILE);
    let auc = if finals_path.exists() {
        let finals: Vec<PairMetricRecord> = read_jsonl(&finals_path)?;
        let scores: Vec<(f64, bool)> = finals
            .iter()
            .map(|r| (r.u, r.flipped == Some(true)))
            .collect();
        flip_detection_auc(&scores).ok()
    } else {
        None
    };
    Ok(EvalRow {
        run: run_dir.display().to_string(),
        header: header.meta,
        acc,
        auc,
    })
}

/// The header line records the held-out set and every run's own header.
pub fn write_eval_tsv<W: Write>(mut w: W, heldout: &Dataset, rows: &[EvalRow]) -> Result<()> {
    let runs: Vec<_> = rows
        .iter()
        .map(|r| json!({ "run": r.run, "header": r.header }))
        .collect();
    writeln!(
        w,
        "# {}",
        serde_json::to_string(&json!({ "heldout": heldout.meta, "runs": runs }))?
    )?;
    writeln!(w, "run\tacc\tauc")?;
    for r in rows {
        writeln!(w, "{}\t{}\t{}", r.run, r.acc, fmt_opt(r.auc))?;
    }
    Ok(())
}

/// Bin report over a metric dump, with the dump's own header. For per-step
/// dumps only the last record of each pair is used.
pub fn bins_from_metrics(path: &Path, n_bins: usize) -> Result<(serde_json::Value, BinReport)> {
    let header = read_jsonl_header(path)?;
    let records: Vec<PairMetricRecord> = read_jsonl(path)?;
    let mut latest: std::collections::BTreeMap<u64, &PairMetricRecord> =
        std::collections::BTreeMap::new();
    for r in &records {
        latest.insert(r.pair_id, r);
    }
    let scores: Vec<(f64, bool)> = latest
        .values()
        .map(|r| (r.u, r.flipped == Some(true)))
        .collect();
    Ok((header, metric_bin_report(&scores, n_bins)?))
}
