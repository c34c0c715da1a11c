//! Synthetic preference corpora with a known ground-truth reward, plus
//! controlled label flipping and the majority/minority mixing law.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Activation, Architecture, Mlp};
use crate::objective::sigmoid;
use crate::rng::{self, rng_for};
use crate::types::PreferencePair;

pub const DEFAULT_CONTEXT_DIM: usize = 4;
pub const DEFAULT_ITEM_DIM: usize = 8;
pub const DEFAULT_TRAIN_SIZE: usize = 2000;
pub const DEFAULT_HELDOUT_SIZE: usize = 500;
const ORACLE_HIDDEN: usize = 16;

/// Fixed random ground-truth reward r*(c, x): one tanh hidden layer of 16.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardOracle {
    net: Mlp,
    seed: u64,
    context_dim: usize,
    item_dim: usize,
}

impl RewardOracle {
    pub fn new(seed: u64, context_dim: usize, item_dim: usize) -> Result<Self> {
        check_dims(context_dim, item_dim)?;
        let arch = Architecture {
            input: context_dim + item_dim,
            hidden: vec![ORACLE_HIDDEN],
            output: 1,
            activation: Activation::Tanh,
            bias: true,
        };
        let net = Mlp::random_fan_in(arch, &mut rng_for(seed, &[rng::ORACLE]));
        Ok(Self {
            net,
            seed,
            context_dim,
            item_dim,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.context_dim, self.item_dim)
    }

    /// The network computing the reward from the concatenation `[c; x]`.
    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn reward(&self, context: &[f64], item: &[f64]) -> Result<f64> {
        let input: Vec<f64> = context.iter().chain(item).copied().collect();
        Ok(self.net.forward(&input)?[0])
    }
}

fn check_dims(context_dim: usize, item_dim: usize) -> Result<()> {
    if context_dim < 1 || item_dim < 1 {
        return Err(Error::InvalidDims(format!(
            "d_c = {context_dim}, d_x = {item_dim}; both must be >= 1"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Winner is the argmax of the true reward.
    Deterministic,
    /// Bradley-Terry: the first draw wins with probability sigmoid(dr / tau).
    Bt { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub context_dim: usize,
    pub item_dim: usize,
    pub seed: u64,
    pub flip_rate: f64,
    pub label_mode: LabelMode,
    /// What produced the pairs, e.g. `reward_oracle` or `ring`.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PreferencePair>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn flipped_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.is_flipped()).count()
    }
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draws `n` pairs from the standard normal generator and labels them with
/// the oracle. Pair `i` uses its own stream derived from `(seed, i)`.
pub fn sample_dataset(
    oracle: &RewardOracle,
    n: usize,
    dims: (usize, usize),
    label_mode: LabelMode,
    seed: u64,
) -> Result<Dataset> {
    let (context_dim, item_dim) = dims;
    check_dims(context_dim, item_dim)?;
    if dims != oracle.dims() {
        return Err(Error::InvalidDims(format!(
            "oracle has dims {:?}, requested {dims:?}",
            oracle.dims()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if let LabelMode::Bt { tau } = label_mode {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::InvalidConfig { field: "tau" });
        }
    }
    let pairs = (0..n as u64)
        .map(|pair_id| {
            let mut rng = rng_for(seed, &[rng::TRAIN_DATA, pair_id]);
            let context = normal_vec(&mut rng, context_dim);
            let a = normal_vec(&mut rng, item_dim);
            let b = normal_vec(&mut rng, item_dim);
            let ra = oracle.reward(&context, &a)?;
            let rb = oracle.reward(&context, &b)?;
            let a_wins = match label_mode {
                LabelMode::Deterministic => ra >= rb,
                LabelMode::Bt { tau } => rng.random::<f64>() < sigmoid((ra - rb) / tau),
            };
            let (winner, loser) = if a_wins { (a, b) } else { (b, a) };
            Ok(PreferencePair {
                pair_id,
                context,
                winner,
                loser,
                flipped: Some(false),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        pairs,
        meta: DatasetMeta {
            n,
            context_dim,
            item_dim,
            seed,
            flip_rate: 0.0,
            label_mode,
            source: "reward_oracle".into(),
            flip_seed: None,
        },
    })
}

/// The indices `flip_labels` would swap: the first `round(q n)` entries of
/// a seeded permutation. Sets for different `q` under one seed are nested.
pub fn flip_indices(n: usize, q: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidRate(q));
    }
    let k = (q * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[rng::FLIP]));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Swaps winner and loser on the given positions, leaving flags alone.
pub fn swap_pairs(pairs: &mut [PreferencePair], indices: &[usize]) {
    for &i in indices {
        let p = &mut pairs[i];
        std::mem::swap(&mut p.winner, &mut p.loser);
    }
}

/// Swaps exactly `round(q n)` seeded-random pairs and marks them flipped.
pub fn flip_labels(ds: &Dataset, q: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidRate(q));
    }
    if ds.pairs.iter().any(PreferencePair::is_flipped) {
        return Err(Error::AlreadyFlipped);
    }
    let idx = flip_indices(ds.len(), q, seed)?;
    let mut out = ds.clone();
    swap_pairs(&mut out.pairs, &idx);
    for &i in &idx {
        out.pairs[i].flipped = Some(true);
    }
    out.meta.flip_rate = q;
    out.meta.flip_seed = Some(seed);
    Ok(out)
}

/// Expected minority fraction after flipping a fraction `q` of a corpus whose
/// minority fraction is `m`: flipped minority labels become majority and
/// vice versa.
pub fn minority_fraction_after_flip(m: f64, q: f64) -> f64 {
    m * (1.0 - q) + (1.0 - m) * q
}

/// Monte-Carlo counterpart of [`minority_fraction_after_flip`]: marks each of
/// `n` entries minority with probability `m`, toggles exactly `round(q n)`
/// seeded-random entries, and returns the resulting minority fraction.
pub fn simulate_minority_fraction(m: f64, q: f64, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mut rng = rng_for(seed, &[rng::TRAIN_DATA]);
    let mut minority: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < m).collect();
    for i in flip_indices(n, q, seed)? {
        minority[i] = !minority[i];
    }
    Ok(minority.iter().filter(|&&b| b).count() as f64 / n as f64)
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    meta: DatasetMeta,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    config: serde_json::Value,
}

/// Line-delimited JSON: a header line `{"meta": ..., "config": ...}` then one
/// pair per line. Floats are written in shortest round-trip form.
pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset, config: serde_json::Value) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &HeaderLine {
            meta: ds.meta.clone(),
            config,
        },
    )?;
    writeln!(w)?;
    for p in &ds.pairs {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let header: HeaderLine = serde_json::from_str(&header)?;
    let mut pairs = Vec::with_capacity(header.meta.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line)?;
        pair.check()?;
        if pair.context.len() != header.meta.context_dim
            || pair.winner.len() != header.meta.item_dim
        {
            return Err(Error::ShapeMismatch(format!(
                "pair {} disagrees with header dims",
                pair.pair_id
            )));
        }
        pairs.push(pair);
    }
    if pairs.len() != header.meta.n {
        return Err(Error::Format(format!(
            "header says {} pairs, file has {}",
            header.meta.n,
            pairs.len()
        )));
    }
    Ok(Dataset {
        pairs,
        meta: header.meta,
    })
}

pub fn save_dataset(
    path: impl AsRef<std::path::Path>,
    ds: &Dataset,
    config: serde_json::Value,
) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_dataset(std::io::BufWriter::new(f), ds, config)
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(f))
}
