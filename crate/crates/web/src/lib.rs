//! WebAssembly bindings for the browser demo. Each export takes plain
//! numbers or strings and returns a JSON string; the same functions are
//! usable natively through the `*_json` variants.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use adpo_core::config::{Margin, Method, Reweight, TrainConfig};
use adpo_core::eval::metric_bin_report;
use adpo_core::experiment::{generate_data, train_in_memory, DataSpec};
use adpo_core::metric::{confidence, minority_score, stability};
use adpo_core::objective::{margin, reweight};
use adpo_core::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Curves {
    pub u: Vec<f64>,
    pub weight: Vec<f64>,
    pub margin: Vec<f64>,
}

/// W(u) and Gamma(u) sampled on `n` evenly spaced points of `[0, u_max]`.
pub fn weight_margin_curves(
    reweight_variant: &str,
    margin_variant: &str,
    k1: f64,
    k2: f64,
    c2: f64,
    u_max: f64,
    n: usize,
) -> Result<Curves> {
    let rw: Reweight = reweight_variant.parse()?;
    let mg: Margin = margin_variant.parse()?;
    if n < 2 || u_max.is_nan() || u_max <= 0.0 {
        return Err(Error::InvalidConfig { field: "grid" });
    }
    let u: Vec<f64> = (0..n).map(|i| u_max * i as f64 / (n - 1) as f64).collect();
    Ok(Curves {
        weight: u.iter().map(|&x| reweight(x, rw, k1)).collect(),
        margin: u.iter().map(|&x| margin(x, mg, k2, c2)).collect(),
        u,
    })
}

#[derive(Debug, Serialize)]
pub struct PairMetric {
    pub c: f64,
    pub s: f64,
    pub u: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub gamma: f64,
}

/// Metric for one pair from its ensemble logits, given as comma- or
/// whitespace-separated numbers (current model first).
pub fn pair_metric(logits: &str, rho: f64, k1: f64, k2: f64, c2: f64) -> Result<PairMetric> {
    let logits = logits
        .split(|ch: char| ch == ',' || ch.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Format(format!("not a number: `{t}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = confidence(&logits, rho)?;
    let s = stability(&logits)?;
    let u = minority_score(c, s);
    Ok(PairMetric {
        c,
        s,
        u,
        w: reweight(u, Reweight::Linear, k1),
        gamma: margin(u, Margin::Quadratic, k2, c2),
    })
}

#[derive(Debug, Serialize)]
pub struct FlipExperiment {
    pub method: String,
    pub acc: f64,
    pub auc: Option<f64>,
    pub spearman: Option<f64>,
    pub bin_counts: Vec<usize>,
    pub bin_flipped_ratio: Vec<Option<f64>>,
}

/// Trains on a small synthetic set with a fraction of flipped labels and
/// reports held-out accuracy and the minority-score bin report.
pub fn flip_experiment(
    seed: u64,
    flip_rate: f64,
    n: usize,
    epochs: usize,
    adaptive: bool,
    n_bins: usize,
) -> Result<FlipExperiment> {
    let data = DataSpec {
        n_train: n,
        n_heldout: (n / 4).max(1),
        seed,
        ..DataSpec::default()
    };
    let (train, heldout) = generate_data(&data)?;
    let mut cfg = TrainConfig {
        seed,
        epochs,
        ..TrainConfig::default()
    };
    cfg.set_method(if adaptive {
        Method::AdaptiveDpo
    } else {
        Method::Dpo
    });
    let run = train_in_memory(&cfg, &train, &heldout, flip_rate)?;
    let scores: Vec<(f64, bool)> = run
        .final_metrics
        .iter()
        .map(|r| (r.u, r.flipped == Some(true)))
        .collect();
    let report = metric_bin_report(&scores, n_bins)?;
    Ok(FlipExperiment {
        method: run.summary.method,
        acc: run.summary.acc,
        auc: run.summary.auc,
        spearman: report.spearman,
        bin_counts: report.bins.iter().map(|b| b.count).collect(),
        bin_flipped_ratio: report.bins.iter().map(|b| b.flipped_ratio).collect(),
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = weightMarginCurves)]
pub fn weight_margin_curves_json(
    reweight_variant: &str,
    margin_variant: &str,
    k1: f64,
    k2: f64,
    c2: f64,
    u_max: f64,
    n: usize,
) -> std::result::Result<String, JsError> {
    to_js(weight_margin_curves(
        reweight_variant,
        margin_variant,
        k1,
        k2,
        c2,
        u_max,
        n,
    ))
}

#[wasm_bindgen(js_name = pairMetric)]
pub fn pair_metric_json(
    logits: &str,
    rho: f64,
    k1: f64,
    k2: f64,
    c2: f64,
) -> std::result::Result<String, JsError> {
    to_js(pair_metric(logits, rho, k1, k2, c2))
}

#[wasm_bindgen(js_name = flipExperiment)]
pub fn flip_experiment_json(
    seed: u32,
    flip_rate: f64,
    n: usize,
    epochs: usize,
    adaptive: bool,
    n_bins: usize,
) -> std::result::Result<String, JsError> {
    to_js(flip_experiment(
        seed as u64,
        flip_rate,
        n,
        epochs,
        adaptive,
        n_bins,
    ))
}
