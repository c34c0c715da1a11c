//! Loss and training configuration, validation, and the flat config file format.
//!
//! The config file is flat TOML, one key per line. Absent keys take the
//! documented defaults; unknown keys are rejected. Two defaults are resolved
//! from other keys: `k2` defaults to `-beta`, and `learning_rate` depends on
//! the backend.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum C2Policy {
    Fixed(f64),
    BatchMeanLogits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Dpo,
    Ipo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reweight {
    Linear,
    Quadratic,
    Sqrt,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Margin {
    Quadratic,
    Linear,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Scorer,
    Diffusion,
}

/// Training method as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Dpo,
    AdaptiveDpo,
    Ipo,
    AdaptiveIpo,
}

impl Method {
    pub fn objective(self) -> Objective {
        match self {
            Method::Dpo | Method::AdaptiveDpo => Objective::Dpo,
            Method::Ipo | Method::AdaptiveIpo => Objective::Ipo,
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::AdaptiveDpo | Method::AdaptiveIpo)
    }

    pub fn from_parts(objective: Objective, adaptive: bool) -> Self {
        match (objective, adaptive) {
            (Objective::Dpo, false) => Method::Dpo,
            (Objective::Dpo, true) => Method::AdaptiveDpo,
            (Objective::Ipo, false) => Method::Ipo,
            (Objective::Ipo, true) => Method::AdaptiveIpo,
        }
    }
}

macro_rules! string_enum {
    ($ty:ty, $kind:literal, { $($name:literal => $variant:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::UnknownVariant { kind: $kind, value: other.to_string() }),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

string_enum!(Objective, "objective", { "dpo" => Objective::Dpo, "ipo" => Objective::Ipo });
string_enum!(Reweight, "reweight", {
    "linear" => Reweight::Linear,
    "quadratic" => Reweight::Quadratic,
    "sqrt" => Reweight::Sqrt,
    "sigmoid" => Reweight::Sigmoid,
    "none" => Reweight::None,
});
string_enum!(Margin, "margin", {
    "quadratic" => Margin::Quadratic,
    "linear" => Margin::Linear,
    "none" => Margin::None,
});
string_enum!(Backend, "backend", {
    "scorer" => Backend::Scorer,
    "diffusion" => Backend::Diffusion,
    "diffusion_toy" => Backend::Diffusion,
});
string_enum!(Method, "method", {
    "dpo" => Method::Dpo,
    "adaptive-dpo" => Method::AdaptiveDpo,
    "ipo" => Method::Ipo,
    "adaptive-ipo" => Method::AdaptiveIpo,
});

/// Hyper-parameters of the minority metric and the (adaptive) loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub rho: f64,
    pub k1: f64,
    pub k2: f64,
    pub c2_policy: C2Policy,
    pub objective: Objective,
    pub reweight: Reweight,
    pub margin: Margin,
    /// Ensemble size M: the current model plus up to M-1 EMA snapshots.
    pub ensemble_size: usize,
    pub ema_decay: f64,
    pub snapshot_interval: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let beta = 1.0;
        Self {
            beta,
            rho: 15.0,
            k1: 10.0,
            k2: -beta,
            c2_policy: C2Policy::BatchMeanLogits,
            objective: Objective::Dpo,
            reweight: Reweight::Linear,
            margin: Margin::Quadratic,
            ensemble_size: 3,
            ema_decay: 0.99,
            snapshot_interval: 50,
        }
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

/// Checks every [`LossConfig`] invariant, naming the first violated field.
pub fn validate_config(config: &LossConfig) -> Result<()> {
    let fail = |field| Err(Error::InvalidConfig { field });
    if !positive(config.beta) {
        return fail("beta");
    }
    if !positive(config.rho) {
        return fail("rho");
    }
    if !(config.k1.is_finite() && config.k1 >= 0.0) {
        return fail("k1");
    }
    if !config.k2.is_finite() {
        return fail("k2");
    }
    if let C2Policy::Fixed(v) = config.c2_policy {
        if !v.is_finite() {
            return fail("c2");
        }
    }
    if config.ensemble_size < 2 {
        return fail("M");
    }
    if !(config.ema_decay > 0.0 && config.ema_decay < 1.0) {
        return fail("ema_decay");
    }
    if config.snapshot_interval == 0 {
        return fail("snapshot_interval");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    /// Apply the minority-aware weight and margin. When false the loss is
    /// plain DPO/IPO (W = 1, margin = 0) whatever the loss config says.
    pub adaptive: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub eval_every: u64,
    pub backend: Backend,
    /// Hidden layer widths of the trained network.
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            adaptive: true,
            epochs: 5,
            batch_size: 128,
            learning_rate: default_learning_rate(Backend::Scorer),
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
            eval_every: 50,
            backend: Backend::Scorer,
            hidden: vec![32, 32],
        }
    }
}

pub fn default_learning_rate(backend: Backend) -> f64 {
    match backend {
        Backend::Scorer => 1e-3,
        Backend::Diffusion => 1e-4,
    }
}

impl TrainConfig {
    pub fn method(&self) -> Method {
        Method::from_parts(self.loss.objective, self.adaptive)
    }

    pub fn set_method(&mut self, method: Method) {
        self.loss.objective = method.objective();
        self.adaptive = method.is_adaptive();
    }

    pub fn validate(&self) -> Result<()> {
        validate_config(&self.loss)?;
        let fail = |field| Err(Error::InvalidConfig { field });
        if self.batch_size == 0 {
            return fail("batch_size");
        }
        if !positive(self.learning_rate) {
            return fail("learning_rate");
        }
        if self.eval_every == 0 {
            return fail("eval_every");
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) {
                return fail("adam_beta1");
            }
            if !(0.0..1.0).contains(&beta2) {
                return fail("adam_beta2");
            }
            if !positive(eps) {
                return fail("adam_eps");
            }
        }
        if self.hidden.contains(&0) {
            return fail("hidden");
        }
        Ok(())
    }

    /// Serializes every key, including resolved defaults.
    pub fn to_toml_string(&self) -> String {
        let l = &self.loss;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let q = |s: String| format!("\"{s}\"");
        kv("beta", format!("{:?}", l.beta));
        kv("rho", format!("{:?}", l.rho));
        kv("k1", format!("{:?}", l.k1));
        kv("k2", format!("{:?}", l.k2));
        kv(
            "c2",
            match l.c2_policy {
                C2Policy::Fixed(v) => format!("{v:?}"),
                C2Policy::BatchMeanLogits => q("batch_mean_logits".into()),
            },
        );
        kv("objective", q(l.objective.to_string()));
        kv("reweight", q(l.reweight.to_string()));
        kv("margin", q(l.margin.to_string()));
        kv("M", l.ensemble_size.to_string());
        kv("ema_decay", format!("{:?}", l.ema_decay));
        kv("snapshot_interval", l.snapshot_interval.to_string());
        kv("adaptive", self.adaptive.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", format!("{:?}", self.learning_rate));
        match self.optimizer {
            Optimizer::Sgd => kv("optimizer", q("sgd".into())),
            Optimizer::Adam { beta1, beta2, eps } => {
                kv("optimizer", q("adam".into()));
                kv("adam_beta1", format!("{beta1:?}"));
                kv("adam_beta2", format!("{beta2:?}"));
                kv("adam_eps", format!("{eps:?}"));
            }
        }
        kv("seed", self.seed.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("backend", q(self.backend.to_string()));
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        kv("hidden", format!("[{}]", hidden.join(", ")));
        out
    }
}

const KNOWN_KEYS: &[&str] = &[
    "beta",
    "rho",
    "k1",
    "k2",
    "c2",
    "objective",
    "reweight",
    "margin",
    "M",
    "ema_decay",
    "snapshot_interval",
    "adaptive",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "eval_every",
    "backend",
    "hidden",
];

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn line_of_key(src: &str, key: &str) -> usize {
    src.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

struct Fields<'a> {
    src: &'a str,
    table: toml::Table,
}

impl Fields<'_> {
    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            line: line_of_key(self.src, key),
            message: message.into(),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(*v)),
            Some(toml::Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(self.err(key, format!("`{key}` must be a number"))),
        }
    }

    fn uint(&self, key: &str) -> Result<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if *v >= 0 => Ok(Some(*v as u64)),
            Some(toml::Value::Integer(_)) => {
                Err(self.err(key, format!("`{key}` must be non-negative")))
            }
            Some(_) => Err(self.err(key, format!("`{key}` must be an integer"))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.err(key, format!("`{key}` must be a string"))),
        }
    }

    fn parsed<T: FromStr<Err = Error>>(&self, key: &str) -> Result<Option<T>> {
        self.string(key)?.map(T::from_str).transpose()
    }
}

/// Parses a config file body into a full [`TrainConfig`] and validates it.
pub fn parse_config_str(src: &str) -> Result<TrainConfig> {
    let table: toml::Table = toml::from_str(src).map_err(|e| Error::Parse {
        line: e.span().map_or(0, |s| line_of_offset(src, s.start)),
        message: e.message().to_string(),
    })?;
    if let Some(key) = table.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str())) {
        return Err(Error::UnknownKey(key.clone()));
    }
    let f = Fields { src, table };
    let mut cfg = TrainConfig::default();

    if let Some(b) = f.parsed::<Backend>("backend")? {
        cfg.backend = b;
    }
    cfg.learning_rate = f
        .float("learning_rate")?
        .unwrap_or(default_learning_rate(cfg.backend));

    let loss = &mut cfg.loss;
    if let Some(v) = f.float("beta")? {
        loss.beta = v;
    }
    loss.k2 = f.float("k2")?.unwrap_or(-loss.beta);
    if let Some(v) = f.float("rho")? {
        loss.rho = v;
    }
    if let Some(v) = f.float("k1")? {
        loss.k1 = v;
    }
    match f.table.get("c2") {
        None => {}
        Some(toml::Value::String(s)) if s == "batch_mean_logits" => {
            loss.c2_policy = C2Policy::BatchMeanLogits
        }
        Some(toml::Value::String(s)) => {
            return Err(Error::UnknownVariant {
                kind: "c2",
                value: s.clone(),
            });
        }
        Some(_) => loss.c2_policy = C2Policy::Fixed(f.float("c2")?.unwrap()),
    }
    if let Some(v) = f.parsed("objective")? {
        loss.objective = v;
    }
    if let Some(v) = f.parsed("reweight")? {
        loss.reweight = v;
    }
    if let Some(v) = f.parsed("margin")? {
        loss.margin = v;
    }
    if let Some(v) = f.uint("M")? {
        loss.ensemble_size = v as usize;
    }
    if let Some(v) = f.float("ema_decay")? {
        loss.ema_decay = v;
    }
    if let Some(v) = f.uint("snapshot_interval")? {
        loss.snapshot_interval = v;
    }

    match f.table.get("adaptive") {
        None => {}
        Some(toml::Value::Boolean(b)) => cfg.adaptive = *b,
        Some(_) => return Err(f.err("adaptive", "`adaptive` must be a boolean")),
    }
    if let Some(v) = f.uint("epochs")? {
        cfg.epochs = v as usize;
    }
    if let Some(v) = f.uint("batch_size")? {
        cfg.batch_size = v as usize;
    }
    let (mut b1, mut b2, mut eps) = (0.9, 0.999, 1e-8);
    if let Some(v) = f.float("adam_beta1")? {
        b1 = v;
    }
    if let Some(v) = f.float("adam_beta2")? {
        b2 = v;
    }
    if let Some(v) = f.float("adam_eps")? {
        eps = v;
    }
    cfg.optimizer = match f.string("optimizer")? {
        None | Some("adam") => Optimizer::Adam {
            beta1: b1,
            beta2: b2,
            eps,
        },
        Some("sgd") => Optimizer::Sgd,
        Some(other) => {
            return Err(Error::UnknownVariant {
                kind: "optimizer",
                value: other.into(),
            })
        }
    };
    if let Some(v) = f.uint("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = f.uint("eval_every")? {
        cfg.eval_every = v;
    }
    match f.table.get("hidden") {
        None => {}
        Some(toml::Value::Array(items)) => {
            cfg.hidden = items
                .iter()
                .map(|v| match v {
                    toml::Value::Integer(h) if *h >= 0 => Ok(*h as usize),
                    _ => Err(f.err("hidden", "`hidden` must be a list of widths")),
                })
                .collect::<Result<_>>()?;
        }
        Some(_) => return Err(f.err("hidden", "`hidden` must be a list of widths")),
    }

    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<std::path::Path>) -> Result<TrainConfig> {
    let src = std::fs::read_to_string(path)?;
    parse_config_str(&src)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(cfg: &LossConfig) -> Option<&'static str> {
        match validate_config(cfg) {
            Ok(()) => None,
            Err(Error::InvalidConfig { field }) => Some(field),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn rejects_single_member_ensemble() {
        let cfg = LossConfig {
            ensemble_size: 1,
            ..Default::default()
        };
        assert_eq!(field_of(&cfg), Some("M"));
    }

    #[test]
    fn accepts_large_scale_settings() {
        let cfg = LossConfig {
            beta: 1000.0,
            rho: 15.0,
            k1: 10.0,
            ensemble_size: 3,
            ..Default::default()
        };
        assert_eq!(field_of(&cfg), None);
    }

    #[test]
    fn rejects_zero_beta() {
        let cfg = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(field_of(&cfg), Some("beta"));
    }

    #[test]
    fn exhaustive_boundary_domain() {
        let betas = [-1.0, 0.0, 1e-12, 1.0, f64::NAN];
        let rhos = [-1.0, 0.0, 15.0];
        let k1s = [-1e-9, 0.0, 10.0];
        let ms = [0usize, 1, 2, 3];
        let decays = [0.0, 0.5, 1.0];
        for &beta in &betas {
            for &rho in &rhos {
                for &k1 in &k1s {
                    for &m in &ms {
                        for &ema_decay in &decays {
                            let cfg = LossConfig {
                                beta,
                                rho,
                                k1,
                                ensemble_size: m,
                                ema_decay,
                                ..Default::default()
                            };
                            let valid = beta > 0.0
                                && rho > 0.0
                                && k1 >= 0.0
                                && m >= 2
                                && ema_decay > 0.0
                                && ema_decay < 1.0;
                            assert_eq!(validate_config(&cfg).is_ok(), valid, "{cfg:?}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.loss.beta, 1.0);
        assert_eq!(cfg.loss.rho, 15.0);
        assert_eq!(cfg.loss.k1, 10.0);
        assert_eq!(cfg.loss.k2, -1.0);
        assert_eq!(cfg.loss.ensemble_size, 3);
    }

    #[test]
    fn k2_tracks_beta_when_absent() {
        let cfg = parse_config_str("beta = 2.5\n").unwrap();
        assert_eq!(cfg.loss.k2, -2.5);
        let cfg = parse_config_str("beta = 2.5\nk2 = 0.5\n").unwrap();
        assert_eq!(cfg.loss.k2, 0.5);
    }

    #[test]
    fn learning_rate_tracks_backend() {
        let cfg = parse_config_str("backend = \"diffusion\"\n").unwrap();
        assert_eq!(cfg.learning_rate, 1e-4);
    }

    #[test]
    fn single_member_file_is_rejected() {
        let err = parse_config_str("M = 1\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { field: "M" }), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = parse_config_str("beta = 1.0\ngamma = 2\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "gamma"));
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_config_str("beta = 1.0\nrho = = 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_config_str("beta = 1.0\n\nrho = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_variant_is_rejected() {
        let err = parse_config_str("reweight = \"cubic\"\n").unwrap_err();
        assert!(matches!(
            err,
            Error::UnknownVariant {
                kind: "reweight",
                ..
            }
        ));
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(parse_config_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn custom_config_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.loss.c2_policy = C2Policy::Fixed(0.3);
        cfg.loss.reweight = Reweight::Sigmoid;
        cfg.loss.margin = Margin::None;
        cfg.loss.beta = 1e-7;
        cfg.optimizer = Optimizer::Sgd;
        cfg.set_method(Method::Ipo);
        cfg.hidden = vec![5];
        cfg.seed = u32::MAX as u64;
        assert_eq!(parse_config_str(&cfg.to_toml_string()).unwrap(), cfg);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Dpo,
            Method::AdaptiveDpo,
            Method::Ipo,
            Method::AdaptiveIpo,
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
            assert_eq!(Method::from_parts(m.objective(), m.is_adaptive()), m);
        }
    }
}
