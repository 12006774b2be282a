//! `key = value` run configuration with `--key value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mgwcn_core::data::SynthParams;
use mgwcn_core::model::{Activation, Mode, ModelConfig};
use mgwcn_core::objective::LossWeights;
use mgwcn_core::trainer::TrainConfig;
use mgwcn_core::wavelet::{CoefficientRule, WaveletSettings};

/// Rejected configuration: unknown key, bad value, wrong combination.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    /// Generated in memory from the `synth_*` keys.
    Synth,
    /// One explicit graph directory (`edges.txt`, `features.txt`, `labels.txt`).
    Graph,
    /// A multimodal bundle directory as written by `synth`.
    Bundle,
}

impl FromStr for DataKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "synth" => Ok(Self::Synth),
            "graph" => Ok(Self::Graph),
            "bundle" => Ok(Self::Bundle),
            _ => Err(bad(format!("data_kind must be synth, graph or bundle, got '{s}'"))),
        }
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synth => "synth",
            Self::Graph => "graph",
            Self::Bundle => "bundle",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    /// Planetoid-style for graphs, fractional for bundles.
    Auto,
    /// `per_class` labels per class plus `n_val` / `n_test`.
    Planetoid,
    /// `train_frac` / `val_frac`, rest test.
    Fractional,
}

impl FromStr for SplitKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "auto" => Ok(Self::Auto),
            "planetoid" => Ok(Self::Planetoid),
            "fractional" => Ok(Self::Fractional),
            _ => Err(bad(format!("split must be auto, planetoid or fractional, got '{s}'"))),
        }
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Planetoid => "planetoid",
            Self::Fractional => "fractional",
        })
    }
}

/// Tri-state switch where `auto` defers to the data kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Auto,
    On,
    Off,
}

impl FromStr for Toggle {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "auto" => Ok(Self::Auto),
            "true" | "on" | "yes" | "1" => Ok(Self::On),
            "false" | "off" | "no" | "0" => Ok(Self::Off),
            _ => Err(bad(format!("expected auto, true or false, got '{s}'"))),
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::On => "true",
            Self::Off => "false",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_kind: DataKind,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub params: Option<PathBuf>,
    /// Subset of bundle modalities to use, ascending; empty means all.
    pub modalities: Vec<usize>,
    pub row_normalize: Toggle,
    pub split: SplitKind,
    pub per_class: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_frac: f64,
    pub val_frac: f64,

    pub synth_nodes: usize,
    pub synth_classes: usize,
    pub synth_modalities: usize,
    pub synth_dims: Vec<usize>,
    pub synth_noise: f64,
    pub synth_k: usize,

    pub mode: Mode,
    pub n_layers: usize,
    pub scales: Vec<f64>,
    /// Empty means 16 for every layer.
    pub hidden_dims: Vec<usize>,
    pub cross_dim: usize,
    pub cheby_order: usize,
    pub wavelet_threshold: f64,
    pub coefficient_rule: CoefficientRule,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub cross_scale_index: usize,
    pub p_init_noise: f64,

    pub learning_rate: f64,
    /// Step size for correspondences; `learning_rate` when unset.
    pub p_learning_rate: Option<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_wm: f64,
    pub seed: u64,
    /// Seed for data generation and splits; `seed` when unset.
    pub data_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let synth = SynthParams::default();
        Self {
            data_kind: DataKind::Synth,
            data_dir: None,
            out_dir: PathBuf::from("out"),
            params: None,
            modalities: Vec::new(),
            row_normalize: Toggle::Auto,
            split: SplitKind::Auto,
            per_class: 20,
            n_val: 500,
            n_test: 1000,
            train_frac: 0.5,
            val_frac: 0.3,
            synth_nodes: synth.n_nodes,
            synth_classes: synth.n_classes,
            synth_modalities: synth.n_modalities,
            synth_dims: synth.dims,
            synth_noise: synth.noise,
            synth_k: synth.k,
            mode: model.mode,
            n_layers: model.n_layers,
            scales: model.scales,
            hidden_dims: Vec::new(),
            cross_dim: model.cross_dim,
            cheby_order: model.wavelet.order,
            wavelet_threshold: model.wavelet.threshold,
            coefficient_rule: model.wavelet.rule,
            dropout_rate: model.dropout_rate,
            activation: model.activation,
            cross_scale_index: model.cross_scale_index,
            p_init_noise: model.p_init_noise,
            learning_rate: train.learning_rate,
            p_learning_rate: train.p_learning_rate,
            max_epochs: train.max_epochs,
            patience: train.patience,
            alpha: train.loss_weights.alpha,
            beta: train.loss_weights.beta,
            gamma: train.loss_weights.gamma,
            lambda_wm: train.loss_weights.lambda_wm,
            seed: train.seed,
            data_seed: None,
        }
    }
}

/// Every accepted key, in the order `render` lists them.
pub const KEYS: &[&str] = &[
    "data_kind",
    "data_dir",
    "out_dir",
    "params",
    "modalities",
    "row_normalize",
    "split",
    "per_class",
    "n_val",
    "n_test",
    "train_frac",
    "val_frac",
    "synth_nodes",
    "synth_classes",
    "synth_modalities",
    "synth_dims",
    "synth_noise",
    "synth_k",
    "mode",
    "n_layers",
    "scales",
    "hidden_dims",
    "cross_dim",
    "cheby_order",
    "wavelet_threshold",
    "coefficient_rule",
    "dropout_rate",
    "activation",
    "cross_scale_index",
    "p_init_noise",
    "learning_rate",
    "p_learning_rate",
    "max_epochs",
    "patience",
    "alpha",
    "beta",
    "gamma",
    "lambda_wm",
    "seed",
    "data_seed",
];

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(format!("invalid value '{value}' for {key}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "data_kind" => self.data_kind = v.parse()?,
            "data_dir" => self.data_dir = optional_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "params" => self.params = optional_path(v),
            "modalities" => self.modalities = list(key, v)?,
            "row_normalize" => self.row_normalize = v.parse()?,
            "split" => self.split = v.parse()?,
            "per_class" => self.per_class = scalar(key, v)?,
            "n_val" => self.n_val = scalar(key, v)?,
            "n_test" => self.n_test = scalar(key, v)?,
            "train_frac" => self.train_frac = scalar(key, v)?,
            "val_frac" => self.val_frac = scalar(key, v)?,
            "synth_nodes" => self.synth_nodes = scalar(key, v)?,
            "synth_classes" => self.synth_classes = scalar(key, v)?,
            "synth_modalities" => self.synth_modalities = scalar(key, v)?,
            "synth_dims" => self.synth_dims = list(key, v)?,
            "synth_noise" => self.synth_noise = scalar(key, v)?,
            "synth_k" => self.synth_k = scalar(key, v)?,
            "mode" => self.mode = v.parse().map_err(|e: mgwcn_core::Error| bad(e.to_string()))?,
            "n_layers" => self.n_layers = scalar(key, v)?,
            "scales" => self.scales = list(key, v)?,
            "hidden_dims" => self.hidden_dims = list(key, v)?,
            "cross_dim" => self.cross_dim = scalar(key, v)?,
            "cheby_order" => self.cheby_order = scalar(key, v)?,
            "wavelet_threshold" => self.wavelet_threshold = scalar(key, v)?,
            "coefficient_rule" => {
                self.coefficient_rule = v.parse().map_err(|e: mgwcn_core::Error| bad(e.to_string()))?
            }
            "dropout_rate" => self.dropout_rate = scalar(key, v)?,
            "activation" => self.activation = v.parse().map_err(|e: mgwcn_core::Error| bad(e.to_string()))?,
            "cross_scale_index" => self.cross_scale_index = scalar(key, v)?,
            "p_init_noise" => self.p_init_noise = scalar(key, v)?,
            "learning_rate" => self.learning_rate = scalar(key, v)?,
            "p_learning_rate" => self.p_learning_rate = if v.is_empty() { None } else { Some(scalar(key, v)?) },
            "max_epochs" => self.max_epochs = scalar(key, v)?,
            "patience" => self.patience = scalar(key, v)?,
            "alpha" => self.alpha = scalar(key, v)?,
            "beta" => self.beta = scalar(key, v)?,
            "gamma" => self.gamma = scalar(key, v)?,
            "lambda_wm" => self.lambda_wm = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "data_seed" => self.data_seed = if v.is_empty() { None } else { Some(scalar(key, v)?) },
            _ => return Err(bad(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text of one key's current value.
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        Ok(match key {
            "data_kind" => self.data_kind.to_string(),
            "data_dir" => path_or_empty(&self.data_dir),
            "out_dir" => self.out_dir.display().to_string(),
            "params" => path_or_empty(&self.params),
            "modalities" => join(&self.modalities),
            "row_normalize" => self.row_normalize.to_string(),
            "split" => self.split.to_string(),
            "per_class" => self.per_class.to_string(),
            "n_val" => self.n_val.to_string(),
            "n_test" => self.n_test.to_string(),
            "train_frac" => self.train_frac.to_string(),
            "val_frac" => self.val_frac.to_string(),
            "synth_nodes" => self.synth_nodes.to_string(),
            "synth_classes" => self.synth_classes.to_string(),
            "synth_modalities" => self.synth_modalities.to_string(),
            "synth_dims" => join(&self.synth_dims),
            "synth_noise" => self.synth_noise.to_string(),
            "synth_k" => self.synth_k.to_string(),
            "mode" => self.mode.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "scales" => join(&self.scales),
            "hidden_dims" => join(&self.hidden_dims),
            "cross_dim" => self.cross_dim.to_string(),
            "cheby_order" => self.cheby_order.to_string(),
            "wavelet_threshold" => self.wavelet_threshold.to_string(),
            "coefficient_rule" => match self.coefficient_rule {
                CoefficientRule::Quadrature => "quadrature".into(),
                CoefficientRule::BesselJ => "bessel".into(),
            },
            "dropout_rate" => self.dropout_rate.to_string(),
            "activation" => self.activation.to_string(),
            "cross_scale_index" => self.cross_scale_index.to_string(),
            "p_init_noise" => self.p_init_noise.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "p_learning_rate" => self.p_learning_rate.map(|x| x.to_string()).unwrap_or_default(),
            "max_epochs" => self.max_epochs.to_string(),
            "patience" => self.patience.to_string(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda_wm" => self.lambda_wm.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.map(|s| s.to_string()).unwrap_or_default(),
            _ => return Err(bad(format!("unknown config key '{key}'"))),
        })
    }

    /// Every key as `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    /// Applies a config file's `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| bad(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the flags, in that order.
    pub fn resolve(file_text: Option<&str>, flags: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(text) = file_text {
            cfg.apply_text(text)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn params_path(&self) -> PathBuf {
        self.params.clone().unwrap_or_else(|| self.out_dir.join("params.json"))
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n_nodes: self.synth_nodes,
            n_classes: self.synth_classes,
            n_modalities: self.synth_modalities,
            dims: self.synth_dims.clone(),
            noise: self.synth_noise,
            k: self.synth_k,
            seed: self.data_seed(),
        }
    }

    /// Model settings for data with `n_modalities` modalities and
    /// `n_classes` classes.
    pub fn model_config(&self, n_modalities: usize, n_classes: usize) -> ModelConfig {
        let hidden_dims = if self.hidden_dims.is_empty() {
            vec![16; self.n_layers]
        } else {
            self.hidden_dims.clone()
        };
        ModelConfig {
            mode: self.mode,
            n_modalities,
            n_layers: self.n_layers,
            scales: self.scales.clone(),
            hidden_dims,
            cross_dim: self.cross_dim,
            wavelet: self.wavelet_settings(),
            dropout_rate: self.dropout_rate,
            activation: self.activation,
            n_classes,
            cross_scale_index: self.cross_scale_index,
            p_init_noise: self.p_init_noise,
        }
    }

    pub fn wavelet_settings(&self) -> WaveletSettings {
        WaveletSettings {
            order: self.cheby_order,
            threshold: self.wavelet_threshold,
            rule: self.coefficient_rule,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            p_learning_rate: self.p_learning_rate,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            loss_weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
                lambda_wm: self.lambda_wm,
            },
        }
    }

    /// Checks paths named by the config before any work starts.
    pub fn check_inputs(&self) -> Result<(), ConfigError> {
        match self.data_kind {
            DataKind::Synth => {}
            DataKind::Graph | DataKind::Bundle => {
                let dir = self
                    .data_dir
                    .as_deref()
                    .ok_or_else(|| bad(format!("data_kind = {} needs data_dir", self.data_kind)))?;
                if !dir.is_dir() {
                    return Err(bad(format!("data_dir {} is not a directory", dir.display())));
                }
            }
        }
        if self.modalities.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("modalities must be listed in strictly ascending order"));
        }
        Ok(())
    }
}

/// Reads an optional config file.
pub fn read_config_file(path: Option<&Path>) -> Result<Option<String>, ConfigError> {
    path.map(|p| std::fs::read_to_string(p).map_err(|e| bad(format!("cannot read config {}: {e}", p.display()))))
        .transpose()
}

/// Splits `--key value` / `--key=value` arguments into pairs; keys may use
/// `-` in place of `_`.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| bad(format!("expected `--key value`, found '{arg}'")))?;
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| bad(format!("flag --{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}
