//! Flat `key=value` run configuration.
//!
//! Files hold one `key=value` per line; blank lines and lines starting with
//! `#` are ignored. Later assignments (for example from `--set`) override
//! earlier ones. Every key has a default, listed by [`RunConfig::describe`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use vgcl_core::trainer::{ClusterRefresh, InitReading};
use vgcl_core::{AssignMode, Reduction, TrainConfig, Variant};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Directory with `train.txt` and `test.txt` from `prepare`.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub repeat: usize,
    /// Re-split train+test for every repeat instead of reusing the split.
    pub resplit: bool,
    pub groups: usize,
    /// Softmax temperature used whenever `cluster_mode=soft`.
    pub cluster_temperature: f64,
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: None,
            repeat: 1,
            resplit: false,
            groups: 4,
            cluster_temperature: 1.0,
            explicit: BTreeSet::new(),
        }
    }
}

/// Keys in echo order with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("variant", "vgcl | vgcl_wo_c | vgcl_wo_v | lightgcn"),
    ("dim", "embedding width"),
    ("layers", "propagation layers"),
    ("include_layer0", "average the raw embeddings into the readout"),
    ("lr", "Adam learning rate"),
    ("batch_size", "triples per batch"),
    ("epochs", "maximum epochs"),
    ("seed", "root seed of every random stream"),
    ("k_users", "user prototypes"),
    ("k_items", "item prototypes"),
    ("eps_amplitude", "feature-noise amplitude (vgcl_wo_v)"),
    ("init_std", "initialization scale"),
    ("init_reading", "std | variance: how init_std is read"),
    ("eval_every", "epochs between test evaluations"),
    ("early_stop_patience", "evaluations without NDCG@20 gain before stopping"),
    ("cutoffs", "comma-separated ranking cutoffs"),
    ("alpha", "contrastive weight"),
    ("gamma", "cluster-level weight inside the contrastive term"),
    ("lambda", "L2 weight on the embeddings"),
    ("tau1", "node-level temperature"),
    ("tau2", "cluster-level temperature"),
    ("kl_weight", "KL weight"),
    ("reduction", "sum | mean"),
    ("cluster_mode", "hard | soft"),
    ("cluster_temperature", "softmax temperature of soft assignments"),
    ("cluster_refresh", "epoch | batch"),
    ("kmeans_max_iters", "Lloyd iteration cap"),
    ("kmeans_tol", "relative objective change that stops Lloyd"),
    ("groups", "user-degree groups in the final report"),
    ("repeat", "seed-varied repeats (seed, seed+1, ...)"),
    ("resplit", "re-split train+test per repeat"),
    ("data", "prepared split directory"),
    ("out", "output directory"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse `{value}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got `{value}`")),
    }
}

impl RunConfig {
    /// Keys assigned explicitly, as opposed to left at their defaults.
    pub fn explicit_keys(&self) -> &BTreeSet<String> {
        &self.explicit
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "variant" => t.variant = Variant::parse(value).ok_or_else(|| format!("variant: unknown `{value}`"))?,
            "dim" => t.dim = parse_num(key, value)?,
            "layers" => t.layers = parse_num(key, value)?,
            "include_layer0" => t.include_layer0 = parse_bool(key, value)?,
            "lr" => t.lr = parse_num(key, value)?,
            "batch_size" => t.batch_size = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "seed" => t.seed = parse_num(key, value)?,
            "k_users" => t.k_users = parse_num(key, value)?,
            "k_items" => t.k_items = parse_num(key, value)?,
            "eps_amplitude" => t.eps_amplitude = parse_num(key, value)?,
            "init_std" => t.init_std = parse_num(key, value)?,
            "init_reading" => {
                t.init_reading = match value {
                    "std" => InitReading::StdDev,
                    "variance" => InitReading::Variance,
                    _ => return Err(format!("init_reading: expected std or variance, got `{value}`")),
                }
            }
            "eval_every" => t.eval_every = parse_num(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse_num(key, value)?,
            "cutoffs" => {
                t.cutoffs = value
                    .split(',')
                    .map(|c| parse_num(key, c.trim()))
                    .collect::<Result<_, _>>()?
            }
            "alpha" => t.loss.alpha = parse_num(key, value)?,
            "gamma" => t.loss.gamma = parse_num(key, value)?,
            "lambda" => t.loss.lambda = parse_num(key, value)?,
            "tau1" => t.loss.tau1 = parse_num(key, value)?,
            "tau2" => t.loss.tau2 = parse_num(key, value)?,
            "kl_weight" => t.loss.kl_weight = parse_num(key, value)?,
            "reduction" => {
                t.loss.reduction = match value {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(format!("reduction: expected sum or mean, got `{value}`")),
                }
            }
            "cluster_mode" => {
                t.cluster_mode = match value {
                    "hard" => AssignMode::Hard,
                    "soft" => AssignMode::Soft {
                        temperature: self.cluster_temperature,
                    },
                    _ => return Err(format!("cluster_mode: expected hard or soft, got `{value}`")),
                }
            }
            "cluster_temperature" => {
                let temperature = parse_num(key, value)?;
                if let AssignMode::Soft { .. } = t.cluster_mode {
                    t.cluster_mode = AssignMode::Soft { temperature };
                }
                self.cluster_temperature = temperature;
            }
            "cluster_refresh" => {
                t.cluster_refresh = match value {
                    "epoch" => ClusterRefresh::Epoch,
                    "batch" => ClusterRefresh::Batch,
                    _ => return Err(format!("cluster_refresh: expected epoch or batch, got `{value}`")),
                }
            }
            "kmeans_max_iters" => t.kmeans.max_iters = parse_num(key, value)?,
            "kmeans_tol" => t.kmeans.tol = parse_num(key, value)?,
            "groups" => self.groups = parse_num(key, value)?,
            "repeat" => self.repeat = parse_num(key, value)?,
            "resplit" => self.resplit = parse_bool(key, value)?,
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(format!("{key}: unknown key")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Reads `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut problems = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v) {
                        problems.push(e);
                    }
                }
                None => problems.push(format!("line {}: expected key=value, got `{line}`", n + 1)),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Explicit settings that the chosen variant switches off.
    pub fn conflicts(&self) -> Vec<String> {
        let t = &self.train;
        let forced = t.effective_loss();
        let checks = [
            ("alpha", t.loss.alpha, forced.alpha),
            ("gamma", t.loss.gamma, forced.gamma),
            ("kl_weight", t.loss.kl_weight, forced.kl_weight),
        ];
        checks
            .into_iter()
            .filter(|(key, given, used)| self.explicit.contains(*key) && given != used)
            .map(|(key, given, used)| {
                format!("{key}: variant {} requires {used}, got {given}", t.variant)
            })
            .collect()
    }

    /// Every problem that keeps this configuration from training.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.conflicts();
        out.extend(self.train.problems());
        if self.repeat == 0 {
            out.push("repeat: must be positive".into());
        }
        if self.groups < 2 {
            out.push("groups: must be at least 2".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// Training settings with the variant's forced weights applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.loss = t.effective_loss();
        t
    }

    /// The effective configuration in the file format, every key present.
    pub fn echo(&self) -> String {
        let t = self.effective_train();
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values: Vec<(&str, String)> = vec![
            ("variant", t.variant.to_string()),
            ("dim", t.dim.to_string()),
            ("layers", t.layers.to_string()),
            ("include_layer0", t.include_layer0.to_string()),
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("seed", t.seed.to_string()),
            ("k_users", t.k_users.to_string()),
            ("k_items", t.k_items.to_string()),
            ("eps_amplitude", t.eps_amplitude.to_string()),
            ("init_std", t.init_std.to_string()),
            (
                "init_reading",
                match t.init_reading {
                    InitReading::StdDev => "std",
                    InitReading::Variance => "variance",
                }
                .into(),
            ),
            ("eval_every", t.eval_every.to_string()),
            ("early_stop_patience", t.early_stop_patience.to_string()),
            (
                "cutoffs",
                t.cutoffs.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("alpha", t.loss.alpha.to_string()),
            ("gamma", t.loss.gamma.to_string()),
            ("lambda", t.loss.lambda.to_string()),
            ("tau1", t.loss.tau1.to_string()),
            ("tau2", t.loss.tau2.to_string()),
            ("kl_weight", t.loss.kl_weight.to_string()),
            (
                "reduction",
                match t.loss.reduction {
                    Reduction::Sum => "sum",
                    Reduction::Mean => "mean",
                }
                .into(),
            ),
            (
                "cluster_mode",
                match t.cluster_mode {
                    AssignMode::Hard => "hard",
                    AssignMode::Soft { .. } => "soft",
                }
                .into(),
            ),
            ("cluster_temperature", self.cluster_temperature.to_string()),
            (
                "cluster_refresh",
                match t.cluster_refresh {
                    ClusterRefresh::Epoch => "epoch",
                    ClusterRefresh::Batch => "batch",
                }
                .into(),
            ),
            ("kmeans_max_iters", t.kmeans.max_iters.to_string()),
            ("kmeans_tol", t.kmeans.tol.to_string()),
            ("groups", self.groups.to_string()),
            ("repeat", self.repeat.to_string()),
            ("resplit", self.resplit.to_string()),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Every key with its default and description.
    pub fn describe() -> String {
        let defaults = Self::default().echo();
        let mut out = String::new();
        for (line, (key, help)) in defaults.lines().zip(KEYS) {
            let _ = writeln!(out, "{line:<28} # {help}");
            debug_assert!(line.starts_with(key));
        }
        out
    }
}
