//! Flat run configuration. Every key is optional; unknown keys are errors.

use std::path::Path;

use anyhow::{Context, Result};
use fdgnn_core::baselines::{default_greedy_l, WmmseConfig};
use fdgnn_core::fgnn::{FgnnConfig, DEFAULT_MESSAGE_SCALE};
use fdgnn_core::netgen::{ExperimentConfig, WeightMode, DEFAULT_NOISE_VAR_W};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // network
    pub num_links: usize,
    pub fd_fraction: f64,
    pub area_side_m: f64,
    pub min_pair_dist_m: f64,
    pub max_pair_dist_m: f64,
    pub eta: f64,
    pub lambda: f64,
    pub antenna_dist_m: f64,
    pub noise_var_w: f64,
    pub p_max_w: f64,
    pub weight_mode: WeightMode,

    // data
    pub num_train: usize,
    pub num_test: usize,
    /// Tail of the training file held out for early stopping.
    pub validation_fraction: f64,

    // model and training
    pub num_mp_layers: usize,
    pub f_a_widths: Vec<usize>,
    pub f_c_widths: Vec<usize>,
    pub share_weights_across_layers: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub message_scale: f64,
    pub normalize_features: bool,
    pub truncate_t_m: Option<f64>,

    // baselines
    pub wmmse_max_iters: usize,
    pub wmmse_rel_tol: f64,
    /// Links switched on by the greedy baseline; defaults to `K/2`.
    pub greedy_links: Option<usize>,

    // threshold sweep
    pub thresholds_m: Vec<f64>,
    pub ideal_target: f64,

    // timing
    pub bench_links: Vec<usize>,
    pub bench_instances: usize,
    pub bench_warmup: usize,
    pub bench_repeats: usize,
    pub bench_truncate_t_m: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = ExperimentConfig::default();
        let model = FgnnConfig::default();
        let wmmse = WmmseConfig::default();
        Self {
            num_links: net.num_links,
            fd_fraction: net.fd_fraction,
            area_side_m: net.area_side_m,
            min_pair_dist_m: net.min_pair_dist_m,
            max_pair_dist_m: net.max_pair_dist_m,
            eta: net.eta,
            lambda: net.lambda,
            antenna_dist_m: net.antenna_dist_m,
            noise_var_w: DEFAULT_NOISE_VAR_W,
            p_max_w: net.p_max_w,
            weight_mode: net.weight_mode,
            num_train: 10_000,
            num_test: 1_000,
            validation_fraction: 0.1,
            num_mp_layers: model.num_mp_layers,
            f_a_widths: model.f_a_widths,
            f_c_widths: model.f_c_widths,
            share_weights_across_layers: model.share_weights_across_layers,
            batch_size: model.batch_size,
            epochs: model.epochs,
            learning_rate: model.lr,
            patience: model.patience,
            message_scale: DEFAULT_MESSAGE_SCALE,
            normalize_features: model.normalize_features,
            truncate_t_m: None,
            wmmse_max_iters: wmmse.max_iters,
            wmmse_rel_tol: wmmse.rel_tol,
            greedy_links: None,
            thresholds_m: (1..=10).map(|i| 10.0 * i as f64).collect(),
            ideal_target: 0.95,
            bench_links: vec![50, 100, 500],
            bench_instances: 100,
            bench_warmup: 3,
            bench_repeats: 5,
            bench_truncate_t_m: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network(0).validate()?;
        self.model().validate()?;
        anyhow::ensure!(
            (0.0..1.0).contains(&self.validation_fraction),
            "validation_fraction must lie in [0, 1)"
        );
        anyhow::ensure!(self.bench_repeats >= 1, "bench_repeats must be at least 1");
        for t in self
            .truncate_t_m
            .iter()
            .chain(&self.bench_truncate_t_m)
            .chain(&self.thresholds_m)
        {
            anyhow::ensure!(*t >= 0.0, "thresholds must be non-negative, got {t}");
        }
        Ok(())
    }

    pub fn network(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            num_links: self.num_links,
            fd_fraction: self.fd_fraction,
            area_side_m: self.area_side_m,
            min_pair_dist_m: self.min_pair_dist_m,
            max_pair_dist_m: self.max_pair_dist_m,
            eta: self.eta,
            lambda: self.lambda,
            antenna_dist_m: self.antenna_dist_m,
            noise_var_w: self.noise_var_w,
            p_max_w: self.p_max_w,
            weight_mode: self.weight_mode,
            rng_seed: seed,
        }
    }

    pub fn model(&self) -> FgnnConfig {
        FgnnConfig {
            num_mp_layers: self.num_mp_layers,
            f_a_widths: self.f_a_widths.clone(),
            f_c_widths: self.f_c_widths.clone(),
            share_weights_across_layers: self.share_weights_across_layers,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.learning_rate,
            patience: self.patience,
            message_scale: self.message_scale,
            normalize_features: self.normalize_features,
        }
    }

    pub fn wmmse(&self) -> WmmseConfig {
        WmmseConfig {
            max_iters: self.wmmse_max_iters,
            rel_tol: self.wmmse_rel_tol,
            ..WmmseConfig::default()
        }
    }

    pub fn greedy_links_for(&self, k: usize) -> usize {
        self.greedy_links
            .unwrap_or_else(|| default_greedy_l(k))
            .min(k)
    }
}
