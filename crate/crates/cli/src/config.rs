//! Run configuration: one flat TOML table.
//!
//! Values are layered: profile defaults, then the config file, then
//! `--set key=value` pairs, then dedicated command flags. Unknown keys are
//! rejected. Every key and its default is listed in the README.

use std::path::Path;

use clap::ValueEnum;
use mitodiff::classifier::{BackboneConfig, ClassifierConfig};
use mitodiff::diffusion::{check_stop_grid, DenoiserConfig, NoiseSchedule, TrainConfig};
use mitodiff::sweep::{check_grid, default_grid, SelectionRule};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small models and a 200-step chain; fits on one CPU.
    Desk,
    /// Settings at the scale of the original experiments.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    /// Parent directory for run directories when `--out` is not given.
    pub run_root: String,

    pub toy_n: usize,
    pub toy_seed: u64,
    pub toy_per_slide: usize,
    pub side: usize,

    pub timesteps: usize,
    /// Beta endpoints for a 1000-step chain; rescaled by `1000 / timesteps`.
    pub beta_start: f64,
    pub beta_end: f64,

    pub dpm_base_channels: usize,
    pub dpm_depth: usize,
    pub dpm_cond_width: usize,
    pub dpm_time_width: usize,
    pub dpm_lr: f64,
    pub dpm_batch_size: usize,
    pub dpm_steps: usize,
    pub dpm_seed: u64,
    /// 0 disables clipping.
    pub dpm_grad_clip: f32,
    /// 0 disables the weight average.
    pub dpm_ema_decay: f32,
    pub dpm_log_every: usize,
    /// 0 saves only at the end.
    pub dpm_checkpoint_every: usize,

    pub clf_input_side: usize,
    pub clf_width: usize,
    pub clf_depth: usize,
    pub clf_lr: f64,
    pub clf_batch_size: usize,
    pub clf_seeds: Vec<u64>,
    pub clf_train_fraction: f64,
    pub clf_max_steps: usize,
    pub clf_eval_every: usize,
    pub clf_patience: usize,

    pub sweep_seeds: usize,
    pub sweep_first_seed: u64,
    pub sweep_grid: Vec<f32>,
    pub sweep_batch: usize,
    pub select_start_max: f64,
    pub select_end_min: f64,
    pub select_step_max: f64,
    pub montage_cell: usize,

    pub transform_stops: Vec<usize>,
    pub transform_condition: f32,
    pub transform_seed: u64,
    pub transform_limit: usize,

    pub listen: String,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let desk = RunConfig {
            profile,
            run_root: "runs".into(),
            toy_n: 2000,
            toy_seed: 7,
            toy_per_slide: 100,
            side: 32,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            dpm_base_channels: 8,
            dpm_depth: 3,
            dpm_cond_width: 16,
            dpm_time_width: 32,
            dpm_lr: 1e-3,
            dpm_batch_size: 16,
            dpm_steps: 1500,
            dpm_seed: 0,
            dpm_grad_clip: 1.0,
            dpm_ema_decay: 0.0,
            dpm_log_every: 50,
            dpm_checkpoint_every: 500,
            clf_input_side: 32,
            clf_width: 8,
            clf_depth: 3,
            clf_lr: 1e-3,
            clf_batch_size: 32,
            clf_seeds: vec![0, 1, 2],
            clf_train_fraction: 0.75,
            clf_max_steps: 400,
            clf_eval_every: 50,
            clf_patience: 4,
            sweep_seeds: 100,
            sweep_first_seed: 0,
            sweep_grid: default_grid(),
            sweep_batch: 64,
            select_start_max: 0.1,
            select_end_min: 0.9,
            select_step_max: 0.30,
            montage_cell: 32,
            transform_stops: vec![0, 29, 57, 86, 114, 143, 171, 200],
            transform_condition: 1.0,
            transform_seed: 0,
            transform_limit: 6,
            listen: "127.0.0.1:8080".into(),
        };
        match profile {
            Profile::Desk => desk,
            Profile::Full => RunConfig {
                toy_n: 20000,
                side: 64,
                timesteps: 1000,
                dpm_base_channels: 64,
                dpm_depth: 4,
                dpm_cond_width: 64,
                dpm_time_width: 256,
                dpm_lr: 1e-4,
                dpm_batch_size: 128,
                dpm_steps: 100_000,
                dpm_ema_decay: 0.9999,
                dpm_log_every: 100,
                dpm_checkpoint_every: 5000,
                clf_input_side: 256,
                clf_width: 64,
                clf_depth: 4,
                clf_lr: 1e-5,
                clf_batch_size: 128,
                clf_max_steps: 20_000,
                clf_eval_every: 200,
                clf_patience: 5,
                sweep_seeds: 1000,
                montage_cell: 64,
                transform_stops: vec![0, 143, 286, 429, 571, 714, 857, 1000],
                ..desk
            },
        }
    }

    /// Builds a config from layers. `profile` from a flag wins over one set
    /// in the file.
    pub fn resolve(
        profile: Option<Profile>,
        file: Option<&Path>,
        overrides: &[(String, toml::Value)],
    ) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let profile = match profile {
            Some(p) => p,
            None => match file_table.get("profile") {
                Some(v) => Profile::deserialize(v.clone())
                    .map_err(|e| CliError::validation(format!("profile: {e}")))?,
                None => Profile::Desk,
            },
        };
        let mut table = toml::Table::try_from(Self::for_profile(profile)).map_err(CliError::runtime)?;
        for (k, v) in file_table.into_iter().chain(overrides.iter().cloned()) {
            if !table.contains_key(&k) {
                return Err(CliError::validation(format!("unknown config key {k:?}")));
            }
            table.insert(k, v);
        }
        table.insert("profile".into(), toml::Value::try_from(profile).map_err(CliError::runtime)?);
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::validation(m));
        if self.toy_n == 0 || self.side == 0 {
            return bad("toy_n and side must be positive".into());
        }
        self.schedule()?;
        self.denoiser().validate()?;
        self.denoiser().check_side(self.side)?;
        self.dpm_train().validate()?;
        self.classifier().validate()?;
        check_grid(&self.sweep_grid)?;
        check_stop_grid(&self.transform_stops, &self.schedule()?)?;
        if !(0.0..=1.0).contains(&self.transform_condition) {
            return bad(format!("transform_condition {} outside [0, 1]", self.transform_condition));
        }
        if self.sweep_batch == 0 || self.montage_cell == 0 || self.dpm_log_every == 0 {
            return bad("sweep_batch, montage_cell and dpm_log_every must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let scale = 1000.0 / self.timesteps.max(1) as f64;
        Ok(NoiseSchedule::linear(
            self.timesteps,
            self.beta_start * scale,
            (self.beta_end * scale).min(0.999),
        )?)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: self.dpm_base_channels,
            depth: self.dpm_depth,
            cond_width: self.dpm_cond_width,
            time_width: self.dpm_time_width,
        }
    }

    pub fn dpm_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.dpm_lr,
            batch_size: self.dpm_batch_size,
            steps: self.dpm_steps,
            seed: self.dpm_seed,
            grad_clip: (self.dpm_grad_clip > 0.0).then_some(self.dpm_grad_clip),
            ema_decay: (self.dpm_ema_decay > 0.0).then_some(self.dpm_ema_decay),
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            input_side: self.clf_input_side,
            lr: self.clf_lr,
            batch_size: self.clf_batch_size,
            seeds: self.clf_seeds.clone(),
            train_fraction: self.clf_train_fraction,
            backbone: BackboneConfig { width: self.clf_width, depth: self.clf_depth },
            max_steps: self.clf_max_steps,
            eval_every: self.clf_eval_every,
            patience: self.clf_patience,
        }
    }

    pub fn selection(&self) -> SelectionRule {
        SelectionRule {
            start_max: self.select_start_max,
            end_min: self.select_end_min,
            step_max: self.select_step_max,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Parses `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("expected KEY=VALUE, got {raw:?}")))?;
    let key = k.trim().to_string();
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((key, value))
}
