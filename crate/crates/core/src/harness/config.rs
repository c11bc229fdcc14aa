use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Method, MethodSettings};
use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::linear::AdmmConfig;
use crate::neural::TrainConfig;
use crate::pilots::SyntheticTaskSpec;

/// Where pilots come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic(SyntheticTaskSpec),
    Files {
        theta: PathBuf,
        gamma: PathBuf,
        labels: Option<PathBuf>,
        n_train: usize,
        #[serde(default)]
        n_val: usize,
    },
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(SyntheticTaskSpec::default())
    }
}

/// Lists of values to sweep. An absent axis keeps the base value from the
/// channel, task or training settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub k: Option<Vec<usize>>,
    pub nt: Option<Vec<usize>>,
    /// Receive antennas; defaults to following `nt`.
    pub nr: Option<Vec<usize>>,
    pub nphi: Option<Vec<usize>>,
    /// RIS size as a multiple of `nt`, rounded to the nearest integer.
    pub nphi_ratio: Option<Vec<f64>>,
    pub snr_db: Option<Vec<f64>>,
    pub n_train: Option<Vec<usize>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationSettings {
    /// Direct-link path loss when the equalizer is designed.
    pub alpha_pre: f64,
    /// Direct-link path loss after the blockage.
    pub alpha_post: f64,
    pub steps: usize,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        AdaptationSettings {
            alpha_pre: 10.0,
            alpha_post: 1e6,
            steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSource,
    pub channel: ChannelParams,
    pub method: Method,
    /// Methods to compare; overrides `method` when given.
    pub methods: Option<Vec<Method>>,
    pub admm: AdmmConfig,
    pub train: TrainConfig,
    /// Alternations of the SVD/MMSE link design with a phase step.
    pub physical_iters: usize,
    pub sweep: SweepAxes,
    pub n_seeds: usize,
    /// Seed of the first run; run `i` uses `seed + i`.
    pub seed: u64,
    /// Noise draws per test evaluation.
    pub n_noise_draws: usize,
    pub adaptation: AdaptationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSource::default(),
            channel: ChannelParams::default(),
            method: Method::Linear,
            methods: None,
            admm: AdmmConfig::default(),
            train: TrainConfig::default(),
            physical_iters: 30,
            sweep: SweepAxes::default(),
            n_seeds: 5,
            seed: 0,
            n_noise_draws: 1,
            adaptation: AdaptationSettings::default(),
        }
    }
}

fn config_err(key: &str, message: impl ToString) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.to_string(),
    }
}

fn nonempty<T>(key: &str, axis: &Option<Vec<T>>) -> Result<()> {
    match axis {
        Some(v) if v.is_empty() => Err(config_err(key, "sweep axis must not be empty")),
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| vec![self.method])
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            admm: self.admm.clone(),
            train: self.train.clone(),
            physical_iters: self.physical_iters,
        }
    }

    /// Checks everything that can be checked without running, reporting the
    /// offending key.
    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidParameter(m) => config_err(key, m),
                other => other,
            })
        };
        if self.n_seeds == 0 {
            return Err(config_err("n_seeds", "must be at least 1"));
        }
        if self.n_noise_draws == 0 {
            return Err(config_err("n_noise_draws", "must be at least 1"));
        }
        if matches!(&self.methods, Some(m) if m.is_empty()) {
            return Err(config_err("methods", "must not be empty"));
        }
        let s = &self.sweep;
        nonempty("sweep.k", &s.k)?;
        nonempty("sweep.nt", &s.nt)?;
        nonempty("sweep.nr", &s.nr)?;
        nonempty("sweep.nphi", &s.nphi)?;
        nonempty("sweep.nphi_ratio", &s.nphi_ratio)?;
        nonempty("sweep.snr_db", &s.snr_db)?;
        nonempty("sweep.n_train", &s.n_train)?;
        nonempty("sweep.beta", &s.beta)?;
        if s.nphi.is_some() && s.nphi_ratio.is_some() {
            return Err(config_err(
                "sweep.nphi_ratio",
                "give either nphi or nphi_ratio",
            ));
        }
        if let Some(r) = &s.nphi_ratio {
            if r.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(config_err(
                    "sweep.nphi_ratio",
                    "ratios must be finite and nonnegative",
                ));
            }
        }
        if let Some(b) = &s.beta {
            if b.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(config_err(
                    "sweep.beta",
                    "beta must be finite and nonnegative",
                ));
            }
        }
        wrap("channel", self.channel.validate())?;
        wrap("admm", self.admm.validate())?;
        wrap("train", self.train.validate())?;
        if let TaskSource::Synthetic(spec) = &self.task {
            wrap("task.synthetic", spec.validate())?;
        }
        let a = &self.adaptation;
        if !(a.alpha_pre > 0.0 && a.alpha_post > 0.0) {
            return Err(config_err("adaptation", "path losses must be positive"));
        }
        Ok(())
    }

    /// Reads a TOML or JSON file, chosen by extension (`.json` is JSON,
    /// anything else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        };
        parse_config(&text, format)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

/// Parses and validates a configuration. Errors carry the dotted path of
/// the offending key.
pub fn parse_config(text: &str, format: ConfigFormat) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = match format {
        ConfigFormat::Toml => {
            let de = toml::Deserializer::parse(text).map_err(|e| config_err("", e.message()))?;
            serde_path_to_error::deserialize(de)
                .map_err(|e| config_err(&e.path().to_string(), e.inner().message()))?
        }
        ConfigFormat::Json => {
            let mut de = serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(&mut de)
                .map_err(|e| config_err(&e.path().to_string(), e.inner()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let toml_text = r#"
            method = "eigen_k"
            n_seeds = 2
            [channel]
            nt = 4
            nr = 4
            k = 2
            [sweep]
            k = [1, 2]
            snr_db = [0.0, 10.0]
            [task.synthetic]
            n_train = 500
        "#;
        let json_text = r#"{
            "method": "eigen_k", "n_seeds": 2,
            "channel": {"nt": 4, "nr": 4, "k": 2},
            "sweep": {"k": [1, 2], "snr_db": [0.0, 10.0]},
            "task": {"synthetic": {"n_train": 500}}
        }"#;
        let a = parse_config(toml_text, ConfigFormat::Toml).unwrap();
        let b = parse_config(json_text, ConfigFormat::Json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.method, Method::EigenK);
        assert_eq!(a.channel.alpha_1, 10.0);
    }

    #[test]
    fn errors_name_the_key() {
        let key = |text: &str, f| match parse_config(text, f) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            key("[channel]\nnt = \"x\"", ConfigFormat::Toml),
            "channel.nt"
        );
        assert_eq!(
            key(r#"{"sweep": {"k": [1, -2]}}"#, ConfigFormat::Json),
            "sweep.k[1]"
        );
        assert_eq!(key("[sweep]\nk = []", ConfigFormat::Toml), "sweep.k");
        assert_eq!(key("n_seeds = 0", ConfigFormat::Toml), "n_seeds");
        assert_eq!(
            key("[channel]\nbogus = 1", ConfigFormat::Toml),
            "channel.bogus"
        );
        assert_eq!(
            key("[channel]\nsnr_db = 1\nnt = 0", ConfigFormat::Toml),
            "channel"
        );
    }
}
