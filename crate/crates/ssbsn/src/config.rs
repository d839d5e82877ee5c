//! Run configuration files: flat `key = value` lines under `[section]`
//! headers, `#` comments. Unknown sections and keys are rejected by name so
//! typos fail loudly.

use crate::net::NetworkConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

/// File-system locations for a run.
#[derive(Clone, Debug, Default)]
pub struct PathsConfig {
    /// Dataset root (noisy/, optional clean/, optional manifest.txt).
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, logs, and exports.
    pub out: Option<PathBuf>,
}

/// Benchmark sweep settings (`bench` subcommand).
#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize)>,
    pub channels: Vec<usize>,
    pub d_hats: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![(24, 24), (48, 48), (128, 128)],
            channels: vec![8, 32],
            d_hats: vec![4, 6],
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "network" | "train" | "pd" | "paths" | "bench") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{section}]",
                        lineno + 1
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(&section, key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn p<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value for {key}: {v}")))
        }
        match section {
            // A bare top-level `seed` sets both network and sampling seeds.
            "" if key == "seed" => {
                let s: u64 = p(key, value)?;
                self.network.seed = s;
                self.train.seed = s;
            }
            "" => {
                return Err(Error::Config(format!(
                    "key {key} outside any section (only `seed` may appear there)"
                )))
            }
            "network" => self.network.set(key, value)?,
            "train" => match key {
                "patch_size" => self.train.patch_size = p(key, value)?,
                "batch_size" => self.train.batch_size = p(key, value)?,
                "lr" => self.train.lr = p(key, value)?,
                "epochs" => self.train.epochs = p(key, value)?,
                "lr_drop_epoch" => self.train.lr_drop_epoch = p(key, value)?,
                "lr_drop_factor" => self.train.lr_drop_factor = p(key, value)?,
                "steps_per_epoch" => self.train.steps_per_epoch = p(key, value)?,
                "seed" => self.train.seed = p(key, value)?,
                _ => return Err(Error::Config(format!("unknown train key: {key}"))),
            },
            "pd" => match key {
                "s_train" => self.train.pd.s_train = p(key, value)?,
                "s_test" => self.train.pd.s_test = p(key, value)?,
                _ => return Err(Error::Config(format!("unknown pd key: {key}"))),
            },
            "paths" => match key {
                "data" => self.paths.data = Some(PathBuf::from(value)),
                "out" => self.paths.out = Some(PathBuf::from(value)),
                _ => return Err(Error::Config(format!("unknown paths key: {key}"))),
            },
            "bench" => match key {
                "sizes" => {
                    self.bench.sizes = value
                        .split(',')
                        .map(|tok| {
                            let tok = tok.trim();
                            let (h, w) = tok.split_once('x').ok_or_else(|| {
                                Error::Config(format!("size {tok:?} is not HxW"))
                            })?;
                            Ok((p("size", h.trim())?, p("size", w.trim())?))
                        })
                        .collect::<Result<_>>()?
                }
                "channels" => {
                    self.bench.channels = value
                        .split(',')
                        .map(|t| p("channels", t.trim()))
                        .collect::<Result<_>>()?
                }
                "d_hats" => {
                    self.bench.d_hats = value
                        .split(',')
                        .map(|t| p("d_hats", t.trim()))
                        .collect::<Result<_>>()?
                }
                _ => return Err(Error::Config(format!("unknown bench key: {key}"))),
            },
            _ => unreachable!("sections are validated at the header"),
        }
        Ok(())
    }
}
