//! TOML configuration files for `render`, `maps` and `train`. Unknown keys are rejected.

use std::fmt;
use std::fs;
use std::path::Path;

use psforge::micronet::{AdamConfig, Architecture};
use psforge::pipeline::TrainConfig;
use psforge::synth::SceneRecipe;
use serde::de::DeserializeOwned;
use serde::Deserialize;

/// A problem with flags or configuration files rather than with data or numerics.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

/// Scenes to render. `seed` is the master seed, overridden by `--seed`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "scene")]
    pub scenes: Vec<SceneRecipe>,
}

impl RenderConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let cfg: RenderConfig = read_toml(path)?;
        if cfg.scenes.is_empty() {
            return Err(usage(format!("{}: no [[scene]] entries", path.display())));
        }
        let mut names: Vec<&str> = cfg.scenes.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(usage(format!("{}: duplicate scene name `{}`", path.display(), w[0])));
        }
        for s in &cfg.scenes {
            if s.name.is_empty() || s.name.contains(['/', '\\']) || s.name.starts_with('.') {
                return Err(usage(format!("{}: scene name `{}` is not a plain directory name", path.display(), s.name)));
            }
        }
        Ok(cfg)
    }
}

/// Architecture overrides; missing keys keep the default network.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureFile {
    pub stem_filters: usize,
    pub growth: usize,
    pub block_layers: usize,
    pub transition_channels: usize,
    pub hidden_units: usize,
    pub dropout: f64,
}

impl Default for ArchitectureFile {
    fn default() -> Self {
        let a = Architecture::default();
        ArchitectureFile {
            stem_filters: a.stem_filters,
            growth: a.growth,
            block_layers: a.block_layers,
            transition_channels: a.transition_channels,
            hidden_units: a.hidden_units,
            dropout: a.dropout,
        }
    }
}

/// Training-set assembly and optimizer settings. Missing keys take the library defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub seed: u64,
    pub width: usize,
    pub rotations: usize,
    pub subset_min: usize,
    pub subset_max: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub pixels_per_scene: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pixels drawn from each validation scene; absent takes all.
    pub validation_pixels: Option<usize>,
    pub validation_rotations: usize,
    pub architecture: ArchitectureFile,
}

impl Default for TrainFile {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainFile {
            seed: t.seed,
            width: t.width,
            rotations: t.rotations,
            subset_min: t.subset_min,
            subset_max: t.subset_max,
            elevation_min_deg: t.elevation_min_deg,
            elevation_max_deg: t.elevation_max_deg,
            pixels_per_scene: t.pixels_per_scene,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.adam.lr,
            validation_pixels: None,
            validation_rotations: 1,
            architecture: ArchitectureFile::default(),
        }
    }
}

impl TrainFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => read_toml(p),
            None => Ok(TrainFile::default()),
        }
    }

    /// Library configuration for the training set; `seed` overrides the file's seed.
    pub fn train_config(&self, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
        let a = &self.architecture;
        let cfg = TrainConfig {
            width: self.width,
            rotations: self.rotations,
            subset_min: self.subset_min,
            subset_max: self.subset_max,
            elevation_min_deg: self.elevation_min_deg,
            elevation_max_deg: self.elevation_max_deg,
            pixels_per_scene: self.pixels_per_scene,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: seed.unwrap_or(self.seed),
            architecture: Architecture {
                input_width: self.width,
                stem_filters: a.stem_filters,
                growth: a.growth,
                block_layers: a.block_layers,
                transition_channels: a.transition_channels,
                hidden_units: a.hidden_units,
                dropout: a.dropout,
            },
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
        };
        cfg.validate().map_err(|e| usage(format!("invalid training config: {e}")))?;
        if self.validation_rotations == 0 || self.validation_pixels == Some(0) {
            return Err(usage("validation_rotations and validation_pixels must be positive"));
        }
        Ok(cfg)
    }

    /// Configuration for assembling the validation set from `base`.
    pub fn validation_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            rotations: self.validation_rotations,
            pixels_per_scene: self.validation_pixels,
            seed: psforge::seed::derive(base.seed, "validation", 0),
            ..base.clone()
        }
    }
}

/// Parses an exclusion list such as `0,3,5-9` (0-based image indices, inclusive ranges).
pub fn parse_exclude(spec: &str) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(format!("bad index `{s}` in exclusion list `{spec}`")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(usage(format!("empty range `{part}` in exclusion list")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse(part)?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
