//! Run configuration files (TOML) and command-line overrides.
//!
//! The schema is versioned; see `docs/config.md` for every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, synth_pair, CifarSplit, Dataset, SynthPreset};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::rng::{derive_seed, Purpose};
use crate::search::SearchConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    Synth {
        preset: SynthPreset,
        /// Training images; the search splits these in half.
        train_size: usize,
        test_size: usize,
        classes: usize,
        image_size: usize,
        /// Seed of the generator, independent of the run seed so that
        /// runs with different seeds see the same images.
        #[serde(default)]
        seed: u64,
    },
    Cifar10 {
        dir: PathBuf,
        /// Random training subset; the full set when absent.
        train_size: Option<usize>,
        test_size: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth {
            preset: SynthPreset::EasyFit,
            train_size: 256,
            test_size: 256,
            classes: 4,
            image_size: 8,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DataConfig::Synth {
                train_size,
                test_size,
                classes,
                image_size,
                ..
            } => {
                if classes < 2 {
                    return Err(Error::config("data.classes", "must be at least 2"));
                }
                if train_size < 2 * classes {
                    return Err(Error::config("data.train_size", "needs at least two images per class"));
                }
                if test_size < classes {
                    return Err(Error::config("data.test_size", "needs at least one image per class"));
                }
                if image_size < 4 || image_size % 4 != 0 {
                    return Err(Error::config("data.image_size", "must be a positive multiple of 4"));
                }
            }
            DataConfig::Cifar10 {
                train_size, test_size, ..
            } => {
                if train_size.is_some_and(|n| n < 2) {
                    return Err(Error::config("data.train_size", "must be at least 2"));
                }
                if test_size == Some(0) {
                    return Err(Error::config("data.test_size", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// `(classes, image side, channels)` of the images this source yields.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        match *self {
            DataConfig::Synth { classes, image_size, .. } => (classes, image_size, 3),
            DataConfig::Cifar10 { .. } => (10, crate::data::CIFAR_SIDE, 3),
        }
    }

    /// Loads or generates the training and test sets.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataConfig::Synth {
                preset,
                train_size,
                test_size,
                classes,
                image_size,
                seed,
            } => synth_pair(*preset, *seed, *train_size, *test_size, *classes, *image_size),
            DataConfig::Cifar10 {
                dir,
                train_size,
                test_size,
                seed,
            } => {
                let mut train = load_cifar10(dir, CifarSplit::Train)?;
                let mut test = load_cifar10(dir, CifarSplit::Test)?;
                if let Some(n) = train_size {
                    train = train.sample(*n, derive_seed(*seed, Purpose::Subset, &[0]));
                }
                if let Some(n) = test_size {
                    test = test.sample(*n, derive_seed(*seed, Purpose::Subset, &[1]));
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Output directory used when `--out` is not given.
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Desk scale: 2→3→4 cells, 2 intermediate nodes, 8 channels, 8×8
    /// synthetic images.
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            out_dir: None,
            data: DataConfig::default(),
            search: desk_search(),
            eval: EvalConfig::default(),
        }
    }
}

/// The small search used for tests and quick runs.
pub fn desk_search() -> SearchConfig {
    use crate::search::StageConfig;
    let stage = |cells, candidates, dropout| StageConfig {
        cells,
        candidates,
        channels: 8,
        dropout,
        epochs: 10,
        warmup_epochs: 4,
    };
    SearchConfig {
        stages: vec![stage(2, 8, 0.0), stage(3, 5, 0.4), stage(4, 3, 0.7)],
        nodes: 2,
        batch_size: 32,
        alpha_lr: 3e-3,
        ..SearchConfig::default()
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.version),
            ));
        }
        self.data.validate()?;
        self.search.validate()?;
        self.eval.validate()
    }

    /// Parses, applies `overrides` (`key.path=value`) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            position: span_position(text, e.span()),
            reason: e.message().to_string(),
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::config(
            "config",
            e.message().to_string(),
        ))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn span_position(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    let Some(span) = span else {
        return "unknown".into();
    };
    let before = &text[..span.start.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    format!("line {line}, column {col}")
}

/// Sets one dotted key. Numeric segments index arrays; a leading `stages`
/// is shorthand for `search.stages`. The value is read as a TOML literal,
/// or as a bare string if it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config("--stage-override", format!("`{spec}` is not of the form KEY=VALUE")))?;
    let key = key.trim();
    let mut path: Vec<&str> = key.split('.').collect();
    if path.first() == Some(&"stages") {
        path.insert(0, "search");
    }
    if path.iter().any(|s| s.is_empty()) {
        return Err(Error::config("--stage-override", format!("empty segment in `{key}`")));
    }
    let mut root = toml::Value::Table(std::mem::take(doc));
    let result = set_path(&mut root, &path, parse_value(raw.trim()));
    if let toml::Value::Table(t) = root {
        *doc = t;
    }
    result.map_err(|why| Error::config(key.to_string(), why))
}

fn set_path(node: &mut toml::Value, path: &[&str], value: toml::Value) -> std::result::Result<(), String> {
    let (seg, rest) = path.split_first().expect("non-empty path");
    let child = match node {
        toml::Value::Table(t) => t
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default())),
        toml::Value::Array(a) => {
            let i: usize = seg.parse().map_err(|_| format!("`{seg}` is not an array index"))?;
            let len = a.len();
            a.get_mut(i).ok_or_else(|| format!("index {i} out of range ({len} entries)"))?
        }
        _ => return Err(format!("`{seg}` descends into a scalar")),
    };
    if rest.is_empty() {
        *child = value;
        Ok(())
    } else {
        set_path(child, rest, value)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
