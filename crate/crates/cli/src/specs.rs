use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use panofocus::focuser::{CommandDetector, DetectorAdapter, FileDetector};
use panofocus::io::load_weights;
use panofocus::prototyper::{BppModel, ModelDims};

/// `file:PATH` or `cmd:TEMPLATE`.
#[derive(Debug, Clone, PartialEq)]
pub enum DetectorSpec {
    File(PathBuf),
    Command(String),
}

impl FromStr for DetectorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(p) = s.strip_prefix("file:") {
            Ok(Self::File(PathBuf::from(p)))
        } else if let Some(t) = s.strip_prefix("cmd:") {
            Ok(Self::Command(t.to_string()))
        } else {
            Err(format!("expected file:PATH or cmd:TEMPLATE, got '{s}'"))
        }
    }
}

impl DetectorSpec {
    pub fn build(&self, serial: bool) -> Result<Box<dyn DetectorAdapter>> {
        Ok(match self {
            Self::File(p) => Box::new(FileDetector::load(p).with_context(|| format!("loading detector script {}", p.display()))?),
            Self::Command(t) => Box::new(CommandDetector::new(t)?.serial(serial)),
        })
    }

    pub fn check(&self) -> Result<()> {
        match self {
            Self::File(p) => {
                FileDetector::load(p).with_context(|| format!("loading detector script {}", p.display()))?;
            }
            Self::Command(t) => {
                CommandDetector::new(t)?;
            }
        }
        Ok(())
    }
}

/// `seed:N`, `file:PATH` or a bare path.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSpec {
    Seed(u64),
    File(PathBuf),
}

impl FromStr for WeightsSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(n) = s.strip_prefix("seed:") {
            n.parse().map(Self::Seed).map_err(|e| format!("bad seed '{n}': {e}"))
        } else {
            Ok(Self::File(PathBuf::from(s.strip_prefix("file:").unwrap_or(s))))
        }
    }
}

impl WeightsSpec {
    pub fn load(&self, dims: ModelDims) -> Result<BppModel> {
        match self {
            Self::Seed(seed) => Ok(BppModel::seeded(dims, *seed)?),
            Self::File(p) => Ok(load_weights(p, dims)?),
        }
    }
}

/// Comma-separated `key=value` architecture overrides, e.g. `d=8,heads=2`.
pub fn parse_dims(text: &str, mut dims: ModelDims) -> Result<ModelDims> {
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let Some((k, v)) = part.split_once('=') else {
            bail!("expected key=value in --dims, got '{part}'");
        };
        let v: usize = v.trim().parse().with_context(|| format!("--dims {k}"))?;
        match k.trim() {
            "d" | "dim" => dims.dim = v,
            "heads" => dims.heads = v,
            "prototypes" | "j" => dims.prototypes = v,
            "max_tokens" => dims.max_tokens = v,
            "mlp_ratio" => dims.mlp_ratio = v,
            other => bail!("unknown --dims key '{other}'"),
        }
    }
    dims.validate()?;
    Ok(dims)
}
