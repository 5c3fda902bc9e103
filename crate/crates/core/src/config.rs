//! Run parameters shared by every command, resolved from defaults, an
//! optional `key = value` file, then explicit overrides (command-line flags).

use std::fs;
use std::path::{Path, PathBuf};

use crate::angular::{TrainConfig, DEFAULT_BATCHES, DEFAULT_CLIP_NORM, DEFAULT_EPOCHS, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE};
use crate::classify::Aggregation;
use crate::descriptor::{BackendSpec, DEFAULT_DESCRIPTION_DIM};
use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;
use crate::protocol::SplitPart;
use crate::selection::Topology;

pub const SWEEP_HIDDEN: [usize; 5] = [32, 64, 128, 256, 512];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub topology: Topology,
    pub backend: BackendSpec,
    pub hidden: usize,
    pub batches: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip: Option<f64>,
    pub protocol: u8,
    pub out: PathBuf,
    /// Directory holding trained models for `eval`; defaults to `out`.
    pub models: Option<PathBuf>,
    pub seed: u64,
    /// Rayon worker count; `None` uses one per core.
    pub workers: Option<usize>,
    /// Square side the cropped face region is resized to.
    pub target: usize,
    pub grid_u: usize,
    pub grid_v: usize,
    pub aggregation: Aggregation,
    pub share_branch_weights: bool,
    pub eval_part: SplitPart,
    pub sweep_hidden: Vec<usize>,
    /// Empty lists fall back to the single `batches` / `epochs` / `topology` value.
    pub sweep_batches: Vec<usize>,
    pub sweep_epochs: Vec<usize>,
    pub sweep_topologies: Vec<Topology>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            topology: "mid-hv-fuse".parse().unwrap(),
            backend: BackendSpec::ToyCnn { dim: DEFAULT_DESCRIPTION_DIM, seed: 0 },
            hidden: DEFAULT_HIDDEN,
            batches: DEFAULT_BATCHES,
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            clip: Some(DEFAULT_CLIP_NORM),
            protocol: 2,
            out: PathBuf::from("out"),
            models: None,
            seed: 0,
            workers: None,
            target: 224,
            grid_u: 15,
            grid_v: 15,
            aggregation: Aggregation::Mean,
            share_branch_weights: false,
            eval_part: SplitPart::Test,
            sweep_hidden: SWEEP_HIDDEN.to_vec(),
            sweep_batches: Vec::new(),
            sweep_epochs: Vec::new(),
            sweep_topologies: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one parameter by name. Keys accept `-` or `_` as separator.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        match key.as_str() {
            "manifest" => self.manifest = Some(value.into()),
            "topology" => self.topology = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "backend" => self.backend = value.parse()?,
            "hidden" => self.hidden = parse(&key, value)?,
            "batches" => self.batches = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(&key, value)?,
            "clip" => {
                self.clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "protocol" => self.protocol = parse(&key, value)?,
            "out" => self.out = value.into(),
            "models" => self.models = Some(value.into()),
            "seed" => self.seed = parse(&key, value)?,
            "workers" => {
                self.workers = match value {
                    "auto" | "0" => None,
                    v => Some(parse(&key, v)?),
                }
            }
            "target" => self.target = parse(&key, value)?,
            "grid" => {
                let (u, v) = value
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("grid: expected UxV, got {value:?}")))?;
                self.grid_u = parse(&key, u)?;
                self.grid_v = parse(&key, v)?;
            }
            "aggregation" => {
                self.aggregation = match value {
                    "mean" => Aggregation::Mean,
                    "last-cell" | "last" => Aggregation::LastCell,
                    _ => return Err(Error::Config(format!("aggregation: expected mean or last-cell, got {value:?}"))),
                }
            }
            "share_branch_weights" => self.share_branch_weights = parse_bool(&key, value)?,
            "eval_part" => {
                self.eval_part = match value {
                    "train" => SplitPart::Train,
                    "validation" | "val" => SplitPart::Validation,
                    "test" => SplitPart::Test,
                    _ => return Err(Error::Config(format!("eval_part: expected train, validation or test, got {value:?}"))),
                }
            }
            "sweep_hidden" => self.sweep_hidden = parse_list(&key, value)?,
            "sweep_batches" => self.sweep_batches = parse_list(&key, value)?,
            "sweep_epochs" => self.sweep_epochs = parse_list(&key, value)?,
            "sweep_topologies" => self.sweep_topologies = parse_list(&key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            self.apply(key, value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// The effective parameters as ordered `(key, value)` pairs; feeding
    /// them back through [`RunConfig::apply`] reproduces `self`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        if let Some(m) = &self.manifest {
            out.push(("manifest", m.display().to_string()));
        }
        out.push(("topology", self.topology.to_string()));
        out.push(("backend", self.backend.to_string()));
        out.push(("hidden", self.hidden.to_string()));
        out.push(("batches", self.batches.to_string()));
        out.push(("epochs", self.epochs.to_string()));
        out.push(("learning_rate", self.learning_rate.to_string()));
        out.push(("clip", self.clip.map_or("none".into(), |c| c.to_string())));
        out.push(("protocol", self.protocol.to_string()));
        out.push(("out", self.out.display().to_string()));
        if let Some(m) = &self.models {
            out.push(("models", m.display().to_string()));
        }
        out.push(("seed", self.seed.to_string()));
        out.push(("workers", self.workers.map_or("auto".into(), |w| w.to_string())));
        out.push(("target", self.target.to_string()));
        out.push(("grid", format!("{}x{}", self.grid_u, self.grid_v)));
        out.push((
            "aggregation",
            match self.aggregation {
                Aggregation::Mean => "mean",
                Aggregation::LastCell => "last-cell",
            }
            .into(),
        ));
        out.push(("share_branch_weights", self.share_branch_weights.to_string()));
        out.push((
            "eval_part",
            match self.eval_part {
                SplitPart::Train => "train",
                SplitPart::Validation => "validation",
                SplitPart::Test => "test",
            }
            .into(),
        ));
        out.push(("sweep_hidden", join(&self.sweep_hidden)));
        out.push(("sweep_batches", join(&self.sweep_batches)));
        out.push(("sweep_epochs", join(&self.sweep_epochs)));
        out.push(("sweep_topologies", join(&self.sweep_topologies)));
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.protocol, 1 | 2) {
            return Err(Error::Config(format!("protocol must be 1 or 2, got {}", self.protocol)));
        }
        if self.target == 0 || self.grid_u == 0 || self.grid_v == 0 {
            return Err(Error::Config("target size and grid must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given".into()))
    }

    pub fn models_dir(&self) -> &Path {
        self.models.as_deref().unwrap_or(&self.out)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden_dim: self.hidden,
            num_batches: self.batches,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            clip_norm: self.clip,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            topology: self.topology,
            target_w: self.target,
            target_h: self.target,
            grid_u: self.grid_u,
            grid_v: self.grid_v,
            aggregation: self.aggregation,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = RunConfig::default();
        assert_eq!((c.hidden, c.batches, c.epochs), (256, 3, 130));
        assert_eq!(c.topology.name(), "mid-hv-fuse");
        assert_eq!(c.protocol, 2);
        assert_eq!(c.sweep_hidden, vec![32, 64, 128, 256, 512]);
    }

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nhidden = 64\ntopology = low-v   # trailing\nepochs=7\n").unwrap();
        c.apply("hidden", "32").unwrap();
        assert_eq!((c.hidden, c.epochs), (32, 7));
        assert_eq!(c.topology.name(), "low-v");
    }

    #[test]
    fn entries_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "manifest = data/m.json\nbackend = random-projection:64:3\nclip = none\nworkers = 4\ngrid = 9x9\naggregation = last-cell\nshare-branch-weights = yes\neval_part = val\nsweep_hidden = 8, 16\nsweep_topologies = mid-h,corner\n",
        )
        .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply("topology", "diagonal"), Err(Error::Config(_))));
        assert!(matches!(c.apply("colour", "red"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("hidden 5"), Err(Error::Config(_))));
        c.protocol = 3;
        assert!(c.validate().is_err());
    }
}
