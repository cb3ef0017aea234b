//! Reproducible experiment plumbing: dataset specs, flat config files, run
//! manifests and the command implementations behind the CLI.

mod commands;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use commands::{
    enumerate, prune_search_cmd, random_search_cmd, score, sweep, correlate, group_study, GroundTruthSpec,
    SummaryRow, SweepParam,
};

use crate::data::{load_cifar_binary, synth_dataset, LabeledDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{MetricVector, ScoreConfig};
use crate::space::MacroConfig;

/// Where images come from: `synth[:key=value,...]` or `cifar:path[,path...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    Cifar { paths: Vec<PathBuf> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthSpec::new(10, 50, 16, 0))
    }
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("cifar:") {
            let paths: Vec<PathBuf> = rest.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
            if paths.is_empty() {
                return Err(Error::Config("cifar dataset needs at least one file".into()));
            }
            return Ok(DatasetSpec::Cifar { paths });
        }
        let opts = match s {
            "synth" => "",
            _ => s
                .strip_prefix("synth:")
                .ok_or_else(|| Error::Config(format!("unknown dataset `{s}` (use synth[:k=v,..] or cifar:path)")))?,
        };
        let DatasetSpec::Synthetic(mut spec) = DatasetSpec::default() else {
            unreachable!()
        };
        for kv in opts.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value in dataset spec, got `{kv}`")))?;
            let num = || {
                v.parse::<u64>()
                    .map_err(|_| Error::Config(format!("dataset option `{k}` needs an integer, got `{v}`")))
            };
            match k {
                "classes" => spec.classes = num()? as usize,
                "per_class" => spec.per_class = num()? as usize,
                "resolution" => spec.resolution = num()? as usize,
                "seed" => spec.seed = num()?,
                "noise" => {
                    spec.noise = v
                        .parse()
                        .map_err(|_| Error::Config(format!("noise needs a number, got `{v}`")))?
                }
                other => return Err(Error::Config(format!("unknown dataset option `{other}`"))),
            }
        }
        Ok(DatasetSpec::Synthetic(spec))
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DatasetSpec::Synthetic(spec) => synth_dataset(spec),
            DatasetSpec::Cifar { paths } => load_cifar_binary(paths),
        }
    }
}

/// Settings shared by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub dataset: DatasetSpec,
    /// Resolution and class count are taken from the dataset.
    pub macro_cfg: MacroConfig,
    pub score: ScoreConfig,
    pub seed: u64,
    pub jobs: usize,
    pub out: PathBuf,
}

impl Experiment {
    /// Loads the dataset and fits the macro config to it.
    pub fn load(&self) -> Result<(LabeledDataset, MacroConfig)> {
        let ds = self.dataset.load()?;
        let [_, c, h, _] = ds
            .images
            .dims4()
            .ok_or_else(|| Error::State("dataset images are not [N, C, H, W]".into()))?;
        let macro_cfg = MacroConfig {
            input_channels: c,
            input_resolution: h,
            num_classes: ds.class_count,
            ..self.macro_cfg.clone()
        };
        macro_cfg.validate()?;
        Ok((ds, macro_cfg))
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// JSON record of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub outputs: Vec<PathBuf>,
    pub degenerate_events: Vec<String>,
    pub result: serde_json::Value,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, config: &impl Serialize, master_seed: u64) -> Result<Self> {
        Ok(RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config)?,
            master_seed,
            derived_seeds: BTreeMap::new(),
            outputs: Vec::new(),
            degenerate_events: Vec::new(),
            result: serde_json::Value::Null,
            wall_clock_seconds: 0.0,
            started: Some(Instant::now()),
        })
    }

    pub fn seed(&mut self, name: impl Into<String>, value: u64) {
        self.derived_seeds.insert(name.into(), value);
    }

    pub fn record_degenerate(&mut self, rows: &[MetricVector]) {
        for r in rows {
            let f = &r.scores.flags;
            for (on, what) in [
                (f.lr1, "lr1 has no activation units"),
                (f.lr2, "lr2 kernel is singular"),
                (f.ntk, "ntk kernel is singular"),
                (f.angle, "angle of a zero vector"),
                (f.diverged, "short training diverged"),
            ] {
                if on {
                    self.degenerate_events.push(format!("{}: {what}", r.genotype));
                }
            }
        }
    }

    /// Stamps the wall clock and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> Result<Self> {
        self.wall_clock_seconds = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        self.outputs.sort();
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
        Ok(self)
    }
}

/// Parses a flat `key = value` config file. Blank lines and `#` comments are
/// ignored; keys use flag spelling (`proxy-classes` or `proxy_classes`).
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", lineno + 1)))?;
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", lineno + 1)));
        }
        let value = v.trim().trim_matches('"').to_string();
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => out.push((key, value)),
        }
    }
    Ok(out)
}

/// File-system safe slug of a metric-set string: `angle,loss` -> `angle-loss`.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_specs() {
        assert_eq!("synth".parse::<DatasetSpec>().unwrap(), DatasetSpec::default());
        let DatasetSpec::Synthetic(s) = "synth:classes=4,per_class=7,resolution=8,seed=3".parse().unwrap() else {
            panic!()
        };
        assert_eq!((s.classes, s.per_class, s.resolution, s.seed), (4, 7, 8, 3));
        assert_eq!(
            "cifar:a.bin,b.bin".parse::<DatasetSpec>().unwrap(),
            DatasetSpec::Cifar {
                paths: vec!["a.bin".into(), "b.bin".into()]
            }
        );
        assert!("imagenet".parse::<DatasetSpec>().is_err());
        assert!("synth:bogus=1".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn config_file() {
        let kv = parse_config_file("# run\nseed = 7\nproxy_classes=5 # trailing\n\nseed=8\n").unwrap();
        assert_eq!(
            kv,
            vec![("seed".into(), "8".into()), ("proxy-classes".into(), "5".into())]
        );
        assert!(parse_config_file("novalue\n").is_err());
    }
}
