//! Run configuration: a flat key = value text format with `#` comments.
//!
//! Runs have about a dozen parameters, so they live in a config file;
//! the command line only carries `--config`, `--out` and `--seeds`.
//! Every key left at its default is echoed into the run's provenance
//! log, and every parse error carries the offending line number.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::arch::{build_network, parse_hierarchy, BlockKind, HierarchySpec, NetworkPlan};
use crate::data::{
    load_cifar_dir, make_desk_subset, synth_blobs, synth_textures, CifarVariant, ImageDataset,
    Split,
};
use crate::error::{Error, Result};
use crate::local::LocalLossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    LayerwiseConcurrent,
    LayerwiseGreedy,
    Global,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::LayerwiseConcurrent => "layerwise_concurrent",
            TrainMode::LayerwiseGreedy => "layerwise_greedy",
            TrainMode::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// CIFAR-10 binary files in `dir` (or the `CIFAR10_DIR` env var),
    /// subsetted and downscaled to desk scale.
    Cifar10 { dir: Option<PathBuf> },
    /// Gaussian-blob synthetic set.
    SynthBlobs { spread: f32 },
    /// Procedural-texture synthetic set (CIFAR stand-in).
    SynthTextures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub hierarchy: Vec<usize>,
    pub channels: Vec<usize>,
    pub block_kind: BlockKind,
    pub dataset: DatasetSpec,
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub resolution: usize,
    pub data_seed: u64,
    pub lr: f64,
    pub dropout: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<TrainMode>,
    pub local_loss: LocalLossKind,
    pub out_dir: PathBuf,
    /// `key = value` lines for every defaulted key, for the provenance log.
    pub defaults_used: Vec<String>,
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

struct KeyValue {
    line: usize,
    value: String,
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut pairs: Vec<(String, KeyValue)> = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| cfg_err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(cfg_err(line_no, format!("duplicate key '{key}'")));
        }
        pairs.push((key, KeyValue { line: line_no, value }));
    }

    let known = [
        "model", "hierarchy", "channels", "block_kind", "dataset", "data_dir", "classes",
        "train_count", "test_count", "resolution", "data_seed", "lr", "dr", "epochs",
        "batch_size", "seeds", "modes", "local_loss", "predsim_alpha", "spread", "out",
    ];
    for (key, kv) in &pairs {
        if !known.contains(&key.as_str()) {
            return Err(cfg_err(kv.line, format!("unknown key '{key}'")));
        }
    }
    let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, kv)| kv);
    let mut defaults_used = Vec::new();
    macro_rules! or_default {
        ($key:expr, $default:expr, $parse:expr) => {
            match get($key) {
                Some(kv) => $parse(kv.line, &kv.value)?,
                None => {
                    let d = $default;
                    defaults_used.push(format!("{} = {} (default)", $key, d));
                    $parse(0, &d.to_string())?
                }
            }
        };
    }
    let required = |key: &'static str| {
        get(key).ok_or_else(|| cfg_err(0, format!("missing required key '{key}'")))
    };

    let parse_f64 = |line: usize, v: &str| {
        v.parse::<f64>()
            .map_err(|_| cfg_err(line, format!("expected a number, got '{v}'")))
    };
    let parse_usize = |line: usize, v: &str| {
        v.parse::<usize>()
            .map_err(|_| cfg_err(line, format!("expected a non-negative integer, got '{v}'")))
    };
    let parse_u64_list = |line: usize, v: &str| -> Result<Vec<u64>> {
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| cfg_err(line, format!("expected integer list, got '{v}'")))
            })
            .collect()
    };

    let hierarchy_kv = required("hierarchy")?;
    let hierarchy = parse_hierarchy(&hierarchy_kv.value)
        .map_err(|e| cfg_err(hierarchy_kv.line, format!("bad hierarchy: {e}")))?;

    let lr_kv = required("lr")?;
    let lr = parse_f64(lr_kv.line, &lr_kv.value)?;
    if !(lr > 0.0) {
        return Err(cfg_err(lr_kv.line, "lr must be > 0"));
    }

    let dropout = or_default!("dr", 0.0f64, parse_f64) as f32;
    if !(0.0..1.0).contains(&dropout) {
        let line = get("dr").map(|kv| kv.line).unwrap_or(0);
        return Err(cfg_err(line, "dr must be in [0, 1)"));
    }

    // Stage widths default to doubling from 16, capped at 128.
    let channels = match get("channels") {
        Some(kv) => kv
            .value
            .split(',')
            .map(|s| parse_usize(kv.line, s.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => {
            let c: Vec<usize> = (0..hierarchy.len()).map(|i| (16usize << i).min(128)).collect();
            defaults_used.push(format!(
                "channels = {} (default)",
                c.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            ));
            c
        }
    };
    if channels.len() != hierarchy.len() {
        let line = get("channels").map(|kv| kv.line).unwrap_or(0);
        return Err(cfg_err(
            line,
            format!(
                "channels has {} entries but the hierarchy has {} stages",
                channels.len(),
                hierarchy.len()
            ),
        ));
    }

    let block_kind = match get("block_kind") {
        Some(kv) => match kv.value.as_str() {
            "plain" => BlockKind::Plain,
            "residual" => BlockKind::Residual,
            other => return Err(cfg_err(kv.line, format!("unknown block_kind '{other}'"))),
        },
        None => {
            defaults_used.push("block_kind = plain (default)".into());
            BlockKind::Plain
        }
    };

    let spread = or_default!("spread", 0.05f64, parse_f64) as f32;
    let dataset = match get("dataset") {
        Some(kv) => match kv.value.as_str() {
            "cifar10" => DatasetSpec::Cifar10 {
                dir: get("data_dir").map(|d| PathBuf::from(&d.value)),
            },
            "synth_blobs" => DatasetSpec::SynthBlobs { spread },
            "synth_textures" => DatasetSpec::SynthTextures,
            other => return Err(cfg_err(kv.line, format!("unknown dataset '{other}'"))),
        },
        None => {
            defaults_used.push("dataset = synth_textures (default)".into());
            DatasetSpec::SynthTextures
        }
    };

    let classes = or_default!("classes", 10usize, parse_usize);
    let train_count = or_default!("train_count", 2000usize, parse_usize);
    let test_count = or_default!("test_count", 1000usize, parse_usize);
    let resolution = or_default!("resolution", 8usize, parse_usize);
    let data_seed = or_default!("data_seed", 0usize, parse_usize) as u64;
    let epochs = or_default!("epochs", 30usize, parse_usize);
    if epochs == 0 {
        return Err(cfg_err(get("epochs").map(|kv| kv.line).unwrap_or(0), "epochs must be > 0"));
    }
    let batch_size = or_default!("batch_size", 128usize, parse_usize);
    if batch_size == 0 {
        return Err(cfg_err(
            get("batch_size").map(|kv| kv.line).unwrap_or(0),
            "batch_size must be > 0",
        ));
    }

    let seeds = match get("seeds") {
        Some(kv) => {
            let s = parse_u64_list(kv.line, &kv.value)?;
            if s.is_empty() {
                return Err(cfg_err(kv.line, "seed list must be non-empty"));
            }
            s
        }
        None => {
            defaults_used.push("seeds = 1,2,3,4,5 (default)".into());
            vec![1, 2, 3, 4, 5]
        }
    };

    let modes = match get("modes") {
        Some(kv) => kv
            .value
            .split(',')
            .map(|s| match s.trim() {
                "layerwise_concurrent" => Ok(TrainMode::LayerwiseConcurrent),
                "layerwise_greedy" => Ok(TrainMode::LayerwiseGreedy),
                "global" => Ok(TrainMode::Global),
                other => Err(cfg_err(kv.line, format!("unknown mode '{other}'"))),
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            defaults_used.push("modes = layerwise_concurrent,global (default)".into());
            vec![TrainMode::LayerwiseConcurrent, TrainMode::Global]
        }
    };
    if modes.is_empty() {
        return Err(cfg_err(get("modes").map(|kv| kv.line).unwrap_or(0), "mode set is empty"));
    }

    let predsim_alpha = or_default!("predsim_alpha", 0.0f64, parse_f64);
    let local_loss = match get("local_loss") {
        Some(kv) => match kv.value.as_str() {
            "cross_entropy" => LocalLossKind::CrossEntropy,
            "frobenius_onehot" => LocalLossKind::FrobeniusOnehot,
            "predsim" => LocalLossKind::PredsimStub { alpha: predsim_alpha },
            other => return Err(cfg_err(kv.line, format!("unknown local_loss '{other}'"))),
        },
        None => {
            defaults_used.push("local_loss = cross_entropy (default)".into());
            LocalLossKind::CrossEntropy
        }
    };

    let model = match get("model") {
        Some(kv) => kv.value.clone(),
        None => {
            defaults_used.push("model = net (default)".into());
            "net".into()
        }
    };
    let out_dir = match get("out") {
        Some(kv) => PathBuf::from(&kv.value),
        None => {
            defaults_used.push("out = runs (default)".into());
            PathBuf::from("runs")
        }
    };

    Ok(RunConfig {
        model,
        hierarchy,
        channels,
        block_kind,
        dataset,
        classes,
        train_count,
        test_count,
        resolution,
        data_seed,
        lr,
        dropout,
        epochs,
        batch_size,
        seeds,
        modes,
        local_loss,
        out_dir,
        defaults_used,
    })
}

impl RunConfig {
    pub fn num_classes(&self) -> usize {
        match self.dataset {
            DatasetSpec::Cifar10 { .. } => 10,
            _ => self.classes,
        }
    }

    pub fn build_plan(&self) -> Result<NetworkPlan> {
        let spec = HierarchySpec::new(
            self.hierarchy.clone(),
            self.channels.clone(),
            self.block_kind,
            self.resolution,
        )?;
        build_network(&spec, self.num_classes())
    }

    /// Materialize (train, test), with normalization statistics computed
    /// from the training split and reapplied to the test split.
    pub fn load_dataset(&self) -> Result<(ImageDataset, ImageDataset)> {
        let (mut train, mut test) = match &self.dataset {
            DatasetSpec::Cifar10 { dir } => {
                let dir = dir
                    .clone()
                    .or_else(|| std::env::var_os("CIFAR10_DIR").map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Data(
                            "dataset = cifar10 needs data_dir or the CIFAR10_DIR env var".into(),
                        )
                    })?;
                let (full_train, full_test) = load_cifar_dir(&dir, CifarVariant::Cifar10)?;
                let train =
                    make_desk_subset(&full_train, self.train_count, self.resolution, self.data_seed)?;
                let test = make_desk_subset(
                    &full_test,
                    self.test_count,
                    self.resolution,
                    self.data_seed.wrapping_add(1),
                )?;
                (train, test)
            }
            DatasetSpec::SynthBlobs { spread } => {
                let per_train = self.train_count.div_ceil(self.classes);
                let per_test = self.test_count.div_ceil(self.classes);
                let train =
                    synth_blobs(self.classes, per_train, self.resolution, *spread, self.data_seed)?;
                let test = synth_blobs(
                    self.classes,
                    per_test,
                    self.resolution,
                    *spread,
                    self.data_seed.wrapping_add(1),
                )?;
                (train, test)
            }
            DatasetSpec::SynthTextures => {
                let per_train = self.train_count.div_ceil(self.classes);
                let per_test = self.test_count.div_ceil(self.classes);
                let train =
                    synth_textures(self.classes, per_train, self.resolution, self.data_seed)?;
                let test = synth_textures(
                    self.classes,
                    per_test,
                    self.resolution,
                    self.data_seed.wrapping_add(1),
                )?;
                (train, test)
            }
        };
        let stats = train.compute_stats();
        train.stats = Some(stats);
        test.stats = Some(stats);
        test.split = Split::Test;
        Ok((train, test))
    }
}
