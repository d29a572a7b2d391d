//! Plain-text `key = value` pipeline configuration and per-stage seed
//! derivation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::augment::AugmentConfig;
use crate::data::Magnification;
use crate::error::{Error, Result};
use crate::heatmap::{HeatTrainConfig, HeatmapNetConfig, HEAT_INPUT, HEAT_THRESHOLD};
use crate::tissue::{TissueNetConfig, TrainConfig};

/// Raw key/value pairs with usage tracking so unknown keys can be reported.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    fn value<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v}"))),
        }
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "yes" | "1") => Ok(true),
            Some("false" | "no" | "0") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key} must be true or false, got {v}"))),
        }
    }
}

/// `16x2,32x2` to `[(16, 2), (32, 2)]`.
fn parse_blocks(key: &str, text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(|b| {
            let (f, n) = b.trim().split_once('x').unwrap_or((b.trim(), "1"));
            match (f.parse(), n.parse()) {
                (Ok(f), Ok(n)) => Ok((f, n)),
                _ => Err(Error::Config(format!("{key}: bad block {b}"))),
            }
        })
        .collect()
}

fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("{key}: bad entry {v}"))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub count: usize,
    pub side: usize,
    /// Fraction of scans that receive lesions.
    pub lesion_fraction: f64,
    pub max_lesions: usize,
    pub contrast: f32,
    pub lesion_radius: (f64, f64),
    pub spiculated_prob: f64,
    pub noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    pub base_side: usize,
    pub patch_size: usize,
    pub scales: Vec<Magnification>,
    pub sample_stride: usize,
    pub aggregation_stride: usize,
    /// Upper bound on negatives kept per scan and scale; 0 keeps all.
    pub max_negatives_per_scan: usize,
    pub split: (f64, f64, f64),
    pub synth: SynthSettings,
    pub augment: AugmentConfig,
    pub tissue_net: TissueNetConfig,
    pub tissue_train: TrainConfig,
    pub eval_threshold: f64,
    pub heat_net: HeatmapNetConfig,
    pub heat_train: HeatTrainConfig,
    pub heat_threshold: f32,
    pub aux_scale: Magnification,
    pub saliency_scale: Magnification,
    pub normalize_overlap: bool,
}

const KNOWN: &[&str] = &[
    "seed",
    "data_root",
    "output_root",
    "base_side",
    "patch_size",
    "scales",
    "sample_stride",
    "aggregation_stride",
    "max_negatives_per_scan",
    "split_train",
    "split_val",
    "split_test",
    "synth_count",
    "synth_side",
    "synth_lesion_fraction",
    "synth_max_lesions",
    "synth_contrast",
    "synth_radius_min",
    "synth_radius_max",
    "synth_spiculated_prob",
    "synth_noise",
    "aug_brightness_min",
    "aug_brightness_max",
    "aug_rotate",
    "aug_max_offset",
    "aug_flip_prob",
    "aug_min_crop",
    "tissue_blocks",
    "tissue_dense",
    "tissue_epochs",
    "tissue_batch",
    "tissue_lr",
    "tissue_momentum",
    "tissue_batches_per_epoch",
    "eval_threshold",
    "heat_input",
    "heat_blocks",
    "heat_head",
    "heat_epochs",
    "heat_batch",
    "heat_lr",
    "heat_momentum",
    "heat_threshold",
    "aux_scale",
    "saliency_scale",
    "saliency_normalize_overlap",
];

impl PipelineConfig {
    /// Relative paths are resolved against `base_dir`.
    pub fn from_key_values(kv: &KeyValues, base_dir: &Path) -> Result<Self> {
        if let Some(unknown) = kv.keys().find(|k| !KNOWN.contains(k)) {
            return Err(Error::Config(format!("unknown key {unknown}")));
        }
        let seed = kv
            .get("seed")
            .ok_or_else(|| Error::Config("seed is required".into()))?
            .parse()
            .map_err(|_| Error::Config("seed must be an unsigned integer".into()))?;
        let path = |key: &str, default: &str| base_dir.join(kv.get(key).unwrap_or(default));
        let base_side = kv.value("base_side", crate::data::BASE_SIDE)?;
        let patch_size = kv.value("patch_size", 256)?;
        let aug_default = AugmentConfig::default();
        let tissue_default = TissueNetConfig::default();
        let train_default = TrainConfig::default();
        let heat_default = HeatmapNetConfig::default();
        let heat_train_default = HeatTrainConfig::default();
        let batches = kv.value("tissue_batches_per_epoch", 0usize)?;
        let augment = AugmentConfig {
            brightness: (
                kv.value("aug_brightness_min", aug_default.brightness.0)?,
                kv.value("aug_brightness_max", aug_default.brightness.1)?,
            ),
            rotate: kv.flag("aug_rotate", aug_default.rotate)?,
            max_offset: kv.value("aug_max_offset", aug_default.max_offset)?,
            flip_prob: kv.value("aug_flip_prob", aug_default.flip_prob)?,
            min_crop_fraction: kv.value("aug_min_crop", aug_default.min_crop_fraction)?,
        };
        let config = PipelineConfig {
            seed,
            data_root: path("data_root", "data"),
            output_root: path("output_root", "out"),
            base_side,
            patch_size,
            scales: parse_list("scales", kv.get("scales").unwrap_or("0.5,0.33,0.25"))?,
            sample_stride: kv.value("sample_stride", crate::data::sampling::NEGATIVE_STRIDE)?,
            aggregation_stride: kv.value("aggregation_stride", crate::aggregation::AGGREGATION_STRIDE)?,
            max_negatives_per_scan: kv.value("max_negatives_per_scan", 0)?,
            split: (
                kv.value("split_train", 0.7)?,
                kv.value("split_val", 0.1)?,
                kv.value("split_test", 0.2)?,
            ),
            synth: SynthSettings {
                count: kv.value("synth_count", 20)?,
                side: kv.value("synth_side", base_side)?,
                lesion_fraction: kv.value("synth_lesion_fraction", 0.5)?,
                max_lesions: kv.value("synth_max_lesions", 3)?,
                contrast: kv.value("synth_contrast", 0.35)?,
                lesion_radius: (kv.value("synth_radius_min", 8.0)?, kv.value("synth_radius_max", 24.0)?),
                spiculated_prob: kv.value("synth_spiculated_prob", 0.3)?,
                noise: kv.value("synth_noise", 0.2)?,
            },
            augment: augment.clone(),
            tissue_net: TissueNetConfig {
                input_size: patch_size,
                blocks: match kv.get("tissue_blocks") {
                    Some(t) => parse_blocks("tissue_blocks", t)?,
                    None => tissue_default.blocks,
                },
                dense: match kv.get("tissue_dense") {
                    Some(t) => parse_list("tissue_dense", t)?,
                    None => tissue_default.dense,
                },
                classes: 2,
            },
            tissue_train: TrainConfig {
                epochs: kv.value("tissue_epochs", train_default.epochs)?,
                batch_size: kv.value("tissue_batch", train_default.batch_size)?,
                lr: kv.value("tissue_lr", train_default.lr)?,
                momentum: kv.value("tissue_momentum", train_default.momentum)?,
                batches_per_epoch: (batches > 0).then_some(batches),
                augment,
                seed: 0,
            },
            eval_threshold: kv.value("eval_threshold", 0.5)?,
            heat_net: HeatmapNetConfig {
                input_size: kv.value("heat_input", HEAT_INPUT)?,
                blocks: match kv.get("heat_blocks") {
                    Some(t) => parse_blocks("heat_blocks", t)?,
                    None => heat_default.blocks,
                },
                head: kv.value("heat_head", heat_default.head)?,
                with_aux: false,
            },
            heat_train: HeatTrainConfig {
                epochs: kv.value("heat_epochs", heat_train_default.epochs)?,
                batch_size: kv.value("heat_batch", heat_train_default.batch_size)?,
                lr: kv.value("heat_lr", heat_train_default.lr)?,
                momentum: kv.value("heat_momentum", heat_train_default.momentum)?,
                seed: 0,
            },
            heat_threshold: kv.value("heat_threshold", HEAT_THRESHOLD)?,
            aux_scale: kv.value("aux_scale", Magnification::Half)?,
            saliency_scale: kv.value("saliency_scale", Magnification::Half)?,
            normalize_overlap: kv.flag("saliency_normalize_overlap", false)?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_key_values(&KeyValues::parse(&text)?, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_stride == 0 || self.aggregation_stride == 0 {
            return Err(Error::Config("strides must be positive".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one scale is required".into()));
        }
        if self.synth.side < self.base_side / 4 {
            return Err(Error::Config("synthetic scans too small for the base crop".into()));
        }
        if !(self.heat_threshold > 0.0 && self.heat_threshold < 1.0) {
            return Err(Error::Config(format!("heat threshold {} outside (0, 1)", self.heat_threshold)));
        }
        if !(0.0..=1.0).contains(&self.synth.lesion_fraction) {
            return Err(Error::Config("synth_lesion_fraction outside [0, 1]".into()));
        }
        for scale in Magnification::ALL {
            if scale.scaled(self.base_side) < self.patch_size && self.scales.contains(&scale) {
                return Err(Error::Config(format!(
                    "patch size {} larger than the base crop at scale {scale}",
                    self.patch_size
                )));
            }
        }
        self.augment.validate()?;
        self.tissue_net.validate()?;
        self.heat_net.validate()?;
        Ok(())
    }

    pub fn seed_for(&self, stage: Stage, index: u64) -> u64 {
        derive_seed(self.seed, stage, index)
    }
}

/// Pipeline stages that consume randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Split = 2,
    PatchSubsample = 3,
    TissueInit = 4,
    TissueTrain = 5,
    HeatInit = 6,
    HeatTrain = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(stage, index)` under a run seed.
pub fn derive_seed(seed: u64, stage: Stage, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ ((stage as u64) << 56)) ^ index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_key_values(&KeyValues::parse(text)?, Path::new("/base"))
    }

    #[test]
    fn defaults_and_overrides() {
        let c = parse("seed = 7\n# comment\npatch_size = 64 # trailing\nscales = 0.5, 0.25\ntissue_blocks = 8x1,16x2\n")
            .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.patch_size, 64);
        assert_eq!(c.tissue_net.input_size, 64);
        assert_eq!(c.scales, vec![Magnification::Half, Magnification::Quarter]);
        assert_eq!(c.tissue_net.blocks, vec![(8, 1), (16, 2)]);
        assert_eq!(c.sample_stride, 32);
        assert_eq!(c.aggregation_stride, 64);
        assert_eq!(c.data_root, PathBuf::from("/base/data"));
        assert_eq!(c.tissue_train.augment, c.augment);

        let c = parse("seed = 1\naug_flip_prob = 0.25\n").unwrap();
        assert_eq!(c.tissue_train.augment.flip_prob, 0.25);
    }

    #[test]
    fn seed_required_and_keys_checked() {
        assert!(parse("patch_size = 64\n").is_err());
        assert!(parse("seed = 1\nbogus = 2\n").is_err());
        assert!(parse("seed = 1\nsample_stride = 0\n").is_err());
        assert!(parse("seed = 1\nscales = 0.4\n").is_err());
        assert!(parse("seed = 1\nseed = 2\n").is_err());
        assert!(parse("seed = 1\nnot a pair\n").is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stage_and_index() {
        let a = derive_seed(1, Stage::Synth, 0);
        assert_eq!(a, derive_seed(1, Stage::Synth, 0));
        assert_ne!(a, derive_seed(1, Stage::Synth, 1));
        assert_ne!(a, derive_seed(1, Stage::Split, 0));
        assert_ne!(a, derive_seed(2, Stage::Synth, 0));
    }
}
