use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::labels::{decode_labels, make_binary_mask, BinaryMask, LulcClass, Palette, SplitConfig};
use crate::net::WidthMultiplier;
use crate::raster::{load_rgb, probe_dims, Dims, RgbRaster};
use crate::training::{PairSource, TrainConfig, TrainError, TrainMode};

use super::CliError;

pub const SEED_ENV: &str = "LULC_SEED";

/// Training knobs that may be set globally, per class, or by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<TrainMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width_multiplier: Option<WidthMultiplier>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<bool>,
}

impl TrainSettings {
    /// Fields set in `over` win.
    pub fn merged(&self, over: &TrainSettings) -> TrainSettings {
        TrainSettings {
            epochs: over.epochs.or(self.epochs),
            learning_rate: over.learning_rate.or(self.learning_rate),
            batch_size: over.batch_size.or(self.batch_size),
            mode: over.mode.or(self.mode),
            width_multiplier: over.width_multiplier.or(self.width_multiplier),
            augment: over.augment.or(self.augment),
        }
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.width_multiplier {
            cfg.width_multiplier = v;
        }
        cfg.augment = self.augment;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset manifest; relative paths in a config file resolve against
    /// the file's directory.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub palette: Palette,
    pub label_tolerance: u8,
    pub split: SplitConfig,
    pub augment: AugmentConfig,
    pub train: TrainSettings,
    /// Per-class overrides of `train`.
    pub classes: BTreeMap<LulcClass, TrainSettings>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub pretrained: Option<PathBuf>,
    /// Tiles per forward pass at prediction time.
    pub predict_batch: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: PathBuf::from("out"),
            palette: Palette::default(),
            label_tolerance: 0,
            split: SplitConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSettings::default(),
            classes: BTreeMap::new(),
            seed: 0,
            threads: None,
            pretrained: None,
            predict_batch: 8,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.dataset.as_mut() {
            rebase(d);
        }
        if let Some(p) = cfg.pretrained.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Applies `LULC_SEED` if set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// File defaults, then the class section, then `flags`.
    pub fn train_config(&self, class: LulcClass, flags: &TrainSettings) -> TrainConfig {
        let s = self.train.merged(self.classes.get(&class).unwrap_or(&TrainSettings::default())).merged(flags);
        let mut cfg = TrainConfig::new(class, s.mode.unwrap_or(TrainMode::Downsample));
        s.apply(&mut cfg);
        cfg.seed = self.seed;
        cfg
    }

    /// Everything wrong with the config, for one class run.
    pub fn problems(&self, train: Option<&TrainConfig>) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.split.validate() {
            out.push(format!("split: {e}"));
        }
        if let Err(e) = self.augment.validate() {
            out.push(format!("augment: {e}"));
        }
        if self.threads == Some(0) {
            out.push("threads must be at least 1".into());
        }
        if self.predict_batch == 0 {
            out.push("predict_batch must be at least 1".into());
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() {
                out.push(format!("dataset manifest {} does not exist", d.display()));
            }
        }
        if let Some(p) = &self.pretrained {
            if !p.is_file() {
                out.push(format!("pretrained weights {} do not exist", p.display()));
            }
        }
        if let Some(t) = train {
            out.extend(t.problems().into_iter().map(|p| format!("train: {p}")));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestFile {
    pairs: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// One image and its ground-truth raster.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub stem: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

pub fn write_manifest(path: &Path, entries: Vec<ManifestEntry>) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(&ManifestFile { pairs: entries }).expect("serializes");
    super::write_file(path, json.as_bytes())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetPair>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read dataset manifest {}: {e}", path.display())))?;
    let m: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("dataset manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(m.pairs.len());
    for e in m.pairs {
        let stem = e
            .image
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::config(format!("image path {} has no file name", e.image.display())))?
            .to_string();
        if !seen.insert(stem.clone()) {
            return Err(CliError::config(format!("two dataset images share the name {stem}")));
        }
        out.push(DatasetPair { stem, image: base.join(e.image), labels: base.join(e.labels) });
    }
    if out.is_empty() {
        return Err(CliError::data("dataset manifest lists no pairs".into()));
    }
    Ok(out)
}

/// Header-only check of every pair; all problems at once.
pub fn check_dataset(pairs: &[DatasetPair]) -> Vec<String> {
    let mut out = Vec::new();
    for p in pairs {
        match (probe_dims(&p.image), probe_dims(&p.labels)) {
            (Ok(a), Ok(b)) if a != b => out.push(format!("{}: image is {a} but labels are {b}", p.stem)),
            (Ok(_), Ok(_)) => {}
            (a, b) => {
                for e in [a.err(), b.err()].into_iter().flatten() {
                    out.push(format!("{}: {e}", p.stem));
                }
            }
        }
    }
    out
}

/// Dataset pairs read lazily as (image, binary mask for one class).
pub struct FilePairs {
    pub pairs: Vec<DatasetPair>,
    pub palette: Palette,
    pub tolerance: u8,
    pub class: LulcClass,
}

impl FilePairs {
    pub fn mask(&self, i: usize) -> Result<BinaryMask, TrainError> {
        let labels = load_rgb(&self.pairs[i].labels)?;
        let map = decode_labels(&labels, &self.palette, self.tolerance)?;
        Ok(make_binary_mask(&map, self.class))
    }

    pub fn image(&self, i: usize) -> Result<RgbRaster, TrainError> {
        Ok(load_rgb(&self.pairs[i].image)?)
    }
}

impl PairSource for FilePairs {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn name(&self, i: usize) -> String {
        self.pairs[i].stem.clone()
    }

    fn load(&self, i: usize) -> Result<(RgbRaster, BinaryMask), TrainError> {
        Ok((self.image(i)?, self.mask(i)?))
    }

    fn dims(&self, i: usize) -> Result<Dims, TrainError> {
        Ok(probe_dims(&self.pairs[i].image)?)
    }
}
