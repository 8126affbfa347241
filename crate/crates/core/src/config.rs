//! Run configuration: one JSON document drives every subcommand.
//!
//! Parsing is strict. Unknown keys are rejected and errors carry the dotted
//! path of the offending key, e.g. `train.reid.lr`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{load_dataset, Dataset, DatasetSpec, GeneratorMode};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::gate::GateConfig;
use crate::pipeline::ablation::{AblationData, AblationSettings, Source};
use crate::pipeline::TrainConfig;

/// A dataset is either read from disk or regenerated from its spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Path(PathBuf),
    Generate(DatasetSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Path(p) => load_dataset(p),
            DataSource::Generate(spec) => Dataset::generate(spec),
        }
    }

    fn dims(&self) -> Option<(usize, usize)> {
        match self {
            DataSource::Path(_) => None,
            DataSource::Generate(s) => Some((s.height, s.width)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub reid: DataSource,
    /// Person ids below this value train the re-id model; the rest are
    /// held out for evaluation.
    pub reid_train_identities: usize,
    pub classify: DataSource,
    pub attr: DataSource,
    pub generic: DataSource,
}

fn generated(identities: usize, images_per_view: usize, seed: u64, mode: GeneratorMode) -> DataSource {
    DataSource::Generate(DatasetSpec {
        identities,
        images_per_view,
        height: 32,
        width: 16,
        seed,
        mode,
        ..Default::default()
    })
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            reid: generated(64, 4, 100, GeneratorMode::Persons),
            reid_train_identities: 32,
            classify: generated(200, 3, 200, GeneratorMode::Persons),
            attr: generated(200, 3, 300, GeneratorMode::Persons),
            generic: generated(200, 3, 400, GeneratorMode::Generic),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Classification and attribute pretraining.
    pub source: TrainConfig,
    pub reid: TrainConfig,
    /// Ablations train every variant with seeds `seed, seed + 1, ...`.
    pub ablation_runs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            source: TrainConfig { epochs: 10, batch: 32, patience: 0, ..Default::default() },
            reid: TrainConfig { epochs: 20, batch: 8, patience: 0, ..Default::default() },
            ablation_runs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Parent of the per-run output directories.
    pub runs: PathBuf,
    pub tag: String,
    /// Checkpoint whose leading stages initialize the re-id backbone; none
    /// trains from scratch.
    pub source_weights: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { runs: PathBuf::from("runs"), tag: "run".into(), source_weights: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub backbone: BackboneConfig,
    pub gate: GateConfig,
    pub train: TrainSection,
    pub eval: EvalProtocol,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSection::default(),
            backbone: BackboneConfig::default().with_input(32, 16),
            gate: GateConfig { hidden: 32, ..Default::default() },
            train: TrainSection::default(),
            eval: EvalProtocol { test_ids: 32, ..Default::default() },
            paths: PathsSection::default(),
        }
    }
}

/// Rewrites a `train.*` key reported by [`TrainConfig::validate`] to the
/// subsection it came from.
fn scoped(section: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        Error::Config { key, reason } => {
            let key = match key.strip_prefix("train.") {
                Some(rest) => format!("train.{section}.{rest}"),
                None => key,
            };
            Error::Config { key, reason }
        }
        other => other,
    })
}

/// Strict JSON parse whose errors name the dotted path of the bad key.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." { "<root>".to_string() } else { key };
        Error::Config { key, reason: e.into_inner().to_string() }
    })
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config, the file a run is reproduced from.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.gate.validate()?;
        scoped("source", self.train.source.validate())?;
        scoped("reid", self.train.reid.validate())?;
        self.eval.validate()?;
        if self.train.ablation_runs == 0 {
            return Err(Error::Config { key: "train.ablation_runs".into(), reason: "must be >= 1".into() });
        }
        let d = &self.dataset;
        let sources = [("reid", &d.reid), ("classify", &d.classify), ("attr", &d.attr), ("generic", &d.generic)];
        for (name, src) in sources {
            if let DataSource::Generate(spec) = src {
                spec.validate().map_err(|e| Error::Config {
                    key: format!("dataset.{name}.generate"),
                    reason: e.to_string(),
                })?;
            }
            if let Some((h, w)) = src.dims() {
                if (h, w) != (self.backbone.input_height, self.backbone.input_width) {
                    return Err(Error::Config {
                        key: format!("dataset.{name}.generate.height"),
                        reason: format!(
                            "images are {h}x{w} but the backbone expects {}x{}",
                            self.backbone.input_height, self.backbone.input_width
                        ),
                    });
                }
            }
        }
        if let DataSource::Generate(spec) = &d.reid {
            let n = d.reid_train_identities;
            if n < 2 || n >= spec.identities {
                return Err(Error::Config {
                    key: "dataset.reid_train_identities".into(),
                    reason: format!("must lie in 2..{} to leave held-out identities", spec.identities),
                });
            }
        }
        Ok(())
    }

    /// Re-id training and held-out test sets, each relabelled from 0.
    pub fn reid_split(&self) -> Result<(Dataset, Dataset)> {
        let all = self.dataset.reid.load()?;
        self.check_dims("reid", &all)?;
        let n = self.dataset.reid_train_identities;
        let total = all.num_identities();
        if n < 2 || n >= total {
            return Err(Error::Config {
                key: "dataset.reid_train_identities".into(),
                reason: format!("must lie in 2..{total} to leave held-out identities"),
            });
        }
        let train: Vec<usize> = (0..n).collect();
        let test: Vec<usize> = (n..total).collect();
        Ok((all.subset_persons(&train), all.subset_persons(&test)))
    }

    /// The dataset a pretraining source uses.
    pub fn source_dataset(&self, source: Source) -> Result<Dataset> {
        let (name, src) = match source {
            Source::Classify => ("classify", &self.dataset.classify),
            Source::Attr => ("attr", &self.dataset.attr),
            Source::Generic => ("generic", &self.dataset.generic),
            Source::None => return Err(Error::Invalid("no dataset for an untransferred model".into())),
        };
        let ds = src.load()?;
        self.check_dims(name, &ds)?;
        Ok(ds)
    }

    fn check_dims(&self, name: &str, ds: &Dataset) -> Result<()> {
        if (ds.height(), ds.width()) != (self.backbone.input_height, self.backbone.input_width) {
            return Err(Error::Config {
                key: format!("dataset.{name}"),
                reason: format!(
                    "images are {}x{} but the backbone expects {}x{}",
                    ds.height(),
                    ds.width(),
                    self.backbone.input_height,
                    self.backbone.input_width
                ),
            });
        }
        Ok(())
    }

    pub fn ablation_data(&self) -> Result<AblationData> {
        let (reid_train, reid_test) = self.reid_split()?;
        Ok(AblationData {
            reid_train,
            reid_test,
            classify: self.source_dataset(Source::Classify)?,
            attr: self.source_dataset(Source::Attr)?,
            generic: self.source_dataset(Source::Generic)?,
        })
    }

    pub fn ablation_settings(&self) -> AblationSettings {
        AblationSettings {
            backbone: self.backbone.clone(),
            gate: self.gate.clone(),
            source_train: self.train.source.clone(),
            reid_train: self.train.reid.clone(),
            eval: self.eval.clone(),
            seeds: (0..self.train.ablation_runs as u64).map(|i| self.seed.wrapping_add(i)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"reid": {"lrr": 0.1}}}"#).unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "train.reid.lrr"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_value_is_named_with_section() {
        let err = RunConfig::from_json(r#"{"train": {"reid": {"lr": -1.0}}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "train.reid.lr"), "{err}");
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        let err = RunConfig::from_json(r#"{"backbone": {"input_height": 64, "input_width": 32}}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key.starts_with("dataset.")), "{err}");
    }

    #[test]
    fn ablation_seeds_follow_base_seed() {
        let cfg = RunConfig { seed: 7, ..Default::default() };
        assert_eq!(cfg.ablation_settings().seeds, [7, 8, 9]);
    }
}
