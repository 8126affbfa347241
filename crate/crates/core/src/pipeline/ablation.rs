//! Ablation presets comparing transfer depth, knowledge source and mask type.
//!
//! Every variant is trained once per seed on the re-id training identities
//! and evaluated on the held-out identities. Source checkpoints and re-id
//! results are cached, so variants shared between presets (stage-4
//! classification transfer with the global mask) are trained only once.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::train::{train_task, Task, TrainConfig, TrainJob};
use crate::backbone::BackboneConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, CmcResult, EvalProtocol};
use crate::gate::{GateConfig, MaskStrategy};
use crate::weights::WeightStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TransferStages,
    KnowledgeSource,
    MaskType,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::TransferStages => "transfer_stages",
            Preset::KnowledgeSource => "knowledge_source",
            Preset::MaskType => "mask_type",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::TransferStages, Preset::KnowledgeSource, Preset::MaskType]
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config { key: "preset".into(), reason: format!("unknown preset `{s}`") })
    }
}

/// Where a re-id model's backbone comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// Trained from scratch.
    None,
    /// Identity classification on persons.
    Classify,
    /// Attribute recognition on persons.
    Attr,
    /// Classification on the generic shape domain.
    Generic,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Variant {
    pub label: String,
    pub source: Source,
    pub keep_stages: usize,
    pub strategy: MaskStrategy,
}

impl Variant {
    fn key(&self) -> (Source, usize, MaskStrategy) {
        (self.source, self.keep_stages, self.strategy)
    }
}

/// The rows of a preset, in table order.
pub fn variants(preset: Preset, base_strategy: MaskStrategy) -> Vec<Variant> {
    let v = |label: &str, source, keep_stages, strategy| Variant { label: label.into(), source, keep_stages, strategy };
    match preset {
        Preset::TransferStages => vec![
            v("TStage3", Source::Classify, 3, base_strategy),
            v("TStage4", Source::Classify, 4, base_strategy),
            v("TStage5", Source::Classify, 5, base_strategy),
        ],
        Preset::KnowledgeSource => vec![
            v("NTransfer", Source::None, 4, base_strategy),
            v("ITransfer (generic-domain analog)", Source::Generic, 4, base_strategy),
            v("ATransfer", Source::Attr, 4, base_strategy),
            v("CTransfer", Source::Classify, 4, base_strategy),
        ],
        Preset::MaskType => vec![
            v("GM", Source::Classify, 4, MaskStrategy::Global),
            v("AM", Source::Classify, 4, MaskStrategy::Soft),
            v("LM", Source::Classify, 4, MaskStrategy::Local),
            v("FM", Source::Classify, 4, MaskStrategy::Fine),
        ],
    }
}

/// Datasets for an ablation; the source sets are only touched by presets
/// that need them.
#[derive(Clone, Debug)]
pub struct AblationData {
    pub reid_train: Dataset,
    pub reid_test: Dataset,
    pub classify: Dataset,
    pub attr: Dataset,
    pub generic: Dataset,
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub backbone: BackboneConfig,
    pub gate: GateConfig,
    pub source_train: TrainConfig,
    pub reid_train: TrainConfig,
    pub eval: EvalProtocol,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<CmcResult>,
    /// Median over seeds at each rank cutoff.
    pub median: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub preset: Preset,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Median rank-1 of a row, in percent.
    pub fn rank1_percent(&self, label: &str) -> Option<f64> {
        let j = self.ranks.iter().position(|&r| r == 1)?;
        self.row(label).map(|r| 100.0 * r.median[j])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for r in &self.ranks {
            write!(s, ",rank{r}").expect("string write");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.label.replace(',', ";"));
            for m in &row.median {
                write!(s, ",{m}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for r in &self.ranks {
            write!(s, " Rank{r} |").expect("string write");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.ranks.len()));
        s.push('\n');
        for row in &self.rows {
            write!(s, "| {} |", row.label).expect("string write");
            for m in &row.median {
                write!(s, " {:.1} |", 100.0 * m).expect("string write");
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Runs presets over shared data, caching source checkpoints and results.
pub struct AblationRunner<'a> {
    pub settings: AblationSettings,
    pub data: &'a AblationData,
    sources: HashMap<(Source, u64), WeightStore>,
    results: HashMap<((Source, usize, MaskStrategy), u64), CmcResult>,
}

impl<'a> AblationRunner<'a> {
    pub fn new(settings: AblationSettings, data: &'a AblationData) -> Result<Self> {
        if settings.seeds.is_empty() {
            return Err(Error::Config { key: "ablation.seeds".into(), reason: "needs at least one seed".into() });
        }
        settings.source_train.validate()?;
        settings.reid_train.validate()?;
        settings.eval.validate()?;
        Ok(Self { settings, data, sources: HashMap::new(), results: HashMap::new() })
    }

    /// Trained weights of `source` for `seed`.
    pub fn source_weights(&mut self, source: Source, seed: u64) -> Result<Option<&WeightStore>> {
        let (task, data) = match source {
            Source::None => return Ok(None),
            Source::Classify => (Task::Classify, &self.data.classify),
            Source::Attr => (Task::Attr, &self.data.attr),
            Source::Generic => (Task::Classify, &self.data.generic),
        };
        if !self.sources.contains_key(&(source, seed)) {
            log::info!("training {source:?} source, seed {seed}");
            let job = TrainJob {
                task,
                train: &self.settings.source_train,
                backbone: &self.settings.backbone,
                gate: &self.settings.gate,
                seed,
                source: None,
                run_dir: None,
            };
            let out = train_task(&job, data)?;
            self.sources.insert((source, seed), out.weights());
        }
        Ok(self.sources.get(&(source, seed)))
    }

    /// CMC of `variant` trained with `seed`.
    pub fn result(&mut self, variant: &Variant, seed: u64) -> Result<CmcResult> {
        if let Some(r) = self.results.get(&(variant.key(), seed)) {
            return Ok(r.clone());
        }
        let source = self.source_weights(variant.source, seed)?.cloned();
        let train = TrainConfig { keep_stages: variant.keep_stages, ..self.settings.reid_train.clone() };
        let gate = GateConfig { strategy: variant.strategy, ..self.settings.gate.clone() };
        log::info!("training {} (seed {seed})", variant.label);
        let job = TrainJob {
            task: Task::Reid,
            train: &train,
            backbone: &self.settings.backbone,
            gate: &gate,
            seed,
            source: source.as_ref(),
            run_dir: None,
        };
        let out = train_task(&job, &self.data.reid_train)?;
        let model = out.model.as_reid().expect("reid task builds a reid model");
        let protocol = EvalProtocol { seed: self.settings.eval.seed ^ seed, ..self.settings.eval.clone() };
        let cmc = evaluate(model, &self.data.reid_test, &protocol)?;
        log::info!("{} seed {seed}: rank-1 {:.3}", variant.label, cmc.rank1());
        self.results.insert((variant.key(), seed), cmc.clone());
        Ok(cmc)
    }

    pub fn run(&mut self, preset: Preset) -> Result<AblationTable> {
        let seeds = self.settings.seeds.clone();
        let ranks = self.settings.eval.ranks.clone();
        let mut rows = Vec::new();
        for v in variants(preset, self.settings.gate.strategy) {
            let per_seed = seeds.iter().map(|&s| self.result(&v, s)).collect::<Result<Vec<_>>>()?;
            let median = (0..ranks.len())
                .map(|j| median(&mut per_seed.iter().map(|r| r.mean[j]).collect::<Vec<_>>()))
                .collect();
            rows.push(AblationRow { label: v.label, per_seed, median });
        }
        Ok(AblationTable { preset, ranks, seeds, rows })
    }
}

/// Runs a single preset from scratch.
pub fn run_ablation(preset: Preset, settings: AblationSettings, data: &AblationData) -> Result<AblationTable> {
    AblationRunner::new(settings, data)?.run(preset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_rows_follow_table_structure() {
        let labels = |p| variants(p, MaskStrategy::Global).into_iter().map(|v| v.label).collect::<Vec<_>>();
        assert_eq!(labels(Preset::TransferStages), ["TStage3", "TStage4", "TStage5"]);
        assert_eq!(labels(Preset::MaskType), ["GM", "AM", "LM", "FM"]);
        let ks = variants(Preset::KnowledgeSource, MaskStrategy::Global);
        assert_eq!(ks.len(), 4);
        assert_eq!(ks[0].source, Source::None);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn preset_names_parse() {
        for p in [Preset::TransferStages, Preset::KnowledgeSource, Preset::MaskType] {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        assert!("tables".parse::<Preset>().is_err());
    }
}
