//! Pipeline configuration: one JSON document, every key optional.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::diffnet::AdamConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::grid::GridSpec;
use crate::measure::{Instrument, InstrumentSet};
use crate::pipeline::dataset::DriftRemovalConfig;
use crate::pipeline::substream_seed;
use crate::pipeline::synth::SyntheticMarketConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub codec: CodecConfig,
    pub flow: FlowConfig,
    pub training: StageTraining,
    pub drift_removal: DriftRemovalConfig,
    /// Hedging instruments; absent means spot plus the ATM call of every
    /// grid maturity.
    pub instruments: Option<Vec<Instrument>>,
    pub evaluation: EvaluationConfig,
    pub simulation: SimulationConfig,
    /// Master seed; every stage draws its own substream.
    pub seed: u64,
    pub paths: PathsConfig,
    /// Used when no market file is configured.
    pub synthetic: Option<SyntheticMarketConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTraining {
    pub codec: TrainConfig,
    pub physical: TrainConfig,
    pub risk_neutral: TrainConfig,
}

impl Default for StageTraining {
    fn default() -> Self {
        StageTraining {
            codec: TrainConfig {
                batch_size: 128,
                max_epochs: 600,
                min_epochs: 300,
                patience: 100,
                lr_decay: 0.99,
                optimizer: AdamConfig {
                    learning_rate: 2e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
            physical: TrainConfig {
                batch_size: 128,
                max_epochs: 400,
                min_epochs: 50,
                patience: 40,
                lr_decay: 0.995,
                ..Default::default()
            },
            risk_neutral: TrainConfig {
                batch_size: 1024,
                max_epochs: 45,
                min_epochs: 10,
                patience: 45,
                lr_decay: 0.9,
                optimizer: AdamConfig {
                    learning_rate: 6e-3,
                    ..Default::default()
                },
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Monte Carlo samples per evaluation condition.
    pub samples: usize,
    /// Random historical states evaluated besides the last one.
    pub random_conditions: usize,
    pub weight_bins: usize,
    pub kde_points: usize,
    /// Samples fed to each kernel density.
    pub kde_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            samples: 1 << 16,
            random_conditions: 10,
            weight_bins: 50,
            kde_points: 64,
            kde_samples: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub horizon: usize,
    pub paths: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig { horizon: 20, paths: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Market CSV; defaults to `market.csv` in the output directory.
    pub market: Option<PathBuf>,
}

/// Seed streams of the pipeline stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Codec = 1,
    Physical = 2,
    DriftRemoval = 3,
    RiskNeutral = 4,
    Evaluation = 5,
    Simulation = 6,
    Conditions = 7,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridSpec::default(),
            codec: CodecConfig::default(),
            flow: FlowConfig::default(),
            training: StageTraining::default(),
            drift_removal: DriftRemovalConfig::default(),
            instruments: None,
            evaluation: EvaluationConfig::default(),
            simulation: SimulationConfig::default(),
            seed: 0,
            paths: PathsConfig::default(),
            synthetic: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let mn = self.grid.len();
        let l = self.codec.latent_dim;
        if l == 0 || l >= mn {
            return Err(Error::Config(format!("latent dimension {l} must lie in 1..{mn}")));
        }
        if let Some(d) = self.flow.dim {
            if d != 1 + l {
                return Err(Error::Config(format!("flow dimension {d} must equal 1 + latent dimension {l}")));
            }
        }
        if self.flow.bins < 2 || self.flow.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("flow needs at least two bins and nonzero widths".into()));
        }
        if !(self.flow.bounds_margin >= 0.0) {
            return Err(Error::Config("bounds margin must be nonnegative".into()));
        }
        for t in [&self.training.codec, &self.training.physical, &self.training.risk_neutral] {
            t.validate()?;
        }
        let dr = &self.drift_removal;
        if dr.samples_per_condition < 2 {
            return Err(Error::Config("need at least two samples per condition".into()));
        }
        if dr.training_stride == 0 {
            return Err(Error::Config("training stride must be positive".into()));
        }
        if !(0.0..=1.0).contains(&dr.max_skip_fraction) {
            return Err(Error::Config("max skip fraction must lie in [0, 1]".into()));
        }
        if self.evaluation.samples < 1 << 14 {
            return Err(Error::Config(format!(
                "evaluation needs at least 16384 samples, got {}",
                self.evaluation.samples
            )));
        }
        if self.evaluation.weight_bins == 0 || self.evaluation.kde_points < 2 || self.evaluation.kde_samples < 100 {
            return Err(Error::Config("evaluation needs weight bins, two KDE points and 100 KDE samples".into()));
        }
        self.instrument_set()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Arc<GridSpec> {
        Arc::new(self.grid.clone())
    }

    pub fn instrument_set(&self) -> Result<InstrumentSet> {
        match &self.instruments {
            Some(v) => InstrumentSet::new(&self.grid, v.clone()),
            None => Ok(InstrumentSet::reference(&self.spec())),
        }
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        substream_seed(self.seed, stage as u64)
    }
}

/// Parses, defaults and cross-validates a JSON configuration document.
/// Objects are merged key by key onto the defaults, so a partial section
/// keeps the remaining defaults of that section. Blank text yields the
/// defaults.
pub fn validate_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig = if text.trim().is_empty() {
        PipelineConfig::default()
    } else {
        let bad = |e: serde_json::Error| Error::Config(e.to_string());
        let user: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        let mut merged = serde_json::to_value(PipelineConfig::default()).map_err(bad)?;
        merge(&mut merged, user);
        serde_json::from_value(merged).map_err(bad)?
    };
    config.validate()?;
    Ok(config)
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    use serde_json::Value;
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_documents_give_defaults() {
        for text in ["", "{}", "  \n"] {
            let c = validate_config(text).unwrap();
            assert_eq!(c, PipelineConfig::default());
        }
        let c = PipelineConfig::default();
        assert_eq!(c.codec.latent_dim, 3);
        assert_eq!(c.flow.bins, 64);
        assert_eq!(c.grid.maturities(), &[60.0, 120.0]);
    }

    #[test]
    fn partial_sections_keep_their_defaults() {
        let c = validate_config(r#"{"training": {"risk_neutral": {"max_epochs": 7}}}"#).unwrap();
        let d = PipelineConfig::default();
        assert_eq!(c.training.risk_neutral.max_epochs, 7);
        assert_eq!(c.training.risk_neutral.batch_size, d.training.risk_neutral.batch_size);
        assert_eq!(c.training.risk_neutral.optimizer, d.training.risk_neutral.optimizer);
        assert_eq!(c.training.codec, d.training.codec);
        let c = validate_config(r#"{"synthetic": {"horizon": 300}}"#).unwrap();
        assert_eq!(c.synthetic.unwrap().persistence, SyntheticMarketConfig::default().persistence);
    }

    #[test]
    fn default_strikes() {
        let c = validate_config("{}").unwrap();
        let k = c.grid.strikes();
        assert_eq!(k.len(), 13);
        for (i, v) in k.iter().enumerate() {
            assert!((v - (0.70 + 0.05 * i as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn inconsistent_flow_dimension() {
        let e = validate_config(r#"{"codec": {"latent_dim": 3}, "flow": {"dim": 5}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(validate_config(r#"{"codec": {"latent_dim": 4}, "flow": {"dim": 5}}"#).is_ok());
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            r#"{"drift_removal": {"lambda": 0.0}}"#,
            r#"{"drift_removal": {"lambda": -1.0}}"#,
            r#"{"codec": {"latent_dim": 26}}"#,
            r#"{"unknown": 1}"#,
            r#"{"grid": null}"#,
            r#"{"grid": {"strikes": [1.0, 0.9]}}"#,
            r#"{"evaluation": {"samples": 100}}"#,
            r#"{"instruments": [{"kind": "call", "maturity": 30, "strike": 1.0}]}"#,
            "[1, 2",
        ] {
            assert!(matches!(validate_config(text), Err(Error::Config(_)) | Err(Error::InvalidGrid(_))), "{text}");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = PipelineConfig::default();
        c.synthetic = Some(SyntheticMarketConfig::default());
        c.seed = 42;
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(validate_config(&text).unwrap(), c);
    }

    #[test]
    fn stage_seeds_differ() {
        let c = PipelineConfig::default();
        let s: std::collections::BTreeSet<u64> = [Stage::Codec, Stage::Physical, Stage::DriftRemoval, Stage::RiskNeutral, Stage::Evaluation, Stage::Simulation, Stage::Conditions]
            .into_iter()
            .map(|st| c.stage_seed(st))
            .collect();
        assert_eq!(s.len(), 7);
    }
}
